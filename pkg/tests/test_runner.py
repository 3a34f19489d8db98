from __future__ import annotations

import json
from pathlib import Path

import pytest

import groundplan.runner as runner_mod
from groundplan.cli import main as cli_main
from groundplan.dataset import load_from_manifest
from groundplan.evaluation import compute_metrics
from groundplan.runner import (
    ConfigError,
    RunConfig,
    ground_check,
    load_results,
    report,
    run,
    substitute_env,
    validate_datasets,
)

from conftest import TINYWORLD

SCRIPTS = TINYWORLD / "scripts"


def write_config(tmp_path, methods=("task_retrieve", "rewrite"), extra=None, name="config.json"):
    doc = {
        "manifest": str(TINYWORLD / "manifest.json"),
        "methods": list(methods),
        "planner_backend": {"kind": "scripted", "script": str(SCRIPTS / "grid_all.json")},
        "judge_backend": {"kind": "scripted", "script": str(SCRIPTS / "grid_all.json")},
        "embedding": {"kind": "hashing", "dim": 256, "seed": 0},
        "seed": 7,
        "eval_cap": 500,
        "concurrency": 1,
        "output_dir": str(tmp_path / "run"),
    }
    if extra:
        doc.update(extra)
    tmp_path.mkdir(parents=True, exist_ok=True)
    path = tmp_path / name
    path.write_text(json.dumps(doc, indent=1))
    return path


def test_substitute_env_replaces_and_errors(monkeypatch):
    monkeypatch.setenv("GP_X", "value")
    assert substitute_env({"a": "${GP_X}", "b": ["${GP_X}", 3]}) == {"a": "value", "b": ["value", 3]}
    with pytest.raises(ConfigError):
        substitute_env("${GP_DOES_NOT_EXIST_42}")


def test_config_from_file(tmp_path):
    config = RunConfig.from_file(write_config(tmp_path))
    assert [m.value for m in config.methods] == ["task_retrieve", "rewrite"]
    assert config.eval_cap == 500
    assert config.raw["output_dir"].endswith("run")


def test_config_rejects_unknown_planner_option(tmp_path):
    path = write_config(tmp_path, extra={"planner": {"definitely_not_an_option": 1}})
    with pytest.raises(ConfigError):
        RunConfig.from_file(path)


def test_config_requires_methods(tmp_path):
    path = write_config(tmp_path, methods=())
    with pytest.raises(ConfigError):
        RunConfig.from_file(path)


def test_run_grid_counts_and_layout(tmp_path):
    config = RunConfig.from_file(write_config(tmp_path))
    run_dir = run(config)
    for method in ("task_retrieve", "rewrite"):
        results_path = run_dir / f"results.{method}.tiny.jsonl"
        records, errors = load_results(results_path)
        assert len(records) == 5
        assert errors == []
        expected_ids = {t.id for t in load_from_manifest(TINYWORLD / "manifest.json")[0].tasks}
        assert {r.task_id for r in records} == expected_ids
        trace_dir = run_dir / "traces" / f"{method}.tiny"
        assert len(list(trace_dir.glob("*.json"))) == 5
    assert (run_dir / "config.echo.json").exists()
    assert (run_dir / "summary.csv").exists()
    assert (run_dir / "embeddings.cache").exists()


def test_summary_rows_match_recomputation(tmp_path):
    config = RunConfig.from_file(write_config(tmp_path))
    run_dir = run(config)
    import csv

    with (run_dir / "summary.csv").open() as fh:
        rows = list(csv.DictReader(fh))
    assert len(rows) == 2
    for row in rows:
        records, _ = load_results(run_dir / f"results.{row['method']}.{row['category']}.jsonl")
        metrics = compute_metrics(records)
        assert float(row["executability"]) == pytest.approx(metrics.executability)
        assert float(row["quality"]) == pytest.approx(metrics.quality)
        assert float(row["pass_rate"]) == pytest.approx(metrics.pass_rate)
        assert int(row["n"]) == metrics.n_cases


def test_rerun_on_completed_directory_makes_zero_model_calls(tmp_path, monkeypatch):
    config_path = write_config(tmp_path)
    run(RunConfig.from_file(config_path))

    captured = []
    original = runner_mod.build_chat_backend

    def capturing(spec):
        backend = original(spec)
        captured.append(backend)
        return backend

    monkeypatch.setattr(runner_mod, "build_chat_backend", capturing)
    run(RunConfig.from_file(config_path))
    assert captured and all(b.calls == 0 for b in captured)


def _interrupter(after: int):
    def hook(done_count: int) -> None:
        if done_count >= after:
            raise KeyboardInterrupt

    return hook


@pytest.mark.parametrize("interrupt_after", [2, 7])
def test_resume_matches_uninterrupted_run(tmp_path, interrupt_after):
    baseline_cfg = RunConfig.from_file(write_config(tmp_path / "a", name="c.json"))
    baseline_dir = run(baseline_cfg)

    resumed_cfg_path = write_config(tmp_path / "b", name="c.json")
    with pytest.raises(KeyboardInterrupt):
        run(RunConfig.from_file(resumed_cfg_path), on_task_done=_interrupter(interrupt_after))
    resumed_dir = run(RunConfig.from_file(resumed_cfg_path))

    baseline_files = sorted(p.name for p in baseline_dir.glob("results.*.jsonl"))
    resumed_files = sorted(p.name for p in resumed_dir.glob("results.*.jsonl"))
    assert baseline_files == resumed_files
    for name in baseline_files:
        assert (baseline_dir / name).read_text() == (resumed_dir / name).read_text()
    assert (baseline_dir / "summary.csv").read_text() == (resumed_dir / "summary.csv").read_text()


def test_resume_after_results_truncation(tmp_path):
    config_path = write_config(tmp_path)
    run_dir = run(RunConfig.from_file(config_path))
    results_path = run_dir / "results.task_retrieve.tiny.jsonl"
    full = results_path.read_text()
    lines = full.splitlines(keepends=True)
    results_path.write_text("".join(lines[:2]))
    run(RunConfig.from_file(config_path))
    resumed = results_path.read_text()
    assert sorted(resumed.splitlines()) == sorted(full.splitlines())


def test_secrets_never_reach_run_outputs(tmp_path, monkeypatch):
    token = "s3cr3t-abc123-token"
    monkeypatch.setenv("GP_TEST_TOKEN", token)
    config_path = write_config(
        tmp_path,
        extra={
            "judge_backend": {
                "kind": "scripted",
                "script": str(SCRIPTS / "grid_all.json"),
                "api_key": "${GP_TEST_TOKEN}",
            }
        },
    )
    run_dir = run(RunConfig.from_file(config_path))
    for path in run_dir.rglob("*"):
        if path.is_file():
            assert token not in path.read_text(encoding="utf-8"), path
    echo = (run_dir / "config.echo.json").read_text()
    assert "${GP_TEST_TOKEN}" in echo


def _write_records(path: Path, rows):
    from groundplan.evaluation import EvalRecord
    from groundplan.grounding import ExecReport, FailureKind

    with path.open("w") as fh:
        for i, (executable, win) in enumerate(rows):
            report_ = (
                ExecReport(True, 2, (), FailureKind.NONE)
                if executable
                else ExecReport(False, 2, ((0, "x"),), FailureKind.UNGROUNDED_STEPS)
            )
            record = EvalRecord(
                task_id=f"t{i}",
                method_id="m",
                category="c",
                plan_steps=["a", "b"],
                completed=True,
                exec_report=report_,
                win_score=win if executable else None,
            )
            fh.write(json.dumps(record.to_dict()) + "\n")


def test_report_unweighted_average_is_product_of_column_means(tmp_path):
    run_dir = tmp_path / "run"
    run_dir.mkdir()
    _write_records(run_dir / "results.m.catA.jsonl", [(True, 1.0), (False, None)])
    _write_records(run_dir / "results.m.catB.jsonl", [(True, 0.5)])
    table, csv_text = report(run_dir)
    rows = [r for r in csv_text.splitlines() if r.startswith("m,average_of_all_types")]
    assert len(rows) == 1
    _m, _c, n, execability, quality, pass_rate, _f, _r = rows[0].split(",")
    assert int(n) == 3
    assert float(execability) == pytest.approx(0.75)
    assert float(quality) == pytest.approx(0.75)
    assert float(pass_rate) == pytest.approx(0.75 * 0.75)
    assert "average_of_all_types" in table


def test_report_weighted_average(tmp_path):
    run_dir = tmp_path / "run"
    run_dir.mkdir()
    _write_records(run_dir / "results.m.catA.jsonl", [(True, 1.0), (False, None)])
    _write_records(run_dir / "results.m.catB.jsonl", [(True, 0.5)])
    _table, csv_text = report(run_dir, weighted=True)
    row = next(r for r in csv_text.splitlines() if r.startswith("m,average_of_all_types"))
    _m, _c, _n, execability, quality, pass_rate, _f, _r = row.split(",")
    assert float(execability) == pytest.approx(2 / 3)
    assert float(quality) == pytest.approx(5 / 6)
    assert float(pass_rate) == pytest.approx((2 / 3) * (5 / 6))


def test_report_single_category_average_equals_category(tmp_path):
    run_dir = tmp_path / "run"
    run_dir.mkdir()
    _write_records(run_dir / "results.m.solo.jsonl", [(True, 1.0), (True, 0.0)])
    _table, csv_text = report(run_dir)
    lines = csv_text.splitlines()
    cat = next(r for r in lines if r.startswith("m,solo"))
    avg = next(r for r in lines if r.startswith("m,average_of_all_types"))
    assert cat.split(",")[3:6] == avg.split(",")[3:6]


def test_report_deterministic_bytes(tmp_path):
    config_path = write_config(tmp_path)
    run_dir = run(RunConfig.from_file(config_path))
    _table1, csv1 = report(run_dir)
    first = (run_dir / "report.csv").read_bytes()
    _table2, csv2 = report(run_dir)
    assert csv1 == csv2
    assert (run_dir / "report.csv").read_bytes() == first


def test_report_missing_results_errors(tmp_path):
    with pytest.raises(FileNotFoundError):
        report(tmp_path)


def test_ground_check_clean_and_tampered(tmp_path):
    config_path = write_config(tmp_path)
    run_dir = run(RunConfig.from_file(config_path))
    assert ground_check(run_dir) == []

    results_path = run_dir / "results.task_retrieve.tiny.jsonl"
    lines = [json.loads(l) for l in results_path.read_text().splitlines()]
    lines[0]["plan_steps"] = ["definitely not a library action"]
    results_path.write_text("\n".join(json.dumps(l) for l in lines) + "\n")
    mismatches = ground_check(run_dir)
    assert len(mismatches) == 1
    assert mismatches[0]["task_id"] == lines[0]["task_id"]


def test_validate_datasets_reports_categories():
    summaries = validate_datasets(TINYWORLD / "manifest_pair.json")
    assert [s["category"] for s in summaries] == ["tiny", "tinytools"]
    assert all(s["ungrounded_golden"] == [] for s in summaries)
    assert summaries[0]["tasks"] == 5
    assert summaries[1]["actions"] == 10


def test_cli_end_to_end(tmp_path, capsys):
    config_path = write_config(tmp_path)
    assert cli_main(["run", "--config", str(config_path)]) == 0
    run_dir = str(tmp_path / "run")
    assert cli_main(["report", run_dir]) == 0
    out = capsys.readouterr().out
    assert "average_of_all_types" in out
    assert cli_main(["validate-dataset", str(TINYWORLD / "manifest_pair.json")]) == 0
    assert cli_main(["ground-check", run_dir]) == 0


def test_cli_reports_config_errors(tmp_path, capsys):
    bad = tmp_path / "bad.json"
    bad.write_text(json.dumps({"manifest": "nope.json", "methods": []}))
    assert cli_main(["run", "--config", str(bad)]) == 2
    assert "error:" in capsys.readouterr().err


def test_concurrent_run_matches_sequential(tmp_path):
    seq_cfg = RunConfig.from_file(write_config(tmp_path / "s", name="c.json"))
    seq_dir = run(seq_cfg)
    par_cfg = RunConfig.from_file(
        write_config(tmp_path / "p", name="c.json", extra={"concurrency": 4})
    )
    par_dir = run(par_cfg)
    for path in sorted(seq_dir.glob("results.*.jsonl")):
        seq_lines = sorted(path.read_text().splitlines())
        par_lines = sorted((par_dir / path.name).read_text().splitlines())
        assert seq_lines == par_lines


def test_run_with_in_flight_limit_matches_unlimited(tmp_path):
    plain_dir = run(RunConfig.from_file(write_config(tmp_path / "plain", name="c.json")))
    limited_cfg = RunConfig.from_file(
        write_config(tmp_path / "lim", name="c.json", extra={"max_in_flight": 1, "concurrency": 3})
    )
    assert limited_cfg.max_in_flight == 1
    limited_dir = run(limited_cfg)
    for path in sorted(plain_dir.glob("results.*.jsonl")):
        assert sorted(path.read_text().splitlines()) == sorted(
            (limited_dir / path.name).read_text().splitlines()
        )


def test_per_task_failures_recorded_without_aborting(tmp_path, monkeypatch):
    from groundplan.gateway import CallableBackend

    original = runner_mod.build_chat_backend
    state = {"first": True}

    def flaky_once(spec):
        if state["first"]:
            state["first"] = False

            def explode_on_tidy(messages):
                text = "\n".join(m["content"] for m in messages)
                if "Tidy the garden path" in text:
                    raise RuntimeError("synthetic backend crash")
                return "1. gather the tools"

            return CallableBackend(explode_on_tidy)
        return original(spec)

    monkeypatch.setattr(runner_mod, "build_chat_backend", flaky_once)
    config = RunConfig.from_file(write_config(tmp_path, methods=("task_retrieve",)))
    run_dir = run(config)
    records, errors = load_results(run_dir / "results.task_retrieve.tiny.jsonl")
    assert len(records) == 4
    assert len(errors) == 1
    assert errors[0]["task_id"] == "tiny-path"
    assert "RuntimeError" in errors[0]["error"]
