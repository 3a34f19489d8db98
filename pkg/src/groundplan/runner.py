"""Batch experiment runner: planner x benchmark grids with resumable results.

Run layout: run_dir/{config.echo.json, embeddings.cache,
results.<method>.<benchmark>.jsonl, traces/<method>.<benchmark>/<task>.json,
summary.csv}. A rerun skips every task_id already present in a results
file, so an interrupted grid resumes without repeating model calls.
"""

from __future__ import annotations

import csv
import io
import json
import os
import re
import threading
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable

from .dataset import DatasetError, Task, load_from_manifest, sample_eval_set
from .evaluation import EvalRecord, compute_metrics, judge_candidate
from .gateway import BackendUnavailable, HttpChatBackend, ScriptedBackend
from .grounding import FailureKind, executability_check
from .planners import Method, PlannerConfig, PLANNERS
from .prompts import PromptCatalog, default_catalog
from .retrieval import ActionIndex, EmbeddingCache, HashingEmbedder, HttpEmbeddingProvider, build_index


class ConfigError(Exception):
    """Raised for unusable run configuration or startup failures."""


_ENV_REF = re.compile(r"\$\{([A-Za-z_][A-Za-z0-9_]*)\}")


def substitute_env(value, env: dict[str, str] | None = None):
    """Replace ${VAR} references in strings, recursively through containers."""
    table = os.environ if env is None else env

    def repl(m: re.Match) -> str:
        name = m.group(1)
        if name not in table:
            raise ConfigError(f"environment variable {name} is not set")
        return table[name]

    if isinstance(value, str):
        return _ENV_REF.sub(repl, value)
    if isinstance(value, list):
        return [substitute_env(v, env) for v in value]
    if isinstance(value, dict):
        return {k: substitute_env(v, env) for k, v in value.items()}
    return value


@dataclass
class RunConfig:
    manifest: Path
    methods: list[Method]
    planner_backend: dict
    judge_backend: dict
    embedding: dict
    output_dir: Path
    planner: PlannerConfig = field(default_factory=PlannerConfig)
    seed: int = 0
    eval_cap: int = 500
    concurrency: int = 1
    max_in_flight: int | None = None
    raw: dict = field(default_factory=dict, repr=False)

    def __post_init__(self) -> None:
        if not self.methods:
            raise ConfigError("at least one method is required")
        if self.concurrency < 1:
            raise ConfigError("concurrency must be >= 1")
        if self.max_in_flight is not None and self.max_in_flight < 1:
            raise ConfigError("max_in_flight must be >= 1")

    @classmethod
    def from_file(cls, path: str | Path) -> "RunConfig":
        path = Path(path)
        raw = json.loads(path.read_text(encoding="utf-8"))
        data = substitute_env(raw)
        base = path.parent
        planner_overrides = data.get("planner", {})
        try:
            planner = PlannerConfig(**planner_overrides)
        except TypeError as exc:
            raise ConfigError(f"unknown planner option: {exc}") from exc
        try:
            return cls(
                manifest=(base / data["manifest"]).resolve(),
                methods=[Method(m) for m in data["methods"]],
                planner_backend=_resolve_paths(data["planner_backend"], base),
                judge_backend=_resolve_paths(data["judge_backend"], base),
                embedding=data.get("embedding", {"kind": "hashing"}),
                output_dir=(base / data["output_dir"]).resolve(),
                planner=planner,
                seed=int(data.get("seed", 0)),
                eval_cap=int(data.get("eval_cap", 500)),
                concurrency=int(data.get("concurrency", 1)),
                max_in_flight=(
                    int(data["max_in_flight"]) if data.get("max_in_flight") is not None else None
                ),
                raw=raw,
            )
        except KeyError as exc:
            raise ConfigError(f"missing config key: {exc}") from exc


def _resolve_paths(spec: dict, base: Path) -> dict:
    out = dict(spec)
    if "script" in out:
        out["script"] = str((base / out["script"]).resolve())
    return out


def build_chat_backend(spec: dict):
    kind = spec.get("kind")
    if kind == "scripted":
        return ScriptedBackend.from_file(
            spec["script"],
            id=spec.get("id", "scripted"),
            supports_system_role=spec.get("supports_system_role", True),
        )
    if kind == "http":
        api_key = spec.get("api_key")
        if not api_key and spec.get("api_key_env"):
            api_key = os.environ.get(spec["api_key_env"])
        return HttpChatBackend(
            url=spec["url"],
            model=spec["model"],
            api_key=api_key,
            id=spec.get("id"),
            supports_system_role=spec.get("supports_system_role", True),
        )
    raise ConfigError(f"unknown chat backend kind: {kind!r}")


def build_embedding_provider(spec: dict):
    kind = spec.get("kind", "hashing")
    if kind == "hashing":
        return HashingEmbedder(dim=int(spec.get("dim", 256)), seed=int(spec.get("seed", 0)))
    if kind == "http":
        api_key = spec.get("api_key")
        if not api_key and spec.get("api_key_env"):
            api_key = os.environ.get(spec["api_key_env"])
        return HttpEmbeddingProvider(
            url=spec["url"],
            model=spec["model"],
            api_key=api_key,
            dim=spec.get("dim"),
        )
    raise ConfigError(f"unknown embedding kind: {kind!r}")


def _check_reachable(backend) -> None:
    check = getattr(backend, "check", None)
    if check is not None:
        try:
            check()
        except BackendUnavailable as exc:
            raise ConfigError(str(exc)) from exc


def _read_done_ids(results_path: Path) -> set[str]:
    done: set[str] = set()
    if results_path.exists():
        for line in results_path.read_text(encoding="utf-8").splitlines():
            try:
                done.add(json.loads(line)["task_id"])
            except (json.JSONDecodeError, KeyError):
                continue
    return done


def load_results(results_path: Path) -> tuple[list[EvalRecord], list[dict]]:
    """Parse a results file into records and per-task error entries."""
    records: list[EvalRecord] = []
    errors: list[dict] = []
    for line in results_path.read_text(encoding="utf-8").splitlines():
        if not line.strip():
            continue
        data = json.loads(line)
        if "error" in data:
            errors.append(data)
        else:
            records.append(EvalRecord.from_dict(data))
    return records, errors


def _plan_task(
    method: Method,
    task: Task,
    index: ActionIndex,
    planner_backend,
    judge_backend,
    config: RunConfig,
    prompts: PromptCatalog,
    limiter: threading.Semaphore | None = None,
) -> tuple[EvalRecord, dict]:
    plan, trace = PLANNERS[method](
        task, index, planner_backend, config.planner, prompts, limiter
    )
    # Empty output after a recorded format failure counts against the
    # format-parse budget; grounded steps survive a mid-run failure.
    if not plan.steps and trace.had_format_failure:
        report = executability_check(None, index.library)
    else:
        report = executability_check(plan.steps, index.library)
    win_score = None
    judge_attempts = 0
    judge_unparseable = 0
    if report.executable:
        outcome = judge_candidate(
            task,
            plan.steps,
            task.golden_plan,
            judge_backend,
            prompts=prompts,
            temperature=config.planner.temperature,
            max_retries=config.planner.max_retries,
            limiter=limiter,
        )
        win_score = outcome.win_score
        judge_attempts = outcome.attempts
        judge_unparseable = outcome.unparseable
    record = EvalRecord(
        task_id=task.id,
        method_id=method.value,
        category=task.category,
        plan_steps=plan.steps,
        completed=plan.completed,
        exec_report=report,
        win_score=win_score,
        judge_attempts=judge_attempts,
        judge_unparseable=judge_unparseable,
    )
    audit = {"plan": plan.to_dict(), "exec": report.to_dict(), "trace": trace.to_dict()}
    return record, audit


SUMMARY_COLUMNS = [
    "method",
    "category",
    "n",
    "executability",
    "quality",
    "pass_rate",
    "format_error_rate",
    "repetition_rate",
]


def _metrics_row(method: str, category: str, records: list[EvalRecord]) -> dict:
    metrics = compute_metrics(records)
    return {
        "method": method,
        "category": category,
        "n": metrics.n_cases,
        "executability": f"{metrics.executability:.6f}",
        "quality": f"{metrics.quality:.6f}",
        "pass_rate": f"{metrics.pass_rate:.6f}",
        "format_error_rate": f"{metrics.format_error_rate:.6f}",
        "repetition_rate": f"{metrics.repetition_rate:.6f}",
    }


def run(config: RunConfig, on_task_done: Callable[[int], None] | None = None) -> Path:
    """Execute the configured grid, appending one EvalRecord per task.

    Idempotent: completed task_ids are skipped on rerun. Per-task failures
    are recorded as error lines and never abort the grid; the on_task_done
    hook (testing) may raise to simulate an interruption.
    """
    out = Path(config.output_dir)
    out.mkdir(parents=True, exist_ok=True)
    (out / "traces").mkdir(exist_ok=True)
    echo_path = out / "config.echo.json"
    if not echo_path.exists():
        # The raw (pre-substitution) document is echoed so secrets pulled
        # from the environment never land in the run directory.
        echo_path.write_text(
            json.dumps(config.raw, indent=2, ensure_ascii=False), encoding="utf-8"
        )
    meta_path = out / "run_meta.json"
    if not meta_path.exists():
        meta_path.write_text(
            json.dumps(
                {
                    "manifest": str(config.manifest),
                    "methods": [m.value for m in config.methods],
                    "seed": config.seed,
                    "eval_cap": config.eval_cap,
                },
                indent=2,
            ),
            encoding="utf-8",
        )

    benchmarks = load_from_manifest(config.manifest)
    planner_backend = build_chat_backend(config.planner_backend)
    judge_backend = build_chat_backend(config.judge_backend)
    _check_reachable(planner_backend)
    _check_reachable(judge_backend)
    provider = build_embedding_provider(config.embedding)
    cache = EmbeddingCache(out / "embeddings.cache")
    prompts = default_catalog()

    indices: dict[str, ActionIndex] = {}
    done_count = 0
    write_lock = threading.Lock()
    limiter = (
        threading.BoundedSemaphore(config.max_in_flight)
        if config.max_in_flight is not None
        else None
    )
    for bench in benchmarks:
        indices[bench.name] = build_index(bench.library, provider, cache)

    for method in config.methods:
        for bench in benchmarks:
            index = indices[bench.name]
            eval_tasks = sample_eval_set(bench.tasks, config.eval_cap, config.seed)
            results_path = out / f"results.{method.value}.{bench.name}.jsonl"
            done = _read_done_ids(results_path)
            todo = [t for t in eval_tasks if t.id not in done]
            trace_dir = out / "traces" / f"{method.value}.{bench.name}"
            trace_dir.mkdir(parents=True, exist_ok=True)

            def handle(task: Task) -> None:
                nonlocal done_count
                try:
                    record, audit = _plan_task(
                        method, task, index, planner_backend, judge_backend, config, prompts, limiter
                    )
                    line = json.dumps(record.to_dict(), ensure_ascii=False)
                    trace_payload = json.dumps(audit, ensure_ascii=False, indent=1)
                except Exception as exc:  # noqa: BLE001 - per-task isolation
                    line = json.dumps(
                        {
                            "task_id": task.id,
                            "method_id": method.value,
                            "category": task.category,
                            "error": f"{type(exc).__name__}: {exc}",
                        },
                        ensure_ascii=False,
                    )
                    trace_payload = None
                with write_lock:
                    if trace_payload is not None:
                        (trace_dir / f"{task.id}.json").write_text(
                            trace_payload, encoding="utf-8"
                        )
                    with results_path.open("a", encoding="utf-8") as fh:
                        fh.write(line + "\n")
                    done_count += 1
                    if on_task_done is not None:
                        on_task_done(done_count)

            if config.concurrency == 1 or on_task_done is not None:
                for task in todo:
                    handle(task)
            else:
                with ThreadPoolExecutor(max_workers=config.concurrency) as pool:
                    for future in [pool.submit(handle, t) for t in todo]:
                        future.result()

    write_summary(out)
    return out


def write_summary(run_dir: Path) -> Path:
    """Recompute per-(method, category) metrics from the results files."""
    rows = []
    for results_path in sorted(run_dir.glob("results.*.jsonl")):
        method, category = _parse_results_name(results_path.name)
        records, _errors = load_results(results_path)
        if records:
            rows.append(_metrics_row(method, category, records))
    summary_path = run_dir / "summary.csv"
    with summary_path.open("w", encoding="utf-8", newline="") as fh:
        writer = csv.DictWriter(fh, fieldnames=SUMMARY_COLUMNS)
        writer.writeheader()
        writer.writerows(rows)
    return summary_path


def _parse_results_name(name: str) -> tuple[str, str]:
    stem = name[len("results.") : -len(".jsonl")]
    method, _, category = stem.partition(".")
    return method, category


def report(run_dir: str | Path, weighted: bool = False) -> tuple[str, str]:
    """Per-category table plus an all-categories average row per method.

    The average row averages the executability and quality columns over
    categories (unweighted by default, task-weighted with the flag) and
    reports their product as the pass rate.
    """
    run_dir = Path(run_dir)
    results = sorted(run_dir.glob("results.*.jsonl"))
    if not results:
        raise FileNotFoundError(f"no results files in {run_dir}")
    by_method: dict[str, list[tuple[str, list[EvalRecord]]]] = {}
    for path in results:
        method, category = _parse_results_name(path.name)
        records, _errors = load_results(path)
        if records:
            by_method.setdefault(method, []).append((category, records))

    rows: list[dict] = []
    for method in sorted(by_method):
        cats = by_method[method]
        per_cat = [(category, compute_metrics(records)) for category, records in cats]
        for category, m in per_cat:
            rows.append(
                {
                    "method": method,
                    "category": category,
                    "n": m.n_cases,
                    "executability": m.executability,
                    "quality": m.quality,
                    "pass_rate": m.pass_rate,
                    "format_error_rate": m.format_error_rate,
                    "repetition_rate": m.repetition_rate,
                }
            )
        if weighted:
            total = sum(m.n_cases for _, m in per_cat)
            exec_avg = sum(m.executability * m.n_cases for _, m in per_cat) / total
            qual_avg = sum(m.quality * m.n_cases for _, m in per_cat) / total
            fer_avg = sum(m.format_error_rate * m.n_cases for _, m in per_cat) / total
            rep_avg = sum(m.repetition_rate * m.n_cases for _, m in per_cat) / total
        else:
            count = len(per_cat)
            exec_avg = sum(m.executability for _, m in per_cat) / count
            qual_avg = sum(m.quality for _, m in per_cat) / count
            fer_avg = sum(m.format_error_rate for _, m in per_cat) / count
            rep_avg = sum(m.repetition_rate for _, m in per_cat) / count
        rows.append(
            {
                "method": method,
                "category": "average_of_all_types",
                "n": sum(m.n_cases for _, m in per_cat),
                "executability": exec_avg,
                "quality": qual_avg,
                "pass_rate": exec_avg * qual_avg,
                "format_error_rate": fer_avg,
                "repetition_rate": rep_avg,
            }
        )

    table = _format_table(rows)
    buffer = io.StringIO()
    writer = csv.DictWriter(buffer, fieldnames=SUMMARY_COLUMNS, lineterminator="\n")
    writer.writeheader()
    for row in rows:
        writer.writerow(
            {
                **row,
                "executability": f"{row['executability']:.6f}",
                "quality": f"{row['quality']:.6f}",
                "pass_rate": f"{row['pass_rate']:.6f}",
                "format_error_rate": f"{row['format_error_rate']:.6f}",
                "repetition_rate": f"{row['repetition_rate']:.6f}",
            }
        )
    csv_text = buffer.getvalue()
    (run_dir / "report.csv").write_text(csv_text, encoding="utf-8")
    return table, csv_text


def _format_table(rows: list[dict]) -> str:
    headers = ["method", "category", "n", "exec%", "quality%", "pass%", "fmt_err%", "repeat%"]
    body = [
        [
            row["method"],
            row["category"],
            str(row["n"]),
            f"{100 * row['executability']:.2f}",
            f"{100 * row['quality']:.2f}",
            f"{100 * row['pass_rate']:.2f}",
            f"{100 * row['format_error_rate']:.2f}",
            f"{100 * row['repetition_rate']:.2f}",
        ]
        for row in rows
    ]
    widths = [max(len(h), *(len(r[i]) for r in body)) if body else len(h) for i, h in enumerate(headers)]
    lines = ["  ".join(h.ljust(widths[i]) for i, h in enumerate(headers))]
    lines.append("  ".join("-" * w for w in widths))
    for row in body:
        lines.append("  ".join(cell.ljust(widths[i]) for i, cell in enumerate(row)))
    return "\n".join(lines)


def validate_datasets(manifest_path: str | Path) -> list[dict]:
    """Load every benchmark, check golden-plan grounding, and summarize."""
    summaries = []
    for bench in load_from_manifest(manifest_path):
        bad = []
        for task in bench.tasks:
            report_ = executability_check(task.golden_plan, bench.library)
            if not report_.executable:
                bad.append(task.id)
        summaries.append(
            {
                "category": bench.name,
                "tasks": len(bench.tasks),
                "actions": len(bench.library.actions),
                "domain_kind": bench.library.domain_kind.value,
                "split": bench.split.value,
                "ungrounded_golden": bad,
            }
        )
    return summaries


def ground_check(run_dir: str | Path) -> list[dict]:
    """Re-verify stored executability verdicts offline against the manifest."""
    run_dir = Path(run_dir)
    meta = json.loads((run_dir / "run_meta.json").read_text(encoding="utf-8"))
    benchmarks = {b.name: b for b in load_from_manifest(meta["manifest"])}
    mismatches = []
    for results_path in sorted(run_dir.glob("results.*.jsonl")):
        _method, category = _parse_results_name(results_path.name)
        bench = benchmarks.get(category)
        if bench is None:
            raise DatasetError(f"results for unknown category {category!r}")
        records, _errors = load_results(results_path)
        for record in records:
            if record.exec_report.failure_kind is FailureKind.FORMAT_FAILURE:
                fresh = executability_check(None, bench.library)
            else:
                fresh = executability_check(record.plan_steps, bench.library)
            if fresh.executable != record.exec_report.executable:
                mismatches.append(
                    {
                        "file": results_path.name,
                        "task_id": record.task_id,
                        "stored": record.exec_report.executable,
                        "recomputed": fresh.executable,
                    }
                )
    return mismatches
