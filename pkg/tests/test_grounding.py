from __future__ import annotations

import pytest
from hypothesis import given
from hypothesis import strategies as st

from groundplan.dataset import ActionLibrary, DomainKind
from groundplan.grounding import (
    ExecReport,
    FailureKind,
    Strictness,
    action_name_key,
    executability_check,
    is_grounded,
    normalize,
)


def make_library(actions, kind=DomainKind.GENERAL):
    return ActionLibrary(category="t", actions=list(actions), domain_kind=kind)


def test_normalize_trims_and_strips_trailing_period():
    assert normalize("  Set up a brooder. ") == "set up a brooder"


def test_normalize_collapses_whitespace_and_casefolds():
    assert normalize("SET  UP a brooder") == "set up a brooder"


def test_normalize_empty():
    assert normalize("") == ""


def test_normalize_strips_only_one_period():
    assert normalize("wait..") == "wait."


def test_normalize_strict_keeps_trailing_period():
    assert normalize("Do it.", Strictness.STRICT) == "do it."


@given(st.text(max_size=80))
def test_normalize_idempotent(text):
    once = normalize(text)
    assert normalize(once) == once


def test_action_name_key_splits_description():
    assert action_name_key("SearchEngine DESCRIPTION: search the web") == "searchengine"
    assert action_name_key("SearchEngine") == "searchengine"


def test_is_grounded_membership():
    lib = make_library(["Set up a brooder.", "Feed the chicks"])
    assert is_grounded("set up a brooder", lib)
    assert is_grounded("  FEED the   chicks ", lib)


def test_is_grounded_no_fuzzy_match():
    lib = make_library(["Set up a brooder."])
    assert not is_grounded("Set up a broodery", lib)


def test_is_grounded_tools_accepts_bare_api_name():
    lib = make_library(["SearchEngine DESCRIPTION: search the web"], DomainKind.TOOLS)
    assert is_grounded("SearchEngine", lib)
    assert is_grounded("SearchEngine DESCRIPTION: anything else entirely", lib)
    assert not is_grounded("OtherTool", lib)


def test_is_grounded_tools_rule_off_for_general():
    lib = make_library(["SearchEngine DESCRIPTION: search the web"], DomainKind.GENERAL)
    assert not is_grounded("SearchEngine", lib)


def test_is_grounded_reflexive_over_library(tiny_world):
    lib = tiny_world.benchmark.library
    for action in lib.actions:
        assert is_grounded(action, lib)


def test_is_grounded_empty_library_rejected():
    lib = make_library([])
    with pytest.raises(ValueError):
        is_grounded("x", lib)


def test_executability_all_grounded():
    lib = make_library(["a", "b", "c", "d"])
    report = executability_check(["a", "b", "c", "d"], lib)
    assert report.executable
    assert report.total_steps == 4
    assert report.failure_kind is FailureKind.NONE
    assert report.ungrounded == ()


def test_executability_reports_every_ungrounded_position():
    lib = make_library(["a", "b", "c", "d", "e"])
    report = executability_check(["a", "b", "zzz", "c", "qqq", "d"], lib)
    assert not report.executable
    assert report.failure_kind is FailureKind.UNGROUNDED_STEPS
    assert report.ungrounded == ((2, "zzz"), (4, "qqq"))


def test_executability_format_failure_input():
    lib = make_library(["a"])
    report = executability_check(None, lib)
    assert not report.executable
    assert report.failure_kind is FailureKind.FORMAT_FAILURE
    report2 = executability_check(ValueError("raw"), lib)
    assert report2.failure_kind is FailureKind.FORMAT_FAILURE


def test_executability_empty_plan_is_inexecutable():
    lib = make_library(["a"])
    report = executability_check([], lib)
    assert not report.executable
    assert report.failure_kind is FailureKind.UNGROUNDED_STEPS
    assert report.ungrounded == ()


def test_executability_pure():
    lib = make_library(["a", "b"])
    plan = ["a", "nope"]
    assert executability_check(plan, lib) == executability_check(plan, lib)


def test_exec_report_consistency_enforced():
    with pytest.raises(ValueError):
        ExecReport(True, 1, ((0, "x"),), FailureKind.UNGROUNDED_STEPS)


def test_exec_report_round_trip():
    report = ExecReport(False, 3, ((1, "x"),), FailureKind.UNGROUNDED_STEPS)
    assert ExecReport.from_dict(report.to_dict()) == report


def test_golden_plans_executable(tiny_world, tools_bench):
    for bench in (tiny_world.benchmark, tools_bench):
        for task in bench.tasks:
            assert executability_check(task.golden_plan, bench.library).executable
