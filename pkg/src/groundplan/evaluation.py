"""Pairwise plan judging with position-swap debiasing, and metric aggregation.

Every (candidate, golden) pair is judged twice with the plan order
swapped; the win score is the average of the two binary outcomes, so a
judge that always favors one position scores exactly 0.5.
"""

from __future__ import annotations

import re
from dataclasses import dataclass
from enum import Enum
from typing import Mapping, Sequence

from .dataset import Task
from .gateway import ChatRequest, FormatFailure, ResponseParseError, complete
from .grounding import ExecReport, FailureKind, normalize
from .prompts import PromptCatalog, default_catalog, render_numbered


class JudgeUnparseable(Exception):
    """The judge never produced a parsable final choice."""

    def __init__(self, last_raw: str, attempts: int):
        super().__init__(f"judge response unparseable after {attempts} attempts")
        self.last_raw = last_raw
        self.attempts = attempts


class Winner(str, Enum):
    FIRST = "first"
    SECOND = "second"


@dataclass(frozen=True)
class JudgeVerdict:
    winner: Winner
    analyses: dict[str, str]
    attempts: int = 1


_CHOICE = re.compile(r"better\s+plan\s*[:\-]?\s*\(?([12])\)?", re.IGNORECASE)
_CRITERION = re.compile(r"^\s*(completeness|feasibility|relevance)\s*[:\-]\s*(.*)$", re.IGNORECASE)


def parse_verdict(text: str) -> tuple[Winner, dict[str, str]]:
    """Final choice plus any per-criterion analysis lines."""
    matches = _CHOICE.findall(text)
    if matches:
        winner = Winner.FIRST if matches[-1] == "1" else Winner.SECOND
    elif text.strip() in ("1", "2"):
        winner = Winner.FIRST if text.strip() == "1" else Winner.SECOND
    else:
        raise ResponseParseError("no final choice found in judge response")
    analyses: dict[str, str] = {}
    for line in text.splitlines():
        m = _CRITERION.match(line)
        if m:
            analyses[m.group(1).lower()] = m.group(2).strip()
    return winner, analyses


def judge_pair(
    task: Task,
    plan_first: Sequence[str],
    plan_second: Sequence[str],
    backend,
    *,
    prompts: PromptCatalog | None = None,
    temperature: float = 1.0,
    max_retries: int = 5,
    limiter=None,
) -> JudgeVerdict:
    """One forced-choice comparison of two plans in the presented order."""
    if not plan_first or not plan_second:
        raise ValueError("both plans must be non-empty")
    template = (prompts or default_catalog()).get("judge", "pairwise")
    instruction, user_content = template.render(
        task=task.title,
        method=task.method or "",
        plan_first=render_numbered(list(plan_first)),
        plan_second=render_numbered(list(plan_second)),
    )
    request = ChatRequest(
        instruction=instruction,
        user_content=user_content,
        temperature=temperature,
        max_retries=max_retries,
        validator=parse_verdict,
    )
    try:
        result = complete(backend, request, limiter=limiter)
    except FormatFailure as failure:
        raise JudgeUnparseable(failure.last_raw, failure.attempts) from failure
    winner, analyses = result.parsed
    return JudgeVerdict(winner=winner, analyses=analyses, attempts=result.attempts)


@dataclass(frozen=True)
class JudgeOutcome:
    win_score: float
    attempts: int
    unparseable: int


def judge_candidate(
    task: Task,
    candidate: Sequence[str],
    golden: Sequence[str],
    backend,
    **kwargs,
) -> JudgeOutcome:
    """Swap-averaged win score of the candidate against the golden plan.

    An unparseable comparison scores 0 for the candidate (conservative)
    and is counted so such records can be excluded in sensitivity reruns.
    """
    attempts = 0
    unparseable = 0
    try:
        first = judge_pair(task, candidate, golden, backend, **kwargs)
        attempts += first.attempts
        v1 = 1.0 if first.winner is Winner.FIRST else 0.0
    except JudgeUnparseable as exc:
        attempts += exc.attempts
        unparseable += 1
        v1 = 0.0
    try:
        second = judge_pair(task, golden, candidate, backend, **kwargs)
        attempts += second.attempts
        v2 = 1.0 if second.winner is Winner.SECOND else 0.0
    except JudgeUnparseable as exc:
        attempts += exc.attempts
        unparseable += 1
        v2 = 0.0
    return JudgeOutcome(win_score=(v1 + v2) / 2.0, attempts=attempts, unparseable=unparseable)


def quality_score(
    task: Task,
    candidate: Sequence[str],
    golden: Sequence[str],
    backend,
    **kwargs,
) -> float:
    return judge_candidate(task, candidate, golden, backend, **kwargs).win_score


@dataclass
class EvalRecord:
    """Per-task outcome: executability verdict plus (when executable) the win score."""

    task_id: str
    method_id: str
    category: str
    plan_steps: list[str]
    completed: bool
    exec_report: ExecReport
    win_score: float | None = None
    judge_attempts: int = 0
    judge_unparseable: int = 0

    def __post_init__(self) -> None:
        if self.exec_report.executable != (self.win_score is not None):
            raise ValueError("win_score must be present exactly when executable")

    def to_dict(self) -> dict:
        return {
            "task_id": self.task_id,
            "method_id": self.method_id,
            "category": self.category,
            "plan_steps": self.plan_steps,
            "completed": self.completed,
            "exec": self.exec_report.to_dict(),
            "win_score": self.win_score,
            "judge_attempts": self.judge_attempts,
            "judge_unparseable": self.judge_unparseable,
        }

    @classmethod
    def from_dict(cls, data: dict) -> "EvalRecord":
        return cls(
            task_id=data["task_id"],
            method_id=data["method_id"],
            category=data["category"],
            plan_steps=list(data["plan_steps"]),
            completed=bool(data["completed"]),
            exec_report=ExecReport.from_dict(data["exec"]),
            win_score=data["win_score"],
            judge_attempts=int(data.get("judge_attempts", 0)),
            judge_unparseable=int(data.get("judge_unparseable", 0)),
        )


@dataclass(frozen=True)
class RunMetrics:
    executability: float
    quality: float
    pass_rate: float
    n_cases: int
    format_error_rate: float
    repetition_rate: float

    def __post_init__(self) -> None:
        if self.pass_rate != self.executability * self.quality:
            raise ValueError("pass_rate must equal executability * quality")


def has_repeated_step(steps: Sequence[str]) -> bool:
    """Whether any normalized step occurs two or more times."""
    keys = [normalize(s) for s in steps]
    return len(set(keys)) < len(keys)


def compute_metrics(records: Sequence[EvalRecord]) -> RunMetrics:
    """Executability, quality, and their product over a record set."""
    if not records:
        raise ValueError("records must be non-empty")
    n = len(records)
    executable = [r for r in records if r.exec_report.executable]
    inexecutable = [r for r in records if not r.exec_report.executable]
    executability = len(executable) / n
    quality = (
        sum(r.win_score for r in executable) / len(executable) if executable else 0.0
    )
    format_failures = [
        r for r in inexecutable if r.exec_report.failure_kind is FailureKind.FORMAT_FAILURE
    ]
    format_error_rate = len(format_failures) / len(inexecutable) if inexecutable else 0.0
    parsed = [r for r in records if r.exec_report.failure_kind is not FailureKind.FORMAT_FAILURE]
    repetition_rate = (
        sum(1 for r in parsed if has_repeated_step(r.plan_steps)) / len(parsed)
        if parsed
        else 0.0
    )
    return RunMetrics(
        executability=executability,
        quality=quality,
        pass_rate=executability * quality,
        n_cases=n,
        format_error_rate=format_error_rate,
        repetition_rate=repetition_rate,
    )


def error_analysis(
    records: Sequence[EvalRecord],
    traces: Mapping[str, object] | None = None,
) -> dict[str, float]:
    """Format-failure share of inexecutable cases, repetition rate, mean plan length.

    Plans count as parsed when generation produced a step list (no format
    failure); traces, when given, are joined by task_id to recover steps
    for records that lack them.
    """
    if not records:
        raise ValueError("records must be non-empty")
    inexecutable = [r for r in records if not r.exec_report.executable]
    format_failures = [
        r for r in inexecutable if r.exec_report.failure_kind is FailureKind.FORMAT_FAILURE
    ]
    format_error_rate = len(format_failures) / len(inexecutable) if inexecutable else 0.0

    parsed_plans: list[list[str]] = []
    for record in records:
        if record.exec_report.failure_kind is FailureKind.FORMAT_FAILURE:
            continue
        steps = record.plan_steps
        if not steps and traces is not None and record.task_id in traces:
            steps = getattr(traces[record.task_id], "steps", steps)
        parsed_plans.append(list(steps))
    repetition_rate = (
        sum(1 for p in parsed_plans if has_repeated_step(p)) / len(parsed_plans)
        if parsed_plans
        else 0.0
    )
    mean_plan_length = (
        sum(len(p) for p in parsed_plans) / len(parsed_plans) if parsed_plans else 0.0
    )
    return {
        "format_error_rate": format_error_rate,
        "repetition_rate": repetition_rate,
        "mean_plan_length": mean_plan_length,
    }
