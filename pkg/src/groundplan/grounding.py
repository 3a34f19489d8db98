"""Step normalization and executability checks against an action library.

A plan is executable when every one of its steps is a member of the
library under normalized matching. Matching is exact by design: fuzzy
matching would silently absorb hallucinated steps, which is precisely
the failure mode the executability metric exists to expose.
"""

from __future__ import annotations

import re
from dataclasses import dataclass
from enum import Enum
from typing import Sequence

_WS_RUN = re.compile(r"\s+")
_NAME_SPLIT = " description:"


class FailureKind(str, Enum):
    NONE = "none"
    UNGROUNDED_STEPS = "ungrounded_steps"
    FORMAT_FAILURE = "format_failure"


class Strictness(str, Enum):
    """Matching tolerance: tolerant strips one trailing period, strict does not."""

    STRICT = "strict"
    TRAILING_PUNCT_TOLERANT = "trailing_punct_tolerant"


DEFAULT_STRICTNESS = Strictness.TRAILING_PUNCT_TOLERANT


@dataclass(frozen=True)
class ExecReport:
    executable: bool
    total_steps: int
    ungrounded: tuple[tuple[int, str], ...]
    failure_kind: FailureKind

    def __post_init__(self) -> None:
        ok = not self.ungrounded and self.failure_kind is FailureKind.NONE
        if self.executable != ok:
            raise ValueError("executable flag inconsistent with report contents")

    def to_dict(self) -> dict:
        return {
            "executable": self.executable,
            "total_steps": self.total_steps,
            "ungrounded": [[pos, step] for pos, step in self.ungrounded],
            "failure_kind": self.failure_kind.value,
        }

    @classmethod
    def from_dict(cls, data: dict) -> "ExecReport":
        return cls(
            executable=bool(data["executable"]),
            total_steps=int(data["total_steps"]),
            ungrounded=tuple((int(p), str(s)) for p, s in data["ungrounded"]),
            failure_kind=FailureKind(data["failure_kind"]),
        )


def normalize(step: str, strictness: Strictness = DEFAULT_STRICTNESS) -> str:
    """Canonical matching key: trim, collapse whitespace, casefold, drop one trailing period."""
    key = _WS_RUN.sub(" ", step.strip()).casefold()
    if strictness is Strictness.TRAILING_PUNCT_TOLERANT and key.endswith("."):
        key = key[:-1]
    return key


def action_name_key(action: str, strictness: Strictness = DEFAULT_STRICTNESS) -> str:
    """Key for the name part of a tools action ("name DESCRIPTION: ..." or bare name)."""
    key = normalize(action, strictness)
    if _NAME_SPLIT in key:
        key = key.split(_NAME_SPLIT, 1)[0].strip()
    return key


def _library_keys(library, strictness: Strictness) -> frozenset[str]:
    cache = getattr(library, "_match_cache", None)
    token = ("keys", strictness)
    if cache is not None and token in cache:
        return cache[token]
    keys = frozenset(normalize(a, strictness) for a in library.actions)
    if cache is not None:
        cache[token] = keys
    return keys


def _library_name_keys(library, strictness: Strictness) -> frozenset[str]:
    cache = getattr(library, "_match_cache", None)
    token = ("names", strictness)
    if cache is not None and token in cache:
        return cache[token]
    keys = frozenset(action_name_key(a, strictness) for a in library.actions)
    if cache is not None:
        cache[token] = keys
    return keys


def is_grounded(
    step: str,
    library,
    domain_kind: str | None = None,
    strictness: Strictness = DEFAULT_STRICTNESS,
) -> bool:
    """Whether a step is a member of the library under the domain's matching rule.

    General and robot domains require full-string membership. The tools
    domain additionally accepts a bare API name, or "name DESCRIPTION:
    anything", whenever the name part matches a library action's name part.
    """
    if not library.actions:
        raise ValueError("library must be non-empty")
    kind = domain_kind if domain_kind is not None else library.domain_kind
    if normalize(step, strictness) in _library_keys(library, strictness):
        return True
    if kind == "tools":
        return action_name_key(step, strictness) in _library_name_keys(library, strictness)
    return False


def executability_check(
    plan: Sequence[str] | BaseException | None,
    library,
    domain_kind: str | None = None,
    strictness: Strictness = DEFAULT_STRICTNESS,
) -> ExecReport:
    """Grade a plan against the library.

    A None or exception input marks a generation that never produced a
    parsable plan and yields failure_kind=format_failure. An empty plan is
    inexecutable by decision (it cannot complete a task).
    """
    if plan is None or isinstance(plan, BaseException):
        return ExecReport(False, 0, (), FailureKind.FORMAT_FAILURE)
    steps = list(plan)
    if not steps:
        return ExecReport(False, 0, (), FailureKind.UNGROUNDED_STEPS)
    bad = tuple(
        (pos, step)
        for pos, step in enumerate(steps)
        if not is_grounded(step, library, domain_kind, strictness)
    )
    if bad:
        return ExecReport(False, len(steps), bad, FailureKind.UNGROUNDED_STEPS)
    return ExecReport(True, len(steps), (), FailureKind.NONE)
