"""Benchmark loading, validation, sampling, and action-library construction.

On-disk format: one UTF-8 JSON array of task records per category, each
record carrying "title" (string), "method" (string or null), "steps"
(array of strings) and optionally an explicit "id". An optional sibling
library file (JSON array of strings) supplies extra actions beyond the
union of golden steps.
"""

from __future__ import annotations

import json
import random
from dataclasses import dataclass, field
from enum import Enum
from pathlib import Path
from typing import Sequence

from .grounding import normalize


class DatasetError(Exception):
    """Raised when a benchmark file or manifest is malformed."""


class DomainKind(str, Enum):
    GENERAL = "general"
    TOOLS = "tools"
    ROBOT = "robot"


class Split(str, Enum):
    IN_DOMAIN = "in_domain"
    OUT_OF_DOMAIN = "out_of_domain"


@dataclass
class Task:
    """One planning problem: a goal, optional constraints, and its reference plan."""

    id: str
    title: str
    method: str | None
    golden_plan: list[str]
    category: str

    def query_text(self) -> str:
        """Retrieval query: the goal, with constraint text appended when present."""
        if self.method:
            return f"{self.title}\n{self.method}"
        return self.title


@dataclass
class ActionLibrary:
    category: str
    actions: list[str]
    domain_kind: DomainKind
    _match_cache: dict = field(default_factory=dict, repr=False, compare=False)


@dataclass
class Benchmark:
    name: str
    tasks: list[Task]
    library: ActionLibrary
    split: Split

    def __post_init__(self) -> None:
        for task in self.tasks:
            if task.category != self.library.category:
                raise DatasetError(
                    f"task {task.id!r} category {task.category!r} does not match "
                    f"library category {self.library.category!r}"
                )


def format_tool_action(api_name: str, description: str) -> str:
    """Uniform tools-action string: "<api name> DESCRIPTION: <api description>"."""
    if not api_name.strip():
        raise ValueError("api_name must be non-empty")
    return f"{api_name} DESCRIPTION: {description}"


def build_action_library(tasks: Sequence[Task], domain_kind: DomainKind) -> ActionLibrary:
    """Union of all golden steps, deduplicated by normalization key, first occurrence first."""
    if not tasks:
        raise ValueError("tasks must be non-empty")
    category = tasks[0].category
    if any(t.category != category for t in tasks):
        raise ValueError("all tasks must share one category")
    actions: list[str] = []
    seen: set[str] = set()
    for task in tasks:
        for step in task.golden_plan:
            key = normalize(step)
            if key not in seen:
                seen.add(key)
                actions.append(step)
    return ActionLibrary(category=category, actions=actions, domain_kind=DomainKind(domain_kind))


def _parse_task(record: object, index: int, category: str) -> Task:
    if not isinstance(record, dict):
        raise DatasetError(f"record {index}: expected an object")
    title = record.get("title")
    if not isinstance(title, str) or not title.strip():
        raise DatasetError(f"record {index}: missing or empty title")
    method = record.get("method")
    if method is not None and not isinstance(method, str):
        raise DatasetError(f"record {index}: method must be a string or null")
    steps = record.get("steps")
    if not isinstance(steps, list) or not steps:
        raise DatasetError(f"record {index}: missing or empty steps")
    for j, step in enumerate(steps):
        if not isinstance(step, str) or not step.strip():
            raise DatasetError(f"record {index}: step {j} is empty")
    raw_id = record.get("id")
    if raw_id is not None and (not isinstance(raw_id, str) or not raw_id.strip()):
        raise DatasetError(f"record {index}: id must be a non-empty string when present")
    task_id = raw_id if raw_id is not None else f"{category}-{index:05d}"
    return Task(id=task_id, title=title, method=method, golden_plan=list(steps), category=category)


def load_benchmark(
    path: str | Path,
    domain_kind: DomainKind | str,
    *,
    name: str | None = None,
    split: Split | str = Split.IN_DOMAIN,
    library_path: str | Path | None = None,
) -> Benchmark:
    """Load and validate one category file, building its action library.

    The library is the union of golden steps; a library file, when given,
    appends any actions not already present. Loaded benchmarks are
    immutable by convention and safe to share across workers.
    """
    path = Path(path)
    bench_name = name if name is not None else path.stem
    try:
        records = json.loads(path.read_text(encoding="utf-8"))
    except (OSError, json.JSONDecodeError) as exc:
        raise DatasetError(f"cannot read benchmark file {path}: {exc}") from exc
    if not isinstance(records, list) or not records:
        raise DatasetError(f"{path}: expected a non-empty JSON array of task records")

    tasks = [_parse_task(rec, i, bench_name) for i, rec in enumerate(records)]
    seen_ids: set[str] = set()
    for task in tasks:
        if task.id in seen_ids:
            raise DatasetError(f"duplicate task id {task.id!r}")
        seen_ids.add(task.id)

    kind = DomainKind(domain_kind)
    library = build_action_library(tasks, kind)
    if library_path is not None:
        extra = json.loads(Path(library_path).read_text(encoding="utf-8"))
        if not isinstance(extra, list) or not all(isinstance(a, str) for a in extra):
            raise DatasetError(f"{library_path}: expected a JSON array of strings")
        known = {normalize(a) for a in library.actions}
        for action in extra:
            if not action.strip():
                raise DatasetError(f"{library_path}: empty action entry")
            key = normalize(action)
            if key not in known:
                known.add(key)
                library.actions.append(action)
    return Benchmark(name=bench_name, tasks=tasks, library=library, split=Split(split))


def save_benchmark(
    benchmark: Benchmark,
    path: str | Path,
    library_path: str | Path | None = None,
) -> None:
    """Write a benchmark back to the on-disk format (inverse of load_benchmark)."""
    records = [
        {"id": t.id, "title": t.title, "method": t.method, "steps": t.golden_plan}
        for t in benchmark.tasks
    ]
    Path(path).write_text(json.dumps(records, ensure_ascii=False, indent=1), encoding="utf-8")
    if library_path is not None:
        Path(library_path).write_text(
            json.dumps(benchmark.library.actions, ensure_ascii=False, indent=1),
            encoding="utf-8",
        )


def sample_eval_set(tasks: Sequence[Task], cap: int, seed: int) -> list[Task]:
    """Seeded uniform sample of at most cap tasks, original order preserved."""
    if cap < 1:
        raise ValueError("cap must be >= 1")
    if len(tasks) <= cap:
        return list(tasks)
    picked = sorted(random.Random(seed).sample(range(len(tasks)), cap))
    return [tasks[i] for i in picked]


@dataclass(frozen=True)
class ManifestEntry:
    category: str
    tasks_path: Path
    domain_kind: DomainKind
    split: Split
    library_path: Path | None = None


def load_manifest(path: str | Path) -> list[ManifestEntry]:
    """Read a manifest mapping category name to its files; paths resolve against the manifest."""
    path = Path(path)
    try:
        raw = json.loads(path.read_text(encoding="utf-8"))
    except (OSError, json.JSONDecodeError) as exc:
        raise DatasetError(f"cannot read manifest {path}: {exc}") from exc
    if not isinstance(raw, dict) or not raw:
        raise DatasetError(f"{path}: expected a non-empty JSON object")
    base = path.parent
    entries: list[ManifestEntry] = []
    for category, spec in raw.items():
        if not isinstance(spec, dict) or "tasks_path" not in spec or "domain_kind" not in spec:
            raise DatasetError(f"manifest entry {category!r}: needs tasks_path and domain_kind")
        lib = spec.get("library_path")
        entries.append(
            ManifestEntry(
                category=category,
                tasks_path=base / spec["tasks_path"],
                domain_kind=DomainKind(spec["domain_kind"]),
                split=Split(spec.get("split", Split.IN_DOMAIN)),
                library_path=(base / lib) if lib else None,
            )
        )
    return entries


def load_from_manifest(path: str | Path) -> list[Benchmark]:
    return [
        load_benchmark(
            e.tasks_path,
            e.domain_kind,
            name=e.category,
            split=e.split,
            library_path=e.library_path,
        )
        for e in load_manifest(path)
    ]
