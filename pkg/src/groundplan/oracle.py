"""Independent brute-force references used by the property tests.

Nothing here shares code with the paths it checks: top-k retrieval is
re-derived by full cosine sort, and the DFS walk is re-enumerated with
its own stack machine and its own script interpreter.
"""

from __future__ import annotations

import json
from dataclasses import dataclass
from pathlib import Path
from typing import Sequence

import numpy as np

from .dataset import Benchmark, Task, load_from_manifest
from .grounding import normalize
from .planners import PlannerConfig, PlanTrace
from .prompts import CUES

Event = tuple[str, tuple[str, ...]]


def brute_force_topk(
    actions: Sequence[str],
    vectors: Sequence[Sequence[float]],
    query_vector: Sequence[float],
    k: int,
) -> list[str]:
    """Full cosine sort with insertion-order tie-break.

    Cosines are cached by vector content so entries with identical
    vectors score identically and tie by position.
    """
    q = np.asarray(query_vector, dtype=np.float64)
    qn = float(np.linalg.norm(q))
    by_content: dict[bytes, float] = {}
    sims = []
    for vec in vectors:
        v = np.asarray(vec, dtype=np.float64)
        key = v.tobytes()
        if key not in by_content:
            by_content[key] = float(np.dot(v, q)) / (float(np.linalg.norm(v)) * qn)
        sims.append(by_content[key])
    order = sorted(range(len(actions)), key=lambda i: (-sims[i], i))
    return [actions[i] for i in order[:k]]


@dataclass
class TinyWorld:
    """Hand-enumerable fixture environment: a small benchmark plus scripted transcripts."""

    benchmark: Benchmark
    provider: object
    scripts: dict[str, dict]

    def task(self, task_id: str | None = None) -> Task:
        if task_id is None:
            return self.benchmark.tasks[0]
        for task in self.benchmark.tasks:
            if task.id == task_id:
                return task
        raise KeyError(task_id)


def load_tiny_world(root: str | Path, provider) -> TinyWorld:
    root = Path(root)
    benchmark = load_from_manifest(root / "manifest.json")[0]
    scripts = {}
    for path in sorted((root / "scripts").glob("*.json")):
        scripts[path.stem] = json.loads(path.read_text(encoding="utf-8"))
    return TinyWorld(benchmark=benchmark, provider=provider, scripts=scripts)


class _ScriptCursor:
    """Minimal first-match interpreter over the scripted-transcript format."""

    def __init__(self, spec: dict):
        self.rules = [
            {"contains": r.get("contains"), "responses": list(r["responses"]), "used": 0}
            for r in spec.get("rules", [])
        ]
        self.fallback = spec.get("fallback", "")

    def respond(self, text: str) -> str:
        for rule in self.rules:
            if rule["contains"] is not None and rule["contains"] in text:
                idx = min(rule["used"], len(rule["responses"]) - 1)
                rule["used"] += 1
                return rule["responses"][idx]
        return self.fallback


def _is_token(text: str, token: str) -> bool:
    stripped = text.strip().casefold()
    if stripped.endswith("."):
        stripped = stripped[:-1]
    return stripped == token


def enumerate_dfs_tree(
    world: TinyWorld,
    script: dict | str,
    task_id: str | None = None,
    config: PlannerConfig | None = None,
) -> list[Event]:
    """Expected DFS visit sequence for a scripted transcript, derived independently.

    Events are ("visit", prefix) for the root and every descent, and
    ("backtrack", popped_prefix) for every pop.
    """
    config = config or PlannerConfig()
    spec = world.scripts[script] if isinstance(script, str) else script
    cursor = _ScriptCursor(spec)
    task = world.task(task_id)
    library = world.benchmark.library
    vectors = world.provider.embed(library.actions)

    def ranked(query: str, k: int) -> list[str]:
        return brute_force_topk(
            library.actions, vectors, world.provider.embed([query])[0], k
        )

    def respond(stage: str) -> str:
        return cursor.respond(CUES[("dfs", stage)])

    events: list[Event] = [("visit", ())]
    # Stack entries: [prefix, candidates or None, tried index set]
    stack: list[list] = [[[], None, set()]]
    deepest: list[str] = []
    calls = 0

    def pop_and_expand() -> None:
        nonlocal events
        while stack:
            popped = stack.pop()
            events.append(("backtrack", tuple(popped[0])))
            if not stack:
                return
            prefix, candidates, tried = stack[-1]
            nxt = None
            if candidates is not None:
                for i in range(len(candidates)):
                    if i not in tried:
                        nxt = i
                        break
            if nxt is None:
                continue
            tried.add(nxt)
            child_prefix = prefix + [candidates[nxt]]
            stack.append([child_prefix, None, set()])
            events.append(("visit", tuple(child_prefix)))
            return

    while stack:
        prefix, candidates, tried = stack[-1]
        if len(prefix) > len(deepest):
            deepest = list(prefix)
        if candidates is None:
            if calls >= config.dfs_max_calls:
                break
            calls += 1
            proposal = respond("propose")
            if _is_token(proposal, "none"):
                break
            cands = ranked(proposal.strip(), config.dfs_k)
            if config.suppress_duplicates:
                chosen = {normalize(s) for s in prefix}
                cands = [c for c in cands if normalize(c) not in chosen]
            stack[-1][1] = cands
            if not cands:
                pop_and_expand()
            continue
        if calls >= config.dfs_max_calls:
            break
        remaining = [c for i, c in enumerate(candidates) if i not in tried]
        calls += 1
        answer = respond("select")
        if _is_token(answer, "refuse"):
            pop_and_expand()
            continue
        picked = None
        stripped = answer.strip()
        if stripped.isdigit():
            idx = int(stripped) - 1
            if 0 <= idx < len(remaining):
                picked = remaining[idx]
        if picked is None:
            key = normalize(answer)
            matches = [c for c in remaining if normalize(c) == key]
            picked = matches[0] if matches else None
        if picked is None:
            pop_and_expand()
            continue
        tried.add(candidates.index(picked))
        child_prefix = prefix + [picked]
        stack.append([child_prefix, None, set()])
        events.append(("visit", tuple(child_prefix)))
    return events


def dfs_visit_sequence(trace: PlanTrace) -> list[Event]:
    """Visit sequence reconstructed from a DFS trace, comparable to enumerate_dfs_tree."""
    events: list[Event] = [("visit", ())]
    prefix: list[str] = []
    for record in trace.iterations:
        if record.stage == "select" and record.parsed.startswith("selected:"):
            prefix.append(record.parsed.split(":", 1)[1])
            events.append(("visit", tuple(prefix)))
        elif record.stage == "expand":
            prefix.append(record.parsed.split(":", 1)[1])
            events.append(("visit", tuple(prefix)))
        elif record.stage == "backtrack":
            events.append(("backtrack", tuple(prefix)))
            if prefix:
                prefix.pop()
    return events
