"""The five planning strategies over retrieval and the chat gateway.

Each planner returns a Plan plus a PlanTrace recording every completion
call, every retrieval, and (for DFS) every backtrack and expansion, so a
run can be audited or replayed offline.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from enum import Enum
from typing import Callable, Sequence

from .dataset import DomainKind, Task
from .gateway import (
    ChatRequest,
    Choice,
    CompletionResult,
    FormatFailure,
    complete,
    parse_choice,
    parse_plan,
    parse_proposal,
    tools_choice_key,
)
from .grounding import is_grounded, normalize
from .prompts import PromptCatalog, default_catalog, render_numbered
from .retrieval import ActionIndex, retrieve, retrieve_multi

UNGROUNDED_TAG = "[NOT IN LIBRARY]"


class Method(str, Enum):
    TASK_RETRIEVE = "task_retrieve"
    PLAN_RETRIEVE = "plan_retrieve"
    STEPWISE = "stepwise"
    DFS = "dfs"
    REWRITE = "rewrite"


@dataclass
class PlannerConfig:
    """Retrieval sizes, iteration caps, and generation policy for all planners."""

    task_retrieve_k: int = 20
    plan_retrieve_per_step_k: int = 2
    stepwise_k: int = 5
    dfs_k: int = 5
    rewrite_per_step_k: int = 10
    rewrite_candidate_budget: int = 30
    rewrite_max_marked_steps: int = 3
    stepwise_max_iters: int = 20
    dfs_max_calls: int = 30
    rewrite_max_iters: int = 20
    temperature: float = 1.0
    max_retries: int = 5
    # Filtering already-chosen steps out of candidate lists curbs repeated
    # steps; switch off to reproduce the unfiltered behavior.
    suppress_duplicates: bool = True

    def __post_init__(self) -> None:
        for name in (
            "task_retrieve_k",
            "plan_retrieve_per_step_k",
            "stepwise_k",
            "dfs_k",
            "rewrite_per_step_k",
            "rewrite_candidate_budget",
            "rewrite_max_marked_steps",
            "stepwise_max_iters",
            "dfs_max_calls",
            "rewrite_max_iters",
            "max_retries",
        ):
            if getattr(self, name) < 1:
                raise ValueError(f"{name} must be positive")
        if self.temperature < 0:
            raise ValueError("temperature must be >= 0")


@dataclass
class Plan:
    steps: list[str]
    method_id: Method
    completed: bool

    def to_dict(self) -> dict:
        return {
            "steps": self.steps,
            "method_id": self.method_id.value,
            "completed": self.completed,
        }


@dataclass
class IterationRecord:
    ordinal: int
    stage: str
    queries: list[str]
    candidates: list[str]
    instruction: str
    user_content: str
    response: str | None
    attempts: int
    attempt_texts: list[str]
    parsed: str
    backtrack: bool = False

    def to_dict(self) -> dict:
        return {
            "ordinal": self.ordinal,
            "stage": self.stage,
            "queries": self.queries,
            "candidates": self.candidates,
            "instruction": self.instruction,
            "user_content": self.user_content,
            "response": self.response,
            "attempts": self.attempts,
            "attempt_texts": self.attempt_texts,
            "parsed": self.parsed,
            "backtrack": self.backtrack,
        }


@dataclass
class PlanTrace:
    task_id: str
    method_id: Method
    iterations: list[IterationRecord] = field(default_factory=list)
    llm_calls: int = 0
    retrieval_calls: int = 0
    format_failure: str | None = None

    @property
    def had_format_failure(self) -> bool:
        return self.format_failure is not None

    def to_dict(self) -> dict:
        return {
            "task_id": self.task_id,
            "method_id": self.method_id.value,
            "iterations": [r.to_dict() for r in self.iterations],
            "llm_calls": self.llm_calls,
            "retrieval_calls": self.retrieval_calls,
            "format_failure": self.format_failure,
        }


Planner = Callable[..., tuple[Plan, PlanTrace]]


class _Session:
    """Per-invocation bookkeeping: prompt rendering, call recording, retrieval counting."""

    def __init__(
        self,
        task: Task,
        index: ActionIndex,
        backend,
        config: PlannerConfig,
        prompts: PromptCatalog,
        method: Method,
        limiter=None,
    ):
        self.task = task
        self.index = index
        self.backend = backend
        self.config = config
        self.prompts = prompts
        self.limiter = limiter
        self.trace = PlanTrace(task_id=task.id, method_id=method)
        self._ordinal = 0
        self.choice_key = (
            tools_choice_key
            if index.library.domain_kind == DomainKind.TOOLS
            else normalize
        )

    def _next_ordinal(self) -> int:
        self._ordinal += 1
        return self._ordinal

    def base_fields(self) -> dict[str, str]:
        return {"task": self.task.title, "method": self.task.method or ""}

    def ask(
        self,
        method_key: str,
        stage: str,
        fields: dict[str, str],
        validator,
        *,
        queries: Sequence[str] = (),
        candidates: Sequence[str] = (),
        parsed_label: Callable[[CompletionResult], str] = lambda r: "ok",
    ) -> CompletionResult:
        template = self.prompts.get(method_key, stage)
        instruction, user_content = template.render(**fields)
        request = ChatRequest(
            instruction=instruction,
            user_content=user_content,
            temperature=self.config.temperature,
            max_retries=self.config.max_retries,
            validator=validator,
        )
        record = IterationRecord(
            ordinal=self._next_ordinal(),
            stage=stage,
            queries=list(queries),
            candidates=list(candidates),
            instruction=instruction,
            user_content=user_content,
            response=None,
            attempts=0,
            attempt_texts=[],
            parsed="",
        )
        self.trace.iterations.append(record)
        try:
            result = complete(self.backend, request, limiter=self.limiter)
        except FormatFailure as failure:
            self.trace.llm_calls += 1
            record.response = failure.last_raw
            record.attempts = failure.attempts
            record.parsed = "format_failure"
            self.trace.format_failure = failure.last_raw
            raise
        self.trace.llm_calls += 1
        record.response = result.text
        record.attempts = result.attempts
        record.attempt_texts = list(result.attempt_texts)
        record.parsed = parsed_label(result)
        return result

    def note(
        self,
        stage: str,
        parsed: str,
        *,
        candidates: Sequence[str] = (),
        backtrack: bool = False,
    ) -> None:
        self.trace.iterations.append(
            IterationRecord(
                ordinal=self._next_ordinal(),
                stage=stage,
                queries=[],
                candidates=list(candidates),
                instruction="",
                user_content="",
                response=None,
                attempts=0,
                attempt_texts=[],
                parsed=parsed,
                backtrack=backtrack,
            )
        )

    def retrieve(self, query: str, k: int) -> list[str]:
        self.trace.retrieval_calls += 1
        return retrieve(self.index, query, k)

    def retrieve_multi(self, queries: Sequence[str], per_query_k: int, budget: int | None) -> list[str]:
        self.trace.retrieval_calls += len(queries)
        return retrieve_multi(self.index, queries, per_query_k, budget)


def _previous_steps_text(steps: Sequence[str]) -> str:
    return render_numbered(list(steps)) if steps else "(none yet)"


def plan_task_retrieve(
    task: Task,
    index: ActionIndex,
    backend,
    config: PlannerConfig | None = None,
    prompts: PromptCatalog | None = None,
    limiter=None,
) -> tuple[Plan, PlanTrace]:
    """Retrieve by task text, then select and order candidates in one completion."""
    config = config or PlannerConfig()
    session = _Session(task, index, backend, config, prompts or default_catalog(), Method.TASK_RETRIEVE, limiter)
    query = task.query_text()
    candidates = session.retrieve(query, config.task_retrieve_k)
    fields = session.base_fields() | {"candidates": render_numbered(candidates)}
    try:
        result = session.ask(
            "task_retrieve",
            "select_sort",
            fields,
            parse_plan,
            queries=[query],
            candidates=candidates,
            parsed_label=lambda r: f"steps:{len(r.parsed)}",
        )
    except FormatFailure:
        return Plan([], Method.TASK_RETRIEVE, completed=False), session.trace
    return Plan(list(result.parsed), Method.TASK_RETRIEVE, completed=True), session.trace


def plan_plan_retrieve(
    task: Task,
    index: ActionIndex,
    backend,
    config: PlannerConfig | None = None,
    prompts: PromptCatalog | None = None,
    limiter=None,
) -> tuple[Plan, PlanTrace]:
    """Draft a free-form plan, retrieve per draft step, then select and order."""
    config = config or PlannerConfig()
    session = _Session(task, index, backend, config, prompts or default_catalog(), Method.PLAN_RETRIEVE, limiter)
    try:
        draft = session.ask(
            "plan_retrieve",
            "draft",
            session.base_fields(),
            parse_plan,
            parsed_label=lambda r: f"steps:{len(r.parsed)}",
        )
    except FormatFailure:
        return Plan([], Method.PLAN_RETRIEVE, completed=False), session.trace
    initial = list(draft.parsed)
    candidates = session.retrieve_multi(initial, config.plan_retrieve_per_step_k, None)
    fields = session.base_fields() | {
        "plan": render_numbered(initial),
        "candidates": render_numbered(candidates),
    }
    try:
        final = session.ask(
            "plan_retrieve",
            "select_sort",
            fields,
            parse_plan,
            queries=initial,
            candidates=candidates,
            parsed_label=lambda r: f"steps:{len(r.parsed)}",
        )
    except FormatFailure:
        return Plan([], Method.PLAN_RETRIEVE, completed=False), session.trace
    return Plan(list(final.parsed), Method.PLAN_RETRIEVE, completed=True), session.trace


def _filter_chosen(candidates: list[str], chosen_keys: set[str], config: PlannerConfig) -> list[str]:
    if not config.suppress_duplicates:
        return candidates
    return [c for c in candidates if normalize(c) not in chosen_keys]


def plan_stepwise(
    task: Task,
    index: ActionIndex,
    backend,
    config: PlannerConfig | None = None,
    prompts: PromptCatalog | None = None,
    limiter=None,
) -> tuple[Plan, PlanTrace]:
    """Propose-then-select loop; stops on the None token, a refusal, or the cap."""
    config = config or PlannerConfig()
    session = _Session(task, index, backend, config, prompts or default_catalog(), Method.STEPWISE, limiter)
    steps: list[str] = []
    chosen_keys: set[str] = set()
    completed = False
    for _ in range(config.stepwise_max_iters):
        fields = session.base_fields() | {"previous_steps": _previous_steps_text(steps)}
        try:
            proposal = session.ask(
                "stepwise",
                "propose",
                fields,
                parse_proposal,
                parsed_label=lambda r: "none" if r.parsed is None else f"proposal:{r.parsed}",
            )
        except FormatFailure:
            return Plan(steps, Method.STEPWISE, completed=False), session.trace
        if proposal.parsed is None:
            completed = True
            break
        candidates = _filter_chosen(
            session.retrieve(proposal.parsed, config.stepwise_k), chosen_keys, config
        )
        if not candidates:
            completed = True
            break
        fields = session.base_fields() | {
            "previous_steps": _previous_steps_text(steps),
            "candidates": render_numbered(candidates),
        }
        try:
            selection = session.ask(
                "stepwise",
                "select",
                fields,
                lambda t, c=candidates: parse_choice(t, c, key=session.choice_key),
                queries=[proposal.parsed],
                candidates=candidates,
                parsed_label=lambda r: (
                    f"selected:{candidates[r.parsed.index]}"
                    if r.parsed.kind == "selected"
                    else r.parsed.kind
                ),
            )
        except FormatFailure:
            return Plan(steps, Method.STEPWISE, completed=False), session.trace
        choice: Choice = selection.parsed
        if choice.kind != "selected":
            completed = True  # refusal (or stop token) ends generation by choice
            break
        step = candidates[choice.index]
        steps.append(step)
        chosen_keys.add(normalize(step))
    return Plan(steps, Method.STEPWISE, completed=completed), session.trace


@dataclass
class _DfsNode:
    prefix: list[str]
    candidates: list[str] | None = None
    tried: set[int] = field(default_factory=set)

    def next_untried(self) -> int | None:
        if self.candidates is None:
            return None
        for i in range(len(self.candidates)):
            if i not in self.tried:
                return i
        return None

    def remaining(self) -> list[str]:
        assert self.candidates is not None
        return [c for i, c in enumerate(self.candidates) if i not in self.tried]


def plan_dfs(
    task: Task,
    index: ActionIndex,
    backend,
    config: PlannerConfig | None = None,
    prompts: PromptCatalog | None = None,
    limiter=None,
) -> tuple[Plan, PlanTrace]:
    """Depth-first search over partial plans with model-driven selection.

    A refusal (or a format failure) abandons the whole node: search pops
    to the parent and expands the parent's next untried candidate in
    retrieval-ranking order, without a fresh model call. The budget counts
    model calls, proposals and selections alike.
    """
    config = config or PlannerConfig()
    session = _Session(task, index, backend, config, prompts or default_catalog(), Method.DFS, limiter)
    budget = config.dfs_max_calls
    stack: list[_DfsNode] = [_DfsNode(prefix=[])]
    deepest: list[str] = []
    final: list[str] | None = None
    budget_cut = False
    success = False

    def pop_and_expand() -> None:
        # The stack top is exhausted: pop it, then walk upward expanding
        # the first ancestor that still has an untried candidate.
        while stack:
            popped = stack.pop()
            session.note("backtrack", parsed=f"depth:{len(popped.prefix)}", backtrack=True)
            if not stack:
                return
            parent = stack[-1]
            i = parent.next_untried()
            if i is None:
                continue
            parent.tried.add(i)
            step = parent.candidates[i]
            child = _DfsNode(prefix=parent.prefix + [step])
            stack.append(child)
            session.note("expand", parsed=f"expand:{step}", candidates=[step])
            return

    while stack:
        node = stack[-1]
        if len(node.prefix) > len(deepest):
            deepest = list(node.prefix)
        if node.candidates is None:
            if session.trace.llm_calls >= budget:
                budget_cut = True
                break
            fields = session.base_fields() | {"previous_steps": _previous_steps_text(node.prefix)}
            try:
                proposal = session.ask(
                    "dfs",
                    "propose",
                    fields,
                    parse_proposal,
                    parsed_label=lambda r: "none" if r.parsed is None else f"proposal:{r.parsed}",
                )
            except FormatFailure:
                pop_and_expand()
                continue
            if proposal.parsed is None:
                final = list(node.prefix)
                success = True
                break
            chosen = {normalize(s) for s in node.prefix}
            node.candidates = _filter_chosen(
                session.retrieve(proposal.parsed, config.dfs_k), chosen, config
            )
            if not node.candidates:
                pop_and_expand()
                continue
            continue
        # Fresh candidates and no selection yet: ask the model once.
        if session.trace.llm_calls >= budget:
            budget_cut = True
            break
        remaining = node.remaining()
        fields = session.base_fields() | {
            "previous_steps": _previous_steps_text(node.prefix),
            "candidates": render_numbered(remaining),
        }
        try:
            selection = session.ask(
                "dfs",
                "select",
                fields,
                lambda t, c=remaining: parse_choice(t, c, key=session.choice_key),
                candidates=remaining,
                parsed_label=lambda r: (
                    f"selected:{remaining[r.parsed.index]}"
                    if r.parsed.kind == "selected"
                    else r.parsed.kind
                ),
            )
        except FormatFailure:
            pop_and_expand()
            continue
        choice: Choice = selection.parsed
        if choice.kind != "selected":
            pop_and_expand()
            continue
        step = remaining[choice.index]
        node.tried.add(node.candidates.index(step))
        stack.append(_DfsNode(prefix=node.prefix + [step]))

    if success:
        plan_steps = final if final is not None else []
        completed = True
    else:
        plan_steps = deepest
        completed = not budget_cut
    return Plan(list(plan_steps), Method.DFS, completed=completed), session.trace


def _render_marked_plan(steps: Sequence[str], ungrounded_positions: set[int]) -> str:
    lines = []
    for i, step in enumerate(steps):
        tag = f" {UNGROUNDED_TAG}" if i in ungrounded_positions else ""
        lines.append(f"{i + 1}. {step}{tag}")
    return "\n".join(lines)


def plan_rewrite(
    task: Task,
    index: ActionIndex,
    backend,
    config: PlannerConfig | None = None,
    prompts: PromptCatalog | None = None,
    limiter=None,
) -> tuple[Plan, PlanTrace]:
    """Draft freely, then iteratively rewrite until every step is in the library.

    Each iteration marks ungrounded steps, retrieves around the first few
    of them, and asks for a full rewritten plan. The loop exits on the
    first fully grounded plan or at the iteration cap.
    """
    config = config or PlannerConfig()
    session = _Session(task, index, backend, config, prompts or default_catalog(), Method.REWRITE, limiter)
    library = index.library
    query = task.query_text()
    references = session.retrieve(query, config.task_retrieve_k)
    fields = session.base_fields() | {"candidates": render_numbered(references)}
    try:
        draft = session.ask(
            "rewrite",
            "draft",
            fields,
            parse_plan,
            queries=[query],
            candidates=references,
            parsed_label=lambda r: f"steps:{len(r.parsed)}",
        )
    except FormatFailure:
        return Plan([], Method.REWRITE, completed=False), session.trace

    steps = list(draft.parsed)
    completed = False
    consecutive_failures = 0
    iterations = 0
    while iterations < config.rewrite_max_iters:
        ungrounded = [
            (i, s) for i, s in enumerate(steps) if not is_grounded(s, library)
        ]
        if not ungrounded:
            completed = True
            break
        iterations += 1
        marked = [s for _, s in ungrounded[: config.rewrite_max_marked_steps]]
        candidates = session.retrieve_multi(
            marked, config.rewrite_per_step_k, config.rewrite_candidate_budget
        )
        fields = session.base_fields() | {
            "plan": _render_marked_plan(steps, {i for i, _ in ungrounded}),
            "candidates": render_numbered(candidates),
        }
        try:
            result = session.ask(
                "rewrite",
                "rewrite",
                fields,
                parse_plan,
                queries=marked,
                candidates=candidates,
                parsed_label=lambda r: f"steps:{len(r.parsed)}",
            )
        except FormatFailure:
            consecutive_failures += 1
            if consecutive_failures >= 3:
                break
            continue
        consecutive_failures = 0
        steps = list(result.parsed)
    if not completed and all(is_grounded(s, library) for s in steps):
        completed = True
    return Plan(steps, Method.REWRITE, completed=completed), session.trace


PLANNERS: dict[Method, Planner] = {
    Method.TASK_RETRIEVE: plan_task_retrieve,
    Method.PLAN_RETRIEVE: plan_plan_retrieve,
    Method.STEPWISE: plan_stepwise,
    Method.DFS: plan_dfs,
    Method.REWRITE: plan_rewrite,
}
