"""Grounded task planning over large action libraries.

Plans are composed from an open action set, verified for executability
against the set, and scored with a position-swap-debiased pairwise judge
producing Executability, Quality, and Pass Rate.
"""

from .dataset import (
    ActionLibrary,
    Benchmark,
    DatasetError,
    DomainKind,
    Split,
    Task,
    build_action_library,
    format_tool_action,
    load_benchmark,
    load_from_manifest,
    sample_eval_set,
    save_benchmark,
)
from .evaluation import (
    EvalRecord,
    JudgeUnparseable,
    JudgeVerdict,
    RunMetrics,
    Winner,
    compute_metrics,
    error_analysis,
    judge_pair,
    quality_score,
)
from .gateway import (
    BackendUnavailable,
    CallableBackend,
    ChatRequest,
    FormatFailure,
    HttpChatBackend,
    ResponseParseError,
    ScriptedBackend,
    complete,
    parse_choice,
    parse_plan,
    render_request,
)
from .grounding import (
    ExecReport,
    FailureKind,
    Strictness,
    executability_check,
    is_grounded,
    normalize,
)
from .planners import (
    Method,
    Plan,
    PlannerConfig,
    PlanTrace,
    plan_dfs,
    plan_plan_retrieve,
    plan_rewrite,
    plan_stepwise,
    plan_task_retrieve,
)
from .retrieval import (
    ActionIndex,
    Embedding,
    EmbeddingCache,
    HashingEmbedder,
    ProviderError,
    build_index,
    embed_batch,
    retrieve,
    retrieve_multi,
)
from .runner import RunConfig, report, run

__version__ = "0.1.0"

__all__ = [
    "ActionIndex",
    "ActionLibrary",
    "BackendUnavailable",
    "Benchmark",
    "CallableBackend",
    "ChatRequest",
    "DatasetError",
    "DomainKind",
    "Embedding",
    "EmbeddingCache",
    "EvalRecord",
    "ExecReport",
    "FailureKind",
    "FormatFailure",
    "HashingEmbedder",
    "HttpChatBackend",
    "JudgeUnparseable",
    "JudgeVerdict",
    "Method",
    "Plan",
    "PlanTrace",
    "PlannerConfig",
    "ProviderError",
    "ResponseParseError",
    "RunConfig",
    "RunMetrics",
    "ScriptedBackend",
    "Split",
    "Strictness",
    "Task",
    "Winner",
    "build_action_library",
    "build_index",
    "complete",
    "compute_metrics",
    "embed_batch",
    "error_analysis",
    "executability_check",
    "format_tool_action",
    "is_grounded",
    "judge_pair",
    "load_benchmark",
    "load_from_manifest",
    "normalize",
    "parse_choice",
    "parse_plan",
    "plan_dfs",
    "plan_plan_retrieve",
    "plan_rewrite",
    "plan_stepwise",
    "plan_task_retrieve",
    "quality_score",
    "render_request",
    "report",
    "retrieve",
    "retrieve_multi",
    "run",
    "sample_eval_set",
    "save_benchmark",
]
