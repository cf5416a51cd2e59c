"""TextBFGS: iterative LLM-driven code repair with a self-evolving memory
of abstract corrections.

The engine repairs a failing candidate in a loop: diagnose the failure in
natural language, retrieve similar past corrections by that diagnosis,
apply them in a single fused model call, and keep the corrections that
measurably helped. The package ships the loop, the case store, a sandboxed
test runner, a benchmark harness, an HTTP service, and a CLI.
"""

__version__ = "0.1.0"

from .casebase import CaseStore, CaseTuple, RetrievalHit, cosine
from .domain import (
    CandidateVariable,
    CorrectionOperator,
    ExecutionReport,
    TestResult,
    TestStatus,
    TextualGradient,
    TokenLedger,
    TraceStep,
    is_improvement,
    pass_rate,
)
from .errors import TextBfgsError
from .gateway import ChatRequest, ChatResponse, Gateway, HashEmbedder, Message
from .optimizer import OptimizationTrace, StrategyConfig, run_task
from .sandbox import TaskSpec, evaluate

__all__ = [
    "__version__",
    "CandidateVariable",
    "CaseStore",
    "CaseTuple",
    "ChatRequest",
    "ChatResponse",
    "CorrectionOperator",
    "ExecutionReport",
    "Gateway",
    "HashEmbedder",
    "Message",
    "OptimizationTrace",
    "RetrievalHit",
    "StrategyConfig",
    "TaskSpec",
    "TestResult",
    "TestStatus",
    "TextBfgsError",
    "TextualGradient",
    "TokenLedger",
    "TraceStep",
    "cosine",
    "evaluate",
    "is_improvement",
    "pass_rate",
    "run_task",
]
