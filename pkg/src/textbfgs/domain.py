"""Shared vocabulary of the optimizer: candidates, gradients, operators,
execution reports, trace steps, and the token ledger.

All types here are immutable value objects and safe to share between
concurrent workers. Scoring rules (pass_rate, is_improvement) live here so
every other module agrees on what "better" means.
"""

from __future__ import annotations

from dataclasses import dataclass
from enum import Enum

from .errors import EmptySuite, SuiteMismatch


class TestStatus(str, Enum):
    PASS = "pass"
    FAIL = "fail"        # wrong answer (assertion failed)
    ERROR = "error"      # exception, compile failure, runner death
    TIMEOUT = "timeout"  # per-test deadline exceeded


# Suites a test can belong to; test ids are "<suite>:<index>".
BASE_SUITE = "base"
PLUS_SUITE = "plus"


@dataclass(frozen=True)
class CandidateVariable:
    """The code text under optimization, with its position in the trace."""

    task_id: str
    text: str
    step: int

    def __post_init__(self) -> None:
        if not self.text:
            raise ValueError("candidate text must be non-empty")
        if self.step < 0:
            raise ValueError("candidate step must be non-negative")


@dataclass(frozen=True)
class TextualGradient:
    """Natural-language diagnosis of why a candidate fails."""

    text: str
    step: int


@dataclass(frozen=True)
class CorrectionOperator:
    """Abstract adaptation rule distilled from a fix, stored instead of a diff."""

    text: str


@dataclass(frozen=True)
class TestResult:
    test_id: str
    status: TestStatus
    captured_output: str = ""
    duration: float = 0.0
    expression: str = ""  # the test expression, carried along for prompts

    @property
    def suite(self) -> str:
        return self.test_id.split(":", 1)[0]


@dataclass(frozen=True)
class ExecutionReport:
    """Per-test verdicts plus the scores derived from them for one evaluation."""

    test_results: tuple[TestResult, ...]
    base_score: float
    plus_score: float | None
    wall_time: float

    @classmethod
    def from_results(cls, results: list[TestResult], wall_time: float = 0.0) -> "ExecutionReport":
        base = _suite_rate(results, BASE_SUITE)
        if base is None:
            raise EmptySuite("a report needs at least one base test")
        return cls(
            test_results=tuple(results),
            base_score=base,
            plus_score=_suite_rate(results, PLUS_SUITE),
            wall_time=wall_time,
        )

    def suite_results(self, suite: str) -> tuple[TestResult, ...]:
        return tuple(r for r in self.test_results if r.suite == suite)

    def base_test_ids(self) -> tuple[str, ...]:
        return tuple(sorted(r.test_id for r in self.test_results if r.suite == BASE_SUITE))


@dataclass(frozen=True)
class TraceStep:
    """One completed loop iteration.

    operator is None for two-stage strategies, which never produce one, and
    both gradient and operator are None for a step voided by parse failures.
    """

    gradient: TextualGradient | None
    operator: CorrectionOperator | None
    candidate: CandidateVariable
    report: ExecutionReport
    retrieved_case_ids: tuple[str, ...]
    accepted: bool
    chat_calls: int = 0
    parse_failures: int = 0


@dataclass(frozen=True)
class TokenLedger:
    """Cumulative API accounting for one optimization run."""

    chat_calls: int = 0
    embed_calls: int = 0
    prompt_tokens: int = 0
    completion_tokens: int = 0

    def __post_init__(self) -> None:
        for name in ("chat_calls", "embed_calls", "prompt_tokens", "completion_tokens"):
            if getattr(self, name) < 0:
                raise ValueError(f"{name} must be non-negative")

    @property
    def total_tokens(self) -> int:
        return self.prompt_tokens + self.completion_tokens

    @property
    def tokens_per_call(self) -> float:
        if self.chat_calls == 0:
            return 0.0
        return self.total_tokens / self.chat_calls


def _suite_rate(results: list[TestResult], suite: str) -> float | None:
    in_suite = [r for r in results if r.suite == suite]
    if not in_suite:
        return None
    return sum(1 for r in in_suite if r.status is TestStatus.PASS) / len(in_suite)


def pass_rate(report: ExecutionReport, suite: str) -> float:
    """Fraction of tests in the suite with status pass.

    fail/error/timeout all count as not-pass. Raises EmptySuite when the
    suite has no tests in this report.
    """
    results = report.suite_results(suite)
    if not results:
        raise EmptySuite(f"suite {suite!r} has zero tests in this report")
    passed = sum(1 for r in results if r.status is TestStatus.PASS)
    return passed / len(results)


def is_improvement(prev: ExecutionReport, next: ExecutionReport) -> bool:
    """Strictly-better rule on the base suite; the plus suite never participates.

    Raises SuiteMismatch if the two reports were not evaluated on the same
    base test set.
    """
    if prev.base_test_ids() != next.base_test_ids():
        raise SuiteMismatch(
            f"reports cover different base suites: {prev.base_test_ids()} vs {next.base_test_ids()}"
        )
    return next.base_score > prev.base_score
