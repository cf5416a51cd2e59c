"""The repair loop: strategies, step execution, retention, and traces.

Five strategies share one loop skeleton and differ in how a step turns the
current candidate into the next one:

  textgrad           two chat calls per step (diagnose, then rewrite)
  textgrad_momentum  textgrad plus a digest of recent step outcomes
  textbfgs_no_cb     one fused call per step, no reference patterns
  textbfgs_remo      one fused call, references retrieved by problem text
  textbfgs           one fused call, references retrieved by the previous
                     step's diagnosis

The trajectory is greedy: the loop always continues from the newest
candidate, even after a regression, while the best candidate seen is
tracked separately. A step is accepted only when it strictly improves the
base-suite score against its immediate predecessor, and only accepted
one-pass steps are retained into a case store.
"""

from __future__ import annotations

from dataclasses import dataclass
from datetime import datetime, timezone
from typing import Sequence

from .casebase import (
    GRADIENT_KEY,
    PROBLEM_KEY,
    SOURCE_RETENTION,
    CaseStore,
    CaseTuple,
    RetrievalHit,
)
from .domain import (
    CandidateVariable,
    CorrectionOperator,
    ExecutionReport,
    TextualGradient,
    TokenLedger,
    TraceStep,
    is_improvement,
)
from .errors import MalformedResponse, TruncationSuspected
from .gateway import Gateway
from .prompting import (
    REQUIRED_ONE_PASS_MARKERS,
    STYLE_OPERATOR,
    STYLE_PROBLEM,
    PromptBuilder,
    build_momentum_context,
    extract_code_block,
    parse_one_pass,
)
from .sandbox import (
    DEFAULT_GRACE,
    SUITE_BASE,
    SUITE_BASE_PLUS,
    TaskSpec,
    evaluate,
    summarize_failures,
)

KIND_TEXTGRAD = "textgrad"
KIND_TEXTGRAD_MOMENTUM = "textgrad_momentum"
KIND_TEXTBFGS_NO_CB = "textbfgs_no_cb"
KIND_TEXTBFGS_REMO = "textbfgs_remo"
KIND_TEXTBFGS = "textbfgs"

STRATEGY_KINDS = (
    KIND_TEXTGRAD,
    KIND_TEXTGRAD_MOMENTUM,
    KIND_TEXTBFGS_NO_CB,
    KIND_TEXTBFGS_REMO,
    KIND_TEXTBFGS,
)

_ONE_PASS_KINDS = (KIND_TEXTBFGS_NO_CB, KIND_TEXTBFGS_REMO, KIND_TEXTBFGS)
_STORE_KINDS = (KIND_TEXTBFGS_REMO, KIND_TEXTBFGS)

STOP_FULL_PASS = "early_stop_full_pass"
STOP_BUDGET_EXHAUSTED = "budget_exhausted"
STOP_PARSE_EXHAUSTED = "parse_exhausted"

# what feeds the retrieval query before any gradient exists
T0_NONE = "none"              # skip retrieval at t=0
T0_EXEC_ERROR = "exec_error"  # query with the initial failure summary


@dataclass(frozen=True)
class StrategyConfig:
    """Loop hyperparameters; the defaults are the reference settings."""

    kind: str = KIND_TEXTBFGS
    max_steps: int = 20
    top_k: int = 3
    momentum_window: int = 3
    parse_retries: int = 2    # re-asks after the first malformed reply
    retention_enabled: bool = True
    t0_query_mode: str = T0_NONE
    suites: str = SUITE_BASE  # suites the loop scores against

    def __post_init__(self) -> None:
        if self.kind not in STRATEGY_KINDS:
            raise ValueError(f"unknown strategy kind {self.kind!r}")
        if self.max_steps < 1:
            raise ValueError("max_steps must be at least 1")
        if self.top_k < 1:
            raise ValueError("top_k must be at least 1")
        if self.momentum_window < 1:
            raise ValueError("momentum_window must be at least 1")
        if self.parse_retries < 0:
            raise ValueError("parse_retries must be non-negative")
        if self.t0_query_mode not in (T0_NONE, T0_EXEC_ERROR):
            raise ValueError(f"unknown t0 query mode {self.t0_query_mode!r}")
        if self.suites not in (SUITE_BASE, SUITE_BASE_PLUS):
            raise ValueError(f"unknown suite selection {self.suites!r}")

    @property
    def one_pass(self) -> bool:
        return self.kind in _ONE_PASS_KINDS

    @property
    def uses_store(self) -> bool:
        return self.kind in _STORE_KINDS

    def to_dict(self) -> dict:
        return {
            "kind": self.kind,
            "max_steps": self.max_steps,
            "top_k": self.top_k,
            "momentum_window": self.momentum_window,
            "parse_retries": self.parse_retries,
            "retention_enabled": self.retention_enabled,
            "t0_query_mode": self.t0_query_mode,
            "suites": self.suites,
        }


@dataclass(frozen=True)
class OptimizationTrace:
    """Complete record of one task's repair run."""

    task_id: str
    strategy: StrategyConfig
    x0: CandidateVariable
    report0: ExecutionReport
    best_candidate: CandidateVariable
    best_report: ExecutionReport
    x_final: CandidateVariable
    final_report: ExecutionReport
    steps: tuple[TraceStep, ...]
    stopped_reason: str
    ledger: TokenLedger
    retained_case_ids: tuple[str, ...]

    @property
    def solved(self) -> bool:
        return self.stopped_reason == STOP_FULL_PASS

    @property
    def steps_used(self) -> int:
        return len(self.steps)


def utc_now_iso() -> str:
    return datetime.now(timezone.utc).isoformat()


def momentum_query(
    steps: Sequence[TraceStep],
    initial_report: ExecutionReport | None = None,
    t0_query_mode: str = T0_NONE,
) -> str | None:
    """Retrieval query text for the next step: the previous diagnosis.

    Before any diagnosis exists the query falls back per t0_query_mode:
    the initial failure summary (exec_error) or nothing (none), in which
    case retrieval is skipped for that step.
    """
    for step in reversed(steps):
        if step.gradient is not None:
            return step.gradient.text
    if t0_query_mode == T0_EXEC_ERROR and initial_report is not None:
        return summarize_failures(initial_report)
    return None


def retain(
    store: CaseStore,
    step: TraceStep,
    task: TaskSpec,
    gateway: Gateway,
    x_before: str,
    domain_tag: str = "",
    source: str = SOURCE_RETENTION,
    now: str | None = None,
) -> str | None:
    """Insert the step's correction into the store iff the step was accepted.

    Both retrieval keys are embedded via the gateway. Returns the new case
    id, or None for rejected steps and steps without a gradient/operator
    pair (two-stage steps never produce an operator).
    """
    if not step.accepted or step.gradient is None or step.operator is None:
        return None
    case = CaseTuple(
        id=store.next_id(),
        domain_tag=domain_tag,
        problem_statement=task.prompt,
        x_before=x_before,
        gradient=step.gradient.text,
        operator=step.operator.text,
        x_after=step.candidate.text,
        gradient_vec=gateway.embed(step.gradient.text),
        problem_vec=gateway.embed(task.prompt),
        created_at=now or utc_now_iso(),
        source=source,
    )
    store.insert(case)
    return case.id


def _ledger_delta(after: TokenLedger, before: TokenLedger) -> TokenLedger:
    return TokenLedger(
        chat_calls=after.chat_calls - before.chat_calls,
        embed_calls=after.embed_calls - before.embed_calls,
        prompt_tokens=after.prompt_tokens - before.prompt_tokens,
        completion_tokens=after.completion_tokens - before.completion_tokens,
    )


class _Loop:
    """Mutable state for one run_task call; exists to keep run_task readable."""

    def __init__(
        self,
        task: TaskSpec,
        gateway: Gateway,
        config: StrategyConfig,
        store: CaseStore | None,
        retention_store: CaseStore | None,
        builder: PromptBuilder,
        runner_cmd: list[str] | None,
        grace: float,
        domain_tag: str,
        retention_source: str,
        now: str | None,
    ):
        self.task = task
        self.gateway = gateway
        self.config = config
        self.store = store if config.uses_store else None
        # bootstrap redirects retention into a store the strategy does not
        # retrieve from; by default accepted steps feed the retrieval store
        self.retention_store = retention_store if retention_store is not None else self.store
        self.builder = builder
        self.runner_cmd = runner_cmd
        self.grace = grace
        self.domain_tag = domain_tag
        self.retention_source = retention_source
        self.now = now
        self.report0: ExecutionReport | None = None
        self.steps: list[TraceStep] = []
        self.retained: list[str] = []
        self._problem_vec: tuple[float, ...] | None = None

    def evaluate(self, code: str) -> ExecutionReport:
        return evaluate(
            code,
            self.task,
            suites=self.config.suites,
            runner_cmd=self.runner_cmd,
            grace=self.grace,
        )

    # -- retrieval -----------------------------------------------------------

    def retrieve(self) -> tuple[list[RetrievalHit], str]:
        """Reference cases for the upcoming step plus their rendering style."""
        config = self.config
        if self.store is None or len(self.store) == 0:
            return [], STYLE_OPERATOR
        if config.kind == KIND_TEXTBFGS_REMO:
            if self._problem_vec is None:
                self._problem_vec = self.gateway.embed(self.task.prompt)
            return self.store.retrieve(self._problem_vec, PROBLEM_KEY, config.top_k), STYLE_PROBLEM
        query = momentum_query(self.steps, self.report0, config.t0_query_mode)
        if query is None:
            return [], STYLE_OPERATOR
        return self.store.retrieve(self.gateway.embed(query), GRADIENT_KEY, config.top_k), STYLE_OPERATOR

    # -- chat with re-asks ----------------------------------------------------

    def _chat_with_retries(self, request, parse, required_tags=()):
        """Call chat up to 1+parse_retries times; (parsed, calls, failures)."""
        calls = 0
        failures = 0
        for _ in range(self.config.parse_retries + 1):
            calls += 1
            try:
                response = self.gateway.chat(request, required_tags=required_tags)
            except TruncationSuspected:
                failures += 1
                continue
            try:
                return parse(response.text), calls, failures
            except MalformedResponse:
                failures += 1
        return None, calls, failures

    # -- one step -------------------------------------------------------------

    def _maybe_retain(self, step: TraceStep, x_before: str) -> None:
        if not self.config.retention_enabled or not self.config.one_pass:
            return
        if self.retention_store is None:
            return
        case_id = retain(
            self.retention_store,
            step,
            self.task,
            self.gateway,
            x_before=x_before,
            domain_tag=self.domain_tag,
            source=self.retention_source,
            now=self.now,
        )
        if case_id is not None:
            self.retained.append(case_id)

    def one_pass_step(self, x: CandidateVariable, report: ExecutionReport) -> TraceStep | None:
        hits, style = self.retrieve()
        request = self.builder.build_one_pass_prompt(self.task, x, report, hits, style=style)
        parsed, calls, failures = self._chat_with_retries(
            request, parse_one_pass, required_tags=REQUIRED_ONE_PASS_MARKERS
        )
        hit_ids = tuple(h.case.id for h in hits)
        if parsed is None:
            self.steps.append(
                TraceStep(None, None, x, report, hit_ids, False, chat_calls=calls, parse_failures=failures)
            )
            return None
        gradient = TextualGradient(parsed.gradient, step=x.step)
        operator = CorrectionOperator(parsed.operator)
        next_x = CandidateVariable(self.task.task_id, parsed.improved_code, step=x.step + 1)
        next_report = self.evaluate(next_x.text)
        step = TraceStep(
            gradient, operator, next_x, next_report, hit_ids,
            accepted=is_improvement(report, next_report),
            chat_calls=calls, parse_failures=failures,
        )
        self._maybe_retain(step, x_before=x.text)
        self.steps.append(step)
        return step

    def two_stage_step(self, x: CandidateVariable, report: ExecutionReport) -> TraceStep | None:
        momentum = ""
        if self.config.kind == KIND_TEXTGRAD_MOMENTUM:
            momentum = build_momentum_context(self.steps, self.config.momentum_window)

        def parse_nonempty(text: str) -> str:
            if not text.strip():
                raise MalformedResponse(["response"])
            return text.strip()

        gradient_request = self.builder.build_gradient_prompt(self.task, x, report, momentum=momentum)
        gradient_text, g_calls, g_failures = self._chat_with_retries(gradient_request, parse_nonempty)
        if gradient_text is None:
            self.steps.append(
                TraceStep(None, None, x, report, (), False, chat_calls=g_calls, parse_failures=g_failures)
            )
            return None
        gradient = TextualGradient(gradient_text, step=x.step)

        def parse_code(text: str) -> str:
            code = extract_code_block(text)
            if not code:
                raise MalformedResponse(["code block"])
            return code

        update_request = self.builder.build_update_prompt(self.task, x, gradient.text)
        code, u_calls, u_failures = self._chat_with_retries(update_request, parse_code)
        calls = g_calls + u_calls
        failures = g_failures + u_failures
        if code is None:
            self.steps.append(
                TraceStep(gradient, None, x, report, (), False, chat_calls=calls, parse_failures=failures)
            )
            return None
        next_x = CandidateVariable(self.task.task_id, code, step=x.step + 1)
        next_report = self.evaluate(next_x.text)
        step = TraceStep(
            gradient, None, next_x, next_report, (),
            accepted=is_improvement(report, next_report),
            chat_calls=calls, parse_failures=failures,
        )
        self.steps.append(step)
        return step


def run_task(
    task: TaskSpec,
    x0_text: str,
    gateway: Gateway,
    config: StrategyConfig | None = None,
    store: CaseStore | None = None,
    retention_store: CaseStore | None = None,
    builder: PromptBuilder | None = None,
    runner_cmd: list[str] | None = None,
    grace: float = DEFAULT_GRACE,
    domain_tag: str = "",
    retention_source: str = SOURCE_RETENTION,
    now: str | None = None,
) -> OptimizationTrace:
    """Repair one task starting from x0_text.

    Runs at most config.max_steps steps, stopping early when the base suite
    fully passes or when a step cannot produce a usable reply after all
    re-asks. The returned ledger covers exactly this call's API usage.
    Sandbox and backend failures propagate; the caller decides whether a
    task-level failure aborts the run.
    """
    config = config or StrategyConfig()
    builder = builder or PromptBuilder()
    ledger_before = gateway.ledger

    loop = _Loop(
        task, gateway, config, store, retention_store, builder,
        runner_cmd, grace, domain_tag, retention_source, now,
    )
    x = CandidateVariable(task.task_id, x0_text, step=0)
    report = loop.evaluate(x.text)
    loop.report0 = report
    x0, report0 = x, report
    best_x, best_report = x, report

    if report.base_score == 1.0:
        stopped_reason = STOP_FULL_PASS
    else:
        stopped_reason = STOP_BUDGET_EXHAUSTED
        for _ in range(config.max_steps):
            if config.one_pass:
                step = loop.one_pass_step(x, report)
            else:
                step = loop.two_stage_step(x, report)
            if step is None:
                stopped_reason = STOP_PARSE_EXHAUSTED
                break
            x, report = step.candidate, step.report
            if report.base_score > best_report.base_score:
                best_x, best_report = x, report
            if report.base_score == 1.0:
                stopped_reason = STOP_FULL_PASS
                break

    return OptimizationTrace(
        task_id=task.task_id,
        strategy=config,
        x0=x0,
        report0=report0,
        best_candidate=best_x,
        best_report=best_report,
        x_final=x,
        final_report=report,
        steps=tuple(loop.steps),
        stopped_reason=stopped_reason,
        ledger=_ledger_delta(gateway.ledger, ledger_before),
        retained_case_ids=tuple(loop.retained),
    )


def trace_to_dict(trace: OptimizationTrace, template_version: str | None = None) -> dict:
    """JSON-ready view of a trace.

    Prompts are not duplicated into the trace; the strategy config and
    template version pin down how to rebuild them.
    """

    def report_dict(report: ExecutionReport) -> dict:
        return {
            "base_score": report.base_score,
            "plus_score": report.plus_score,
            "tests": [
                {
                    "test_id": r.test_id,
                    "status": r.status.value,
                    "captured_output": r.captured_output,
                }
                for r in report.test_results
            ],
        }

    return {
        "task_id": trace.task_id,
        "strategy": trace.strategy.to_dict(),
        "template_version": template_version,
        "stopped_reason": trace.stopped_reason,
        "steps_used": trace.steps_used,
        "solved": trace.solved,
        "x0": trace.x0.text,
        "best_candidate": trace.best_candidate.text,
        "x_final": trace.x_final.text,
        "report0": report_dict(trace.report0),
        "best_report": report_dict(trace.best_report),
        "final_report": report_dict(trace.final_report),
        "retained_case_ids": list(trace.retained_case_ids),
        "ledger": {
            "chat_calls": trace.ledger.chat_calls,
            "embed_calls": trace.ledger.embed_calls,
            "prompt_tokens": trace.ledger.prompt_tokens,
            "completion_tokens": trace.ledger.completion_tokens,
            "total_tokens": trace.ledger.total_tokens,
        },
        "steps": [
            {
                "step": s.candidate.step,
                "accepted": s.accepted,
                "base_score": s.report.base_score,
                "gradient": s.gradient.text if s.gradient else None,
                "operator": s.operator.text if s.operator else None,
                "retrieved_case_ids": list(s.retrieved_case_ids),
                "chat_calls": s.chat_calls,
                "parse_failures": s.parse_failures,
            }
            for s in trace.steps
        ],
    }
