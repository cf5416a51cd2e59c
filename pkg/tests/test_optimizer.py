import json

import pytest

from textbfgs.casebase import (
    GRADIENT_KEY,
    PROBLEM_KEY,
    SOURCE_BOOTSTRAP,
    SOURCE_RETENTION,
    CaseStore,
)
from textbfgs.domain import (
    CandidateVariable,
    CorrectionOperator,
    ExecutionReport,
    TestResult,
    TestStatus,
    TextualGradient,
    TraceStep,
)
from textbfgs.gateway import ChatResponse, Gateway, HashEmbedder, ScriptedChatBackend, ScriptRule, Usage
from textbfgs.optimizer import (
    KIND_TEXTBFGS,
    KIND_TEXTBFGS_NO_CB,
    KIND_TEXTBFGS_REMO,
    KIND_TEXTGRAD,
    KIND_TEXTGRAD_MOMENTUM,
    STOP_BUDGET_EXHAUSTED,
    STOP_FULL_PASS,
    STOP_PARSE_EXHAUSTED,
    T0_EXEC_ERROR,
    T0_NONE,
    OptimizationTrace,
    StrategyConfig,
    momentum_query,
    retain,
    run_task,
    trace_to_dict,
)
from textbfgs.prompting import PromptBuilder, render_one_pass
from textbfgs.sandbox import SUITE_BASE_PLUS

from conftest import DOUBLE_GOOD, DOUBLE_PARTIAL, DOUBLE_ZERO, make_gateway


class SpyStore(CaseStore):
    """CaseStore that records every retrieve call's key and k."""

    def __init__(self, dim):
        super().__init__(dim=dim)
        self.calls = []

    def retrieve(self, query_vec, key, k):
        self.calls.append((key, k))
        return super().retrieve(query_vec, key, k)


class SpyChat:
    """Wraps a chat backend and keeps every prompt it saw."""

    def __init__(self, inner):
        self.inner = inner
        self.backend_id = f"spy({inner.backend_id})"
        self.prompts = []

    def complete(self, request):
        self.prompts.append(request.flat_text())
        return self.inner.complete(request)


class QueueBackend:
    """Replies from a queue; the last entry repeats once the queue drains."""

    def __init__(self, replies):
        self.replies = list(replies)
        self.backend_id = "queued"

    def complete(self, request):
        text = self.replies.pop(0) if len(self.replies) > 1 else self.replies[0]
        return ChatResponse(text=text, usage=Usage(prompt_tokens=1, completion_tokens=1))


def seed_store(store, gateway, texts):
    """Insert cases whose gradient/problem vectors come from the gateway's embedder."""
    for gradient_text, problem_text in texts:
        case_id = store.next_id()
        from textbfgs.casebase import CaseTuple

        store.insert(
            CaseTuple(
                id=case_id,
                domain_tag="seed",
                problem_statement=problem_text,
                x_before="def f():\n    return 0\n",
                gradient=gradient_text,
                operator="rule for " + gradient_text,
                x_after="def f():\n    return 1\n",
                gradient_vec=gateway.embed_backend.embed_text(gradient_text),
                problem_vec=gateway.embed_backend.embed_text(problem_text),
                created_at="2026-08-18T00:00:00+00:00",
                source=SOURCE_BOOTSTRAP,
            )
        )


class TestStrategyConfig:
    def test_rejects_unknown_kind(self):
        with pytest.raises(ValueError):
            StrategyConfig(kind="gradient_descent")

    def test_rejects_bad_bounds(self):
        with pytest.raises(ValueError):
            StrategyConfig(max_steps=0)
        with pytest.raises(ValueError):
            StrategyConfig(top_k=0)
        with pytest.raises(ValueError):
            StrategyConfig(parse_retries=-1)
        with pytest.raises(ValueError):
            StrategyConfig(t0_query_mode="guess")
        with pytest.raises(ValueError):
            StrategyConfig(suites="plus")

    def test_one_pass_and_store_flags(self):
        assert not StrategyConfig(kind=KIND_TEXTGRAD).one_pass
        assert not StrategyConfig(kind=KIND_TEXTGRAD_MOMENTUM).one_pass
        assert StrategyConfig(kind=KIND_TEXTBFGS_NO_CB).one_pass
        assert StrategyConfig(kind=KIND_TEXTBFGS_NO_CB).uses_store is False
        assert StrategyConfig(kind=KIND_TEXTBFGS_REMO).uses_store
        assert StrategyConfig(kind=KIND_TEXTBFGS).uses_store

    def test_reference_defaults(self):
        config = StrategyConfig()
        assert config.kind == KIND_TEXTBFGS
        assert config.max_steps == 20
        assert config.top_k == 3
        assert config.momentum_window == 3
        assert config.parse_retries == 2

    def test_to_dict_is_json_ready(self):
        json.dumps(StrategyConfig().to_dict())


class TestMomentumQuery:
    def _void_step(self, i):
        report = ExecutionReport.from_results([TestResult("base:0", TestStatus.FAIL)])
        return TraceStep(None, None, CandidateVariable("t", "x", i), report, (), False)

    def _gradient_step(self, i, text):
        report = ExecutionReport.from_results([TestResult("base:0", TestStatus.FAIL)])
        return TraceStep(
            TextualGradient(text, i), CorrectionOperator("o"),
            CandidateVariable("t", "x", i), report, (), False,
        )

    def test_latest_gradient_wins(self):
        steps = [self._gradient_step(1, "first"), self._gradient_step(2, "second")]
        assert momentum_query(steps) == "second"

    def test_voided_steps_are_skipped(self):
        steps = [self._gradient_step(1, "usable"), self._void_step(2)]
        assert momentum_query(steps) == "usable"

    def test_no_history_none_mode(self):
        assert momentum_query([], t0_query_mode=T0_NONE) is None

    def test_no_history_exec_error_mode_uses_failure_summary(self):
        report = ExecutionReport.from_results(
            [TestResult("base:0", TestStatus.FAIL, expression="assert f() == 1")]
        )
        query = momentum_query([], initial_report=report, t0_query_mode=T0_EXEC_ERROR)
        assert "assert f() == 1" in query


class TestRunTaskBasics:
    def test_solved_x0_stops_without_any_call(self, double_task, hash_gateway):
        trace = run_task(double_task, DOUBLE_GOOD, hash_gateway, StrategyConfig(kind=KIND_TEXTBFGS_NO_CB))
        assert trace.stopped_reason == STOP_FULL_PASS
        assert trace.solved
        assert trace.steps_used == 0
        assert trace.ledger.chat_calls == 0
        assert trace.best_candidate.text == DOUBLE_GOOD

    def test_one_step_solve(self, double_task, solves_double_backend):
        gateway = make_gateway(solves_double_backend)
        trace = run_task(double_task, DOUBLE_ZERO, gateway, StrategyConfig(kind=KIND_TEXTBFGS_NO_CB))
        assert trace.solved
        assert trace.steps_used == 1
        assert trace.steps[0].accepted
        assert trace.x_final.text == DOUBLE_GOOD.strip()
        assert trace.best_report.base_score == 1.0
        assert trace.x0.text == DOUBLE_ZERO
        assert trace.report0.base_score == 0.0

    def test_candidate_steps_are_numbered_from_one(self, double_task, never_improves_backend):
        gateway = make_gateway(never_improves_backend)
        config = StrategyConfig(kind=KIND_TEXTBFGS_NO_CB, max_steps=3)
        trace = run_task(double_task, DOUBLE_ZERO, gateway, config)
        assert [s.candidate.step for s in trace.steps] == [1, 2, 3]
        assert [s.gradient.step for s in trace.steps] == [0, 1, 2]

    def test_budget_exhaustion_keeps_best_at_x0(self, double_task, never_improves_backend):
        gateway = make_gateway(never_improves_backend)
        config = StrategyConfig(kind=KIND_TEXTBFGS_NO_CB, max_steps=2)
        trace = run_task(double_task, DOUBLE_PARTIAL, gateway, config)
        assert trace.stopped_reason == STOP_BUDGET_EXHAUSTED
        assert trace.steps_used == 2
        assert not trace.solved
        assert all(not s.accepted for s in trace.steps)
        assert trace.best_candidate.text == DOUBLE_PARTIAL
        assert trace.best_report.base_score == pytest.approx(0.5)

    def test_greedy_trajectory_continues_from_regression(self, double_task):
        # step 1 regresses (1/2 -> 0) and is rejected; the loop still continues
        # from the regressed code, whose marker triggers the fixing rule
        backend = ScriptedChatBackend(
            rules=(
                ScriptRule(
                    text=render_one_pass("constant output", "restore input dependence", DOUBLE_GOOD),
                    when_contains=("return 0",),
                ),
            ),
            default=render_one_pass("adds two instead of doubling", "replace add with multiply", DOUBLE_ZERO),
            name="regress-then-fix",
        )
        gateway = make_gateway(backend)
        config = StrategyConfig(kind=KIND_TEXTBFGS_NO_CB, max_steps=5)
        trace = run_task(double_task, DOUBLE_PARTIAL, gateway, config)
        assert [s.accepted for s in trace.steps] == [False, True]
        assert trace.steps[0].report.base_score == 0.0
        assert trace.solved
        # best never dipped below the starting candidate
        assert trace.best_report.base_score == 1.0
        assert trace.x_final.text == DOUBLE_GOOD.strip()

    def test_loop_scores_plus_suite_when_asked(self, interval_task, never_improves_backend):
        from conftest import INTERVAL_BUGGY

        gateway = make_gateway(never_improves_backend)
        config = StrategyConfig(kind=KIND_TEXTBFGS_NO_CB, max_steps=1, suites=SUITE_BASE_PLUS)
        trace = run_task(interval_task, INTERVAL_BUGGY, gateway, config)
        assert trace.report0.plus_score == pytest.approx(3 / 5)

    def test_trace_to_dict_is_json_ready(self, double_task, solves_double_backend):
        gateway = make_gateway(solves_double_backend)
        trace = run_task(double_task, DOUBLE_ZERO, gateway, StrategyConfig(kind=KIND_TEXTBFGS_NO_CB))
        payload = trace_to_dict(trace, template_version="v1")
        blob = json.dumps(payload)
        assert "early_stop_full_pass" in blob
        assert payload["steps"][0]["accepted"] is True
        assert payload["template_version"] == "v1"


class TestCallAccounting:
    def test_one_pass_costs_one_call_per_step(self, double_task, never_improves_backend):
        gateway = make_gateway(never_improves_backend)
        config = StrategyConfig(kind=KIND_TEXTBFGS_NO_CB, max_steps=3)
        trace = run_task(double_task, DOUBLE_ZERO, gateway, config)
        assert trace.ledger.chat_calls == 3
        assert all(s.chat_calls == 1 for s in trace.steps)

    def test_two_stage_costs_two_calls_per_step(self, double_task, two_stage_backend):
        gateway = make_gateway(two_stage_backend)
        # the scripted fix solves the task at step 1: 2 calls total
        trace = run_task(double_task, DOUBLE_ZERO, gateway, StrategyConfig(kind=KIND_TEXTGRAD))
        assert trace.solved
        assert trace.steps_used == 1
        assert trace.ledger.chat_calls == 2
        assert trace.steps[0].chat_calls == 2

    def test_two_stage_never_improving_accumulates_two_per_step(self, double_task):
        backend = ScriptedChatBackend(
            rules=(
                ScriptRule(text="```python\ndef double(x):\n    return 1\n```", when_contains=("## Diagnosis",)),
            ),
            default="still returns a constant",
            name="two-stage-stuck",
        )
        gateway = make_gateway(backend)
        config = StrategyConfig(kind=KIND_TEXTGRAD, max_steps=3)
        trace = run_task(double_task, DOUBLE_ZERO, gateway, config)
        assert trace.steps_used == 3
        assert trace.ledger.chat_calls == 6

    def test_ledger_isolated_per_run(self, double_task, solves_double_backend):
        gateway = make_gateway(solves_double_backend)
        first = run_task(double_task, DOUBLE_ZERO, gateway, StrategyConfig(kind=KIND_TEXTBFGS_NO_CB))
        second = run_task(double_task, DOUBLE_ZERO, gateway, StrategyConfig(kind=KIND_TEXTBFGS_NO_CB))
        assert first.ledger.chat_calls == second.ledger.chat_calls == 1
        assert gateway.ledger.chat_calls == 2


class TestParseRecovery:
    def test_malformed_then_valid_reply_costs_two_calls(self, double_task):
        good = render_one_pass("diagnosis", "rule", DOUBLE_GOOD)
        gateway = make_gateway(QueueBackend(["no tags in this reply", good]))
        trace = run_task(double_task, DOUBLE_ZERO, gateway, StrategyConfig(kind=KIND_TEXTBFGS_NO_CB))
        assert trace.solved
        assert trace.steps[0].chat_calls == 2
        assert trace.steps[0].parse_failures == 1

    def test_parse_exhaustion_voids_the_step_and_stops(self, double_task):
        gateway = make_gateway(ScriptedChatBackend(rules=(), default="never parseable"))
        config = StrategyConfig(kind=KIND_TEXTBFGS_NO_CB, max_steps=5, parse_retries=2)
        trace = run_task(double_task, DOUBLE_ZERO, gateway, config)
        assert trace.stopped_reason == STOP_PARSE_EXHAUSTED
        assert trace.steps_used == 1
        void = trace.steps[0]
        assert void.gradient is None and void.operator is None
        assert not void.accepted
        assert void.chat_calls == 3  # 1 + parse_retries re-asks
        assert void.parse_failures == 3
        assert trace.x_final.text == DOUBLE_ZERO

    def test_truncated_replies_count_and_exhaust(self, double_task):
        # 12-token unclosed reply against max_tokens=10: every attempt trips
        # the truncation guard and counts as a parse failure
        backend = ScriptedChatBackend(rules=(), default="<GRADIENT> " + "word " * 10 + "unfinished")
        gateway = make_gateway(backend)
        builder = PromptBuilder(sampling={"max_tokens": 10})
        config = StrategyConfig(kind=KIND_TEXTBFGS_NO_CB, max_steps=2, parse_retries=1)
        trace = run_task(double_task, DOUBLE_ZERO, gateway, config, builder=builder)
        assert trace.stopped_reason == STOP_PARSE_EXHAUSTED
        assert trace.steps[0].chat_calls == 2
        assert trace.ledger.chat_calls == 2  # truncated calls are still metered

    def test_two_stage_gradient_parse_exhaustion(self, double_task):
        gateway = make_gateway(ScriptedChatBackend(rules=(), default="   "))
        config = StrategyConfig(kind=KIND_TEXTGRAD, max_steps=2, parse_retries=1)
        trace = run_task(double_task, DOUBLE_ZERO, gateway, config)
        assert trace.stopped_reason == STOP_PARSE_EXHAUSTED
        assert trace.steps[0].gradient is None
        assert trace.steps[0].chat_calls == 2


class TestRetention:
    def _accepted_step(self, gradient="g text", operator="o text"):
        report = ExecutionReport.from_results([TestResult("base:0", TestStatus.PASS)])
        return TraceStep(
            gradient=TextualGradient(gradient, 0) if gradient else None,
            operator=CorrectionOperator(operator) if operator else None,
            candidate=CandidateVariable("t", "fixed code", 1),
            report=report,
            retrieved_case_ids=(),
            accepted=True,
        )

    def test_retain_inserts_accepted_correction(self, double_task, hash_gateway):
        store = CaseStore(dim=32)
        case_id = retain(
            store, self._accepted_step(), double_task, hash_gateway,
            x_before="broken code", domain_tag="arith", now="2026-08-18T00:00:00+00:00",
        )
        assert case_id == "case-00000"
        case = store.get(case_id)
        assert case.gradient == "g text"
        assert case.operator == "o text"
        assert case.x_before == "broken code"
        assert case.x_after == "fixed code"
        assert case.domain_tag == "arith"
        assert case.source == SOURCE_RETENTION
        assert case.problem_statement == double_task.prompt
        assert len(case.gradient_vec) == 32

    def test_retain_skips_rejected_and_operatorless_steps(self, double_task, hash_gateway):
        store = CaseStore(dim=32)
        rejected = TraceStep(
            TextualGradient("g", 0), CorrectionOperator("o"),
            CandidateVariable("t", "c", 1),
            ExecutionReport.from_results([TestResult("base:0", TestStatus.FAIL)]),
            (), accepted=False,
        )
        assert retain(store, rejected, double_task, hash_gateway, x_before="b") is None
        assert retain(store, self._accepted_step(operator=None), double_task, hash_gateway, x_before="b") is None
        assert len(store) == 0

    def test_accepted_one_pass_step_is_retained_in_run(self, double_task, solves_double_backend):
        gateway = make_gateway(solves_double_backend)
        store = CaseStore(dim=32)
        config = StrategyConfig(kind=KIND_TEXTBFGS)
        trace = run_task(double_task, DOUBLE_ZERO, gateway, config, store=store)
        assert len(store) == 1
        assert trace.retained_case_ids == ("case-00000",)
        case = store.get("case-00000")
        assert case.x_before == DOUBLE_ZERO
        assert case.x_after == DOUBLE_GOOD.strip()
        # retaining embeds the gradient and the problem statement
        assert trace.ledger.embed_calls >= 2

    def test_rejected_steps_are_not_retained_in_run(self, double_task, never_improves_backend):
        gateway = make_gateway(never_improves_backend)
        store = CaseStore(dim=32)
        config = StrategyConfig(kind=KIND_TEXTBFGS, max_steps=3)
        trace = run_task(double_task, DOUBLE_ZERO, gateway, config, store=store)
        assert len(store) == 0
        assert trace.retained_case_ids == ()

    def test_retention_can_be_disabled(self, double_task, solves_double_backend):
        gateway = make_gateway(solves_double_backend)
        store = CaseStore(dim=32)
        config = StrategyConfig(kind=KIND_TEXTBFGS, retention_enabled=False)
        trace = run_task(double_task, DOUBLE_ZERO, gateway, config, store=store)
        assert len(store) == 0
        assert trace.retained_case_ids == ()

    def test_retention_redirect_for_bootstrap(self, double_task, solves_double_backend):
        # no_cb never retrieves, yet its accepted fixes can be banked into a
        # separate store with a bootstrap source label
        gateway = make_gateway(solves_double_backend)
        bank = SpyStore(dim=32)
        config = StrategyConfig(kind=KIND_TEXTBFGS_NO_CB)
        trace = run_task(
            double_task, DOUBLE_ZERO, gateway, config,
            retention_store=bank, retention_source=SOURCE_BOOTSTRAP,
        )
        assert len(bank) == 1
        assert bank.cases()[0].source == SOURCE_BOOTSTRAP
        assert bank.calls == []  # retention never reads the store
        assert trace.retained_case_ids == ("case-00000",)

    def test_two_stage_never_retains(self, double_task, two_stage_backend):
        gateway = make_gateway(two_stage_backend)
        bank = CaseStore(dim=32)
        config = StrategyConfig(kind=KIND_TEXTGRAD)
        trace = run_task(double_task, DOUBLE_ZERO, gateway, config, retention_store=bank)
        assert trace.solved
        assert len(bank) == 0


class TestRetrievalRouting:
    def _seeded_spy(self, gateway):
        store = SpyStore(dim=32)
        seed_store(
            store,
            gateway,
            [
                ("loop bound off by one", "sum a list of integers"),
                ("wrong operator used", "double an integer"),
                ("constant return value", "format a string"),
            ],
        )
        store.calls.clear()
        return store

    def test_gradient_keyed_kind_skips_t0_then_queries_by_gradient(self, double_task, never_improves_backend):
        gateway = make_gateway(never_improves_backend)
        store = self._seeded_spy(gateway)
        config = StrategyConfig(kind=KIND_TEXTBFGS, max_steps=2, t0_query_mode=T0_NONE)
        trace = run_task(double_task, DOUBLE_ZERO, gateway, config, store=store)
        # no gradient exists at t=0, so only step 2 retrieves
        assert store.calls == [(GRADIENT_KEY, 3)]
        assert trace.steps[0].retrieved_case_ids == ()
        assert len(trace.steps[1].retrieved_case_ids) == 3

    def test_exec_error_mode_retrieves_at_t0(self, double_task, never_improves_backend):
        gateway = make_gateway(never_improves_backend)
        store = self._seeded_spy(gateway)
        config = StrategyConfig(kind=KIND_TEXTBFGS, max_steps=2, t0_query_mode=T0_EXEC_ERROR)
        trace = run_task(double_task, DOUBLE_ZERO, gateway, config, store=store)
        assert store.calls == [(GRADIENT_KEY, 3), (GRADIENT_KEY, 3)]
        assert len(trace.steps[0].retrieved_case_ids) == 3

    def test_problem_keyed_kind_retrieves_every_step_including_t0(self, double_task, never_improves_backend):
        gateway = make_gateway(never_improves_backend)
        store = self._seeded_spy(gateway)
        config = StrategyConfig(kind=KIND_TEXTBFGS_REMO, max_steps=3)
        trace = run_task(double_task, DOUBLE_ZERO, gateway, config, store=store)
        assert store.calls == [(PROBLEM_KEY, 3)] * 3
        assert all(len(s.retrieved_case_ids) == 3 for s in trace.steps)

    def test_problem_vector_is_embedded_once(self, double_task, never_improves_backend):
        gateway = make_gateway(never_improves_backend)
        store = self._seeded_spy(gateway)
        config = StrategyConfig(kind=KIND_TEXTBFGS_REMO, max_steps=3)
        trace = run_task(double_task, DOUBLE_ZERO, gateway, config, store=store)
        assert trace.ledger.embed_calls == 1

    def test_gradient_keyed_kind_never_uses_problem_key(self, double_task, never_improves_backend):
        gateway = make_gateway(never_improves_backend)
        store = self._seeded_spy(gateway)
        config = StrategyConfig(kind=KIND_TEXTBFGS, max_steps=4, t0_query_mode=T0_EXEC_ERROR)
        run_task(double_task, DOUBLE_ZERO, gateway, config, store=store)
        assert store.calls and all(key == GRADIENT_KEY for key, _ in store.calls)

    def test_problem_keyed_kind_never_uses_gradient_key(self, double_task, never_improves_backend):
        gateway = make_gateway(never_improves_backend)
        store = self._seeded_spy(gateway)
        config = StrategyConfig(kind=KIND_TEXTBFGS_REMO, max_steps=4)
        run_task(double_task, DOUBLE_ZERO, gateway, config, store=store)
        assert store.calls and all(key == PROBLEM_KEY for key, _ in store.calls)

    def test_no_cb_ignores_a_supplied_store(self, double_task, never_improves_backend):
        gateway = make_gateway(never_improves_backend)
        store = self._seeded_spy(gateway)
        config = StrategyConfig(kind=KIND_TEXTBFGS_NO_CB, max_steps=2)
        trace = run_task(double_task, DOUBLE_ZERO, gateway, config, store=store)
        assert store.calls == []
        assert store.retrievals == 0
        assert all(s.retrieved_case_ids == () for s in trace.steps)

    def test_empty_store_yields_no_references(self, double_task, never_improves_backend):
        gateway = make_gateway(never_improves_backend)
        store = SpyStore(dim=32)
        config = StrategyConfig(kind=KIND_TEXTBFGS_REMO, max_steps=1)
        trace = run_task(double_task, DOUBLE_ZERO, gateway, config, store=store)
        assert store.calls == []
        assert trace.steps[0].retrieved_case_ids == ()

    def test_top_k_respected(self, double_task, never_improves_backend):
        gateway = make_gateway(never_improves_backend)
        store = self._seeded_spy(gateway)
        config = StrategyConfig(kind=KIND_TEXTBFGS_REMO, max_steps=1, top_k=2)
        trace = run_task(double_task, DOUBLE_ZERO, gateway, config, store=store)
        assert store.calls == [(PROBLEM_KEY, 2)]
        assert len(trace.steps[0].retrieved_case_ids) == 2

    def test_references_reach_the_prompt(self, double_task, never_improves_backend):
        spy = SpyChat(never_improves_backend)
        gateway = make_gateway(spy)
        store = self._seeded_spy(gateway)
        config = StrategyConfig(kind=KIND_TEXTBFGS_REMO, max_steps=1)
        run_task(double_task, DOUBLE_ZERO, gateway, config, store=store)
        assert "Reference pattern 1:" in spy.prompts[0]
        assert "rule for" in spy.prompts[0]


class TestMomentumStrategy:
    def test_momentum_digest_appears_after_first_step(self, double_task):
        scripted = ScriptedChatBackend(
            rules=(
                ScriptRule(text="```python\ndef double(x):\n    return 1\n```", when_contains=("## Diagnosis",)),
            ),
            default="the return value ignores the argument",
            name="momentum-stuck",
        )
        spy = SpyChat(scripted)
        gateway = make_gateway(spy)
        config = StrategyConfig(kind=KIND_TEXTGRAD_MOMENTUM, max_steps=2)
        run_task(double_task, DOUBLE_ZERO, gateway, config)
        # prompts: g1, u1, g2, u2; the second gradient prompt carries history
        assert "Earlier repair attempts" not in spy.prompts[0]
        assert "Earlier repair attempts" in spy.prompts[2]
        assert "the return value ignores the argument" in spy.prompts[2]
        assert "(rejected)" in spy.prompts[2]

    def test_plain_textgrad_never_sees_history(self, double_task):
        scripted = ScriptedChatBackend(
            rules=(
                ScriptRule(text="```python\ndef double(x):\n    return 1\n```", when_contains=("## Diagnosis",)),
            ),
            default="diagnosis text",
            name="plain-stuck",
        )
        spy = SpyChat(scripted)
        gateway = make_gateway(spy)
        config = StrategyConfig(kind=KIND_TEXTGRAD, max_steps=2)
        run_task(double_task, DOUBLE_ZERO, gateway, config)
        assert all("Earlier repair attempts" not in p for p in spy.prompts)

    def test_momentum_window_limits_history(self, double_task):
        scripted = ScriptedChatBackend(
            rules=(
                ScriptRule(text="```python\ndef double(x):\n    return 1\n```", when_contains=("## Diagnosis",)),
            ),
            default="same diagnosis every time",
            name="window-stuck",
        )
        spy = SpyChat(scripted)
        gateway = make_gateway(spy)
        config = StrategyConfig(kind=KIND_TEXTGRAD_MOMENTUM, max_steps=4, momentum_window=2)
        run_task(double_task, DOUBLE_ZERO, gateway, config)
        final_gradient_prompt = spy.prompts[6]
        assert final_gradient_prompt.count("- revision") == 2
