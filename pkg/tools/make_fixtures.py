#!/usr/bin/env python3
"""Regenerate the recorded replay fixtures under tests/fixtures/.

Run after an intentional change to prompts, templates, or the strategy
loop, then commit the refreshed files:

    python3 tools/make_fixtures.py

The flows being recorded are defined once in tests/replay_defs.py and
shared with the acceptance tests. After recording, this script replays
everything back and fails loudly if the fixtures do not reproduce the
recorded behavior bit for bit.
"""

import sys
from pathlib import Path

ROOT = Path(__file__).resolve().parent.parent
sys.path.insert(0, str(ROOT / "tests"))

from textbfgs.bench import canonical_report_bytes, load_dataset, report_to_dict, run_bench
from textbfgs.gateway import Gateway, RecordingChatBackend, ReplayChatBackend
from textbfgs.optimizer import KIND_TEXTBFGS, KIND_TEXTGRAD, StrategyConfig, run_task

import replay_defs as defs


def record_five_step_runs() -> None:
    defs.FIVE_STEP_FIXTURE.unlink(missing_ok=True)
    recorder = RecordingChatBackend(defs.five_step_backend(), defs.FIVE_STEP_FIXTURE)
    gateway = Gateway(recorder, defs.embedder())
    for kind in (KIND_TEXTGRAD, KIND_TEXTBFGS):
        trace = run_task(
            defs.FIVE_STEP_TASK,
            defs.FIVE_STEP_X0,
            gateway,
            config=StrategyConfig(kind=kind, max_steps=5),
            now=defs.NOW,
        )
        assert trace.stopped_reason == "budget_exhausted", trace.stopped_reason
        assert trace.steps_used == 5
    lines = [l for l in defs.FIVE_STEP_FIXTURE.read_text().splitlines() if l.strip()]
    print(f"recorded {defs.FIVE_STEP_FIXTURE.name}: {len(lines)} unique responses")


def verify_five_step_replay() -> None:
    gateway = Gateway(ReplayChatBackend(defs.FIVE_STEP_FIXTURE), defs.embedder())
    expected = {KIND_TEXTGRAD: 10, KIND_TEXTBFGS: 5}
    for kind, calls in expected.items():
        trace = run_task(
            defs.FIVE_STEP_TASK,
            defs.FIVE_STEP_X0,
            gateway,
            config=StrategyConfig(kind=kind, max_steps=5),
            now=defs.NOW,
        )
        assert trace.ledger.chat_calls == calls, (kind, trace.ledger.chat_calls)
    print("verified replay_5step: textgrad=10 calls, textbfgs=5 calls")


def bench_once(gateway: Gateway):
    return run_bench(
        load_dataset(defs.DATASET),
        defs.bench_strategies(),
        defs.bench_assignment(),
        gateway,
        case_base_ids=defs.BENCH_CASE_BASE_IDS,
        now=defs.NOW,
    )


def record_bench() -> None:
    defs.write_seed_stores()
    print(f"wrote seed stores: {defs.STORE_A.name}, {defs.STORE_B.name}")

    defs.BENCH_FIXTURE.unlink(missing_ok=True)
    recorder = RecordingChatBackend(defs.bench_backend(), defs.BENCH_FIXTURE)
    bench_once(Gateway(recorder, defs.embedder()))
    lines = [l for l in defs.BENCH_FIXTURE.read_text().splitlines() if l.strip()]
    print(f"recorded {defs.BENCH_FIXTURE.name}: {len(lines)} unique responses")

    # the golden report must describe a replay run: its backend id (and with
    # it the config hash) names the replay fixture, not the recording chain
    report = bench_once(Gateway(ReplayChatBackend(defs.BENCH_FIXTURE), defs.embedder()))
    golden = canonical_report_bytes(report_to_dict(report))
    defs.GOLDEN_REPORT.write_bytes(golden)
    print(f"wrote {defs.GOLDEN_REPORT.name}: {len(golden)} bytes")

    solved = [
        (row.kind, sum(1 for c in row.cells if c.solved), len(row.cells))
        for row in report.rows
    ]
    for kind, n, total in solved:
        print(f"  {kind}: {n}/{total} tasks solved")
        assert n == total, f"{kind} must solve every task in the golden run"


def verify_bench_replay() -> None:
    golden = defs.GOLDEN_REPORT.read_bytes()
    for attempt in range(2):
        report = bench_once(Gateway(ReplayChatBackend(defs.BENCH_FIXTURE), defs.embedder()))
        got = canonical_report_bytes(report_to_dict(report))
        assert got == golden, f"replay {attempt} diverged from the golden report"
    print("verified bench replay: 2 runs bit-identical to the golden report")


def main() -> None:
    record_five_step_runs()
    verify_five_step_replay()
    record_bench()
    verify_bench_replay()
    print("all fixtures regenerated")


if __name__ == "__main__":
    main()
