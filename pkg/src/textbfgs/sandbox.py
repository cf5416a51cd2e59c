"""Candidate evaluation in an isolated child process.

The engine writes a job file into a per-evaluation scratch directory,
spawns a runner process (see docs/sandbox_protocol.md), and turns the
verdict stream into an ExecutionReport. Per-test timeouts are the runner's
job; the engine adds an outer wall-clock kill so even a hung runner cannot
stall an evaluation.

No syscall-level sandboxing: candidates here are benchmark-sized arithmetic
and string code. Isolation is process+scratch-dir, which is enough to keep
engine state out of reach.
"""

from __future__ import annotations

import json
import shutil
import subprocess
import sys
import tempfile
import time
from dataclasses import dataclass
from pathlib import Path

from .domain import ExecutionReport, TestResult, TestStatus
from .errors import ProtocolViolation, SandboxSpawnFailure

SUITE_BASE = "base"
SUITE_BASE_PLUS = "base+plus"

DEFAULT_GRACE = 10.0


@dataclass(frozen=True)
class TaskSpec:
    """One benchmark task: problem statement plus its base and plus suites."""

    task_id: str
    prompt: str
    entry_point: str
    base_tests: tuple[str, ...]
    plus_tests: tuple[str, ...] = ()
    per_test_timeout: float = 5.0
    memory_limit: int | None = None

    def __post_init__(self) -> None:
        if not self.base_tests:
            raise ValueError("a task needs at least one base test")
        if not self.entry_point:
            raise ValueError("a task needs an entry point")


def default_runner_cmd() -> list[str]:
    return [sys.executable, "-m", "textbfgs.runner"]


def evaluate(
    code: str,
    task: TaskSpec,
    suites: str = SUITE_BASE,
    runner_cmd: list[str] | None = None,
    grace: float = DEFAULT_GRACE,
) -> ExecutionReport:
    """Run the task's tests against `code` in one runner process.

    `suites` selects "base" or "base+plus". Every test yields exactly one
    verdict; tests the runner never reported (because it died) come back as
    status error, so the report is well-formed for any candidate behavior.
    """
    if suites not in (SUITE_BASE, SUITE_BASE_PLUS):
        raise ValueError(f"unknown suite selection {suites!r}")
    tests = [{"test_id": f"base:{i}", "expression": expr} for i, expr in enumerate(task.base_tests)]
    if suites == SUITE_BASE_PLUS:
        tests += [{"test_id": f"plus:{i}", "expression": expr} for i, expr in enumerate(task.plus_tests)]
    expression_by_id = {t["test_id"]: t["expression"] for t in tests}

    job = {
        "code": code,
        "entry_point": task.entry_point,
        "tests": tests,
        "per_test_timeout": task.per_test_timeout,
    }
    total_timeout = task.per_test_timeout * len(tests) + grace
    cmd = list(runner_cmd or default_runner_cmd())

    scratch = Path(tempfile.mkdtemp(prefix="textbfgs-eval-"))
    started = time.monotonic()
    try:
        job_path = scratch / "job.json"
        job_path.write_text(json.dumps(job), encoding="utf-8")
        try:
            proc = subprocess.run(
                cmd + [str(job_path)],
                cwd=scratch,
                stdout=subprocess.PIPE,
                stderr=subprocess.PIPE,
                timeout=total_timeout,
                text=True,
                errors="replace",
                preexec_fn=_limits_hook(task.memory_limit),
            )
            stdout = proc.stdout or ""
            exit_code = proc.returncode
        except subprocess.TimeoutExpired as exc:
            stdout = _decode(exc.stdout)
            exit_code = None
        except OSError as exc:
            raise SandboxSpawnFailure(f"cannot spawn runner {cmd!r}: {exc}") from exc
    finally:
        wall_time = time.monotonic() - started
        shutil.rmtree(scratch, ignore_errors=True)

    verdicts, summary_seen = _parse_stream(stdout, expression_by_id)
    if summary_seen and exit_code not in (0, None):
        raise ProtocolViolation(f"runner completed the protocol but exited {exit_code}")

    results: list[TestResult] = []
    for test in tests:
        test_id = test["test_id"]
        if test_id in verdicts:
            results.append(verdicts[test_id])
        else:
            reason = (
                "evaluation killed by the engine watchdog before this test reported"
                if exit_code is None
                else "runner terminated before emitting a verdict for this test"
            )
            results.append(
                TestResult(
                    test_id=test_id,
                    status=TestStatus.ERROR,
                    captured_output=reason,
                    expression=test["expression"],
                )
            )
    return ExecutionReport.from_results(results, wall_time=wall_time)


def _limits_hook(memory_limit: int | None):
    if memory_limit is None:
        return None

    def apply_limits() -> None:
        import resource

        resource.setrlimit(resource.RLIMIT_AS, (memory_limit, memory_limit))

    return apply_limits


def _decode(raw) -> str:
    if raw is None:
        return ""
    if isinstance(raw, bytes):
        return raw.decode("utf-8", errors="replace")
    return raw


_VALID_STATUSES = {s.value for s in TestStatus}


def _parse_stream(stdout: str, expression_by_id: dict[str, str]) -> tuple[dict[str, TestResult], bool]:
    verdicts: dict[str, TestResult] = {}
    summary_seen = False
    for line in stdout.splitlines():
        if not line.strip():
            continue
        try:
            record = json.loads(line)
        except json.JSONDecodeError as exc:
            raise ProtocolViolation(f"undecodable runner output line: {line[:200]!r}") from exc
        if not isinstance(record, dict):
            raise ProtocolViolation(f"runner line is not an object: {line[:200]!r}")
        if "summary" in record:
            summary_seen = True
            continue
        if "error" in record:
            raise ProtocolViolation(f"runner rejected the job: {record['error']}")
        for name in ("test_id", "status", "captured_output", "duration"):
            if name not in record:
                raise ProtocolViolation(f"verdict line missing field {name!r}: {line[:200]!r}")
        test_id = record["test_id"]
        if test_id not in expression_by_id:
            raise ProtocolViolation(f"verdict for unknown test {test_id!r}")
        if test_id in verdicts:
            raise ProtocolViolation(f"duplicate verdict for test {test_id!r}")
        if record["status"] not in _VALID_STATUSES:
            raise ProtocolViolation(f"unknown status {record['status']!r} for test {test_id!r}")
        verdicts[test_id] = TestResult(
            test_id=test_id,
            status=TestStatus(record["status"]),
            captured_output=str(record["captured_output"]),
            duration=float(record["duration"]),
            expression=expression_by_id[test_id],
        )
    return verdicts, summary_seen


def truncate_middle(text: str, limit: int) -> str:
    """Head+tail truncation that keeps the result within `limit` characters."""
    if len(text) <= limit:
        return text
    marker = f"\n...[{len(text) - limit} characters omitted]...\n"
    keep = limit - len(marker)
    if keep <= 0:
        return text[:limit]
    head = keep - keep // 2
    tail = keep // 2
    return text[:head] + marker + (text[-tail:] if tail else "")


def summarize_failures(report: ExecutionReport, budget: int = 4096, per_test_budget: int = 1024) -> str:
    """Deterministic human-readable failure summary, failing tests first.

    Each test's captured output is truncated to `per_test_budget` with
    head+tail preservation; the whole summary never exceeds `budget`,
    dropping middle entries before head or tail ones.
    """
    results = list(report.test_results)
    failing = [r for r in results if r.status is not TestStatus.PASS]
    if not failing:
        return f"all {len(results)} tests passed"

    blocks = []
    for r in failing:
        lines = [f"[{r.status.value}] {r.test_id}: {r.expression}".rstrip()]
        output = r.captured_output.strip()
        if output:
            lines.append(truncate_middle(output, per_test_budget))
        blocks.append("\n".join(lines))
    header = f"{len(failing)} of {len(results)} tests failed."

    summary = header + "\n" + "\n\n".join(blocks)
    if len(summary) <= budget:
        return summary

    # keep blocks from the head and tail of the failing list until the
    # budget runs out, eliding the middle
    for omitted in range(1, len(blocks)):
        kept = len(blocks) - omitted
        head_count = kept - kept // 2
        tail_count = kept // 2
        marker = f"...[{omitted} failing tests omitted]..."
        parts = blocks[:head_count] + [marker] + (blocks[-tail_count:] if tail_count else [])
        summary = header + "\n" + "\n\n".join(parts)
        if len(summary) <= budget:
            return summary
    return truncate_middle(header + "\n" + blocks[0], budget)
