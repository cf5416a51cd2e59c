"""Test-runner shim: executes one job file and streams verdict lines.

Invoked as ``python -m textbfgs.runner <job-file>``. Speaks the protocol in
docs/sandbox_protocol.md: one JSON verdict per test in job order, then a
summary line, exit 0 iff the protocol completed.

Each test runs against a freshly executed copy of the candidate module so
no state leaks between tests, under a signal-based deadline so a hard loop
cannot stall later tests. The engine's outer kill remains the backstop for
anything a signal cannot interrupt.
"""

from __future__ import annotations

import io
import json
import os
import signal
import sys
import time
import traceback
from contextlib import redirect_stderr, redirect_stdout

OUTPUT_CAP = 65536

STATUS_PASS = "pass"
STATUS_FAIL = "fail"
STATUS_ERROR = "error"
STATUS_TIMEOUT = "timeout"


class _Deadline(BaseException):
    """Raised by the alarm handler; BaseException so `except Exception` in
    candidate code cannot swallow it."""


def _on_alarm(signum, frame):
    raise _Deadline()


def _cap(text: str) -> str:
    if len(text) <= OUTPUT_CAP:
        return text
    return text[:OUTPUT_CAP] + f"\n...[{len(text) - OUTPUT_CAP} characters truncated]"


def _emit(out, record: dict) -> None:
    out.write(json.dumps(record, ensure_ascii=False, sort_keys=True) + "\n")
    out.flush()


def _verdict(test_id: str, status: str, output: str, started: float) -> dict:
    return {
        "test_id": test_id,
        "status": status,
        "captured_output": _cap(output),
        "duration": time.monotonic() - started,
    }


def _run_one(test_id: str, expression: str, code_obj, entry_point: str, timeout: float) -> dict:
    started = time.monotonic()
    stdout_buf = io.StringIO()
    stderr_buf = io.StringIO()
    status = STATUS_ERROR
    note = ""
    namespace: dict = {"__name__": "__candidate__"}
    signal.signal(signal.SIGALRM, _on_alarm)
    # a small repeat interval re-raises if candidate code swallows the first
    signal.setitimer(signal.ITIMER_REAL, timeout, 0.1)
    try:
        with redirect_stdout(stdout_buf), redirect_stderr(stderr_buf):
            try:
                exec(code_obj, namespace)
                if entry_point and entry_point not in namespace:
                    raise NameError(f"entry point {entry_point!r} is not defined by the candidate")
                exec(compile(expression, "<test>", "exec"), namespace)
                status = STATUS_PASS
            except AssertionError:
                status = STATUS_FAIL
                note = traceback.format_exc(limit=4)
            except _Deadline:
                status = STATUS_TIMEOUT
                note = f"test exceeded the {timeout:g}s deadline"
            except SystemExit as exc:
                status = STATUS_ERROR
                note = f"candidate requested process exit (code={exc.code})"
            except BaseException:
                status = STATUS_ERROR
                note = traceback.format_exc(limit=8)
    finally:
        signal.setitimer(signal.ITIMER_REAL, 0, 0)
        signal.signal(signal.SIGALRM, signal.SIG_DFL)
    output = stdout_buf.getvalue() + stderr_buf.getvalue()
    if note:
        output = output + ("\n" if output and not output.endswith("\n") else "") + note
    return _verdict(test_id, status, output, started)


def run_job(job: dict, out) -> int:
    """Emit one verdict per test in order, then the summary; returns test count."""
    code = job["code"]
    entry_point = job["entry_point"]
    tests = job["tests"]
    timeout = float(job["per_test_timeout"])

    try:
        code_obj = compile(code, "<candidate>", "exec")
        compile_error = None
    except SyntaxError:
        code_obj = None
        compile_error = traceback.format_exc(limit=0)

    completed = 0
    for test in tests:
        test_id = test["test_id"]
        if code_obj is None:
            started = time.monotonic()
            _emit(out, _verdict(test_id, STATUS_ERROR, f"candidate does not compile:\n{compile_error}", started))
        else:
            _emit(out, _run_one(test_id, test["expression"], code_obj, entry_point, timeout))
        completed += 1
    _emit(out, {"summary": {"total": len(tests), "completed": completed}})
    return completed


def main(argv: list[str] | None = None) -> int:
    argv = sys.argv[1:] if argv is None else argv
    out = sys.stdout
    if len(argv) != 1:
        _emit(out, {"error": "usage: runner <job-file>"})
        return 2
    try:
        with open(argv[0], "r", encoding="utf-8") as fh:
            job = json.load(fh)
        for name in ("code", "entry_point", "tests", "per_test_timeout"):
            if name not in job:
                raise KeyError(name)
    except (OSError, json.JSONDecodeError, KeyError) as exc:
        _emit(out, {"error": f"malformed job file: {exc!r}"})
        return 2
    run_job(job, out)
    out.flush()
    # hard exit dodges shutdown hangs from candidate-spawned non-daemon threads
    os._exit(0)


if __name__ == "__main__":
    sys.exit(main())
