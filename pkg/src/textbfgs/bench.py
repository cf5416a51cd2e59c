"""Benchmark harness: dataset ingestion, hard-subset filtering, case-base
bootstrapping, and the strategy-by-task experiment matrix.

The harness is deliberately sequential by default: retention mutates the
case store, so task order is part of the experiment definition. Reports are
plain JSON with one volatile field (generated_at); everything else is
byte-reproducible under the replay backend.
"""

from __future__ import annotations

import dataclasses
import hashlib
import json
import logging
import re
from dataclasses import dataclass
from pathlib import Path

from .casebase import SOURCE_BOOTSTRAP, CaseStore
from .errors import IoFailure, MalformedResponse, SchemaViolation, TextBfgsError
from .gateway import Gateway
from .optimizer import (
    KIND_TEXTBFGS_NO_CB,
    OptimizationTrace,
    StrategyConfig,
    run_task,
    trace_to_dict,
    utc_now_iso,
)
from .prompting import PromptBuilder, extract_code_block
from .sandbox import DEFAULT_GRACE, SUITE_BASE, SUITE_BASE_PLUS, TaskSpec, evaluate
from .domain import TestStatus

log = logging.getLogger(__name__)

MANIFEST_SCHEMA = "textbfgs-filter"
MANIFEST_VERSION = 1
REPORT_SCHEMA = "textbfgs-bench-report"
REPORT_VERSION = 1

DEFAULT_BOOTSTRAP_EPOCHS = 3


# --- dataset ----------------------------------------------------------------

def load_dataset(path: str | Path) -> list[TaskSpec]:
    """Read line-delimited task records into TaskSpecs.

    Record shape: {task_id, prompt, entry_point, base_tests[], plus_tests[]}
    plus an optional per_test_timeout. Blank lines are skipped; anything
    malformed raises SchemaViolation naming the record index and field.
    """
    path = Path(path)
    if not path.exists():
        raise IoFailure(f"no dataset at {path}")
    tasks: list[TaskSpec] = []
    seen_ids: set[str] = set()
    for index, line in enumerate(path.read_text(encoding="utf-8").splitlines()):
        if not line.strip():
            continue
        try:
            record = json.loads(line)
        except json.JSONDecodeError as exc:
            raise SchemaViolation(f"record {index}: not valid JSON ({exc})") from exc
        task = _task_from_record(record, index)
        if task.task_id in seen_ids:
            raise SchemaViolation(f"record {index}: duplicate task_id {task.task_id!r}")
        seen_ids.add(task.task_id)
        tasks.append(task)
    return tasks


def _task_from_record(record: object, index: int) -> TaskSpec:
    if not isinstance(record, dict):
        raise SchemaViolation(f"record {index}: expected an object")
    for name in ("task_id", "prompt", "entry_point"):
        value = record.get(name)
        if not isinstance(value, str) or not value:
            raise SchemaViolation(f"record {index}: missing or empty field {name!r}")
    base_tests = record.get("base_tests")
    if not isinstance(base_tests, list) or not base_tests or not all(
        isinstance(t, str) and t for t in base_tests
    ):
        raise SchemaViolation(f"record {index}: field 'base_tests' must be a non-empty list of strings")
    plus_tests = record.get("plus_tests", [])
    if not isinstance(plus_tests, list) or not all(isinstance(t, str) and t for t in plus_tests):
        raise SchemaViolation(f"record {index}: field 'plus_tests' must be a list of strings")
    timeout = record.get("per_test_timeout", 5.0)
    if not isinstance(timeout, (int, float)) or timeout <= 0:
        raise SchemaViolation(f"record {index}: field 'per_test_timeout' must be a positive number")
    return TaskSpec(
        task_id=record["task_id"],
        prompt=record["prompt"],
        entry_point=record["entry_point"],
        base_tests=tuple(base_tests),
        plus_tests=tuple(plus_tests),
        per_test_timeout=float(timeout),
    )


# --- hard-subset filtering ---------------------------------------------------

@dataclass(frozen=True)
class FilterEntry:
    task_id: str
    base_score: float
    x0: str = ""       # the sampled initial solution, frozen for kept tasks
    error: str = ""


@dataclass(frozen=True)
class FilterManifest:
    """Frozen record of one filtering pass: kept, dropped, and errored tasks."""

    kept: tuple[FilterEntry, ...]
    dropped: tuple[FilterEntry, ...]
    errors: tuple[FilterEntry, ...]

    def kept_ids(self) -> tuple[str, ...]:
        return tuple(e.task_id for e in self.kept)

    def x0_for(self, task_id: str) -> str | None:
        for entry in self.kept:
            if entry.task_id == task_id:
                return entry.x0
        return None

    def to_dict(self) -> dict:
        return {
            "schema": MANIFEST_SCHEMA,
            "version": MANIFEST_VERSION,
            "kept": [
                {"task_id": e.task_id, "base_score": e.base_score, "x0": e.x0} for e in self.kept
            ],
            "dropped": [
                {"task_id": e.task_id, "base_score": e.base_score} for e in self.dropped
            ],
            "errors": [
                {"task_id": e.task_id, "error": e.error} for e in self.errors
            ],
        }

    def save(self, path: str | Path) -> None:
        Path(path).parent.mkdir(parents=True, exist_ok=True)
        Path(path).write_text(json.dumps(self.to_dict(), indent=2, sort_keys=True) + "\n", "utf-8")


def load_manifest(path: str | Path) -> FilterManifest:
    path = Path(path)
    if not path.exists():
        raise IoFailure(f"no filter manifest at {path}")
    try:
        data = json.loads(path.read_text(encoding="utf-8"))
    except json.JSONDecodeError as exc:
        raise SchemaViolation(f"{path}: not valid JSON ({exc})") from exc
    if not isinstance(data, dict) or data.get("schema") != MANIFEST_SCHEMA:
        raise SchemaViolation(f"{path}: not a {MANIFEST_SCHEMA} file")
    try:
        return FilterManifest(
            kept=tuple(
                FilterEntry(e["task_id"], float(e["base_score"]), e.get("x0", ""))
                for e in data["kept"]
            ),
            dropped=tuple(
                FilterEntry(e["task_id"], float(e["base_score"])) for e in data["dropped"]
            ),
            errors=tuple(
                FilterEntry(e["task_id"], 0.0, error=e.get("error", "")) for e in data["errors"]
            ),
        )
    except (KeyError, TypeError, ValueError) as exc:
        raise SchemaViolation(f"{path}: malformed manifest ({exc})") from exc


def initial_candidate(task: TaskSpec, gateway: Gateway, builder: PromptBuilder) -> str:
    response = gateway.chat(builder.build_initial_prompt(task))
    code = extract_code_block(response.text)
    if not code:
        raise MalformedResponse(["code block"])
    return code


def filter_hard(
    tasks: list[TaskSpec],
    gateway: Gateway,
    builder: PromptBuilder | None = None,
    runner_cmd: list[str] | None = None,
    grace: float = DEFAULT_GRACE,
) -> FilterManifest:
    """Keep only tasks whose single sampled solution passes zero base tests.

    A partially-passing sample drops the task (the rule is strict score 0).
    The kept entries freeze the sampled solution so later stages start from
    the exact candidate that failed.
    """
    builder = builder or PromptBuilder()
    kept: list[FilterEntry] = []
    dropped: list[FilterEntry] = []
    errors: list[FilterEntry] = []
    for task in tasks:
        try:
            x0 = initial_candidate(task, gateway, builder)
            report = evaluate(x0, task, suites=SUITE_BASE, runner_cmd=runner_cmd, grace=grace)
        except TextBfgsError as exc:
            log.warning("filter: task %s errored: %s", task.task_id, exc)
            errors.append(FilterEntry(task.task_id, 0.0, error=f"{type(exc).__name__}: {exc}"))
            continue
        if report.base_score == 0.0:
            kept.append(FilterEntry(task.task_id, report.base_score, x0=x0))
        else:
            dropped.append(FilterEntry(task.task_id, report.base_score))
    return FilterManifest(kept=tuple(kept), dropped=tuple(dropped), errors=tuple(errors))


def hard_subset(tasks: list[TaskSpec], manifest: FilterManifest) -> list[TaskSpec]:
    """The tasks a manifest kept, in dataset order."""
    kept = set(manifest.kept_ids())
    return [t for t in tasks if t.task_id in kept]


# --- bootstrapping -----------------------------------------------------------

def bootstrap_case_base(
    tasks: list[TaskSpec],
    gateway: Gateway,
    store: CaseStore,
    epochs: int = DEFAULT_BOOTSTRAP_EPOCHS,
    config: StrategyConfig | None = None,
    manifest: FilterManifest | None = None,
    builder: PromptBuilder | None = None,
    runner_cmd: list[str] | None = None,
    grace: float = DEFAULT_GRACE,
    domain_tag: str = "",
    now: str | None = None,
) -> int:
    """Populate a store by running the store-less strategy with retention
    redirected into it.

    Makes `epochs` passes over the task list; every accepted step adds one
    bootstrap-sourced case. Per-task failures are logged and skipped so one
    bad task cannot sink the pass. Returns how many cases were added.
    """
    if epochs < 0:
        raise ValueError("epochs must be non-negative")
    base_config = config or StrategyConfig(kind=KIND_TEXTBFGS_NO_CB)
    if base_config.kind != KIND_TEXTBFGS_NO_CB:
        base_config = dataclasses.replace(base_config, kind=KIND_TEXTBFGS_NO_CB)
    builder = builder or PromptBuilder()
    before = len(store)
    for epoch in range(epochs):
        for task in tasks:
            try:
                x0 = manifest.x0_for(task.task_id) if manifest else None
                if not x0:
                    x0 = initial_candidate(task, gateway, builder)
                run_task(
                    task,
                    x0,
                    gateway,
                    config=base_config,
                    retention_store=store,
                    retention_source=SOURCE_BOOTSTRAP,
                    builder=builder,
                    runner_cmd=runner_cmd,
                    grace=grace,
                    domain_tag=domain_tag,
                    now=now,
                )
            except TextBfgsError as exc:
                log.warning("bootstrap epoch %d: task %s failed: %s", epoch, task.task_id, exc)
    return len(store) - before


# --- the bench matrix --------------------------------------------------------

@dataclass(frozen=True)
class TaskCell:
    """One (strategy, task) outcome with its cost accounting."""

    task_id: str
    solved: bool
    base_pass: bool
    plus_pass: bool
    steps_used: int
    stopped_reason: str
    chat_calls: int
    embed_calls: int
    total_tokens: int
    tokens_per_call: float
    retained_cases: int
    error: str | None = None


def _mean(values: list[float]) -> float:
    return sum(values) / len(values) if values else 0.0


@dataclass(frozen=True)
class StrategyRow:
    """All task cells for one strategy plus the averaged metric columns.

    Each metric is averaged independently over tasks, so the row-level
    identity tokens_per_task = calls_per_task x tokens_per_call holds per
    task but only approximately on the aggregate row.
    """

    kind: str
    case_base_id: str
    cells: tuple[TaskCell, ...]

    @property
    def base_pass_rate(self) -> float:
        return _mean([1.0 if c.base_pass else 0.0 for c in self.cells])

    @property
    def plus_pass_rate(self) -> float:
        return _mean([1.0 if c.plus_pass else 0.0 for c in self.cells])

    @property
    def calls_per_task(self) -> float:
        return _mean([float(c.chat_calls) for c in self.cells])

    @property
    def tokens_per_call(self) -> float:
        return _mean([c.tokens_per_call for c in self.cells])

    @property
    def tokens_per_task(self) -> float:
        return _mean([float(c.total_tokens) for c in self.cells])

    @property
    def embed_calls_per_task(self) -> float:
        return _mean([float(c.embed_calls) for c in self.cells])


@dataclass(frozen=True)
class BenchReport:
    generated_at: str
    config_hash: str
    template_version: str
    chat_backend: str
    embed_backend: str
    rows: tuple[StrategyRow, ...]


def _cell_from_trace(trace: OptimizationTrace, plus_pass: bool) -> TaskCell:
    return TaskCell(
        task_id=trace.task_id,
        solved=trace.solved,
        base_pass=trace.best_report.base_score == 1.0,
        plus_pass=plus_pass,
        steps_used=trace.steps_used,
        stopped_reason=trace.stopped_reason,
        chat_calls=trace.ledger.chat_calls,
        embed_calls=trace.ledger.embed_calls,
        total_tokens=trace.ledger.total_tokens,
        tokens_per_call=trace.ledger.tokens_per_call,
        retained_cases=len(trace.retained_case_ids),
        error=None,
    )


def _error_cell(task_id: str, exc: TextBfgsError) -> TaskCell:
    return TaskCell(
        task_id=task_id,
        solved=False,
        base_pass=False,
        plus_pass=False,
        steps_used=0,
        stopped_reason="error",
        chat_calls=0,
        embed_calls=0,
        total_tokens=0,
        tokens_per_call=0.0,
        retained_cases=0,
        error=f"{type(exc).__name__}: {exc}",
    )


def _safe_name(task_id: str) -> str:
    return re.sub(r"[^A-Za-z0-9._-]", "_", task_id)


def config_fingerprint(
    strategies: list[StrategyConfig],
    assignment_ids: dict[str, str],
    template_version: str,
    task_ids: list[str],
) -> str:
    payload = json.dumps(
        {
            "strategies": [c.to_dict() for c in strategies],
            "assignment": assignment_ids,
            "template_version": template_version,
            "tasks": task_ids,
        },
        sort_keys=True,
    )
    return hashlib.sha256(payload.encode("utf-8")).hexdigest()[:12]


def run_bench(
    tasks: list[TaskSpec],
    strategies: list[StrategyConfig],
    assignment: dict[str, CaseStore | None],
    gateway: Gateway,
    out_dir: str | Path | None = None,
    manifest: FilterManifest | None = None,
    case_base_ids: dict[str, str] | None = None,
    builder: PromptBuilder | None = None,
    runner_cmd: list[str] | None = None,
    grace: float = DEFAULT_GRACE,
    domain_tag: str = "",
    now: str | None = None,
) -> BenchReport:
    """Run every (task, strategy) cell and aggregate the report.

    `assignment` maps each strategy kind to the case store it may touch
    (or None); this is where a cross-domain swap is declared. Strategies
    sharing a store object will see each other's retentions, so callers
    wanting isolated rows pass per-strategy snapshots. A failing cell is
    recorded as an unsolved task with zero cost; it never aborts the bench.
    """
    builder = builder or PromptBuilder()
    ids = dict(case_base_ids or {})
    for config in strategies:
        store = assignment.get(config.kind)
        ids.setdefault(config.kind, _default_store_id(store))

    out = Path(out_dir) if out_dir is not None else None
    rows: list[StrategyRow] = []
    for config in strategies:
        store = assignment.get(config.kind)
        cells: list[TaskCell] = []
        for task in tasks:
            try:
                x0 = manifest.x0_for(task.task_id) if manifest else None
                if not x0:
                    x0 = initial_candidate(task, gateway, builder)
                trace = run_task(
                    task,
                    x0,
                    gateway,
                    config=config,
                    store=store,
                    builder=builder,
                    runner_cmd=runner_cmd,
                    grace=grace,
                    domain_tag=domain_tag,
                    now=now,
                )
                cells.append(_cell_from_trace(trace, _plus_pass(trace, task, runner_cmd, grace)))
                if out is not None:
                    trace_path = out / "traces" / config.kind / f"{_safe_name(task.task_id)}.json"
                    trace_path.parent.mkdir(parents=True, exist_ok=True)
                    trace_path.write_text(
                        json.dumps(
                            trace_to_dict(trace, template_version=builder.template_version),
                            indent=2,
                            sort_keys=True,
                        )
                        + "\n",
                        "utf-8",
                    )
            except TextBfgsError as exc:
                log.warning("bench: %s on %s failed: %s", config.kind, task.task_id, exc)
                cells.append(_error_cell(task.task_id, exc))
        rows.append(StrategyRow(kind=config.kind, case_base_id=ids[config.kind], cells=tuple(cells)))

    report = BenchReport(
        generated_at=now or utc_now_iso(),
        config_hash=config_fingerprint(
            strategies, ids, builder.template_version, [t.task_id for t in tasks]
        ),
        template_version=builder.template_version,
        chat_backend=gateway.chat_backend.backend_id,
        embed_backend=gateway.embed_backend.backend_id,
        rows=tuple(rows),
    )
    if out is not None:
        save_report(report, out / "report.json")
        (out / "report.txt").write_text(format_table(report) + "\n", "utf-8")
    return report


def _default_store_id(store: CaseStore | None) -> str:
    if store is None:
        return "none"
    if store.path is not None:
        return store.path.name
    return f"in-memory-{len(store)}-cases"


def _plus_pass(trace: OptimizationTrace, task: TaskSpec, runner_cmd, grace) -> bool:
    """Best candidate against base+plus; an empty plus suite defers to base."""
    if trace.best_report.base_score != 1.0:
        return False
    if not task.plus_tests:
        return True
    report = evaluate(
        trace.best_candidate.text, task, suites=SUITE_BASE_PLUS, runner_cmd=runner_cmd, grace=grace
    )
    return all(r.status is TestStatus.PASS for r in report.test_results)


# --- report serialization ----------------------------------------------------

def report_to_dict(report: BenchReport) -> dict:
    return {
        "schema": REPORT_SCHEMA,
        "version": REPORT_VERSION,
        "generated_at": report.generated_at,
        "config_hash": report.config_hash,
        "template_version": report.template_version,
        "chat_backend": report.chat_backend,
        "embed_backend": report.embed_backend,
        "rows": [
            {
                "strategy": row.kind,
                "case_base": row.case_base_id,
                "metrics": {
                    "base_pass_rate": row.base_pass_rate,
                    "plus_pass_rate": row.plus_pass_rate,
                    "calls_per_task": row.calls_per_task,
                    "tokens_per_call": row.tokens_per_call,
                    "tokens_per_task": row.tokens_per_task,
                    "embed_calls_per_task": row.embed_calls_per_task,
                },
                "tasks": [
                    {
                        "task_id": c.task_id,
                        "solved": c.solved,
                        "base_pass": c.base_pass,
                        "plus_pass": c.plus_pass,
                        "steps_used": c.steps_used,
                        "stopped_reason": c.stopped_reason,
                        "chat_calls": c.chat_calls,
                        "embed_calls": c.embed_calls,
                        "total_tokens": c.total_tokens,
                        "tokens_per_call": c.tokens_per_call,
                        "retained_cases": c.retained_cases,
                        "error": c.error,
                    }
                    for c in row.cells
                ],
            }
            for row in report.rows
        ],
    }


def save_report(report: BenchReport, path: str | Path) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(json.dumps(report_to_dict(report), indent=2, sort_keys=True) + "\n", "utf-8")


def canonical_report_bytes(report_dict: dict) -> bytes:
    """Report serialization with the volatile timestamp removed, for
    byte-level determinism comparisons."""
    stripped = dict(report_dict)
    stripped.pop("generated_at", None)
    return json.dumps(stripped, indent=2, sort_keys=True).encode("utf-8")


def format_table(report: BenchReport) -> str:
    """Human-readable metrics table, one row per strategy."""
    headers = ["Strategy", "Case Base", "Base Pass", "Plus Pass", "Calls/Task", "Tokens/Call", "Tokens/Task"]
    rows = [
        [
            row.kind,
            row.case_base_id,
            f"{row.base_pass_rate * 100:.2f}%",
            f"{row.plus_pass_rate * 100:.2f}%",
            f"{row.calls_per_task:.2f}",
            f"{row.tokens_per_call:.2f}",
            f"{row.tokens_per_task:.2f}",
        ]
        for row in report.rows
    ]
    widths = [max(len(h), *(len(r[i]) for r in rows)) if rows else len(h) for i, h in enumerate(headers)]
    lines = [
        "  ".join(h.ljust(widths[i]) for i, h in enumerate(headers)),
        "  ".join("-" * widths[i] for i in range(len(headers))),
    ]
    for r in rows:
        lines.append("  ".join(r[i].ljust(widths[i]) for i in range(len(headers))))
    return "\n".join(lines)
