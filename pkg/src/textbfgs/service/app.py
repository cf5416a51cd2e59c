"""HTTP face of the engine.

One FastAPI app per EngineConfig. The app is stateless between requests:
each call builds its own gateway (and token meter), opens the stores it
names, and returns everything the caller needs in the response body. The
CLI talks to this app in-process by default and over the network when
pointed at a running server.
"""

from __future__ import annotations

import dataclasses
from collections import Counter
from pathlib import Path

from fastapi import FastAPI, HTTPException, Query, Request
from fastapi.responses import JSONResponse

from .. import __version__
from ..bench import (
    canonical_report_bytes,
    bootstrap_case_base,
    filter_hard,
    format_table,
    hard_subset,
    initial_candidate,
    load_dataset,
    load_manifest,
    report_to_dict,
    run_bench,
)
from ..casebase import CaseStore, read_store_dim
from ..config import EngineConfig
from ..errors import IoFailure, SchemaViolation, TextBfgsError
from ..gateway import Gateway, RecordingChatBackend, ReplayChatBackend
from ..optimizer import StrategyConfig, run_task, trace_to_dict
from ..sandbox import TaskSpec, evaluate
from . import models


def _task_spec(model: models.TaskModel) -> TaskSpec:
    return TaskSpec(
        task_id=model.task_id,
        prompt=model.prompt,
        entry_point=model.entry_point,
        base_tests=tuple(model.base_tests),
        plus_tests=tuple(model.plus_tests),
        per_test_timeout=model.per_test_timeout,
    )


def _report_model(report) -> models.ReportModel:
    return models.ReportModel(
        base_score=report.base_score,
        plus_score=report.plus_score,
        wall_time=report.wall_time,
        test_results=[
            models.TestResultModel(
                test_id=r.test_id,
                status=r.status.value,
                captured_output=r.captured_output,
                duration=r.duration,
                expression=r.expression,
            )
            for r in report.test_results
        ],
    )


def create_app(config: EngineConfig | None = None) -> FastAPI:
    config = config or EngineConfig()
    app = FastAPI(title="textbfgs", version=__version__)

    @app.exception_handler(TextBfgsError)
    def _engine_error(_request: Request, exc: TextBfgsError) -> JSONResponse:
        status = 400
        if isinstance(exc, IoFailure):
            status = 404
        elif isinstance(exc, SchemaViolation):
            status = 422
        return JSONResponse(status_code=status, content={"detail": f"{type(exc).__name__}: {exc}"})

    @app.exception_handler(ValueError)
    def _value_error(_request: Request, exc: ValueError) -> JSONResponse:
        return JSONResponse(status_code=422, content={"detail": str(exc)})

    def strategy_from(overrides: models.StrategyOverrides | None) -> StrategyConfig:
        return overrides.apply(config.strategy) if overrides else config.strategy

    def load_tasks(dataset: str, manifest_path: str | None):
        tasks = load_dataset(dataset)
        manifest = load_manifest(manifest_path) if manifest_path else None
        if manifest is not None:
            tasks = hard_subset(tasks, manifest)
        return tasks, manifest

    def open_assignment(paths: dict[str, str], persist: bool):
        assignment = {kind: CaseStore.open(path, persist=persist) for kind, path in paths.items()}
        ids = {kind: Path(path).name for kind, path in paths.items()}
        return assignment, ids

    def bench_once(req, gateway: Gateway):
        """Shared by /bench and both /replay endpoints."""
        tasks, manifest = load_tasks(req.dataset, req.manifest)
        base = strategy_from(req.strategy)
        strategies = [dataclasses.replace(base, kind=k) for k in req.strategies]
        persist = bool(getattr(req, "persist_stores", False))
        assignment, ids = open_assignment(req.assignment, persist)
        return run_bench(
            tasks,
            strategies,
            assignment,
            gateway,
            out_dir=getattr(req, "out", None),
            manifest=manifest,
            case_base_ids=ids,
            builder=config.make_builder(),
            runner_cmd=config.runner_cmd(),
            grace=config.sandbox.grace,
            domain_tag=req.domain_tag,
        )

    @app.get("/health", response_model=models.HealthResponse)
    def health() -> models.HealthResponse:
        gateway = config.make_gateway()
        return models.HealthResponse(
            status="ok",
            version=__version__,
            chat_backend=gateway.chat_backend.backend_id,
            embed_backend=gateway.embed_backend.backend_id,
        )

    @app.post("/evaluate", response_model=models.ReportModel)
    def evaluate_code(req: models.EvaluateRequest) -> models.ReportModel:
        report = evaluate(
            req.code,
            _task_spec(req.task),
            suites=req.suites,
            runner_cmd=config.runner_cmd(),
            grace=config.sandbox.grace,
        )
        return _report_model(report)

    @app.post("/optimize", response_model=models.OptimizeResponse)
    def optimize(req: models.OptimizeRequest) -> models.OptimizeResponse:
        if req.task is not None:
            task = _task_spec(req.task)
        elif req.dataset and req.task_id:
            tasks = load_dataset(req.dataset)
            matches = [t for t in tasks if t.task_id == req.task_id]
            if not matches:
                raise HTTPException(404, f"task {req.task_id!r} not in {req.dataset}")
            task = matches[0]
        else:
            raise HTTPException(422, "provide either an inline task or dataset + task_id")

        gateway = config.make_gateway()
        builder = config.make_builder()
        strategy = strategy_from(req.strategy)
        store = CaseStore.open(req.store, persist=req.persist_store) if req.store else None
        x0 = req.x0
        if not x0 and req.manifest:
            x0 = load_manifest(req.manifest).x0_for(task.task_id)
        if not x0:
            x0 = initial_candidate(task, gateway, builder)
        trace = run_task(
            task,
            x0,
            gateway,
            config=strategy,
            store=store,
            builder=builder,
            runner_cmd=config.runner_cmd(),
            grace=config.sandbox.grace,
            domain_tag=req.domain_tag,
        )
        return models.OptimizeResponse(
            trace=trace_to_dict(trace, template_version=builder.template_version),
            retained_case_ids=list(trace.retained_case_ids),
            solved=trace.solved,
        )

    @app.post("/filter", response_model=models.FilterResponse)
    def filter_dataset(req: models.FilterRequest) -> models.FilterResponse:
        tasks = load_dataset(req.dataset)
        manifest = filter_hard(
            tasks,
            config.make_gateway(),
            builder=config.make_builder(),
            runner_cmd=config.runner_cmd(),
            grace=config.sandbox.grace,
        )
        if req.out:
            manifest.save(req.out)
        return models.FilterResponse(
            kept=list(manifest.kept_ids()),
            dropped=[e.task_id for e in manifest.dropped],
            errors=[{"task_id": e.task_id, "error": e.error} for e in manifest.errors],
            manifest=manifest.to_dict(),
            manifest_path=req.out,
        )

    @app.post("/bootstrap", response_model=models.BootstrapResponse)
    def bootstrap(req: models.BootstrapRequest) -> models.BootstrapResponse:
        gateway = config.make_gateway()
        store_path = Path(req.store)
        if store_path.exists():
            store = CaseStore.open(store_path)
        else:
            store = CaseStore(dim=req.dim or gateway.embed_dim, path=store_path)
        manifest = load_manifest(req.manifest) if req.manifest else None
        added = bootstrap_case_base(
            load_dataset(req.dataset),
            gateway,
            store,
            epochs=req.epochs,
            config=strategy_from(req.strategy),
            manifest=manifest,
            builder=config.make_builder(),
            runner_cmd=config.runner_cmd(),
            grace=config.sandbox.grace,
            domain_tag=req.domain_tag,
        )
        return models.BootstrapResponse(cases_added=added, store_size=len(store), store=str(store_path))

    @app.post("/bench", response_model=models.BenchResponse)
    def bench(req: models.BenchRequest) -> models.BenchResponse:
        report = bench_once(req, config.make_gateway())
        return models.BenchResponse(report=report_to_dict(report), table=format_table(report))

    @app.get("/casebase/stats", response_model=models.CasebaseStatsResponse)
    def casebase_stats(store: str = Query(...)) -> models.CasebaseStatsResponse:
        cases = CaseStore.open(store, persist=False)
        return models.CasebaseStatsResponse(
            path=store,
            size=len(cases),
            dim=cases.dim,
            sources=dict(Counter(c.source for c in cases.cases())),
            domain_tags=dict(Counter(c.domain_tag for c in cases.cases() if c.domain_tag)),
        )

    @app.post("/casebase/retrieve", response_model=models.CasebaseRetrieveResponse)
    def casebase_retrieve(req: models.CasebaseRetrieveRequest) -> models.CasebaseRetrieveResponse:
        store = CaseStore.open(req.store, persist=False)
        gateway = config.make_gateway()
        hits = store.retrieve(gateway.embed(req.query), req.key, req.k)
        return models.CasebaseRetrieveResponse(
            hits=[
                models.RetrievalHitModel(
                    case_id=h.case.id,
                    similarity=h.similarity,
                    rank=h.rank,
                    gradient=h.case.gradient,
                    operator=h.case.operator,
                )
                for h in hits
            ]
        )

    @app.post("/casebase/export", response_model=models.CasebaseExportResponse)
    def casebase_export(req: models.CasebaseExportRequest) -> models.CasebaseExportResponse:
        store = CaseStore.open(req.store, persist=False)
        count = store.export(req.out)
        return models.CasebaseExportResponse(exported=count, out=req.out)

    @app.post("/casebase/import", response_model=models.CasebaseImportResponse)
    def casebase_import(req: models.CasebaseImportRequest) -> models.CasebaseImportResponse:
        dest_path = Path(req.store)
        if dest_path.exists():
            dest = CaseStore.open(dest_path)
        else:
            dest = CaseStore(dim=req.dim or read_store_dim(req.source), path=dest_path)
        count = dest.import_file(req.source)
        return models.CasebaseImportResponse(imported=count, store_size=len(dest))

    @app.post("/replay/record", response_model=models.ReplayRecordResponse)
    def replay_record(req: models.ReplayRecordRequest) -> models.ReplayRecordResponse:
        recorder = RecordingChatBackend(config.make_chat_backend(), req.fixture_out)
        gateway = Gateway(recorder, config.make_embed_backend())
        report = bench_once(req, gateway)
        recorded = sum(
            1 for line in Path(req.fixture_out).read_text("utf-8").splitlines() if line.strip()
        )
        return models.ReplayRecordResponse(
            fixture=req.fixture_out,
            recorded_responses=recorded,
            report=report_to_dict(report),
        )

    @app.post("/replay/verify", response_model=models.ReplayVerifyResponse)
    def replay_verify(req: models.ReplayVerifyRequest) -> models.ReplayVerifyResponse:
        def one_run():
            gateway = Gateway(ReplayChatBackend(req.fixture), config.make_embed_backend())
            return bench_once(req, gateway)

        first = report_to_dict(one_run())
        second = report_to_dict(one_run())
        deterministic = canonical_report_bytes(first) == canonical_report_bytes(second)
        return models.ReplayVerifyResponse(deterministic=deterministic, runs=2, report=first)

    return app
