"""Request/response schemas for the HTTP service.

The service runs next to the data: requests name datasets, manifests, and
case stores by path on the serving host, plus inline options. Strategy
fields are all optional overrides on top of the server's configured
defaults.
"""

from __future__ import annotations

import dataclasses
from typing import Literal

from pydantic import BaseModel, Field

from ..optimizer import StrategyConfig


class HealthResponse(BaseModel):
    status: str
    version: str
    chat_backend: str
    embed_backend: str


class TaskModel(BaseModel):
    task_id: str
    prompt: str
    entry_point: str
    base_tests: list[str] = Field(min_length=1)
    plus_tests: list[str] = []
    per_test_timeout: float = 5.0


class TestResultModel(BaseModel):
    test_id: str
    status: str
    captured_output: str
    duration: float
    expression: str


class ReportModel(BaseModel):
    base_score: float
    plus_score: float | None
    wall_time: float
    test_results: list[TestResultModel]


class EvaluateRequest(BaseModel):
    code: str
    task: TaskModel
    suites: Literal["base", "base+plus"] = "base"


class StrategyOverrides(BaseModel):
    kind: str | None = None
    max_steps: int | None = None
    top_k: int | None = None
    momentum_window: int | None = None
    parse_retries: int | None = None
    retention_enabled: bool | None = None
    t0_query_mode: str | None = None
    suites: str | None = None

    def apply(self, base: StrategyConfig) -> StrategyConfig:
        changes = {k: v for k, v in self.model_dump().items() if v is not None}
        return dataclasses.replace(base, **changes) if changes else base


class OptimizeRequest(BaseModel):
    task: TaskModel | None = None      # inline task, or:
    dataset: str | None = None         # dataset path + task_id lookup
    task_id: str | None = None
    x0: str | None = None              # explicit start; else manifest; else sampled
    manifest: str | None = None
    store: str | None = None           # case store path
    persist_store: bool = False        # write retentions back to the store file
    strategy: StrategyOverrides | None = None
    domain_tag: str = ""


class OptimizeResponse(BaseModel):
    trace: dict
    retained_case_ids: list[str]
    solved: bool


class FilterRequest(BaseModel):
    dataset: str
    out: str | None = None  # where to save the manifest, if anywhere


class FilterResponse(BaseModel):
    kept: list[str]
    dropped: list[str]
    errors: list[dict]
    manifest: dict
    manifest_path: str | None


class BootstrapRequest(BaseModel):
    dataset: str
    store: str               # created if missing
    manifest: str | None = None
    epochs: int = 3
    dim: int | None = None   # store dimension when creating; default: embedder's
    domain_tag: str = ""
    strategy: StrategyOverrides | None = None


class BootstrapResponse(BaseModel):
    cases_added: int
    store_size: int
    store: str


class BenchRequest(BaseModel):
    dataset: str
    manifest: str | None = None
    strategies: list[str] = Field(min_length=1)
    assignment: dict[str, str] = {}   # strategy kind -> case store path
    persist_stores: bool = False      # False: stores are opened as snapshots
    out: str | None = None            # directory for report + traces
    domain_tag: str = ""
    strategy: StrategyOverrides | None = None  # shared hyperparameter overrides


class BenchResponse(BaseModel):
    report: dict
    table: str


class CasebaseStatsResponse(BaseModel):
    path: str
    size: int
    dim: int
    sources: dict[str, int]
    domain_tags: dict[str, int]


class CasebaseRetrieveRequest(BaseModel):
    store: str
    query: str
    key: Literal["gradient", "problem"] = "gradient"
    k: int = 3


class RetrievalHitModel(BaseModel):
    case_id: str
    similarity: float
    rank: int
    gradient: str
    operator: str


class CasebaseRetrieveResponse(BaseModel):
    hits: list[RetrievalHitModel]


class CasebaseExportRequest(BaseModel):
    store: str
    out: str


class CasebaseExportResponse(BaseModel):
    exported: int
    out: str


class CasebaseImportRequest(BaseModel):
    store: str    # destination store file (created if missing)
    source: str   # store file to read
    dim: int | None = None


class CasebaseImportResponse(BaseModel):
    imported: int
    store_size: int


class ReplayRecordRequest(BaseModel):
    """Run a bench against the live backend while capturing a replay fixture."""

    dataset: str
    fixture_out: str
    manifest: str | None = None
    strategies: list[str] = Field(min_length=1)
    assignment: dict[str, str] = {}
    domain_tag: str = ""
    strategy: StrategyOverrides | None = None


class ReplayRecordResponse(BaseModel):
    fixture: str
    recorded_responses: int
    report: dict


class ReplayVerifyRequest(BaseModel):
    """Run the same bench twice from a fixture and compare the reports."""

    dataset: str
    fixture: str
    manifest: str | None = None
    strategies: list[str] = Field(min_length=1)
    assignment: dict[str, str] = {}
    domain_tag: str = ""
    strategy: StrategyOverrides | None = None


class ReplayVerifyResponse(BaseModel):
    deterministic: bool
    runs: int
    report: dict
