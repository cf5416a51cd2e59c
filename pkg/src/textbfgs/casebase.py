"""Durable store of correction cases with two embedding-keyed indexes.

Each case keeps the full trajectory (problem, code before/after, diagnosis,
operator) plus two query vectors: the gradient key used by error-similarity
retrieval and the problem key used by input-similarity retrieval. Retrieval
is an exact top-k cosine scan; stores at this scale are a few hundred cases,
so a full scan keeps the brute-force oracle meaningful.

Persistence is one JSON record per line with a header line carrying the
schema version and vector dimension, so a store file stays diffable and
appendable under the retention loop.
"""

from __future__ import annotations

import json
import threading
from dataclasses import dataclass, asdict
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

from .errors import DimensionMismatch, DuplicateId, IoFailure, SchemaViolation, ZeroVector

SCHEMA_NAME = "textbfgs-casebase"
SCHEMA_VERSION = 1

GRADIENT_KEY = "gradient"
PROBLEM_KEY = "problem"

SOURCE_BOOTSTRAP = "bootstrap"
SOURCE_RETENTION = "retention"

_CASE_FIELDS = (
    "id",
    "domain_tag",
    "problem_statement",
    "x_before",
    "gradient",
    "operator",
    "x_after",
    "gradient_vec",
    "problem_vec",
    "created_at",
    "source",
)


@dataclass(frozen=True)
class CaseTuple:
    """One stored correction trajectory plus its two query keys."""

    id: str
    domain_tag: str
    problem_statement: str
    x_before: str
    gradient: str
    operator: str
    x_after: str
    gradient_vec: tuple[float, ...]
    problem_vec: tuple[float, ...]
    created_at: str
    source: str

    def __post_init__(self) -> None:
        for name in ("gradient", "operator", "x_before", "x_after"):
            if not getattr(self, name):
                raise ValueError(f"case field {name!r} must be non-empty")
        if self.source not in (SOURCE_BOOTSTRAP, SOURCE_RETENTION):
            raise ValueError(f"unknown case source {self.source!r}")

    def key_vec(self, key: str) -> tuple[float, ...]:
        if key == GRADIENT_KEY:
            return self.gradient_vec
        if key == PROBLEM_KEY:
            return self.problem_vec
        raise ValueError(f"unknown retrieval key {key!r}")


@dataclass(frozen=True)
class RetrievalHit:
    case: CaseTuple
    similarity: float
    rank: int


def cosine(u: Sequence[float], v: Sequence[float]) -> float:
    """Cosine similarity u.v / (|u||v|); raises on zero norms or shape mismatch."""
    if len(u) != len(v):
        raise DimensionMismatch(f"vector dimensions differ: {len(u)} vs {len(v)}")
    ua = np.asarray(u, dtype=np.float64)
    va = np.asarray(v, dtype=np.float64)
    nu = float(np.linalg.norm(ua))
    nv = float(np.linalg.norm(va))
    if nu == 0.0 or nv == 0.0:
        raise ZeroVector("cosine similarity is undefined for a zero vector")
    return float(np.dot(ua, va) / (nu * nv))


class CaseStore:
    """In-memory case set with optional append-on-insert file persistence.

    Concurrency: many readers, writes serialized through a single lock;
    a retrieve concurrent with an insert sees the pre- or post-insert state,
    never a partial record.
    """

    def __init__(self, dim: int, path: str | Path | None = None):
        if dim <= 0:
            raise ValueError("store dimension must be positive")
        self.dim = dim
        self.path = Path(path) if path is not None else None
        self._cases: list[CaseTuple] = []
        self._by_id: dict[str, CaseTuple] = {}
        self._lock = threading.RLock()
        self._retrievals = 0
        if self.path is not None:
            if self.path.exists():
                self._load_file(self.path, expect_dim=dim)
            else:
                self.path.parent.mkdir(parents=True, exist_ok=True)
                self.path.write_text(self._header_line(), encoding="utf-8")

    @classmethod
    def open(cls, path: str | Path, persist: bool = True) -> "CaseStore":
        """Open an existing store file, taking the dimension from its header.

        persist=False loads a snapshot: later inserts stay in memory and the
        file is never touched again. Benchmarks open stores this way so a
        run never contaminates the store it started from.
        """
        path = Path(path)
        if not path.exists():
            raise IoFailure(f"no case store at {path}")
        header = _read_header(path)
        store = cls.__new__(cls)
        store.dim = header["dim"]
        store.path = path if persist else None
        store._cases = []
        store._by_id = {}
        store._lock = threading.RLock()
        store._retrievals = 0
        store._load_file(path, expect_dim=store.dim)
        return store

    @property
    def retrievals(self) -> int:
        """How many retrieve() calls this store has served (access audit)."""
        with self._lock:
            return self._retrievals

    def __len__(self) -> int:
        return len(self._cases)

    def cases(self) -> tuple[CaseTuple, ...]:
        with self._lock:
            return tuple(self._cases)

    def get(self, case_id: str) -> CaseTuple | None:
        with self._lock:
            return self._by_id.get(case_id)

    def next_id(self) -> str:
        """Deterministic sequential id unused by any stored case."""
        with self._lock:
            n = len(self._cases)
            while f"case-{n:05d}" in self._by_id:
                n += 1
            return f"case-{n:05d}"

    def insert(self, case: CaseTuple) -> str:
        self._check_dim(case.gradient_vec)
        self._check_dim(case.problem_vec)
        with self._lock:
            if case.id in self._by_id:
                raise DuplicateId(f"case id {case.id!r} already stored")
            if self.path is not None:
                try:
                    with self.path.open("a", encoding="utf-8") as fh:
                        fh.write(_case_line(case))
                except OSError as exc:
                    raise IoFailure(f"cannot append to {self.path}: {exc}") from exc
            self._cases.append(case)
            self._by_id[case.id] = case
        return case.id

    def retrieve(self, query_vec: Sequence[float], key: str, k: int) -> list[RetrievalHit]:
        """Exact top-k by cosine over the chosen key, ties broken by ascending id."""
        if k < 1:
            raise ValueError("k must be >= 1")
        self._check_dim(query_vec)
        with self._lock:
            self._retrievals += 1
            snapshot = list(self._cases)
        if not snapshot:
            return []
        q = np.asarray(query_vec, dtype=np.float64)
        nq = float(np.linalg.norm(q))
        if nq == 0.0:
            raise ZeroVector("query vector has zero norm")
        scored = []
        for case in snapshot:
            scored.append((cosine(q, case.key_vec(key)), case))
        scored.sort(key=lambda pair: (-pair[0], pair[1].id))
        hits = []
        for rank, (sim, case) in enumerate(scored[:k], start=1):
            hits.append(RetrievalHit(case=case, similarity=sim, rank=rank))
        return hits

    def export(self, path: str | Path) -> int:
        """Write a snapshot of the whole store; returns the record count."""
        path = Path(path)
        with self._lock:
            snapshot = list(self._cases)
        try:
            path.parent.mkdir(parents=True, exist_ok=True)
            with path.open("w", encoding="utf-8") as fh:
                fh.write(self._header_line())
                for case in snapshot:
                    fh.write(_case_line(case))
        except OSError as exc:
            raise IoFailure(f"cannot write {path}: {exc}") from exc
        return len(snapshot)

    def import_file(self, path: str | Path) -> int:
        """Insert every record from another store file; returns the count read."""
        path = Path(path)
        if not path.exists():
            raise IoFailure(f"no case store at {path}")
        header = _read_header(path)
        if header["dim"] != self.dim:
            raise DimensionMismatch(
                f"imported store has dimension {header['dim']}, this store has {self.dim}"
            )
        count = 0
        for case in _read_cases(path, header["dim"]):
            self.insert(case)
            count += 1
        return count

    # internal

    def _check_dim(self, vec: Sequence[float]) -> None:
        if len(vec) != self.dim:
            raise DimensionMismatch(f"vector has dimension {len(vec)}, store expects {self.dim}")

    def _header_line(self) -> str:
        return json.dumps({"schema": SCHEMA_NAME, "version": SCHEMA_VERSION, "dim": self.dim}) + "\n"

    def _load_file(self, path: Path, expect_dim: int) -> None:
        header = _read_header(path)
        if header["dim"] != expect_dim:
            raise DimensionMismatch(
                f"store file {path} has dimension {header['dim']}, expected {expect_dim}"
            )
        for case in _read_cases(path, expect_dim):
            if case.id in self._by_id:
                raise DuplicateId(f"case id {case.id!r} appears twice in {path}")
            self._cases.append(case)
            self._by_id[case.id] = case


def read_store_dim(path: str | Path) -> int:
    """Embedding dimension recorded in a store file's header."""
    return _read_header(Path(path))["dim"]


def _case_line(case: CaseTuple) -> str:
    record = asdict(case)
    record["gradient_vec"] = list(case.gradient_vec)
    record["problem_vec"] = list(case.problem_vec)
    return json.dumps(record, sort_keys=True) + "\n"


def _read_header(path: Path) -> dict:
    try:
        with path.open("r", encoding="utf-8") as fh:
            first = fh.readline()
    except OSError as exc:
        raise IoFailure(f"cannot read {path}: {exc}") from exc
    try:
        header = json.loads(first)
    except json.JSONDecodeError as exc:
        raise SchemaViolation(f"{path}: header line is not valid JSON") from exc
    if not isinstance(header, dict) or header.get("schema") != SCHEMA_NAME:
        raise SchemaViolation(f"{path}: missing {SCHEMA_NAME} header")
    if not isinstance(header.get("dim"), int) or header["dim"] <= 0:
        raise SchemaViolation(f"{path}: header field 'dim' must be a positive integer")
    return header


def _read_cases(path: Path, dim: int) -> Iterable[CaseTuple]:
    with path.open("r", encoding="utf-8") as fh:
        for lineno, line in enumerate(fh):
            if lineno == 0 or not line.strip():
                continue
            try:
                record = json.loads(line)
            except json.JSONDecodeError as exc:
                raise SchemaViolation(f"{path}:{lineno + 1}: record is not valid JSON") from exc
            yield _case_from_record(record, where=f"{path}:{lineno + 1}", dim=dim)


def _case_from_record(record: dict, where: str, dim: int) -> CaseTuple:
    for field_name in _CASE_FIELDS:
        if field_name not in record:
            raise SchemaViolation(f"{where}: missing field {field_name!r}")
    for vec_name in ("gradient_vec", "problem_vec"):
        vec = record[vec_name]
        if not isinstance(vec, list) or not all(isinstance(x, (int, float)) for x in vec):
            raise SchemaViolation(f"{where}: field {vec_name!r} must be a number array")
        if len(vec) != dim:
            raise DimensionMismatch(f"{where}: {vec_name} has dimension {len(vec)}, expected {dim}")
    try:
        return CaseTuple(
            id=record["id"],
            domain_tag=record["domain_tag"],
            problem_statement=record["problem_statement"],
            x_before=record["x_before"],
            gradient=record["gradient"],
            operator=record["operator"],
            x_after=record["x_after"],
            gradient_vec=tuple(float(x) for x in record["gradient_vec"]),
            problem_vec=tuple(float(x) for x in record["problem_vec"]),
            created_at=record["created_at"],
            source=record["source"],
        )
    except ValueError as exc:
        raise SchemaViolation(f"{where}: {exc}") from exc
