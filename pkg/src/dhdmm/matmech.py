"""Linear query workloads over discrete domains and measurement strategies.

Records are flattened row-major over the attribute list into a histogram x;
a workload W and a strategy A are dense matrices acting on x. Answers are
estimated from noisy strategy measurements by least squares, so any workload
row inside the row space of A is answerable.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from functools import reduce
from typing import Iterable, Sequence

import numpy as np

from .errors import (
    DimensionError,
    InvalidRecord,
    NotSupported,
    OptimizationFailed,
)

Record = tuple  # one int per attribute, in attribute-list order

_RANK_RTOL = 1e-9


@dataclass(frozen=True)
class DomainSpec:
    """Ordered list of (attribute name, cardinality) pairs."""

    attributes: tuple[tuple[str, int], ...]

    def __post_init__(self):
        names = [a[0] for a in self.attributes]
        if len(self.attributes) == 0:
            raise ValueError("domain needs at least one attribute")
        if len(set(names)) != len(names):
            raise ValueError("attribute names must be unique")
        for name, card in self.attributes:
            if not isinstance(card, int) or card < 1:
                raise ValueError(f"attribute {name!r} has invalid cardinality {card!r}")

    @property
    def shape(self) -> tuple[int, ...]:
        return tuple(card for _, card in self.attributes)

    @property
    def total_size(self) -> int:
        return int(np.prod(self.shape, dtype=np.int64))

    @property
    def names(self) -> tuple[str, ...]:
        return tuple(name for name, _ in self.attributes)

    def index_of(self, record: Sequence[int]) -> int:
        """Row-major flat index of a record; raises InvalidRecord on mismatch."""
        if len(record) != len(self.attributes):
            raise InvalidRecord(f"record {record!r} has wrong arity for domain")
        idx = 0
        for value, (name, card) in zip(record, self.attributes):
            if not isinstance(value, (int, np.integer)) or not (0 <= value < card):
                raise InvalidRecord(
                    f"record value {value!r} out of range for attribute {name!r} (cardinality {card})"
                )
            idx = idx * card + int(value)
        return idx


@dataclass(frozen=True)
class HistogramVector:
    """Non-negative integer counts over the flattened domain."""

    counts: np.ndarray
    domain: DomainSpec

    def __post_init__(self):
        c = np.asarray(self.counts, dtype=np.int64)
        if c.ndim != 1 or c.shape[0] != self.domain.total_size:
            raise DimensionError("histogram length does not match domain size")
        if (c < 0).any():
            raise ValueError("histogram counts must be non-negative")
        object.__setattr__(self, "counts", c)

    @property
    def total(self) -> int:
        return int(self.counts.sum())


@dataclass(frozen=True)
class Workload:
    """Dense query matrix, one row per linear counting query."""

    matrix: np.ndarray
    domain: DomainSpec

    def __post_init__(self):
        m = np.ascontiguousarray(np.asarray(self.matrix, dtype=np.float64))
        if m.ndim != 2 or m.shape[1] != self.domain.total_size:
            raise DimensionError("workload matrix columns must equal domain size")
        if m.shape[0] < 1 or not np.any(m):
            raise ValueError("workload must contain at least one nonzero query")
        if not np.all(np.isfinite(m)):
            raise ValueError("workload matrix must be finite")
        object.__setattr__(self, "matrix", m)

    @property
    def num_queries(self) -> int:
        return self.matrix.shape[0]


@dataclass(frozen=True)
class Strategy:
    """Full-column-rank measurement matrix with its L2 sensitivity."""

    matrix: np.ndarray
    delta2: float
    domain: DomainSpec

    def __post_init__(self):
        m = np.ascontiguousarray(np.asarray(self.matrix, dtype=np.float64))
        d = self.domain.total_size
        if m.ndim != 2 or m.shape[1] != d:
            raise DimensionError("strategy matrix columns must equal domain size")
        if not np.all(np.isfinite(m)):
            raise ValueError("strategy matrix must be finite")
        if np.linalg.matrix_rank(m, tol=_RANK_RTOL * max(m.shape)) < d:
            raise ValueError("strategy matrix must have full column rank")
        expect = sensitivity(m)
        if not np.isclose(self.delta2, expect, rtol=1e-9, atol=0.0):
            raise ValueError(f"declared sensitivity {self.delta2} != max column norm {expect}")
        object.__setattr__(self, "matrix", m)
        object.__setattr__(self, "delta2", float(self.delta2))

    @property
    def num_measurements(self) -> int:
        return self.matrix.shape[0]


def vectorize(records: Iterable[Sequence[int]], domain: DomainSpec) -> HistogramVector:
    """Count records into the flattened histogram. Additive over multiset union."""
    d = domain.total_size
    indices = [domain.index_of(r) for r in records]
    if indices:
        counts = np.bincount(np.asarray(indices, dtype=np.int64), minlength=d)
    else:
        counts = np.zeros(d, dtype=np.int64)
    return HistogramVector(counts.astype(np.int64), domain)


def sensitivity(matrix: np.ndarray) -> float:
    """Max column L2 norm: one record moves one histogram cell by one."""
    m = np.asarray(matrix, dtype=np.float64)
    if m.ndim != 2:
        raise DimensionError("sensitivity expects a matrix")
    return float(np.sqrt((m * m).sum(axis=0).max()))


def _pinv_apply(a: np.ndarray, rhs: np.ndarray) -> tuple[np.ndarray, int]:
    """Least-squares solve A z = rhs; returns (z, effective rank of A)."""
    z, _, rank, _ = np.linalg.lstsq(a, rhs, rcond=None)
    return z, int(rank)


def strategy_objective(workload: Workload, strategy: Strategy) -> float:
    """Expected total squared error proxy: delta2(A)^2 * ||W A^+||_F^2."""
    return _objective_matrices(workload.matrix, strategy.matrix)


def _objective_matrices(w: np.ndarray, a: np.ndarray) -> float:
    if w.shape[1] != a.shape[1]:
        raise DimensionError("workload and strategy act on different domains")
    # (A^T)^+ W^T is the min-norm solve of A^T Z = W^T, and its transpose is W A^+
    z, rank = _pinv_apply(a.T, w.T)
    if rank < a.shape[1]:
        # rank-deficient A only supports W inside its row space
        resid = w - z.T @ a
        if np.abs(resid).max() > 1e-8 * max(1.0, np.abs(w).max()):
            raise NotSupported("workload rows outside the strategy row space")
    wa_pinv_sq = float((z * z).sum())
    return sensitivity(a) ** 2 * wa_pinv_sq


def measure(strategy: Strategy, hist: HistogramVector) -> np.ndarray:
    """Exact strategy measurements A x as float64."""
    if strategy.domain != hist.domain:
        raise DimensionError("strategy and histogram domains differ")
    return strategy.matrix @ hist.counts.astype(np.float64)


def reconstruct(workload: Workload, strategy: Strategy, measurements: np.ndarray) -> np.ndarray:
    """Workload answers W A^+ m from (possibly noisy) measurements m."""
    m = np.asarray(measurements, dtype=np.float64)
    if workload.domain != strategy.domain:
        raise DimensionError("workload and strategy domains differ")
    if m.shape != (strategy.num_measurements,):
        raise DimensionError("measurement vector length does not match strategy")
    xhat, rank = _pinv_apply(strategy.matrix, m)
    if rank < strategy.domain.total_size:
        raise NotSupported("strategy matrix is rank deficient")
    return workload.matrix @ xhat


@dataclass(frozen=True)
class OptimizerConfig:
    """Projected-gradient search settings for optimize_strategy."""

    iterations: int = 150
    extra_rows: int | None = None  # None: max(1, d // 8), capped at 64
    seed: int = 0
    step_init: float = 0.25
    step_grow: float = 1.05
    step_shrink: float = 0.5
    min_step: float = 1e-14


def _pid_strategy(theta: np.ndarray) -> np.ndarray:
    """Identity plus extra rows, columns scaled to unit L2 norm."""
    scale = 1.0 / np.sqrt(1.0 + (theta * theta).sum(axis=0))
    return np.vstack([np.diag(scale), theta * scale[None, :]])


def _pid_objective_grad(theta: np.ndarray, v: np.ndarray) -> tuple[float, np.ndarray]:
    """Objective and gradient in theta for A(theta) = unit-column [I; theta].

    With u_j = 1 + ||theta_j||^2, the unit-column scaling makes delta2 = 1 and
    the objective reduces to tr(G^-1 H), G = I + theta^T theta,
    H_ij = sqrt(u_i u_j) V_ij, V = W^T W.
    """
    d = theta.shape[1]
    u = 1.0 + (theta * theta).sum(axis=0)
    su = np.sqrt(u)
    g = np.eye(d) + theta.T @ theta
    h = v * np.outer(su, su)
    p = np.linalg.inv(g)
    f = float((p * h).sum())  # tr(P H), both symmetric
    php = p @ h @ p
    c = ((p * v) @ su) / su
    grad = 2.0 * (theta * c[None, :] - theta @ php)
    return f, grad


def optimize_strategy(workload: Workload, config: OptimizerConfig = OptimizerConfig()) -> Strategy:
    """Search for a strategy minimizing strategy_objective for this workload.

    Projected gradient descent over non-negative extra rows appended to a
    scaled identity, compared against two fixed candidates (identity and
    row-normalized workload); the best of all three is returned.
    Deterministic for a fixed config.seed.
    """
    if config.iterations < 0:
        raise ValueError("iterations must be >= 0")
    domain = workload.domain
    d = domain.total_size
    w = workload.matrix

    candidates: list[np.ndarray] = [np.eye(d)]
    row_norms = np.sqrt((w * w).sum(axis=1))
    if np.all(row_norms > 0):
        wn = w / row_norms[:, None]
        if np.linalg.matrix_rank(wn, tol=_RANK_RTOL * max(wn.shape)) == d:
            candidates.append(wn)

    if config.iterations > 0:
        p_rows = config.extra_rows
        if p_rows is None:
            p_rows = min(64, max(1, d // 8))
        if p_rows < 1:
            raise ValueError("extra_rows must be >= 1")
        v = w.T @ w
        rng = np.random.default_rng(config.seed)
        theta = rng.uniform(0.0, 0.1, size=(p_rows, d))
        f, grad = _pid_objective_grad(theta, v)
        if not np.isfinite(f):
            raise OptimizationFailed("non-finite objective at initialization")
        step = config.step_init
        for _ in range(config.iterations):
            cand = np.maximum(theta - step * grad, 0.0)
            fc, gc = _pid_objective_grad(cand, v)
            if not np.isfinite(fc):
                raise OptimizationFailed("non-finite objective during descent")
            if fc < f:
                theta, f, grad = cand, fc, gc
                step *= config.step_grow
            else:
                step *= config.step_shrink
                if step < config.min_step:
                    break
        candidates.append(_pid_strategy(theta))

    best = min(candidates, key=lambda a: _objective_matrices(w, a))
    return Strategy(best, sensitivity(best), domain)


def marginal_matrix(domain: DomainSpec, attrs: Sequence[str]) -> np.ndarray:
    """Indicator rows for the marginal over the given attribute subset.

    One row per value combination of attrs (row-major in attribute-list
    order); attributes outside the subset are summed out. Empty attrs gives
    the single total-count row.
    """
    unknown = set(attrs) - set(domain.names)
    if unknown:
        raise ValueError(f"unknown attributes in marginal: {sorted(unknown)}")
    keep = set(attrs)
    factors = [
        np.eye(card) if name in keep else np.ones((1, card))
        for name, card in domain.attributes
    ]
    return reduce(np.kron, factors)


def load_workload_json(source) -> tuple[DomainSpec, Workload]:
    """Parse the workload interchange format.

    Accepts a path, a file object, or an already-parsed dict with keys
    "attributes" ([{name, cardinality}]) and "queries" (list of
    {"kind": "marginal", "attrs": [...]} | {"kind": "total"} |
    {"kind": "identity"} | {"kind": "dense", "rows": [[...]]}).
    """
    if isinstance(source, dict):
        doc = source
    elif hasattr(source, "read"):
        doc = json.load(source)
    else:
        with open(source, "r", encoding="utf-8") as fh:
            doc = json.load(fh)

    try:
        attrs = tuple((a["name"], int(a["cardinality"])) for a in doc["attributes"])
        queries = doc["queries"]
    except (KeyError, TypeError) as exc:
        raise ValueError(f"malformed workload document: {exc}") from exc
    domain = DomainSpec(attrs)
    d = domain.total_size

    blocks = []
    for q in queries:
        kind = q.get("kind")
        if kind == "marginal":
            blocks.append(marginal_matrix(domain, q["attrs"]))
        elif kind == "total":
            blocks.append(np.ones((1, d)))
        elif kind == "identity":
            blocks.append(np.eye(d))
        elif kind == "dense":
            rows = np.asarray(q["rows"], dtype=np.float64)
            if rows.ndim == 1:
                rows = rows[None, :]
            if rows.shape[1] != d:
                raise ValueError("dense query rows must have one entry per domain cell")
            blocks.append(rows)
        else:
            raise ValueError(f"unknown query kind {kind!r}")
    if not blocks:
        raise ValueError("workload document contains no queries")
    return domain, Workload(np.vstack(blocks), domain)
