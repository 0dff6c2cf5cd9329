"""Benchmark workload builders, synthetic data, and client partitioning.

Two workload families cover the usual benchmarks: all k-way marginals over a
categorical domain, and a census-summary-shaped synthetic mix of marginals
and range-style predicate counts. Real datasets are deliberately not bundled;
`load_records_csv` ingests user-supplied data against a declared domain.
"""

from __future__ import annotations

import csv
import itertools
import json
from dataclasses import dataclass

import numpy as np

from .matmech import DomainSpec, Workload, marginal_matrix
from .protocol import ClientInput


@dataclass(frozen=True)
class WorkloadSpec:
    """Named workload recipe, resolvable to a concrete matrix."""

    kind: str  # marginals | identity | total | sf1 | custom
    domain: DomainSpec | None = None
    k: int = 2
    scale: int = 1
    source: str | None = None  # path for kind="custom"

    def __post_init__(self):
        if self.kind not in ("marginals", "identity", "total", "sf1", "custom"):
            raise ValueError(f"unknown workload kind {self.kind!r}")
        if self.kind == "marginals":
            if self.domain is None:
                raise ValueError("marginals workload needs a domain")
            if not 0 <= self.k <= len(self.domain.attributes):
                raise ValueError("k must be between 0 and the attribute count")
        if self.kind in ("identity", "total") and self.domain is None:
            raise ValueError(f"{self.kind} workload needs a domain")
        if self.kind == "sf1" and self.scale < 1:
            raise ValueError("scale must be >= 1")
        if self.kind == "custom" and self.source is None:
            raise ValueError("custom workload needs a source path")


def build_workload(spec: WorkloadSpec) -> tuple[DomainSpec, Workload]:
    from .matmech import load_workload_json

    if spec.kind == "marginals":
        return spec.domain, build_marginals(spec.domain, spec.k)
    if spec.kind == "identity":
        return spec.domain, Workload(np.eye(spec.domain.total_size), spec.domain)
    if spec.kind == "total":
        return spec.domain, Workload(np.ones((1, spec.domain.total_size)), spec.domain)
    if spec.kind == "sf1":
        return build_sf1_shaped(spec.scale)
    return load_workload_json(spec.source)


def build_marginals(domain: DomainSpec, k: int) -> Workload:
    """All k-way marginals: one block per attribute subset, subsets in
    lexicographic attribute order, cells row-major within each block."""
    if not 0 <= k <= len(domain.attributes):
        raise ValueError("k must be between 0 and the attribute count")
    blocks = [
        marginal_matrix(domain, attrs)
        for attrs in itertools.combinations(domain.names, k)
    ]
    return Workload(np.vstack(blocks), domain)


def build_sf1_shaped(scale: int = 1) -> tuple[DomainSpec, Workload]:
    """Synthetic census-summary-shaped workload over a demographic domain.

    Deterministic in scale. The domain mimics a person-level contingency
    table (sex, age bands, race, ethnicity); queries mix every 1- and 2-way
    marginal with banded age-range counts crossed with sex, plus seeded
    random conjunctive predicates. Scale widens the age attribute and adds
    predicate rows, so query count grows strictly with scale.
    """
    if scale < 1:
        raise ValueError("scale must be >= 1")
    age_bins = 8 * scale
    domain = DomainSpec(
        (("sex", 2), ("age", age_bins), ("race", 4), ("hisp", 2))
    )
    d = domain.total_size

    blocks = [np.ones((1, d))]
    for k in (1, 2):
        for attrs in itertools.combinations(domain.names, k):
            blocks.append(marginal_matrix(domain, attrs))

    # banded age ranges (width 2) crossed with sex: range-style counts
    shape = domain.shape
    for lo in range(0, age_bins - 1):
        for sex in range(2):
            cells = np.zeros(shape)
            cells[sex, lo : lo + 2, :, :] = 1.0
            blocks.append(cells.reshape(1, d))

    # seeded conjunctive predicates; the generator is part of the format
    rng = np.random.default_rng(1000 + scale)
    for _ in range(16 * scale):
        cells = np.ones(shape)
        for axis, card in enumerate(domain.shape):
            take = rng.integers(1, card + 1)
            chosen = rng.choice(card, size=take, replace=False)
            mask = np.zeros(card)
            mask[chosen] = 1.0
            cells = cells * mask.reshape([-1 if a == axis else 1 for a in range(4)])
        if cells.any():
            blocks.append(cells.reshape(1, d))

    return domain, Workload(np.vstack(blocks), domain)


def synth_records(domain: DomainSpec, count: int, seed: int = 0) -> list[tuple]:
    """Skewed categorical sample: geometric-ish weights per attribute."""
    if count < 0:
        raise ValueError("count must be >= 0")
    rng = np.random.default_rng(seed)
    cols = []
    for _, card in domain.attributes:
        weights = 0.6 ** np.arange(card)
        weights /= weights.sum()
        cols.append(rng.choice(card, size=count, p=weights))
    return [tuple(int(c[i]) for c in cols) for i in range(count)]


def partition(records, n: int, seed: int = 0) -> list[ClientInput]:
    """Assign each record to a uniformly random client; disjoint by design."""
    if n < 1:
        raise ValueError("n must be >= 1")
    records = [tuple(r) for r in records]
    rng = np.random.default_rng(seed)
    owner = rng.integers(0, n, size=len(records))
    buckets: list[list[tuple]] = [[] for _ in range(n)]
    for rec, o in zip(records, owner):
        buckets[int(o)].append(rec)
    return [ClientInput(tuple(b)) for b in buckets]


def save_workload_json(path: str, domain: DomainSpec, rows: np.ndarray) -> None:
    """Write the matmech interchange format with a single dense query block."""
    doc = {
        "attributes": [
            {"name": name, "cardinality": card} for name, card in domain.attributes
        ],
        "queries": [{"kind": "dense", "rows": np.asarray(rows, dtype=float).tolist()}],
    }
    with open(path, "w", encoding="utf-8") as fh:
        json.dump(doc, fh)


def write_records_csv(path: str, records, domain: DomainSpec) -> None:
    with open(path, "w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh)
        writer.writerow(domain.names)
        writer.writerows(records)


def load_records_csv(path: str, domain: DomainSpec) -> list[tuple]:
    """Read records as integer tuples; a header row naming the attributes is allowed."""
    out: list[tuple] = []
    with open(path, newline="", encoding="utf-8") as fh:
        reader = csv.reader(fh)
        for row in reader:
            if not row or (out == [] and row == list(domain.names)):
                continue
            rec = tuple(int(v) for v in row)
            domain.index_of(rec)  # validates arity and ranges
            out.append(rec)
    return out
