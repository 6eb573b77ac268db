"""Aggregation coefficients for each strategy and the neighborhood parameter mixture."""

from __future__ import annotations

import csv
from dataclasses import dataclass
from typing import Mapping, Sequence

import numpy as np

from meshprop.model import ParamVector
from meshprop.topology import NodeMetrics, Topology

STRATEGIES = ("Unweighted", "Weighted", "Random", "FL", "Degree", "Betweenness")


class AggregationError(ValueError):
    pass


@dataclass(frozen=True)
class StrategySpec:
    kind: str = "Unweighted"
    tau: float = 0.1
    seed: int = 0

    def __post_init__(self):
        if self.kind not in STRATEGIES:
            raise AggregationError(f"unknown strategy {self.kind!r}; expected one of {', '.join(STRATEGIES)}")
        if not self.tau > 0:
            raise AggregationError(f"tau must be > 0, got {self.tau}")


@dataclass(frozen=True, eq=False)
class CoefficientRow:
    device: int
    neighborhood: tuple[int, ...]
    weights: np.ndarray

    def __post_init__(self):
        w = np.asarray(self.weights, dtype=np.float64)
        if w.shape != (len(self.neighborhood),) or w.size == 0:
            raise AggregationError(f"device {self.device}: weights do not align with neighborhood")
        if np.any(w < 0) or abs(w.sum() - 1.0) > 1e-12:
            raise AggregationError(f"device {self.device}: weights must be nonnegative and sum to 1")
        object.__setattr__(self, "weights", w)

    def as_dict(self) -> dict[int, float]:
        return dict(zip(self.neighborhood, self.weights.tolist()))


def softmax_with_temperature(values, tau: float) -> np.ndarray:
    if not tau > 0:
        raise AggregationError(f"tau must be > 0, got {tau}")
    r = np.asarray(values, dtype=np.float64)
    if r.size == 0:
        raise AggregationError("softmax of an empty vector")
    e = np.exp((r - r.max()) / tau)
    return e / e.sum()


def coefficients(strategy: StrategySpec, topology: Topology, metrics: NodeMetrics | None,
                 shard_sizes: Sequence[int] | None, device: int,
                 rng: np.random.Generator | None = None) -> CoefficientRow:
    """Coefficient row for ``device`` under ``strategy``.

    ``rng`` is only consumed by ``Random`` and must be the device's stream for
    the current round.
    """
    if not 0 <= device < topology.n:
        raise AggregationError(f"device {device} not in topology of {topology.n} nodes")
    kind = strategy.kind
    if kind == "FL":
        nbhd = tuple(range(topology.n))
        return CoefficientRow(device, nbhd, np.full(topology.n, 1.0 / topology.n))
    nbhd = topology.neighborhood(device)
    idx = list(nbhd)
    if kind == "Unweighted":
        w = np.full(len(nbhd), 1.0 / len(nbhd))
    elif kind == "Weighted":
        if shard_sizes is None:
            raise AggregationError("Weighted strategy needs shard sizes")
        sizes = np.asarray([shard_sizes[j] for j in idx], dtype=np.float64)
        w = np.full(len(nbhd), 1.0 / len(nbhd)) if sizes.sum() == 0 else sizes / sizes.sum()
    elif kind == "Random":
        if rng is None:
            raise AggregationError("Random strategy needs an rng stream")
        w = softmax_with_temperature(rng.random(len(nbhd)), strategy.tau)
    elif kind == "Degree":
        w = softmax_with_temperature(metrics.degree[idx].astype(np.float64), strategy.tau)
    elif kind == "Betweenness":
        w = softmax_with_temperature(metrics.betweenness[idx], strategy.tau)
    else:
        raise AggregationError(f"unknown strategy {kind!r}")
    return CoefficientRow(device, nbhd, w)


def aggregate(row: CoefficientRow, snapshots: Mapping[int, ParamVector]) -> ParamVector:
    """Convex combination of the neighborhood's snapshots weighted by ``row``."""
    missing = [j for j in row.neighborhood if j not in snapshots]
    if missing:
        raise AggregationError(f"device {row.device}: no snapshot for neighbors {missing}")
    shape = snapshots[row.neighborhood[0]].shape
    out = np.zeros(len(snapshots[row.neighborhood[0]]))
    for j, c in zip(row.neighborhood, row.weights):
        snap = snapshots[j]
        if snap.shape != shape:
            raise AggregationError(f"device {row.device}: snapshot of {j} has shape {snap.shape}, expected {shape}")
        if c:
            out += c * snap.values
    return ParamVector(out, shape)


def dump_rows(rows, path) -> None:
    """Debug CSV of (device, neighbor, weight) triples."""
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["device", "neighbor", "weight"])
        for row in rows:
            for j, c in zip(row.neighborhood, row.weights):
                w.writerow([row.device, j, repr(float(c))])
