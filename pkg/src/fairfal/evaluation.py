"""Learning-curve metrics and robust paired comparison statistics."""

from __future__ import annotations

from dataclasses import dataclass
from typing import Mapping, Optional, Sequence

import numpy as np

from fairfal.data import Dataset
from fairfal.model import ModelParams, predict_batch

MAX_EXACT_N = 20


def accuracy(params: ModelParams, test: Dataset) -> float:
    if len(test) == 0:
        raise ValueError("empty test set")
    pred = np.argmax(predict_batch(params, test.features), axis=1)
    return float(np.mean(pred == test.labels))


@dataclass(frozen=True, eq=False)
class LearningCurve:
    fractions: np.ndarray
    accuracies: np.ndarray

    def __post_init__(self):
        f = np.asarray(self.fractions, dtype=np.float64)
        a = np.asarray(self.accuracies, dtype=np.float64)
        if f.shape != a.shape or f.ndim != 1:
            raise ValueError("fractions and accuracies must be 1-D and of equal length")
        if f.size > 1 and np.any(np.diff(f) <= 0):
            raise ValueError("labeled fractions must be strictly increasing")
        object.__setattr__(self, "fractions", f)
        object.__setattr__(self, "accuracies", a)

    @classmethod
    def from_points(cls, points: Sequence[tuple[float, float]]) -> "LearningCurve":
        pts = list(points)
        return cls(np.array([p[0] for p in pts]), np.array([p[1] for p in pts]))

    def scaled(self, factor: float) -> "LearningCurve":
        return LearningCurve(self.fractions, self.accuracies * factor)


def aulc(curve: LearningCurve) -> float:
    """Trapezoidal area under accuracy vs. labeled fraction."""
    f, a = curve.fractions, curve.accuracies
    if f.size < 2:
        raise ValueError("AULC needs at least two curve points")
    return float(np.sum(np.diff(f) * (a[1:] + a[:-1]) / 2.0))


def positive_ratio(deltas) -> float:
    d = np.asarray(deltas, dtype=np.float64)
    if d.size == 0:
        raise ValueError("no deltas")
    return float(np.mean(d > 0))


def _average_ranks(values: np.ndarray) -> np.ndarray:
    order = np.argsort(values, kind="stable")
    ranks = np.empty(values.size)
    sorted_vals = values[order]
    i = 0
    while i < values.size:
        j = i
        while j + 1 < values.size and sorted_vals[j + 1] == sorted_vals[i]:
            j += 1
        ranks[order[i : j + 1]] = (i + j) / 2.0 + 1.0
        i = j + 1
    return ranks


def wilcoxon_one_sided(deltas) -> float:
    """Exact p-value of the signed-rank test for ``median(delta) > 0``.

    Zeros are dropped and tied magnitudes share their average rank. The null
    distribution of the positive rank sum is tallied over all ``2**n`` sign
    assignments (by counting, on doubled ranks so that every rank is an
    integer), and ``p = P(W >= W_observed)``.
    """
    d = np.asarray(deltas, dtype=np.float64)
    if d.size == 0:
        raise ValueError("no deltas")
    d = d[d != 0]
    if d.size == 0:
        raise ValueError("all deltas are zero; the signed-rank test is undefined")
    n = d.size
    if n > MAX_EXACT_N:
        raise ValueError(f"exact test supports at most {MAX_EXACT_N} non-zero deltas, got {n}")
    ranks2 = np.rint(2 * _average_ranks(np.abs(d))).astype(np.int64)
    observed = int(ranks2[d > 0].sum())
    # counts[w] = number of sign assignments whose doubled positive rank sum is w
    counts = [1] + [0] * int(ranks2.sum())
    for r in ranks2.tolist():
        for w in range(len(counts) - 1, r - 1, -1):
            counts[w] += counts[w - r]
    return sum(counts[observed:]) / 2**n


def hodges_lehmann(deltas) -> float:
    """Median of the Walsh averages ``(d_s + d_t) / 2`` over ``s <= t``."""
    d = np.asarray(deltas, dtype=np.float64)
    if d.size == 0:
        raise ValueError("no deltas")
    i, j = np.triu_indices(d.size)
    return float(np.median((d[i] + d[j]) / 2.0))


@dataclass
class PairedStats:
    deltas: np.ndarray
    pi_plus: float
    p_value: float
    hl_estimate: float

    @property
    def winner(self) -> str:
        return "i" if self.hl_estimate > 0 else "j"

    def record(self, name_i: str = "i", name_j: str = "j") -> dict:
        return {
            "winner": name_i if self.winner == "i" else name_j,
            "pi_plus": self.pi_plus,
            "p_value": self.p_value,
            "hl_pp": self.hl_estimate,
            "deltas": [float(x) for x in self.deltas],
        }


def paired_stats(deltas) -> PairedStats:
    d = np.asarray(deltas, dtype=np.float64)
    try:
        p = wilcoxon_one_sided(d)
    except ValueError:
        if d.size and np.all(d == 0):
            p = 1.0
        else:
            raise
    return PairedStats(d, positive_ratio(d), p, hodges_lehmann(d))


def compare(curves_i: Mapping[int, LearningCurve], curves_j: Mapping[int, LearningCurve]) -> PairedStats:
    """Per-seed AULC differences (percentage points) and their paired statistics."""
    if set(curves_i) != set(curves_j):
        raise ValueError(f"seed mismatch: {sorted(curves_i)} vs {sorted(curves_j)}")
    if not curves_i:
        raise ValueError("no curves to compare")
    seeds = sorted(curves_i)
    deltas = [aulc(curves_i[s].scaled(100.0)) - aulc(curves_j[s].scaled(100.0)) for s in seeds]
    return paired_stats(deltas)


def class_ranking(class_counts) -> np.ndarray:
    """Class ids ordered by descending global count, ties by id."""
    counts = np.asarray(class_counts)
    return np.lexsort((np.arange(counts.size), -counts))


def default_groups(class_counts) -> list[np.ndarray]:
    """Top 3 / middle / bottom 3 classes by count for C >= 7, singletons otherwise."""
    ranked = class_ranking(class_counts)
    if ranked.size >= 7:
        return [ranked[:3], ranked[3:-3], ranked[-3:]]
    return [ranked[i : i + 1] for i in range(ranked.size)]


def class_group_ratios(
    history: Sequence[tuple[int, int]],
    class_counts,
    groups: Optional[Sequence[Sequence[int]]] = None,
) -> tuple[np.ndarray, np.ndarray]:
    """Cumulative share of queries per class group after each cycle.

    ``history`` holds ``(cycle, true_class)`` pairs. Returns ``(cycles, ratios)``
    with ``ratios[t, g]`` the fraction of all queries up to ``cycles[t]`` that
    fall in group ``g``.
    """
    if len(history) == 0:
        raise ValueError("empty query history")
    counts = np.asarray(class_counts)
    groups = default_groups(counts) if groups is None else [np.asarray(g) for g in groups]
    group_of = np.full(counts.size, -1, dtype=np.int64)
    for gi, g in enumerate(groups):
        group_of[np.asarray(g, dtype=np.int64)] = gi
    if np.any(group_of < 0):
        raise ValueError("groups must cover every class")
    h = np.asarray(history, dtype=np.int64)
    cycles = np.unique(h[:, 0])
    per_cycle = np.zeros((cycles.size, len(groups)))
    for t, cyc in enumerate(cycles):
        np.add.at(per_cycle[t], group_of[h[h[:, 0] == cyc, 1]], 1.0)
    cum = np.cumsum(per_cycle, axis=0)
    return cycles, cum / cum.sum(axis=1, keepdims=True)
