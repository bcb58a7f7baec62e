"""Baseline acquisition strategies and shared selection primitives.

Every selector breaks ties by ascending dataset index.
"""

from __future__ import annotations

import enum
from dataclasses import dataclass

import numpy as np

from fairfal.data import ClientPools, Dataset
from fairfal.model import ModelParams, features_batch, predict_batch


class UncertaintyKind(str, enum.Enum):
    ENTROPY = "entropy"
    MARGIN = "margin"
    LEAST_CONFIDENCE = "lc"


class Selector(str, enum.Enum):
    GLOBAL = "global"
    LOCAL = "local"


BASELINES = ("random", "entropy", "margin", "lc", "coreset")
STRATEGIES = BASELINES + ("fairfal",)


def parse_strategy(name: str) -> tuple[str, Selector]:
    """``"entropy:local"`` -> ``("entropy", Selector.LOCAL)``; selector defaults to global."""
    base, _, sel = name.strip().lower().partition(":")
    if base not in STRATEGIES:
        raise ValueError(f"unknown strategy {base!r}; expected one of {', '.join(STRATEGIES)}")
    if base == "fairfal" and sel:
        raise ValueError("fairfal chooses its selector adaptively; drop the ':global'/':local' suffix")
    try:
        selector = Selector(sel or "global")
    except ValueError:
        raise ValueError(f"unknown selector {sel!r}; expected 'global' or 'local'") from None
    return base, selector


@dataclass(frozen=True, eq=False)
class QueryContext:
    global_params: ModelParams
    local_params: ModelParams
    pools: ClientPools
    dataset: Dataset
    budget: int
    selector: Selector = Selector.GLOBAL

    def __post_init__(self):
        if self.budget < 1:
            raise ValueError(f"budget must be >= 1, got {self.budget}")
        if self.budget > self.pools.unlabeled.size:
            raise ValueError(f"budget {self.budget} exceeds unlabeled pool of {self.pools.unlabeled.size}")

    @property
    def selector_params(self) -> ModelParams:
        return self.global_params if self.selector is Selector.GLOBAL else self.local_params

    def unlabeled_x(self) -> np.ndarray:
        return self.dataset.features[self.pools.unlabeled]

    def labeled_x(self) -> np.ndarray:
        return self.dataset.features[self.pools.labeled]


def uncertainty_scores(probs, kind: UncertaintyKind = UncertaintyKind.ENTROPY) -> np.ndarray:
    """Row-wise uncertainty; larger means more uncertain."""
    p = np.asarray(probs, dtype=np.float64)
    if p.ndim == 1:
        p = p[None, :]
    if p.shape[0] and np.any(np.abs(p.sum(axis=1) - 1.0) > 1e-6):
        raise ValueError("probability rows must sum to 1")
    kind = UncertaintyKind(kind)
    if kind is UncertaintyKind.ENTROPY:
        with np.errstate(divide="ignore", invalid="ignore"):
            terms = np.where(p > 0, p * np.log(np.where(p > 0, p, 1.0)), 0.0)
        return -terms.sum(axis=1)
    if kind is UncertaintyKind.MARGIN:
        top2 = -np.sort(-p, axis=1)[:, :2]
        return -(top2[:, 0] - top2[:, 1])
    return 1.0 - p.max(axis=1)


def uncertainty_score(probs, kind: UncertaintyKind = UncertaintyKind.ENTROPY) -> float:
    p = np.asarray(probs, dtype=np.float64)
    if p.ndim != 1:
        raise ValueError("uncertainty_score expects one probability vector")
    return float(uncertainty_scores(p, kind)[0])


def top_k(indices: np.ndarray, scores: np.ndarray, k: int) -> np.ndarray:
    """The ``k`` entries of ``indices`` with the highest score, ties to lower index."""
    order = np.lexsort((indices, -scores))
    return np.sort(indices[order[:k]])


def _check_budget(ctx: QueryContext) -> None:
    if ctx.budget > ctx.pools.unlabeled.size:
        raise ValueError(f"budget {ctx.budget} exceeds unlabeled pool of {ctx.pools.unlabeled.size}")


def query_random(ctx: QueryContext, seed: int) -> np.ndarray:
    _check_budget(ctx)
    rng = np.random.default_rng(seed)
    return np.sort(rng.choice(ctx.pools.unlabeled, size=ctx.budget, replace=False))


def query_uncertainty(ctx: QueryContext, kind: UncertaintyKind = UncertaintyKind.ENTROPY) -> np.ndarray:
    _check_budget(ctx)
    probs = predict_batch(ctx.selector_params, ctx.unlabeled_x())
    return top_k(ctx.pools.unlabeled, uncertainty_scores(probs, kind), ctx.budget)


def _min_dist(points: np.ndarray, centers: np.ndarray, chunk: int = 256) -> np.ndarray:
    """Euclidean distance from each point to its nearest center."""
    out = np.full(points.shape[0], np.inf)
    for s in range(0, centers.shape[0], chunk):
        diff = points[:, None, :] - centers[None, s : s + chunk, :]
        d = np.sqrt(np.einsum("ijk,ijk->ij", diff, diff))
        out = np.minimum(out, d.min(axis=1))
    return out


def greedy_kcenter(candidates, anchors, b: int) -> np.ndarray:
    """Farthest-first traversal over ``candidates`` given fixed ``anchors``.

    Returns positions into ``candidates`` in pick order. Without anchors the
    first pick is the candidate farthest from the candidate centroid.
    """
    cand = np.asarray(candidates, dtype=np.float64)
    if cand.ndim != 2:
        raise ValueError(f"candidates must be a 2-D array, got shape {cand.shape}")
    n = cand.shape[0]
    if b < 0 or b > n:
        raise ValueError(f"cannot pick {b} of {n} candidates")
    anc = np.asarray(anchors, dtype=np.float64)
    if anc.size == 0:
        anc = anc.reshape(0, cand.shape[1])
    if anc.ndim != 2 or anc.shape[1] != cand.shape[1]:
        raise ValueError(f"anchor dimension {anc.shape} does not match candidates {cand.shape}")

    picked: list[int] = []
    if b == 0:
        return np.array(picked, dtype=np.int64)
    if anc.shape[0]:
        dist = _min_dist(cand, anc)
    else:
        first = int(np.argmax(_min_dist(cand, cand.mean(axis=0, keepdims=True))))
        picked.append(first)
        dist = _min_dist(cand, cand[first : first + 1])
    taken = np.zeros(n, dtype=bool)
    taken[picked] = True
    while len(picked) < b:
        i = int(np.argmax(np.where(taken, -np.inf, dist)))
        picked.append(i)
        taken[i] = True
        dist = np.minimum(dist, _min_dist(cand, cand[i : i + 1]))
    return np.array(picked, dtype=np.int64)


def covering_radius(candidates, anchors, selected) -> float:
    """Max over candidates of the distance to the nearest anchor or selected point."""
    cand = np.asarray(candidates, dtype=np.float64)
    centers = [np.asarray(anchors, dtype=np.float64).reshape(-1, cand.shape[1]), cand[np.asarray(selected, dtype=np.int64)]]
    centers = np.concatenate(centers)
    if centers.shape[0] == 0:
        return float("inf")
    return float(_min_dist(cand, centers).max())


def query_coreset(ctx: QueryContext) -> np.ndarray:
    _check_budget(ctx)
    p = ctx.selector_params
    picks = greedy_kcenter(features_batch(p, ctx.unlabeled_x()), features_batch(p, ctx.labeled_x()), ctx.budget)
    return np.sort(ctx.pools.unlabeled[picks])


def run_baseline(name: str, ctx: QueryContext, seed: int) -> np.ndarray:
    if name == "random":
        return query_random(ctx, seed)
    if name in ("entropy", "margin", "lc"):
        return query_uncertainty(ctx, UncertaintyKind(name))
    if name == "coreset":
        return query_coreset(ctx)
    raise ValueError(f"unknown baseline strategy {name!r}")
