"""Class-fair acquisition: adaptive query-model choice, prototype pseudo-labels,
and two-stage uncertainty/diversity sampling per pseudo-class.
"""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field
from typing import Mapping, Optional, Sequence

import numpy as np

from fairfal.model import ModelParams, features_batch, gradient_embedding_batch, predict_batch
from fairfal.strategies import QueryContext, Selector, UncertaintyKind, greedy_kcenter, top_k, uncertainty_scores

log = logging.getLogger(__name__)

DIVERGENCE_EPS = 1e-12


@dataclass(frozen=True)
class FairFALConfig:
    kappa: float = 4.0
    delta: float = 0.75
    uncertainty: UncertaintyKind = UncertaintyKind.ENTROPY
    cosine_prototypes: bool = False
    # "argmax" or "pseudo": hypothesised label inside the gradient embedding
    embedding_label: str = "argmax"

    def __post_init__(self):
        if not self.kappa > 1:
            raise ValueError(f"kappa must be > 1, got {self.kappa}")
        if not 0 < self.delta < 1:
            raise ValueError(f"delta must be in (0, 1), got {self.delta}")
        object.__setattr__(self, "uncertainty", UncertaintyKind(self.uncertainty))
        if self.embedding_label not in ("argmax", "pseudo"):
            raise ValueError(f"embedding_label must be 'argmax' or 'pseudo', got {self.embedding_label!r}")


@dataclass(frozen=True)
class BalanceEstimate:
    gamma_k: float
    gamma_bar: float
    d_k: float
    s_k: float


def labeled_by_class(indices, labels) -> dict[int, np.ndarray]:
    """Group ``indices`` by their label, classes ascending, empty classes omitted."""
    idx = np.asarray(indices, dtype=np.int64)
    lab = np.asarray(labels, dtype=np.int64)
    return {int(c): np.sort(idx[lab == c]) for c in np.unique(lab)}


def build_balanced_subset(per_class: Mapping[int, Sequence[int]], seed: int) -> np.ndarray:
    """Upsample every observed class to the largest class count.

    Each class contributes all of its indices once, then uniform draws with
    replacement until it reaches ``max_c n_c``.
    """
    groups = {c: np.asarray(v, dtype=np.int64) for c, v in per_class.items() if len(v) > 0}
    if not groups:
        raise ValueError("balanced subset needs at least one labeled sample")
    n_max = max(g.size for g in groups.values())
    rng = np.random.default_rng(seed)
    parts = []
    for c in sorted(groups):
        g = groups[c]
        parts.append(g)
        if g.size < n_max:
            parts.append(rng.choice(g, size=n_max - g.size, replace=True))
    return np.concatenate(parts)


def estimate_prior(params: ModelParams, features: np.ndarray, subset) -> np.ndarray:
    """Mean predicted probability vector over the (multi)set ``subset``."""
    idx = np.asarray(subset, dtype=np.int64)
    if idx.size == 0:
        raise ValueError("cannot estimate a prior from an empty subset")
    return predict_batch(params, features[idx]).mean(axis=0)


def gamma_from_prior(prior, observed: Sequence[int]) -> float:
    """min/max ratio of the prior restricted to the observed classes."""
    obs = np.asarray(sorted(observed), dtype=np.int64)
    if obs.size == 0:
        raise ValueError("no observed classes")
    vals = np.asarray(prior, dtype=np.float64)[obs]
    return float(vals.min() / vals.max())


def aggregate_gamma(gammas: Sequence[float]) -> float:
    if len(gammas) == 0:
        raise ValueError("no gamma values to aggregate")
    return float(np.mean(np.asarray(gammas, dtype=np.float64)))


def divergence(prior_global, prior_local, eps: float = DIVERGENCE_EPS) -> float:
    """Class-averaged normalised absolute difference of two priors, in [0, 1]."""
    g = np.asarray(prior_global, dtype=np.float64)
    l = np.asarray(prior_local, dtype=np.float64)
    if g.shape != l.shape:
        raise ValueError(f"prior shapes differ: {g.shape} vs {l.shape}")
    return float(np.mean(np.abs(g - l) / (g + l + eps)))


def selection_score(gamma_bar: float, d_k: float) -> float:
    return 1.0 - 0.5 * (d_k + gamma_bar)


def select_model(gamma_bar: float, d_k: float, delta: float) -> tuple[Selector, float]:
    """Global when the score is strictly above ``delta``, else local."""
    s = selection_score(gamma_bar, d_k)
    return (Selector.GLOBAL if s > delta else Selector.LOCAL), s


@dataclass(frozen=True, eq=False)
class PrototypeSet:
    classes: np.ndarray
    vectors: np.ndarray

    def __len__(self) -> int:
        return int(self.classes.size)

    def get(self, c: int) -> np.ndarray:
        pos = np.searchsorted(self.classes, c)
        if pos >= self.classes.size or self.classes[pos] != c:
            raise KeyError(c)
        return self.vectors[pos]


def _l2_normalize(feats: np.ndarray) -> np.ndarray:
    norms = np.linalg.norm(feats, axis=1, keepdims=True)
    zero = norms[:, 0] == 0
    if zero.any():
        log.warning("%d feature vector(s) have zero norm; left as zero", int(zero.sum()))
    return np.divide(feats, norms, out=np.zeros_like(feats), where=norms > 0)


def compute_prototypes(global_params: ModelParams, xs, ys) -> PrototypeSet:
    """Per-class mean of l2-normalised global features (the mean is not renormalised)."""
    x = np.asarray(xs, dtype=np.float64)
    y = np.asarray(ys, dtype=np.int64)
    if y.size == 0:
        raise ValueError("prototypes need at least one labeled sample")
    z = _l2_normalize(features_batch(global_params, x))
    classes = np.unique(y)
    return PrototypeSet(classes, np.stack([z[y == c].mean(axis=0) for c in classes]))


def pseudo_label_batch(protos: PrototypeSet, feats, cosine: bool = False) -> np.ndarray:
    """Prototype with the largest inner product with the normalised feature; ties to lower class."""
    if len(protos) == 0:
        raise ValueError("empty prototype set")
    f = np.asarray(feats, dtype=np.float64)
    if f.ndim == 1:
        f = f[None, :]
    z = _l2_normalize(f)
    mu = protos.vectors
    if cosine:
        mu = _l2_normalize(mu)
    sims = z @ mu.T
    return protos.classes[np.argmax(sims, axis=1)]


def pseudo_label(protos: PrototypeSet, feature, cosine: bool = False) -> int:
    return int(pseudo_label_batch(protos, np.asarray(feature)[None, :], cosine)[0])


def allocate_budgets(budget: int, classes: Sequence[int], pool_sizes: Sequence[int]) -> np.ndarray:
    """Split ``budget`` uniformly over ``classes`` (ascending id), clamped to pool sizes.

    The remainder of the even split goes one unit at a time to the lowest
    class ids; any overflow beyond a class's pool is handed out round-robin, in
    the same order, to classes with spare capacity.
    """
    cls = np.asarray(classes, dtype=np.int64)
    sizes = np.asarray(pool_sizes, dtype=np.int64)
    if cls.size == 0:
        raise ValueError("no classes to allocate budget to")
    if sizes.shape != cls.shape:
        raise ValueError("pool_sizes must align with classes")
    if sizes.sum() < budget:
        raise ValueError(f"pseudo-class pools hold {int(sizes.sum())} samples, fewer than budget {budget}")
    order = np.argsort(cls, kind="stable")
    m = cls.size
    alloc = np.full(m, budget // m, dtype=np.int64)
    alloc[order[: budget % m]] += 1
    deficit = int(np.maximum(alloc - sizes, 0).sum())
    alloc = np.minimum(alloc, sizes)
    while deficit > 0:
        for i in order:
            if deficit == 0:
                break
            if alloc[i] < sizes[i]:
                alloc[i] += 1
                deficit -= 1
    return alloc


def candidate_pool(pool: np.ndarray, scores: np.ndarray, b: int, kappa: float) -> np.ndarray:
    """The ``min(ceil(kappa * b), |pool|)`` most uncertain members of ``pool``."""
    if b < 1:
        raise ValueError(f"class budget must be >= 1, got {b}")
    size = min(math.ceil(kappa * b - 1e-9), len(pool))
    return top_k(np.asarray(pool, dtype=np.int64), np.asarray(scores, dtype=np.float64), size)


def estimate_balance(ctx: QueryContext, seed: int) -> tuple[float, float]:
    """``(gamma_k, d_k)`` for one client from its class-balanced labeled subset."""
    ds = ctx.dataset
    per_class = labeled_by_class(ctx.pools.labeled, ds.labels[ctx.pools.labeled])
    subset = build_balanced_subset(per_class, seed)
    prior_g = estimate_prior(ctx.global_params, ds.features, subset)
    prior_l = estimate_prior(ctx.local_params, ds.features, subset)
    return gamma_from_prior(prior_g, list(per_class)), divergence(prior_g, prior_l)


@dataclass
class FairFALResult:
    selected: np.ndarray
    balance: BalanceEstimate
    model: Selector
    classes: np.ndarray
    budgets: np.ndarray
    pool_sizes: np.ndarray
    pseudo_labels: dict[int, int] = field(default_factory=dict)


def fairfal_query(ctx: QueryContext, cfg: FairFALConfig, gamma_bar: float, seed: int) -> FairFALResult:
    """Select ``ctx.budget`` unlabeled samples for one client.

    ``gamma_bar`` is the server-averaged balance coefficient; ``seed`` drives
    the class-balanced upsampling used for the priors.
    """
    ds = ctx.dataset
    lab, unl = ctx.pools.labeled, ctx.pools.unlabeled
    if ctx.budget > unl.size:
        raise ValueError(f"budget {ctx.budget} exceeds unlabeled pool of {unl.size}")
    gamma_k, d_k = estimate_balance(ctx, seed)
    model, s_k = select_model(gamma_bar, d_k, cfg.delta)
    balance = BalanceEstimate(gamma_k, gamma_bar, d_k, s_k)

    g = ctx.global_params
    lab_y = ds.labels[lab]
    protos = compute_prototypes(g, ds.features[lab], lab_y)
    unl_x = ds.features[unl]
    pseudo = pseudo_label_batch(protos, features_batch(g, unl_x), cfg.cosine_prototypes)

    classes = protos.classes
    pools = [unl[pseudo == c] for c in classes]
    sizes = np.array([p.size for p in pools], dtype=np.int64)
    budgets = allocate_budgets(ctx.budget, classes, sizes)

    scorer = g if model is Selector.GLOBAL else ctx.local_params
    scores = uncertainty_scores(predict_batch(scorer, unl_x), cfg.uncertainty)
    score_of = dict(zip(unl.tolist(), scores))
    pseudo_of = dict(zip(unl.tolist(), pseudo.tolist()))

    chosen = []
    for c, pool, b in zip(classes, pools, budgets):
        if b == 0:
            continue
        cand = candidate_pool(pool, np.array([score_of[i] for i in pool.tolist()]), int(b), cfg.kappa)
        anchors_idx = lab[lab_y == c]
        if cfg.embedding_label == "pseudo":
            cand_emb = gradient_embedding_batch(g, ds.features[cand], [pseudo_of[i] for i in cand.tolist()])
            anc_emb = gradient_embedding_batch(g, ds.features[anchors_idx], ds.labels[anchors_idx])
        else:
            cand_emb = gradient_embedding_batch(g, ds.features[cand])
            anc_emb = gradient_embedding_batch(g, ds.features[anchors_idx])
        picks = greedy_kcenter(cand_emb, anc_emb, int(b))
        chosen.append(cand[picks])

    selected = np.sort(np.concatenate(chosen)) if chosen else np.empty(0, dtype=np.int64)
    return FairFALResult(
        selected=selected,
        balance=balance,
        model=model,
        classes=classes,
        budgets=budgets,
        pool_sizes=sizes,
        pseudo_labels={int(i): pseudo_of[int(i)] for i in selected},
    )
