"""FedAvg training of a global model plus independently trained local models."""

from __future__ import annotations

import os
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from typing import Callable, Optional, Sequence

import numpy as np

from fairfal.data import ClientPools, Dataset
from fairfal.model import ModelParams, TrainConfig, TrainingDiverged, train_sgd
from fairfal.rng import derive_seed

THREADS_ENV = "FAIRFAL_MAX_THREADS"


def resolve_threads(requested: Optional[int]) -> int:
    """Requested worker count, capped by ``$FAIRFAL_MAX_THREADS`` when set."""
    n = requested if requested and requested > 0 else (os.cpu_count() or 1)
    cap = os.environ.get(THREADS_ENV)
    if cap:
        n = min(n, max(1, int(cap)))
    return max(1, n)


def map_ordered(fn: Callable, items: Sequence, threads: int = 1) -> list:
    """``[fn(x) for x in items]``, optionally on a thread pool; result order is fixed."""
    if threads <= 1 or len(items) <= 1:
        return [fn(x) for x in items]
    with ThreadPoolExecutor(max_workers=min(threads, len(items))) as pool:
        return list(pool.map(fn, items))


@dataclass(frozen=True)
class FederationConfig:
    """FedAvg schedule.

    ``train.lr_decay_round`` is read as a communication round here. When
    ``local_model_epochs`` is ``None`` it becomes
    ``min(comm_rounds * local_epochs, 200)``. ``local_model`` is
    ``"scratch"`` (trained alone from the shared init) or ``"participant"``
    (the client's own copy after its last-round local epochs).
    """

    comm_rounds: int = 100
    local_epochs: int = 5
    train: TrainConfig = field(default_factory=lambda: TrainConfig(lr_decay_round=75))
    local_model_epochs: Optional[int] = None
    local_model: str = "scratch"

    def __post_init__(self):
        if self.local_model not in ("scratch", "participant"):
            raise ValueError(f"local_model must be 'scratch' or 'participant', got {self.local_model!r}")
        if self.comm_rounds < 1:
            raise ValueError(f"comm_rounds must be >= 1, got {self.comm_rounds}")
        if self.local_epochs < 1:
            raise ValueError(f"local_epochs must be >= 1, got {self.local_epochs}")
        if self.local_model_epochs is not None and self.local_model_epochs < 1:
            raise ValueError(f"local_model_epochs must be >= 1, got {self.local_model_epochs}")

    @property
    def resolved_local_model_epochs(self) -> int:
        if self.local_model_epochs is not None:
            return self.local_model_epochs
        return min(self.comm_rounds * self.local_epochs, 200)

    def round_lr(self, r: int) -> float:
        """Learning rate for 0-based communication round ``r``."""
        t = self.train
        if t.lr_decay_round is not None and r >= t.lr_decay_round:
            return t.lr * t.lr_decay_factor
        return t.lr

    def local_model_decay_epoch(self) -> Optional[int]:
        t = self.train
        if t.lr_decay_round is None:
            return None
        frac = t.lr_decay_round / self.comm_rounds
        return int(round(frac * self.resolved_local_model_epochs))


@dataclass
class FederationResult:
    global_params: ModelParams
    local_params: list[ModelParams]
    round_log: list[float] = field(default_factory=list)


def fedavg_aggregate(entries: Sequence[tuple[ModelParams, float]]) -> ModelParams:
    """Weighted parameter average, weights ``n_k / sum(n)``."""
    if not entries:
        raise ValueError("fedavg_aggregate needs at least one entry")
    weights = np.array([float(n) for _, n in entries])
    if np.any(weights < 0):
        raise ValueError("aggregation weights must be non-negative")
    total = weights.sum()
    if not total > 0:
        raise ValueError("aggregation weights sum to zero")
    ref = entries[0][0].arrays()
    for p, _ in entries[1:]:
        a = p.arrays()
        if a.keys() != ref.keys() or any(a[k].shape != ref[k].shape for k in ref):
            raise ValueError("cannot aggregate parameters of different shapes")
    out = {}
    for k in ref:
        acc = np.zeros_like(ref[k])
        for (p, _), w in zip(entries, weights):
            acc = acc + (w / total) * p.arrays()[k]
        out[k] = acc
    return ModelParams(**out)


def _labeled_xy(ds: Dataset, pools: ClientPools):
    idx = pools.labeled
    return ds.features[idx], ds.labels[idx]


def train_local_model(init: ModelParams, ds: Dataset, pools: ClientPools, cfg: FederationConfig, seed: int) -> ModelParams:
    """Client-only model trained from ``init`` on the client's labeled pool."""
    x, y = _labeled_xy(ds, pools)
    tcfg = cfg.train.with_(
        epochs=cfg.resolved_local_model_epochs,
        lr_decay_round=cfg.local_model_decay_epoch(),
        seed=seed,
    )
    return train_sgd(init, x, y, tcfg)


def run_federation(
    clients: Sequence[ClientPools],
    ds: Dataset,
    cfg: FederationConfig,
    init: ModelParams,
    seed: int,
    threads: int = 1,
    local_init: Optional[ModelParams] = None,
    evaluate: Optional[Callable[[ModelParams], float]] = None,
    train_local: bool = True,
) -> FederationResult:
    """FedAvg over ``clients`` followed by one independent local model per client.

    Client ``k`` in round ``r`` shuffles with the stream
    ``(seed, "fedavg", k, r)``, so serial and threaded execution agree bit for
    bit. ``local_init`` defaults to ``init``.
    """
    for k, pools in enumerate(clients):
        if pools.labeled.size == 0:
            raise ValueError(f"client {k} has no labeled samples")
    data = [_labeled_xy(ds, p) for p in clients]
    weights = [p.labeled.size for p in clients]
    global_params = init
    round_log: list[float] = []

    for r in range(cfg.comm_rounds):
        tcfg = cfg.train.with_(epochs=cfg.local_epochs, lr=cfg.round_lr(r), lr_decay_round=None)

        def local_update(k, g=global_params, tcfg=tcfg, r=r):
            x, y = data[k]
            try:
                return train_sgd(g, x, y, tcfg.with_(seed=derive_seed(seed, "fedavg", k, r)))
            except TrainingDiverged as exc:
                raise TrainingDiverged(f"client {k}, round {r}: {exc}") from exc

        updates = map_ordered(local_update, range(len(clients)), threads)
        global_params = fedavg_aggregate(list(zip(updates, weights)))
        if evaluate is not None:
            round_log.append(evaluate(global_params))

    local_params: list[ModelParams] = []
    if train_local and cfg.local_model == "participant":
        local_params = list(updates)
    elif train_local:
        start = init if local_init is None else local_init

        def local_model(k):
            try:
                return train_local_model(start, ds, clients[k], cfg, derive_seed(seed, "local-model", k))
            except TrainingDiverged as exc:
                raise TrainingDiverged(f"client {k}, local model: {exc}") from exc

        local_params = map_ordered(local_model, range(len(clients)), threads)
    return FederationResult(global_params, local_params, round_log)
