"""Small feed-forward softmax classifier trained with momentum SGD.

Two shapes are supported: linear (``hidden=None``; the penultimate features
are the inputs themselves) and one hidden ReLU layer. Everything runs in
float64.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, replace
from pathlib import Path
from typing import Optional

import numpy as np


class TrainingDiverged(RuntimeError):
    pass


def _frozen(a) -> np.ndarray:
    a = np.array(a, dtype=np.float64, copy=True)
    a.setflags(write=False)
    return a


@dataclass(frozen=True, eq=False)
class ModelParams:
    """Immutable parameter set. ``w1``/``b1`` are ``None`` in linear mode."""

    w2: np.ndarray
    b2: np.ndarray
    w1: Optional[np.ndarray] = None
    b1: Optional[np.ndarray] = None

    def __post_init__(self):
        if (self.w1 is None) != (self.b1 is None):
            raise ValueError("w1 and b1 must both be given or both be None")
        for name in ("w1", "b1", "w2", "b2"):
            v = getattr(self, name)
            if v is not None:
                v = _frozen(v)
                if not np.all(np.isfinite(v)):
                    raise ValueError(f"{name} has non-finite entries")
                object.__setattr__(self, name, v)
        c, h = self.w2.shape
        if self.b2.shape != (c,):
            raise ValueError(f"b2 shape {self.b2.shape} does not match w2 {self.w2.shape}")
        if self.w1 is not None and (self.w1.shape[0] != h or self.b1.shape != (h,)):
            raise ValueError(f"hidden layer shapes {self.w1.shape}/{self.b1.shape} do not match w2 {self.w2.shape}")

    @property
    def linear(self) -> bool:
        return self.w1 is None

    @property
    def input_dim(self) -> int:
        return self.w2.shape[1] if self.linear else self.w1.shape[1]

    @property
    def feature_dim(self) -> int:
        return self.w2.shape[1]

    @property
    def num_classes(self) -> int:
        return self.w2.shape[0]

    def arrays(self) -> dict[str, np.ndarray]:
        out = {"w2": self.w2, "b2": self.b2}
        if not self.linear:
            out.update(w1=self.w1, b1=self.b1)
        return out

    def equals(self, other: "ModelParams") -> bool:
        a, b = self.arrays(), other.arrays()
        return a.keys() == b.keys() and all(np.array_equal(a[k], b[k]) for k in a)


def init_params(input_dim: int, num_classes: int, hidden: Optional[int], seed: int) -> ModelParams:
    """Uniform(-1/sqrt(fan_in), 1/sqrt(fan_in)) initialisation."""
    rng = np.random.default_rng(seed)

    def layer(fan_out, fan_in):
        bound = 1.0 / math.sqrt(fan_in)
        return rng.uniform(-bound, bound, (fan_out, fan_in)), rng.uniform(-bound, bound, fan_out)

    if hidden is None:
        w2, b2 = layer(num_classes, input_dim)
        return ModelParams(w2, b2)
    w1, b1 = layer(hidden, input_dim)
    w2, b2 = layer(num_classes, hidden)
    return ModelParams(w2, b2, w1, b1)


def zeros_like(p: ModelParams) -> ModelParams:
    return ModelParams(**{k: np.zeros_like(v) for k, v in p.arrays().items()})


def softmax(logits: np.ndarray) -> np.ndarray:
    z = logits - logits.max(axis=-1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=-1, keepdims=True)


def _as_batch(p: ModelParams, xs) -> np.ndarray:
    x = np.asarray(xs, dtype=np.float64)
    if x.ndim == 1 and x.size == 0:
        x = x.reshape(0, p.input_dim)
    if x.ndim != 2 or x.shape[1] != p.input_dim:
        raise ValueError(f"expected inputs of dimension {p.input_dim}, got shape {x.shape}")
    return x


def _forward_raw(a: dict, x: np.ndarray):
    if "w1" not in a:
        pre, feats = None, x
    else:
        pre = x @ a["w1"].T + a["b1"]
        feats = np.maximum(pre, 0.0)
    logits = feats @ a["w2"].T + a["b2"]
    return pre, feats, logits, softmax(logits)


def _forward(p: ModelParams, x: np.ndarray):
    return _forward_raw(p.arrays(), x)


def _loss_and_grads_raw(a: dict, x: np.ndarray, y: np.ndarray):
    n = x.shape[0]
    pre, feats, logits, probs = _forward_raw(a, x)
    z = logits - logits.max(axis=1, keepdims=True)
    logp = z - np.log(np.exp(z).sum(axis=1, keepdims=True))
    loss = -logp[np.arange(n), y].mean()
    delta = probs.copy()
    delta[np.arange(n), y] -= 1.0
    delta /= n
    grads = {"w2": delta.T @ feats, "b2": delta.sum(axis=0)}
    if "w1" in a:
        dh = (delta @ a["w2"]) * (pre > 0)
        grads["w1"] = dh.T @ x
        grads["b1"] = dh.sum(axis=0)
    return float(loss), grads


def forward(p: ModelParams, x):
    """Return ``(features, logits, probs)`` for a single input vector."""
    x = np.asarray(x, dtype=np.float64)
    if x.ndim != 1:
        raise ValueError(f"forward expects a single vector, got shape {x.shape}")
    _, feats, logits, probs = _forward(p, _as_batch(p, x[None, :]))
    return feats[0], logits[0], probs[0]


def predict_batch(p: ModelParams, xs) -> np.ndarray:
    return _forward(p, _as_batch(p, xs))[3]


def features_batch(p: ModelParams, xs) -> np.ndarray:
    return _forward(p, _as_batch(p, xs))[1]


def loss_and_grads(p: ModelParams, xs, ys) -> tuple[float, dict[str, np.ndarray]]:
    """Mean cross-entropy over the batch and its gradient for every parameter."""
    x = _as_batch(p, xs)
    y = np.asarray(ys, dtype=np.int64)
    if y.shape != (x.shape[0],):
        raise ValueError(f"labels shape {y.shape} does not match {x.shape[0]} inputs")
    return _loss_and_grads_raw(p.arrays(), x, y)


@dataclass(frozen=True)
class TrainConfig:
    """SGD hyper-parameters.

    ``lr_decay_round`` counts epochs when passed straight to :func:`train_sgd`;
    the federation loop reinterprets it as a communication round.
    """

    lr: float = 0.01
    momentum: float = 0.9
    weight_decay: float = 1e-5
    batch_size: int = 64
    epochs: int = 1
    lr_decay_round: Optional[int] = None
    lr_decay_factor: float = 0.1
    seed: int = 0

    def __post_init__(self):
        if not self.lr > 0:
            raise ValueError(f"lr must be > 0, got {self.lr}")
        if not 0 <= self.momentum < 1:
            raise ValueError(f"momentum must be in [0, 1), got {self.momentum}")
        if not self.weight_decay >= 0:
            raise ValueError(f"weight_decay must be >= 0, got {self.weight_decay}")
        if self.batch_size < 1:
            raise ValueError(f"batch_size must be >= 1, got {self.batch_size}")
        if self.epochs < 0:
            raise ValueError(f"epochs must be >= 0, got {self.epochs}")
        if not self.lr_decay_factor > 0:
            raise ValueError(f"lr_decay_factor must be > 0, got {self.lr_decay_factor}")

    def with_(self, **kw) -> "TrainConfig":
        return replace(self, **kw)


def train_sgd(p: ModelParams, xs, ys, cfg: TrainConfig, loss_log: Optional[list] = None) -> ModelParams:
    """Mini-batch SGD with momentum and L2 weight decay on mean cross-entropy.

    The momentum buffer starts at zero on every call. The update follows the
    usual ``v = m * v + (g + wd * w); w -= lr * v`` form. If ``loss_log`` is
    given, the sample-weighted mean training loss of each epoch is appended.
    """
    if cfg.epochs == 0:
        return p
    x = _as_batch(p, xs)
    y = np.asarray(ys, dtype=np.int64)
    n = x.shape[0]
    if n == 0:
        raise ValueError("train_sgd needs at least one labeled sample")
    if y.shape != (n,):
        raise ValueError(f"labels shape {y.shape} does not match {n} inputs")
    rng = np.random.default_rng(cfg.seed)
    params = {k: v.copy() for k, v in p.arrays().items()}
    velocity = {k: np.zeros_like(v) for k, v in params.items()}
    for epoch in range(cfg.epochs):
        lr = cfg.lr
        if cfg.lr_decay_round is not None and epoch >= cfg.lr_decay_round:
            lr *= cfg.lr_decay_factor
        order = rng.permutation(n)
        total = 0.0
        for start in range(0, n, cfg.batch_size):
            batch = order[start : start + cfg.batch_size]
            with np.errstate(over="ignore", invalid="ignore"):
                loss, grads = _loss_and_grads_raw(params, x[batch], y[batch])
            if not math.isfinite(loss):
                raise TrainingDiverged(f"non-finite loss at epoch {epoch}")
            total += loss * batch.size
            for k in params:
                velocity[k] = cfg.momentum * velocity[k] + grads[k] + cfg.weight_decay * params[k]
                params[k] = params[k] - lr * velocity[k]
        if loss_log is not None:
            loss_log.append(total / n)
    if not all(np.all(np.isfinite(v)) for v in params.values()):
        raise TrainingDiverged("non-finite parameters after training")
    return ModelParams(**params)


def gradient_embedding_batch(p: ModelParams, xs, labels=None) -> np.ndarray:
    """Cross-entropy gradient w.r.t. the classifier head, one row per input.

    Each row is ``outer(probs - onehot(label), features)`` flattened class by
    class, followed by the bias part ``probs - onehot(label)``. ``label``
    defaults to the model's argmax prediction.
    """
    x = _as_batch(p, xs)
    _, feats, _, probs = _forward(p, x)
    n, c = probs.shape
    y = probs.argmax(axis=1) if labels is None else np.asarray(labels, dtype=np.int64)
    err = probs.copy()
    err[np.arange(n), y] -= 1.0
    head = (err[:, :, None] * feats[:, None, :]).reshape(n, -1)
    return np.concatenate([head, err], axis=1)


def gradient_embedding(p: ModelParams, x, label: Optional[int] = None) -> np.ndarray:
    x = np.asarray(x, dtype=np.float64)
    if x.ndim != 1:
        raise ValueError(f"gradient_embedding expects a single vector, got shape {x.shape}")
    return gradient_embedding_batch(p, x[None, :], None if label is None else [label])[0]


def save_params(p: ModelParams, path) -> None:
    """Debug dump: shapes plus row-major values as JSON."""
    doc = {k: {"shape": list(v.shape), "values": v.ravel().tolist()} for k, v in p.arrays().items()}
    Path(path).write_text(json.dumps(doc))


def load_params(path) -> ModelParams:
    doc = json.loads(Path(path).read_text())
    return ModelParams(**{k: np.array(v["values"], dtype=np.float64).reshape(v["shape"]) for k, v in doc.items()})
