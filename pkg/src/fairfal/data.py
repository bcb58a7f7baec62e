"""Datasets, long-tail shaping, Dirichlet client partitioning and label pools.

All index sets are stored as sorted ``int64`` arrays so that iteration order
never influences downstream results.
"""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass
from pathlib import Path
from typing import Sequence

import numpy as np

from fairfal.rng import stream


def _frozen(a: np.ndarray) -> np.ndarray:
    a = np.array(a, copy=True)
    a.setflags(write=False)
    return a


@dataclass(frozen=True, eq=False)
class Dataset:
    """Feature matrix with integer labels in ``0..num_classes-1``."""

    features: np.ndarray
    labels: np.ndarray
    num_classes: int

    def __post_init__(self):
        x = np.asarray(self.features, dtype=np.float64)
        y = np.asarray(self.labels)
        if x.ndim != 2 or x.shape[0] < 1:
            raise ValueError(f"features must be a non-empty 2-D matrix, got shape {x.shape}")
        if y.shape != (x.shape[0],):
            raise ValueError(f"labels must have shape ({x.shape[0]},), got {y.shape}")
        if y.size and not np.issubdtype(y.dtype, np.integer):
            if not np.all(np.equal(np.mod(y, 1), 0)):
                raise ValueError("labels must be integers")
        y = y.astype(np.int64)
        if self.num_classes < 2:
            raise ValueError(f"num_classes must be >= 2, got {self.num_classes}")
        if y.min() < 0 or y.max() >= self.num_classes:
            raise ValueError(f"labels must lie in [0, {self.num_classes - 1}]")
        if not np.all(np.isfinite(x)):
            raise ValueError("features must be finite")
        object.__setattr__(self, "features", _frozen(x))
        object.__setattr__(self, "labels", _frozen(y))
        object.__setattr__(self, "num_classes", int(self.num_classes))

    def __len__(self) -> int:
        return self.features.shape[0]

    @property
    def dim(self) -> int:
        return self.features.shape[1]

    def class_counts(self) -> np.ndarray:
        return np.bincount(self.labels, minlength=self.num_classes)

    def subset(self, indices) -> "Dataset":
        idx = np.asarray(indices, dtype=np.int64)
        return Dataset(self.features[idx], self.labels[idx], self.num_classes)

    def equals(self, other: "Dataset") -> bool:
        return (
            self.num_classes == other.num_classes
            and np.array_equal(self.features, other.features)
            and np.array_equal(self.labels, other.labels)
        )


@dataclass(frozen=True)
class PartitionSpec:
    num_clients: int
    alpha: float
    rho: float = 1.0
    seed: int = 0

    def __post_init__(self):
        if self.num_clients < 1:
            raise ValueError(f"num_clients must be >= 1, got {self.num_clients}")
        if not self.alpha > 0:
            raise ValueError(f"alpha must be > 0, got {self.alpha}")
        if not self.rho >= 1:
            raise ValueError(f"rho must be >= 1, got {self.rho}")


def _index_set(values) -> np.ndarray:
    a = np.unique(np.asarray(values, dtype=np.int64))
    a.setflags(write=False)
    return a


@dataclass(frozen=True, eq=False)
class ClientPools:
    """Disjoint labeled / unlabeled index sets of one client."""

    labeled: np.ndarray
    unlabeled: np.ndarray

    def __post_init__(self):
        lab = np.asarray(self.labeled, dtype=np.int64).ravel()
        unl = np.asarray(self.unlabeled, dtype=np.int64).ravel()
        if np.unique(lab).size != lab.size or np.unique(unl).size != unl.size:
            raise ValueError("index sets must not contain duplicates")
        object.__setattr__(self, "labeled", _index_set(lab))
        object.__setattr__(self, "unlabeled", _index_set(unl))
        if np.intersect1d(self.labeled, self.unlabeled).size:
            raise ValueError("labeled and unlabeled pools overlap")

    @classmethod
    def unlabeled_only(cls, indices) -> "ClientPools":
        return cls(np.empty(0, dtype=np.int64), indices)

    @property
    def size(self) -> int:
        return int(self.labeled.size + self.unlabeled.size)

    @property
    def all_indices(self) -> np.ndarray:
        return np.union1d(self.labeled, self.unlabeled)

    def acquire(self, indices) -> "ClientPools":
        """Move ``indices`` from the unlabeled to the labeled pool."""
        idx = np.asarray(indices, dtype=np.int64)
        if np.unique(idx).size != idx.size:
            raise ValueError("acquired indices contain duplicates")
        if not np.isin(idx, self.unlabeled).all():
            raise ValueError("acquired indices must come from the unlabeled pool")
        return ClientPools(np.union1d(self.labeled, idx), np.setdiff1d(self.unlabeled, idx))

    def equals(self, other: "ClientPools") -> bool:
        return np.array_equal(self.labeled, other.labeled) and np.array_equal(self.unlabeled, other.unlabeled)


def _class_means(num_classes: int, dim: int, separation: float, rng: np.random.Generator) -> np.ndarray:
    if num_classes <= dim:
        # orthonormal directions scaled so every pair sits exactly `separation` apart
        q, _ = np.linalg.qr(rng.standard_normal((dim, num_classes)))
        return q.T * (separation / math.sqrt(2.0))
    dirs = rng.standard_normal((num_classes, dim))
    diff = dirs[:, None, :] - dirs[None, :, :]
    dist = np.sqrt((diff**2).sum(-1))
    dist[np.diag_indices(num_classes)] = np.inf
    return dirs * (separation / dist.min())


def synth_blobs(num_classes: int, per_class: int, dim: int, separation: float, seed: int) -> Dataset:
    """Unit-variance Gaussian blobs, one per class, class means >= ``separation`` apart."""
    if num_classes < 2:
        raise ValueError(f"num_classes must be >= 2, got {num_classes}")
    if per_class < 1:
        raise ValueError(f"per_class must be >= 1, got {per_class}")
    if dim < 2:
        raise ValueError(f"dim must be >= 2, got {dim}")
    if not separation > 0:
        raise ValueError(f"separation must be > 0, got {separation}")
    rng = stream(seed, "synth-blobs")
    means = _class_means(num_classes, dim, separation, rng)
    labels = np.repeat(np.arange(num_classes), per_class)
    features = means[labels] + rng.standard_normal((labels.size, dim))
    return Dataset(features, labels, num_classes)


def long_tail_counts(available: Sequence[int], rho: float, profile: str = "exp") -> np.ndarray:
    """Per-class retained counts for an imbalance ratio ``rho``.

    Classes are ranked by available count (descending, ties by id); rank ``r``
    keeps ``round(n_max * rho ** (-r / (C - 1)))`` under the exponential
    profile, or ``n_max`` / ``round(n_max / rho)`` for the first / second half
    under the step profile. Counts are capped by availability.
    """
    avail = np.asarray(available, dtype=np.int64)
    c = avail.size
    if not rho >= 1:
        raise ValueError(f"rho must be >= 1, got {rho}")
    if c < 2:
        raise ValueError("need at least two classes")
    if np.any(avail <= 0):
        raise ValueError("every class must be present before long-tail shaping")
    order = np.lexsort((np.arange(c), -avail))
    n_max = int(avail[order[0]])
    ranks = np.arange(c)
    if profile == "exp":
        target = n_max * np.power(float(rho), -ranks / (c - 1))
    elif profile == "step":
        target = np.where(ranks < (c + 1) // 2, float(n_max), n_max / float(rho))
    else:
        raise ValueError(f"unknown long-tail profile {profile!r}")
    target = np.floor(target + 0.5).astype(np.int64)
    counts = np.empty(c, dtype=np.int64)
    counts[order] = np.minimum(target, avail[order])
    if np.any(counts == 0):
        raise ValueError(f"rho={rho} leaves some class with zero samples: {counts.tolist()}")
    return counts


def long_tail_indices(ds: Dataset, rho: float, seed: int, profile: str = "exp") -> np.ndarray:
    counts = long_tail_counts(ds.class_counts(), rho, profile)
    keep = []
    for c in range(ds.num_classes):
        members = np.flatnonzero(ds.labels == c)
        rng = stream(seed, "long-tail", c)
        keep.append(rng.choice(members, size=counts[c], replace=False))
    return np.sort(np.concatenate(keep))


def make_long_tailed(ds: Dataset, rho: float, seed: int, profile: str = "exp") -> Dataset:
    """Subsample ``ds`` so that the head/tail class-count ratio is ``rho``."""
    return ds.subset(long_tail_indices(ds, rho, seed, profile))


def _largest_remainder(proportions: np.ndarray, total: int) -> np.ndarray:
    raw = proportions * total
    counts = np.floor(raw).astype(np.int64)
    short = total - int(counts.sum())
    if short > 0:
        frac = raw - counts
        order = np.lexsort((np.arange(frac.size), -frac))
        counts[order[:short]] += 1
    return counts


def dirichlet_partition(ds: Dataset, spec: PartitionSpec) -> list[np.ndarray]:
    """Split ``ds`` across ``spec.num_clients`` clients with per-class Dirichlet shares."""
    k = spec.num_clients
    if k > len(ds):
        raise ValueError(f"cannot split {len(ds)} samples across {k} clients")
    parts: list[list[np.ndarray]] = [[] for _ in range(k)]
    for c in range(ds.num_classes):
        members = np.flatnonzero(ds.labels == c)
        rng = stream(spec.seed, "dirichlet", c)
        props = rng.dirichlet(np.full(k, float(spec.alpha)))
        members = rng.permutation(members)
        counts = _largest_remainder(props, members.size)
        bounds = np.concatenate([[0], np.cumsum(counts)])
        for client in range(k):
            parts[client].append(members[bounds[client] : bounds[client + 1]])
    return [np.sort(np.concatenate(p)).astype(np.int64) for p in parts]


def labeled_count(fraction: float, size: int) -> int:
    """``ceil(fraction * size)``, tolerant to binary rounding of ``fraction``."""
    return min(size, math.ceil(fraction * size - 1e-9))


def init_labeled(pools: ClientPools, fraction: float, seed: int) -> ClientPools:
    """Label a uniform random ``ceil(fraction * |client data|)`` subset of the client."""
    if not 0 < fraction <= 1:
        raise ValueError(f"fraction must be in (0, 1], got {fraction}")
    if pools.labeled.size:
        raise ValueError("init_labeled expects an empty labeled set")
    n = labeled_count(fraction, pools.size)
    rng = np.random.default_rng(seed)
    return pools.acquire(rng.choice(pools.unlabeled, size=n, replace=False))


def load_csv(path) -> Dataset:
    """Read a CSV with feature columns and a ``label`` column.

    Labels are remapped to ``0..C-1`` following their sorted order (numeric
    sort when every label parses as a number).
    """
    path = Path(path)
    with path.open(newline="") as fh:
        reader = csv.reader(fh)
        try:
            header = next(reader)
        except StopIteration:
            raise ValueError(f"{path}: empty file") from None
        header = [h.strip() for h in header]
        if "label" not in header:
            raise ValueError(f"{path}:1: header has no 'label' column")
        li = header.index("label")
        if len(header) < 2:
            raise ValueError(f"{path}:1: no feature columns")
        rows: list[list[float]] = []
        raw_labels: list[str] = []
        for lineno, row in enumerate(reader, start=2):
            if not row or all(not v.strip() for v in row):
                continue
            if len(row) != len(header):
                raise ValueError(f"{path}:{lineno}: expected {len(header)} fields, got {len(row)}")
            label = row[li].strip()
            if not label:
                raise ValueError(f"{path}:{lineno}: missing label")
            feats = []
            for j, v in enumerate(row):
                if j == li:
                    continue
                try:
                    feats.append(float(v))
                except ValueError:
                    raise ValueError(f"{path}:{lineno}: non-numeric value {v!r} in column {header[j]!r}") from None
            rows.append(feats)
            raw_labels.append(label)
    if not rows:
        raise ValueError(f"{path}: no data rows")
    uniq = sorted(set(raw_labels))
    try:
        uniq = sorted(uniq, key=float)
    except ValueError:
        pass
    if len(uniq) < 2:
        raise ValueError(f"{path}: need at least two distinct labels, got {uniq}")
    remap = {lab: i for i, lab in enumerate(uniq)}
    return Dataset(np.array(rows), np.array([remap[lab] for lab in raw_labels]), len(uniq))


def write_csv(ds: Dataset, path) -> None:
    path = Path(path)
    with path.open("w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow([f"x{j}" for j in range(ds.dim)] + ["label"])
        for x, y in zip(ds.features, ds.labels):
            w.writerow([repr(float(v)) for v in x] + [int(y)])


def split_balanced_test(ds: Dataset, per_class: int, seed: int) -> tuple[Dataset, Dataset]:
    """Hold out ``per_class`` samples of every class; return ``(train, test)``."""
    test = []
    for c in range(ds.num_classes):
        members = np.flatnonzero(ds.labels == c)
        if members.size <= per_class:
            raise ValueError(f"class {c} has {members.size} samples, cannot hold out {per_class}")
        test.append(stream(seed, "test-split", c).choice(members, size=per_class, replace=False))
    test_idx = np.sort(np.concatenate(test))
    train_idx = np.setdiff1d(np.arange(len(ds)), test_idx)
    return ds.subset(train_idx), ds.subset(test_idx)
