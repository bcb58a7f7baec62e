"""The outer federated active-learning loop, persistence and multi-seed comparison."""

from __future__ import annotations

import csv
import json
import logging
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Optional, Sequence

import numpy as np

from fairfal.config import ExperimentConfig, with_changes
from fairfal.data import (
    ClientPools,
    Dataset,
    PartitionSpec,
    dirichlet_partition,
    init_labeled,
    labeled_count,
    load_csv,
    make_long_tailed,
    split_balanced_test,
    synth_blobs,
)
from fairfal.evaluation import LearningCurve, PairedStats, accuracy, compare
from fairfal.federation import FederationConfig, map_ordered, resolve_threads, run_federation
from fairfal.model import TrainConfig, init_params
from fairfal.pipeline import aggregate_gamma, estimate_balance, fairfal_query
from fairfal.rng import derive_seed
from fairfal.strategies import QueryContext, Selector, parse_strategy, run_baseline

log = logging.getLogger(__name__)

CURVE_COLUMNS = ("cycle", "labeled_fraction", "test_accuracy")
QUERY_COLUMNS = ("cycle", "client", "sample_index", "true_class", "pseudo_class", "selector_model")
DIAG_COLUMNS = ("cycle", "client", "gamma_k", "gamma_bar", "d_k", "s_k", "model")
BUDGET_COLUMNS = ("cycle", "client", "class", "budget", "pool_size")


class ExperimentError(RuntimeError):
    pass


@dataclass(frozen=True)
class CyclePoint:
    cycle: int
    labeled_fraction: float
    test_accuracy: float


@dataclass(frozen=True)
class QueryRecord:
    cycle: int
    client: int
    sample_index: int
    true_class: int
    pseudo_class: int  # -1 when the strategy assigns none
    selector_model: str


@dataclass(frozen=True)
class DiagRecord:
    cycle: int
    client: int
    gamma_k: float
    gamma_bar: float
    d_k: float
    s_k: float
    model: str


@dataclass
class RunRecord:
    seed: int
    strategy: str
    curve: list[CyclePoint] = field(default_factory=list)
    queries: list[QueryRecord] = field(default_factory=list)
    diagnostics: list[DiagRecord] = field(default_factory=list)
    budgets: list[tuple[int, int, int, int, int]] = field(default_factory=list)
    class_counts: list[int] = field(default_factory=list)
    client_sizes: list[int] = field(default_factory=list)
    gamma_bar: Optional[float] = None

    def learning_curve(self) -> LearningCurve:
        return LearningCurve.from_points([(p.labeled_fraction, p.test_accuracy) for p in self.curve])


@dataclass
class Setup:
    train: Dataset
    test: Dataset
    client_indices: list[np.ndarray]


def build_setup(cfg: ExperimentConfig, seed: int) -> Setup:
    """Dataset, balanced test split, long-tail shaping and client partition for one seed."""
    d = cfg.data
    if d.kind == "blobs":
        full = synth_blobs(d.num_classes, d.per_class + d.test_per_class, d.dim, d.separation, derive_seed(seed, "data"))
    else:
        full = load_csv(d.path)
    train, test = split_balanced_test(full, d.test_per_class, derive_seed(seed, "test"))
    train = make_long_tailed(train, cfg.partition.rho, derive_seed(seed, "long-tail"), d.long_tail_profile)
    spec = PartitionSpec(cfg.partition.num_clients, cfg.partition.alpha, cfg.partition.rho, derive_seed(seed, "partition"))
    return Setup(train, test, dirichlet_partition(train, spec))


def federation_config(cfg: ExperimentConfig) -> FederationConfig:
    t = cfg.training
    return FederationConfig(
        comm_rounds=t.comm_rounds,
        local_epochs=t.local_epochs,
        local_model_epochs=t.local_model_epochs,
        local_model=t.local_model,
        train=TrainConfig(
            lr=t.lr,
            momentum=t.momentum,
            weight_decay=t.weight_decay,
            batch_size=t.batch_size,
            lr_decay_round=t.lr_decay_round,
            lr_decay_factor=t.lr_decay_factor,
        ),
    )


def _fraction(cycle: int, per_cycle: float) -> float:
    return round(cycle * per_cycle, 12)


def run_experiment(cfg: ExperimentConfig, seed: int, threads: Optional[int] = None) -> RunRecord:
    """One seed of the alternating train / evaluate / query loop."""
    base, selector = parse_strategy(cfg.strategy)
    workers = resolve_threads(threads if threads is not None else cfg.threads)
    setup = build_setup(cfg, seed)
    ds = setup.train
    record = RunRecord(seed=seed, strategy=cfg.strategy, class_counts=ds.class_counts().tolist())

    clients: dict[int, ClientPools] = {}
    for k, idx in enumerate(setup.client_indices):
        record.client_sizes.append(int(idx.size))
        if idx.size == 0:
            log.warning("seed %d: client %d received no samples and is left out", seed, k)
            continue
        clients[k] = init_labeled(ClientPools.unlabeled_only(idx), cfg.per_cycle_fraction, derive_seed(seed, "init-labeled", k))
    ids = sorted(clients)
    if not ids:
        raise ExperimentError(f"seed {seed}: no client received any data")

    fed_cfg = federation_config(cfg)
    init = init_params(ds.dim, ds.num_classes, cfg.model.hidden, derive_seed(seed, "init-params"))
    start = init
    gamma_bar: Optional[float] = None

    for cycle in range(1, cfg.al_cycles + 1):
        try:
            fed = run_federation([clients[k] for k in ids], ds, fed_cfg, start, derive_seed(seed, "federation", cycle),
                                 threads=workers, local_init=init,
                                 train_local=base == "fairfal" or selector is Selector.LOCAL)
        except Exception as exc:
            raise ExperimentError(f"seed {seed}, cycle {cycle}: federation failed: {exc}") from exc
        if cfg.training.warm_start:
            start = fed.global_params
        record.curve.append(CyclePoint(cycle, _fraction(cycle, cfg.per_cycle_fraction), accuracy(fed.global_params, setup.test)))
        if cycle == cfg.al_cycles:
            break

        locals_by_id = dict(zip(ids, fed.local_params)) if fed.local_params else {}

        def context(k):
            pools = clients[k]
            budget = min(labeled_count(cfg.per_cycle_fraction, pools.size), pools.unlabeled.size)
            if budget == 0:
                return None
            return QueryContext(fed.global_params, locals_by_id.get(k, fed.global_params), pools, ds, budget, selector)

        contexts = {k: context(k) for k in ids}
        active = [k for k in ids if contexts[k] is not None]

        if base == "fairfal" and gamma_bar is None:
            gammas = map_ordered(lambda k: estimate_balance(contexts[k], derive_seed(seed, "balanced-subset", k, cycle))[0],
                                 active, workers)
            gamma_bar = aggregate_gamma(gammas)
            record.gamma_bar = gamma_bar

        def query(k):
            ctx = contexts[k]
            try:
                if base == "fairfal":
                    return fairfal_query(ctx, cfg.fairfal, gamma_bar, derive_seed(seed, "balanced-subset", k, cycle))
                return run_baseline(base, ctx, derive_seed(seed, "query-random", k, cycle))
            except Exception as exc:
                raise ExperimentError(f"seed {seed}, cycle {cycle}, client {k}: query failed: {exc}") from exc

        results = map_ordered(query, active, workers)
        for k, res in zip(active, results):
            if base == "fairfal":
                b = res.balance
                record.diagnostics.append(DiagRecord(cycle, k, b.gamma_k, b.gamma_bar, b.d_k, b.s_k, res.model.value))
                for c, bud, size in zip(res.classes.tolist(), res.budgets.tolist(), res.pool_sizes.tolist()):
                    record.budgets.append((cycle, k, c, bud, size))
                selected, model, pseudo = res.selected, res.model.value, res.pseudo_labels
            else:
                selected, model, pseudo = res, selector.value, {}
            if selected.size != contexts[k].budget:
                raise ExperimentError(f"seed {seed}, cycle {cycle}, client {k}: selected {selected.size} != budget {contexts[k].budget}")
            for i in selected.tolist():
                record.queries.append(QueryRecord(cycle, k, i, int(ds.labels[i]), pseudo.get(i, -1), model))
            clients[k] = clients[k].acquire(selected)
    return record


def _fmt(v) -> str:
    if isinstance(v, float):
        return repr(v)
    return str(v)


def _write_rows(path: Path, header: Sequence[str], rows) -> None:
    with path.open("w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(header)
        for row in rows:
            w.writerow([_fmt(v) for v in row])


def write_run(record: RunRecord, cfg: ExperimentConfig, out_dir) -> Path:
    """Persist one run: curve.csv, queries.csv, diag.csv, budgets.csv, config.echo."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    _write_rows(out / "curve.csv", CURVE_COLUMNS, [(p.cycle, p.labeled_fraction, p.test_accuracy) for p in record.curve])
    _write_rows(out / "queries.csv", QUERY_COLUMNS,
                [(q.cycle, q.client, q.sample_index, q.true_class, q.pseudo_class, q.selector_model) for q in record.queries])
    _write_rows(out / "diag.csv", DIAG_COLUMNS,
                [(d.cycle, d.client, d.gamma_k, d.gamma_bar, d.d_k, d.s_k, d.model) for d in record.diagnostics])
    _write_rows(out / "budgets.csv", BUDGET_COLUMNS, record.budgets)
    echo = cfg.to_dict()
    echo["seed"] = record.seed
    (out / "config.echo").write_text(json.dumps(echo, sort_keys=True, indent=2) + "\n")
    return out


def strategy_dirname(strategy: str) -> str:
    return strategy.replace(":", "-")


def run_seeds(cfg: ExperimentConfig, seeds: Sequence[int], out_dir=None, threads: Optional[int] = None) -> dict[int, RunRecord]:
    records = {}
    for s in seeds:
        rec = run_experiment(cfg, s, threads)
        if out_dir is not None:
            write_run(rec, cfg, Path(out_dir) / f"seed_{s}")
        records[s] = rec
    return records


def run_comparison(cfg_i: ExperimentConfig, cfg_j: ExperimentConfig, seeds: Sequence[int], out_dir=None,
                   threads: Optional[int] = None) -> tuple[PairedStats, dict[int, RunRecord], dict[int, RunRecord]]:
    """Paired AULC comparison of two configs that differ only in their strategy."""
    if replace(cfg_i, strategy=cfg_j.strategy) != cfg_j:
        raise ExperimentError("compared configs must differ only in strategy")
    dir_i = dir_j = None
    if out_dir is not None:
        dir_i = Path(out_dir) / strategy_dirname(cfg_i.strategy)
        dir_j = Path(out_dir) / strategy_dirname(cfg_j.strategy)
        if dir_i == dir_j:
            dir_j = Path(out_dir) / (strategy_dirname(cfg_j.strategy) + "-b")
    rec_i = run_seeds(cfg_i, seeds, dir_i, threads)
    rec_j = run_seeds(cfg_j, seeds, dir_j, threads)
    stats = compare({s: r.learning_curve() for s, r in rec_i.items()}, {s: r.learning_curve() for s, r in rec_j.items()})
    return stats, rec_i, rec_j


def strategy_config(cfg: ExperimentConfig, strategy: str) -> ExperimentConfig:
    return with_changes(cfg, strategy=strategy)


def read_curve_csv(path) -> LearningCurve:
    """Read ``labeled_fraction`` plus ``accuracy`` (or ``test_accuracy``) columns."""
    path = Path(path)
    with path.open(newline="") as fh:
        reader = csv.DictReader(fh)
        fields = reader.fieldnames or []
        acc_col = "accuracy" if "accuracy" in fields else "test_accuracy" if "test_accuracy" in fields else None
        if "labeled_fraction" not in fields or acc_col is None:
            raise ValueError(f"{path}: expected columns labeled_fraction and accuracy")
        pts = []
        for lineno, row in enumerate(reader, start=2):
            try:
                pts.append((float(row["labeled_fraction"]), float(row[acc_col])))
            except (TypeError, ValueError):
                raise ValueError(f"{path}:{lineno}: non-numeric curve value") from None
    return LearningCurve.from_points(pts)
