import numpy as np
import pytest

from fairfal.data import ClientPools, PartitionSpec, dirichlet_partition, init_labeled, split_balanced_test, synth_blobs
from fairfal.evaluation import accuracy
from fairfal.federation import FederationConfig, fedavg_aggregate, resolve_threads, run_federation
from fairfal.model import ModelParams, TrainConfig, init_params, train_sgd
from fairfal.rng import derive_seed


def scalar(v):
    return ModelParams(np.array([[float(v)]]), np.array([float(v)]))


def random_params(rng, hidden=4):
    return ModelParams(rng.normal(size=(3, hidden)), rng.normal(size=3), rng.normal(size=(hidden, 2)), rng.normal(size=hidden))


class TestAggregate:
    def test_single_entry_identity(self):
        p = init_params(3, 2, 4, seed=0)
        assert fedavg_aggregate([(p, 7)]).equals(p)

    def test_weighted_scalar(self):
        out = fedavg_aggregate([(scalar(0), 1), (scalar(1), 3)])
        assert out.w2[0, 0] == pytest.approx(0.75) and out.b2[0] == pytest.approx(0.75)

    def test_identical_params(self):
        p = init_params(3, 2, 4, seed=1)
        out = fedavg_aggregate([(p, 5), (p, 5), (p, 5)])
        for k, v in out.arrays().items():
            np.testing.assert_allclose(v, p.arrays()[k], rtol=1e-15)

    def test_matches_explicit_weighted_mean(self):
        rng = np.random.default_rng(0)
        for _ in range(20):
            k = int(rng.integers(1, 8))
            ps = [random_params(rng) for _ in range(k)]
            ws = rng.integers(0, 50, k).astype(float)
            ws[0] += 1
            out = fedavg_aggregate(list(zip(ps, ws)))
            for name in out.arrays():
                ref = sum(w * p.arrays()[name] for p, w in zip(ps, ws)) / ws.sum()
                np.testing.assert_allclose(out.arrays()[name], ref, atol=1e-12, rtol=0)

    def test_weight_scale_invariance(self):
        rng = np.random.default_rng(1)
        ps = [random_params(rng) for _ in range(4)]
        ws = [3, 1, 4, 1]
        a = fedavg_aggregate(list(zip(ps, ws)))
        b = fedavg_aggregate(list(zip(ps, [w * 2.5 for w in ws])))
        for k in a.arrays():
            np.testing.assert_allclose(a.arrays()[k], b.arrays()[k], atol=1e-12)

    def test_errors(self):
        with pytest.raises(ValueError):
            fedavg_aggregate([])
        with pytest.raises(ValueError):
            fedavg_aggregate([(scalar(1), 0), (scalar(2), 0)])
        with pytest.raises(ValueError):
            fedavg_aggregate([(scalar(1), 1), (init_params(2, 2, None, seed=0), 1)])


def small_setup(num_clients=3, seed=0, alpha=1.0):
    ds = synth_blobs(4, 40, 6, 4.0, seed=seed)
    parts = dirichlet_partition(ds, PartitionSpec(num_clients, alpha, seed=seed))
    pools = [init_labeled(ClientPools.unlabeled_only(p), 0.5, seed=k) for k, p in enumerate(parts)]
    return ds, pools


FAST = FederationConfig(comm_rounds=4, local_epochs=2,
                        train=TrainConfig(lr=0.05, batch_size=16, lr_decay_round=2, lr_decay_factor=0.1),
                        local_model_epochs=6)


class TestRunFederation:
    def test_single_client_equals_sequential_sgd(self):
        ds, _ = small_setup(1)
        pools = [init_labeled(ClientPools.unlabeled_only(np.arange(len(ds))), 0.3, seed=1)]
        init = init_params(ds.dim, 4, 8, seed=3)
        res = run_federation(pools, ds, FAST, init, seed=42, train_local=False)
        x, y = ds.features[pools[0].labeled], ds.labels[pools[0].labeled]
        p = init
        for r in range(FAST.comm_rounds):
            lr = FAST.train.lr * (FAST.train.lr_decay_factor if r >= FAST.train.lr_decay_round else 1.0)
            p = train_sgd(p, x, y, FAST.train.with_(epochs=FAST.local_epochs, lr=lr, lr_decay_round=None,
                                                     seed=derive_seed(42, "fedavg", 0, r)))
        for k, v in res.global_params.arrays().items():
            np.testing.assert_allclose(v, p.arrays()[k], atol=1e-9, rtol=0)

    def test_identical_clients_give_identical_local_models(self):
        ds, _ = small_setup(1)
        pool = init_labeled(ClientPools.unlabeled_only(np.arange(len(ds))), 0.4, seed=0)
        init = init_params(ds.dim, 4, 8, seed=0)
        # full-batch steps: client streams then only permute rows inside the mean
        cfg = FederationConfig(comm_rounds=2, local_epochs=1, train=TrainConfig(lr=0.05, batch_size=1000),
                               local_model_epochs=5)
        res = run_federation([pool, pool], ds, cfg, init, seed=1)
        a, b = res.local_params
        for k, v in a.arrays().items():
            np.testing.assert_allclose(v, b.arrays()[k], atol=1e-12, rtol=0)

    def test_thread_count_does_not_change_results(self):
        ds, pools = small_setup(5, alpha=0.5)
        init = init_params(ds.dim, 4, 8, seed=0)
        serial = run_federation(pools, ds, FAST, init, seed=9, threads=1)
        threaded = run_federation(pools, ds, FAST, init, seed=9, threads=4)
        assert serial.global_params.equals(threaded.global_params)
        assert all(a.equals(b) for a, b in zip(serial.local_params, threaded.local_params))

    def test_local_models_trained_from_shared_init(self):
        ds, pools = small_setup(3)
        init = init_params(ds.dim, 4, 8, seed=0)
        res = run_federation(pools, ds, FAST, init, seed=2)
        assert len(res.local_params) == 3
        from fairfal.federation import train_local_model

        again = train_local_model(init, ds, pools[1], FAST, derive_seed(2, "local-model", 1))
        assert again.equals(res.local_params[1])

    def test_requires_labels(self):
        ds, pools = small_setup(2)
        pools[1] = ClientPools([], pools[1].all_indices)
        with pytest.raises(ValueError, match="client 1"):
            run_federation(pools, ds, FAST, init_params(ds.dim, 4, 8, seed=0), seed=0)

    def test_round_log(self):
        ds, pools = small_setup(2)
        res = run_federation(pools, ds, FAST, init_params(ds.dim, 4, 8, seed=0), seed=0,
                             evaluate=lambda p: accuracy(p, ds), train_local=False)
        assert len(res.round_log) == FAST.comm_rounds and res.local_params == []

    def test_full_labels_reach_high_accuracy(self):
        train, test = split_balanced_test(synth_blobs(10, 220, 16, 4.0, seed=0), 100, seed=0)
        parts = dirichlet_partition(train, PartitionSpec(10, 100.0, seed=0))
        pools = [ClientPools(p, []) for p in parts]
        cfg = FederationConfig(comm_rounds=20, local_epochs=2, train=TrainConfig(lr=0.05, batch_size=32))
        res = run_federation(pools, train, cfg, init_params(16, 10, 32, seed=0), seed=0, train_local=False)
        assert accuracy(res.global_params, test) >= 0.85


def test_participant_local_models():
    ds, _ = small_setup(1)
    pool = init_labeled(ClientPools.unlabeled_only(np.arange(len(ds))), 0.5, seed=0)
    cfg = FederationConfig(comm_rounds=2, local_epochs=1, train=TrainConfig(lr=0.05), local_model="participant")
    res = run_federation([pool], ds, cfg, init_params(ds.dim, 4, 8, seed=0), seed=0)
    # one client: its last-round copy is the aggregate
    assert res.local_params[0].equals(res.global_params)
    with pytest.raises(ValueError):
        FederationConfig(local_model="copy")


def test_local_model_epochs_default():
    assert FederationConfig(comm_rounds=100, local_epochs=5).resolved_local_model_epochs == 200
    assert FederationConfig(comm_rounds=3, local_epochs=5).resolved_local_model_epochs == 15


def test_thread_cap_env(monkeypatch):
    monkeypatch.setenv("FAIRFAL_MAX_THREADS", "2")
    assert resolve_threads(8) == 2
    monkeypatch.delenv("FAIRFAL_MAX_THREADS")
    assert resolve_threads(3) == 3
