import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from fairfal.data import (
    ClientPools,
    Dataset,
    PartitionSpec,
    dirichlet_partition,
    init_labeled,
    load_csv,
    long_tail_counts,
    make_long_tailed,
    split_balanced_test,
    synth_blobs,
    write_csv,
)
from fairfal.model import TrainConfig, init_params, predict_batch, train_sgd


def balanced(num_classes, per_class, dim=2):
    labels = np.repeat(np.arange(num_classes), per_class)
    return Dataset(np.arange(labels.size * dim, dtype=float).reshape(-1, dim), labels, num_classes)


def mean_l1_to_global(ds, parts):
    global_p = ds.class_counts() / len(ds)
    dists = []
    for idx in parts:
        if idx.size == 0:
            continue
        local = np.bincount(ds.labels[idx], minlength=ds.num_classes) / idx.size
        dists.append(np.abs(local - global_p).sum())
    return float(np.mean(dists))


class TestDataset:
    def test_rejects_out_of_range_labels(self):
        with pytest.raises(ValueError):
            Dataset(np.zeros((2, 2)), [0, 3], 3)

    def test_rejects_empty(self):
        with pytest.raises(ValueError):
            Dataset(np.zeros((0, 2)), [], 2)

    def test_immutable(self):
        ds = balanced(2, 2)
        with pytest.raises(ValueError):
            ds.features[0, 0] = 1.0


class TestSynthBlobs:
    def test_shape_contract(self):
        ds = synth_blobs(2, 1, 2, 10.0, seed=1)
        assert len(ds) == 2
        assert set(ds.labels.tolist()) == {0, 1}

    def test_deterministic(self):
        assert synth_blobs(3, 5, 4, 3.0, seed=7).equals(synth_blobs(3, 5, 4, 3.0, seed=7))
        assert not synth_blobs(3, 5, 4, 3.0, seed=7).equals(synth_blobs(3, 5, 4, 3.0, seed=8))

    @pytest.mark.parametrize("kw", [
        dict(num_classes=1, per_class=1, dim=2, separation=1.0),
        dict(num_classes=2, per_class=0, dim=2, separation=1.0),
        dict(num_classes=2, per_class=1, dim=1, separation=1.0),
        dict(num_classes=2, per_class=1, dim=2, separation=0.0),
    ])
    def test_invalid_parameters(self, kw):
        with pytest.raises(ValueError):
            synth_blobs(seed=0, **kw)

    @pytest.mark.parametrize("c,dim", [(10, 16), (12, 3)])
    def test_means_are_separated(self, c, dim):
        ds = synth_blobs(c, 400, dim, 5.0, seed=3)
        means = np.stack([ds.features[ds.labels == k].mean(0) for k in range(c)])
        d = np.linalg.norm(means[:, None] - means[None], axis=-1)
        d[np.diag_indices(c)] = np.inf
        # sample means carry ~1/sqrt(400) noise per coordinate
        assert d.min() >= 5.0 - 0.5

    def test_linear_classifier_fits(self):
        ds = synth_blobs(10, 200, 16, 8.0, seed=0)
        p = init_params(16, 10, None, seed=0)
        p = train_sgd(p, ds.features, ds.labels, TrainConfig(lr=0.05, epochs=20, batch_size=64, seed=1))
        acc = np.mean(predict_batch(p, ds.features).argmax(1) == ds.labels)
        assert acc >= 0.90


class TestLongTail:
    def test_rho_one_keeps_balance(self):
        out = make_long_tailed(balanced(5, 20), 1.0, seed=0)
        assert out.class_counts().tolist() == [20] * 5

    def test_rho_twenty_profile(self):
        # round(100 * 20 ** (-c / 9)) for c = 0..9
        expected = [100, 72, 51, 37, 26, 19, 14, 10, 7, 5]
        assert [int(math.floor(100 * 20 ** (-c / 9) + 0.5)) for c in range(10)] == expected
        assert long_tail_counts([100] * 10, 20.0).tolist() == expected
        assert make_long_tailed(balanced(10, 100), 20.0, seed=1).class_counts().tolist() == expected

    def test_ranks_by_available_count(self):
        counts = long_tail_counts([50, 100, 80], 4.0)
        # class 1 is the head, class 2 second, class 0 the tail
        assert counts.tolist() == [25, 100, 50]

    def test_zero_class_is_error(self):
        with pytest.raises(ValueError):
            long_tail_counts([3, 3, 3], 100.0)

    def test_missing_class_is_error(self):
        ds = Dataset(np.zeros((4, 2)), [0, 0, 1, 1], 3)
        with pytest.raises(ValueError):
            make_long_tailed(ds, 2.0, seed=0)

    def test_step_profile(self):
        assert long_tail_counts([100] * 4, 10.0, profile="step").tolist() == [100, 100, 10, 10]

    @settings(max_examples=60, deadline=None)
    @given(c=st.integers(2, 12), n=st.integers(5, 300), rho=st.floats(1.0, 50.0))
    def test_ratio_within_rounding_bounds(self, c, n, rho):
        try:
            counts = long_tail_counts([n] * c, rho)
        except ValueError:
            return
        assert np.all(np.diff(counts) <= 0)
        n_min = counts.min()
        ratio = counts.max() / n_min
        assert rho * (1 - 2 / n_min) <= ratio <= rho * (1 + 2 / n_min)

    def test_seeded_and_uniform_within_class(self):
        ds = balanced(3, 50)
        a = make_long_tailed(ds, 5.0, seed=4)
        b = make_long_tailed(ds, 5.0, seed=4)
        assert a.equals(b)


class TestDirichletPartition:
    def test_single_client(self):
        ds = balanced(3, 10)
        parts = dirichlet_partition(ds, PartitionSpec(1, 0.5, seed=0))
        assert len(parts) == 1 and parts[0].tolist() == list(range(30))

    def test_deterministic(self):
        ds = balanced(4, 50)
        spec = PartitionSpec(5, 0.3, seed=11)
        assert all(np.array_equal(a, b) for a, b in zip(dirichlet_partition(ds, spec), dirichlet_partition(ds, spec)))

    @settings(max_examples=40, deadline=None)
    @given(k=st.integers(1, 12), alpha=st.floats(0.05, 100.0), seed=st.integers(0, 2**32))
    def test_exact_partition(self, k, alpha, seed):
        ds = balanced(5, 13)
        parts = dirichlet_partition(ds, PartitionSpec(k, alpha, seed=seed))
        allidx = np.concatenate(parts)
        assert allidx.size == len(ds)
        assert np.array_equal(np.sort(allidx), np.arange(len(ds)))
        assert all(np.all(np.diff(p) > 0) for p in parts)

    def test_too_many_clients(self):
        with pytest.raises(ValueError):
            dirichlet_partition(balanced(2, 1), PartitionSpec(3, 1.0))

    def test_heterogeneity_against_reference_sampler(self):
        # reference: plain numpy Dirichlet draws with floor rounding, independent of the implementation
        ds = balanced(10, 1000)
        for alpha, ok in [(100.0, lambda v: v <= 0.15), (0.1, lambda v: v >= 0.5)]:
            impl, ref = [], []
            for seed in range(5):
                impl.append(mean_l1_to_global(ds, dirichlet_partition(ds, PartitionSpec(10, alpha, seed=seed))))
                rng = np.random.default_rng(1000 + seed)
                parts = [[] for _ in range(10)]
                for c in range(10):
                    members = rng.permutation(np.flatnonzero(ds.labels == c))
                    cuts = (np.cumsum(rng.dirichlet([alpha] * 10)) * members.size).astype(int)[:-1]
                    for k, chunk in enumerate(np.split(members, cuts)):
                        parts[k].extend(chunk.tolist())
                ref.append(mean_l1_to_global(ds, [np.array(p, dtype=int) for p in parts]))
            assert ok(np.mean(impl)) and ok(np.mean(ref)), (alpha, impl, ref)


class TestPools:
    def test_overlap_rejected(self):
        with pytest.raises(ValueError):
            ClientPools([1, 2], [2, 3])

    def test_canonical_order(self):
        p = ClientPools([5, 1], [9, 3, 7])
        assert p.labeled.tolist() == [1, 5] and p.unlabeled.tolist() == [3, 7, 9]

    def test_acquire_must_come_from_unlabeled(self):
        p = ClientPools([1], [2, 3])
        with pytest.raises(ValueError):
            p.acquire([1])
        q = p.acquire([3])
        assert q.labeled.tolist() == [1, 3] and q.unlabeled.tolist() == [2] and q.size == p.size


class TestInitLabeled:
    def test_full_labeling(self):
        p = init_labeled(ClientPools.unlabeled_only(range(17)), 1.0, seed=0)
        assert p.unlabeled.size == 0 and p.labeled.size == 17

    def test_ceiling(self):
        assert init_labeled(ClientPools.unlabeled_only(range(100)), 0.05, seed=0).labeled.size == 5
        assert init_labeled(ClientPools.unlabeled_only(range(101)), 0.05, seed=0).labeled.size == 6

    def test_deterministic(self):
        a = init_labeled(ClientPools.unlabeled_only(range(200)), 0.1, seed=3)
        b = init_labeled(ClientPools.unlabeled_only(range(200)), 0.1, seed=3)
        assert a.equals(b)

    def test_nonempty_labeled_is_error(self):
        with pytest.raises(ValueError):
            init_labeled(ClientPools([0], [1, 2]), 0.5, seed=0)


class TestCsv:
    def test_label_remap(self, tmp_path):
        f = tmp_path / "d.csv"
        f.write_text("a,b,label\n1,2,5\n3,4,5\n5,6,9\n")
        ds = load_csv(f)
        assert ds.labels.tolist() == [0, 0, 1] and ds.num_classes == 2
        assert ds.features.tolist() == [[1, 2], [3, 4], [5, 6]]

    def test_numeric_label_order(self, tmp_path):
        f = tmp_path / "d.csv"
        f.write_text("x,label\n0,10\n0,9\n0,100\n")
        assert load_csv(f).labels.tolist() == [1, 0, 2]

    def test_empty_file(self, tmp_path):
        f = tmp_path / "e.csv"
        f.write_text("")
        with pytest.raises(ValueError, match="empty"):
            load_csv(f)

    def test_bad_value_reports_line(self, tmp_path):
        f = tmp_path / "d.csv"
        f.write_text("a,label\n1,0\nzz,1\n")
        with pytest.raises(ValueError, match=":3:"):
            load_csv(f)

    def test_missing_label(self, tmp_path):
        f = tmp_path / "d.csv"
        f.write_text("a,label\n1,0\n2,\n")
        with pytest.raises(ValueError, match="missing label"):
            load_csv(f)

    def test_round_trip(self, tmp_path):
        ds = synth_blobs(3, 7, 4, 2.0, seed=5)
        write_csv(ds, tmp_path / "r.csv")
        back = load_csv(tmp_path / "r.csv")
        assert back.num_classes == ds.num_classes
        assert np.array_equal(back.labels, ds.labels)
        np.testing.assert_allclose(back.features, ds.features, rtol=1e-15)


def test_balanced_test_split():
    ds = balanced(3, 20)
    train, test = split_balanced_test(ds, 5, seed=0)
    assert test.class_counts().tolist() == [5, 5, 5]
    assert len(train) + len(test) == len(ds)
