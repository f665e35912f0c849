import numpy as np
import pytest

from muzzleid.errors import DataError, InsufficientPairs, SpecError
from muzzleid.evalkit import (cohen_kappa, metrics_at_threshold,
                              pair_distances, read_pairs_csv, sample_pairs,
                              select_threshold, val_at_far,
                              val_at_far_resampled, val_far, validate_pairs,
                              write_pairs_csv)
from oracles import (metrics_reference, select_threshold_reference,
                     val_at_far_reference, val_far_reference)


def random_distances(rng, n_same=30, n_diff=30):
    # same-identity pairs biased low so instances resemble real runs
    out = [(float(d), True) for d in rng.uniform(0.0, 1.5, n_same)]
    out += [(float(d), False) for d in rng.uniform(0.5, 4.0, n_diff)]
    return out


class TestPairs:
    def test_duplicate_rejected(self):
        pairs = [("a", "b", True), ("a", "b", True)]
        with pytest.raises(SpecError):
            validate_pairs(pairs)

    def test_reversed_duplicate_rejected(self):
        pairs = [("a", "b", True), ("b", "a", True)]
        with pytest.raises(SpecError):
            validate_pairs(pairs)

    def test_distances_computed(self):
        emb = {"a": np.array([1.0, 0.0]), "b": np.array([0.0, 1.0])}
        dists = pair_distances(emb, [("a", "b", False), ("a", "a", True)])
        assert dists[0] == (pytest.approx(2.0), False)
        assert dists[1] == (0.0, True)

    def test_missing_embedding(self):
        with pytest.raises(DataError):
            pair_distances({"a": np.zeros(2)}, [("a", "zzz", True)])

    def test_sample_pairs_counts_and_labels(self):
        refs = {f"id{i}": [(f"id{i}", k) for k in range(5)] for i in range(8)}
        pairs = sample_pairs(refs, 40, 40, seed=3)
        assert len(pairs) == 80
        assert sum(1 for _, _, s in pairs if s) == 40
        validate_pairs(pairs)
        for a, b, same in pairs:
            assert (a[0] == b[0]) == same

    def test_sample_pairs_deterministic(self):
        refs = {f"id{i}": [(f"id{i}", k) for k in range(4)] for i in range(4)}
        assert sample_pairs(refs, 10, 10, 7) == sample_pairs(refs, 10, 10, 7)

    def test_sample_pairs_insufficient(self):
        refs = {"a": [("a", 0), ("a", 1)], "b": [("b", 0)]}
        with pytest.raises(InsufficientPairs):
            sample_pairs(refs, 5, 1, 0)
        with pytest.raises(InsufficientPairs):
            sample_pairs(refs, 1, 10, 0)


class TestValFar:
    def test_extremes(self):
        dists = [(0.1, True), (0.2, True), (0.3, False), (0.4, False)]
        assert val_far(dists, 0.0) == (0.0, 0.0)
        assert val_far(dists, 0.4) == (1.0, 1.0)

    def test_hand_counted_six_pairs(self):
        dists = [(0.1, True), (0.3, True), (0.6, True),
                 (0.2, False), (0.5, False), (0.9, False)]
        val, far = val_far(dists, 0.35)
        assert val == pytest.approx(2 / 3)
        assert far == pytest.approx(1 / 3)
        assert (val, far) == pytest.approx(val_far_reference(dists, 0.35))

    def test_monotone_in_threshold(self):
        dists = random_distances(np.random.default_rng(0))
        ts = sorted(d for d, _ in dists)
        vals, fars = zip(*(val_far(dists, t) for t in ts))
        assert all(a <= b for a, b in zip(vals, vals[1:]))
        assert all(a <= b for a, b in zip(fars, fars[1:]))

    def test_single_class_rejected(self):
        with pytest.raises(DataError):
            val_far([(0.1, True)], 0.5)

    def test_matches_oracle_random(self):
        rng = np.random.default_rng(1)
        for _ in range(10):
            dists = random_distances(rng)
            t = float(rng.uniform(0, 4))
            assert val_far(dists, t) == pytest.approx(
                val_far_reference(dists, t))


class TestValAtFar:
    def test_separable_gives_full_val(self):
        dists = [(0.1, True), (0.2, True), (3.0, False), (3.5, False)]
        point = val_at_far(dists, 0.4)
        assert point.val == 1.0
        assert point.far == 0.0

    def test_far_constraint_holds(self):
        rng = np.random.default_rng(2)
        for _ in range(10):
            dists = random_distances(rng, 50, 50)
            point = val_at_far(dists, 0.1)
            _, far = val_far(dists, point.threshold)
            assert far <= 0.1

    def test_matches_sweep_oracle(self):
        rng = np.random.default_rng(3)
        for _ in range(10):
            dists = random_distances(rng, 100, 100)
            point = val_at_far(dists, 0.05)
            t, val, far = val_at_far_reference(dists, 0.05)
            assert point.threshold == pytest.approx(t)
            assert point.val == pytest.approx(val)
            assert point.far == pytest.approx(far)

    def test_insufficient_negatives(self):
        # 3 negatives cannot witness FAR <= 1e-3 at any observed threshold
        dists = [(0.5, False), (0.6, False), (0.7, False),
                 (0.8, True), (0.9, True)]
        with pytest.raises(InsufficientPairs):
            val_at_far(dists, 1e-3)

    def test_bad_target(self):
        with pytest.raises(SpecError):
            val_at_far([(0.1, True), (0.2, False)], 0.0)

    def test_resampled_stats(self):
        rng = np.random.default_rng(4)
        dists = random_distances(rng, 200, 200)
        mean, std, point = val_at_far_resampled(dists, 0.1, k=10, seed=5)
        assert 0.0 <= mean <= 1.0
        assert std >= 0.0
        assert abs(mean - point.val) < 0.2

    def test_resampled_deterministic(self):
        dists = random_distances(np.random.default_rng(6), 50, 50)
        a = val_at_far_resampled(dists, 0.1, seed=9)
        b = val_at_far_resampled(dists, 0.1, seed=9)
        assert a[0] == b[0] and a[1] == b[1]


class TestMetricsAtThreshold:
    def test_all_correct(self):
        dists = [(0.1, True), (0.2, True), (1.0, False), (2.0, False)]
        point = metrics_at_threshold(dists, 0.5)
        assert point.accuracy == 1.0 and point.f1 == 1.0
        assert point.tpr == 1.0 and point.fpr == 0.0

    def test_accept_everything(self):
        dists = [(0.1, True), (0.2, True), (0.3, False), (0.4, False)]
        point = metrics_at_threshold(dists, 10.0)
        assert point.accuracy == 0.5
        assert point.tpr == 1.0 and point.fpr == 1.0

    def test_hand_computed_eight_pairs(self):
        # tp=3 fn=1 fp=1 tn=3: precision 3/4, recall 3/4, f1 3/4
        dists = [(0.1, True), (0.2, True), (0.3, True), (0.9, True),
                 (0.4, False), (1.1, False), (1.2, False), (1.3, False)]
        point = metrics_at_threshold(dists, 0.5)
        assert point.accuracy == pytest.approx(6 / 8)
        assert point.f1 == pytest.approx(3 / 4)
        assert point.tpr == pytest.approx(3 / 4)
        assert point.fpr == pytest.approx(1 / 4)

    def test_val_equals_tpr_far_equals_fpr(self):
        dists = random_distances(np.random.default_rng(7))
        point = metrics_at_threshold(dists, 1.0)
        assert point.val == point.tpr and point.far == point.fpr

    def test_matches_oracle_random(self):
        rng = np.random.default_rng(8)
        for _ in range(10):
            dists = random_distances(rng)
            t = float(rng.uniform(0, 4))
            point = metrics_at_threshold(dists, t)
            acc, f1, tpr, fpr = metrics_reference(dists, t)
            assert (point.accuracy, point.f1, point.tpr, point.fpr) \
                == pytest.approx((acc, f1, tpr, fpr))

    def test_single_class_rejected(self):
        with pytest.raises(DataError):
            metrics_at_threshold([(0.3, False)], 0.5)


class TestSelectThreshold:
    def test_separable_picks_smallest_gap_value(self):
        # f1 = 1 from 0.2 up to 0.9; smallest winner is 0.2
        dists = [(0.1, True), (0.2, True), (0.9, False), (1.0, False)]
        assert select_threshold(dists) == pytest.approx(0.2)

    def test_matches_oracle_random(self):
        rng = np.random.default_rng(9)
        for _ in range(10):
            dists = random_distances(rng, 40, 40)
            t, _ = select_threshold_reference(dists)
            assert select_threshold(dists) == pytest.approx(t)

    def test_threshold_is_observed_distance(self):
        dists = random_distances(np.random.default_rng(10))
        assert select_threshold(dists) in {d for d, _ in dists}


class TestCohenKappa:
    def test_perfect_agreement(self):
        assert cohen_kappa([1, 0, 1, 0], [1, 0, 1, 0]) == pytest.approx(1.0)

    def test_chance_level(self):
        assert cohen_kappa([1, 1, 0, 0], [1, 0, 1, 0]) == pytest.approx(0.0)

    def test_crafted_point_six(self):
        # 10 items, both raters split 5/5, 8 agreements:
        # p_o = 0.8, p_e = 0.25 + 0.25 = 0.5 -> kappa 0.6
        a = [1, 1, 1, 1, 1, 0, 0, 0, 0, 0]
        b = [1, 1, 1, 1, 0, 1, 0, 0, 0, 0]
        assert cohen_kappa(a, b) == pytest.approx(0.6)

    def test_degenerate_constant_raters(self):
        assert cohen_kappa([1, 1, 1], [1, 1, 1]) == 1.0

    def test_length_mismatch(self):
        with pytest.raises(SpecError):
            cohen_kappa([1], [1, 2])

    def test_string_labels(self):
        assert cohen_kappa(list("aabb"), list("abab")) == pytest.approx(0.0)


class TestPairsCsv:
    def test_roundtrip(self, tmp_path):
        dists = [(0.125, True), (3.5, False)]
        path = tmp_path / "pairs.csv"
        write_pairs_csv(path, dists)
        assert read_pairs_csv(path) == dists

    def test_bad_header(self, tmp_path):
        path = tmp_path / "pairs.csv"
        path.write_text("foo,bar\n1,2\n")
        with pytest.raises(DataError):
            read_pairs_csv(path)
