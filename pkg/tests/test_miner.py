"""Triplet mining and training-loop tests.

Mining is checked against an exhaustive O(n^3) reference whenever the
sampling rate makes the scan exhaustive, plus hand-built degenerate cases
(all-easy, fully collapsed embeddings). The training loop runs for real on
a tiny synthetic dataset with a reduced network.
"""

import csv
import logging
from dataclasses import replace
from pathlib import Path

import numpy as np
import pytest

import oracles
from muzzleid.augment import AugmentConfig
from muzzleid.embedder import EASY, HARD, SEMI_HARD, embed_batch
from muzzleid.errors import DataError, SpecError
from muzzleid.miner import (EpochMiningReport, MiningConfig, mine_epoch,
                            mine_with_widening, train_embedder)
from muzzleid.neuralcore import (NetworkSpec, build_network, load_checkpoint)
from muzzleid.synthgen import gen_dataset


def unit(v):
    v = np.asarray(v, dtype=np.float64)
    return v / np.linalg.norm(v)


def random_groups(rng, n_idents=4, n_imgs=3, dim=8):
    return {f"id{i}": [unit(rng.normal(size=dim)) for _ in range(n_imgs)]
            for i in range(n_idents)}


def as_set(triplets):
    return {(t.anchor, t.positive, t.negative, t.hardness) for t in triplets}


class TestMiningConfig:
    def test_defaults(self):
        cfg = MiningConfig()
        assert cfg.min_triplet_threshold == 512
        assert cfg.negatives_per_pair == 16
        assert cfg.batch_size == 32
        assert cfg.alpha == 0.5

    def test_threshold_below_batch_rejected(self):
        with pytest.raises(SpecError):
            MiningConfig(min_triplet_threshold=16, batch_size=32)

    def test_nonpositive_rejected(self):
        with pytest.raises(SpecError):
            MiningConfig(negatives_per_pair=0)

    def test_dict_roundtrip(self):
        cfg = MiningConfig(min_triplet_threshold=64, batch_size=16)
        assert MiningConfig.from_dict(cfg.to_dict()) == cfg

    def test_unknown_key_rejected(self):
        with pytest.raises(SpecError):
            MiningConfig.from_dict({"batch_sizes": 8})


class TestMineEpoch:
    def test_hand_case_matches_reference(self):
        # three identities on a line, spreads engineered to hit all three
        # hardness classes at alpha = 0.5:
        #   anchor a0=0.0, pos a2=0.6, neg b0=0.65:
        #     d_p=0.36, d_n=0.4225, diff 0.0625 in (0, 0.5) -> semi-hard
        #   anchor a2=0.6, pos a0, neg b0: d_n=0.0025 <= d_p -> hard
        #   any anchor in a or b against c (>= 1.0 away) -> easy
        groups = {
            "a": [np.array([0.0]), np.array([0.1]), np.array([0.6])],
            "b": [np.array([0.65]), np.array([0.8]), np.array([1.0])],
            "c": [np.array([2.0]), np.array([2.1]), np.array([2.2])],
        }
        cfg = MiningConfig(min_triplet_threshold=8, batch_size=8,
                           negatives_per_pair=6)  # 6 >= pool, exhaustive
        triplets, report = mine_epoch(groups, cfg, seed=0, epoch=0)
        expected = oracles.mine_reference(groups, cfg.alpha)
        assert as_set(triplets) == expected
        assert (("a", 0), ("a", 2), ("b", 0), SEMI_HARD) in expected
        assert (("a", 2), ("a", 0), ("b", 0), HARD) in expected
        assert report.semi_hard + report.hard == len(expected)
        assert report.scanned == 3 * 6 * 6  # ids * ordered pairs * negatives
        assert report.semi_hard + report.hard < report.scanned  # easy exist

    def test_random_exhaustive_matches_reference(self):
        rng = np.random.default_rng(5)
        for trial in range(5):
            groups = random_groups(rng)
            cfg = MiningConfig(min_triplet_threshold=8, batch_size=8,
                               negatives_per_pair=9)
            triplets, _ = mine_epoch(groups, cfg, seed=trial, epoch=0)
            assert as_set(triplets) == oracles.mine_reference(groups, 0.5)

    def test_all_easy_reports_zero(self):
        # orthogonal identities, tight clusters: d_n - d_p = 2 >= alpha
        groups = {
            "a": [np.array([1.0, 0, 0]), np.array([1.0, 0, 0])],
            "b": [np.array([0, 1.0, 0]), np.array([0, 1.0, 0])],
        }
        cfg = MiningConfig(min_triplet_threshold=8, batch_size=8,
                           negatives_per_pair=4)
        triplets, report = mine_epoch(groups, cfg)
        assert triplets == []
        assert report.semi_hard == 0
        assert report.hard == 0
        assert report.scanned == 8

    def test_collapsed_embeddings_all_hard(self):
        v = np.array([1.0, 0.0])
        groups = {"a": [v, v], "b": [v, v], "c": [v, v]}
        cfg = MiningConfig(min_triplet_threshold=8, batch_size=8,
                           negatives_per_pair=4)
        triplets, report = mine_epoch(groups, cfg)
        # every scanned candidate has d_p = d_n = 0, diff 0 <= 0: hard
        assert report.scanned == 6 * 4
        assert report.hard == report.scanned
        assert report.semi_hard == 0
        assert all(t.hardness == HARD for t in triplets)

    def test_single_image_identity_skipped_with_warning(self, caplog):
        groups = {
            "pair": [unit([1, 0]), unit([1, 0.2])],
            "lone": [unit([0, 1])],
        }
        cfg = MiningConfig(min_triplet_threshold=8, batch_size=8,
                           negatives_per_pair=4)
        with caplog.at_level(logging.WARNING, logger="muzzleid.miner"):
            triplets, report = mine_epoch(groups, cfg)
        assert "lone" in caplog.text
        # lone still serves as the negative pool for the usable identity
        assert report.scanned == 2
        assert all(t.negative[0] == "lone" for t in triplets)

    def test_no_pairs_raises(self):
        groups = {"a": [unit([1, 0])], "b": [unit([0, 1])]}
        with pytest.raises(DataError):
            mine_epoch(groups, MiningConfig(min_triplet_threshold=8,
                                            batch_size=8))

    def test_single_identity_raises(self):
        groups = {"a": [unit([1, 0]), unit([0, 1])]}
        with pytest.raises(DataError):
            mine_epoch(groups, MiningConfig(min_triplet_threshold=8,
                                            batch_size=8))

    def test_sampled_subset_of_exhaustive(self):
        rng = np.random.default_rng(9)
        groups = random_groups(rng, n_idents=5, n_imgs=4)
        cfg = MiningConfig(min_triplet_threshold=8, batch_size=8,
                           negatives_per_pair=3)
        triplets, report = mine_epoch(groups, cfg, seed=2, epoch=1)
        assert report.scanned == 5 * 12 * 3
        exhaustive = oracles.mine_reference(groups, cfg.alpha)
        assert as_set(triplets) <= exhaustive

    def test_sampling_deterministic(self):
        rng = np.random.default_rng(10)
        groups = random_groups(rng, n_idents=5, n_imgs=4)
        cfg = MiningConfig(min_triplet_threshold=8, batch_size=8,
                           negatives_per_pair=3)
        a, _ = mine_epoch(groups, cfg, seed=4, epoch=2)
        b, _ = mine_epoch(groups, cfg, seed=4, epoch=2)
        assert as_set(a) == as_set(b)

    def test_distances_and_classes_recompute(self):
        rng = np.random.default_rng(11)
        groups = random_groups(rng)
        cfg = MiningConfig(min_triplet_threshold=8, batch_size=8,
                           negatives_per_pair=9)
        triplets, _ = mine_epoch(groups, cfg)
        assert triplets, "case should retain at least one triplet"
        for t in triplets:
            va = groups[t.anchor[0]][t.anchor[1]]
            vp = groups[t.positive[0]][t.positive[1]]
            vn = groups[t.negative[0]][t.negative[1]]
            assert t.d_p == pytest.approx(oracles.sq_dist(va, vp))
            assert t.d_n == pytest.approx(oracles.sq_dist(va, vn))
            assert t.d_n - t.d_p < cfg.alpha
            assert t.hardness == oracles.classify_reference(t.d_p, t.d_n,
                                                            cfg.alpha)
            assert t.hardness != EASY

    def test_anchor_pair_cap(self):
        rng = np.random.default_rng(12)
        groups = random_groups(rng, n_idents=4, n_imgs=4, dim=4)
        cfg = MiningConfig(min_triplet_threshold=8, batch_size=8,
                           negatives_per_pair=2, max_anchor_pairs=10)
        _, report = mine_epoch(groups, cfg)
        assert report.scanned == 10 * 2


class TestWidening:
    def collapsed(self, n_idents=4, n_imgs=3):
        v = np.array([1.0, 0.0])
        return {f"id{i}": [v] * n_imgs for i in range(n_idents)}

    def test_doubles_until_threshold(self):
        groups = self.collapsed()  # 24 pairs, pool 9 per anchor, all hard
        cfg = MiningConfig(min_triplet_threshold=100, batch_size=8,
                           negatives_per_pair=1)
        triplets, report, used = mine_with_widening(groups, cfg)
        # 1 -> 24, 2 -> 48, 4 -> 96, 8 -> 192 >= 100
        assert used == 8
        assert len(triplets) == 24 * 8
        assert report.hard == len(triplets)

    def test_stops_at_exhaustive_below_threshold(self):
        groups = self.collapsed()
        cfg = MiningConfig(min_triplet_threshold=512, batch_size=32,
                           negatives_per_pair=1)
        triplets, _, used = mine_with_widening(groups, cfg)
        assert used == 9  # pool size: widening capped at exhaustive
        assert len(triplets) == 24 * 9 < cfg.min_triplet_threshold

    def test_no_widening_when_enough(self):
        groups = self.collapsed()
        cfg = MiningConfig(min_triplet_threshold=32, batch_size=32,
                           negatives_per_pair=2)
        triplets, _, used = mine_with_widening(groups, cfg)
        assert used == 2
        assert len(triplets) == 48


def tiny_embed_net(dim=16, seed=3):
    spec = NetworkSpec((1, 32, 32), [
        {"type": "conv2d", "in_channels": 1, "out_channels": 8,
         "kernel_size": 3},
        {"type": "relu"},
        {"type": "maxpool", "size": 2},
        {"type": "conv2d", "in_channels": 8, "out_channels": 16,
         "kernel_size": 3},
        {"type": "relu"},
        {"type": "maxpool", "size": 2},
        {"type": "conv2d", "in_channels": 16, "out_channels": 16,
         "kernel_size": 3},
        {"type": "relu"},
        {"type": "global_avg_pool"},
        {"type": "dense", "in_dim": 16, "out_dim": dim},
        {"type": "l2_normalize"},
    ], seed)
    return build_network(spec)


def read_csv(path):
    with open(path, newline="") as f:
        return list(csv.reader(f))


@pytest.fixture(scope="module")
def dataset(tmp_path_factory):
    root = tmp_path_factory.mktemp("data") / "tiny"
    gen_dataset(root, 4, 2, 2, 4, 11)
    return root


class TestTrainEmbedder:
    def run(self, dataset, out_dir, seed=5):
        cfg = MiningConfig(min_triplet_threshold=32, batch_size=32,
                           negatives_per_pair=4)
        return train_embedder(
            dataset, out_dir, net=tiny_embed_net(seed=seed),
            mining_cfg=cfg, augment_cfg=AugmentConfig(seed=seed),
            epochs=2, seed=seed, eval_pairs=(10, 10))

    def test_artifacts_and_reports(self, dataset, tmp_path):
        result = self.run(dataset, tmp_path / "run")
        assert result.checkpoint_path.exists()
        assert len(result.epoch_checkpoints) == 2
        assert all(p.exists() for p in result.epoch_checkpoints)
        assert len(result.reports) == 2
        assert result.threshold > 0.0

        mining = read_csv(result.mining_csv)
        assert mining[0] == ["epoch", "semi_hard", "hard", "scanned"]
        assert len(mining) == 3
        for row, report in zip(mining[1:], result.reports):
            assert [int(v) for v in row] == [report.epoch, report.semi_hard,
                                             report.hard, report.scanned]

        metrics = read_csv(result.metrics_csv)
        assert metrics[0] == ["epoch", "loss", "val", "far",
                              "accuracy", "f1"]
        assert len(metrics) == 3
        for row in metrics[1:]:
            values = [float(v) for v in row[1:]]
            assert all(np.isfinite(values))
            assert 0.0 <= values[1] <= 1.0  # val
            assert 0.0 <= values[2] <= 1.0  # far

    def test_checkpoint_restores_final_weights(self, dataset, tmp_path):
        result = self.run(dataset, tmp_path / "run")
        net, opt, meta = load_checkpoint(result.checkpoint_path)
        assert meta["dim"] == 16
        assert meta["epoch"] == 1
        assert meta["threshold"] == result.threshold
        # the final checkpoint and the last per-epoch checkpoint hold the
        # same state: nothing runs between the two saves
        last, _, _ = load_checkpoint(result.epoch_checkpoints[-1])
        img = np.full((32, 32), 128, np.uint8)
        np.testing.assert_array_equal(embed_batch(net, img[None]),
                                      embed_batch(last, img[None]))

    def test_deterministic_metrics(self, dataset, tmp_path):
        a = self.run(dataset, tmp_path / "a")
        b = self.run(dataset, tmp_path / "b")
        assert Path(a.metrics_csv).read_bytes() == \
            Path(b.metrics_csv).read_bytes()
        assert Path(a.mining_csv).read_bytes() == \
            Path(b.mining_csv).read_bytes()

    def test_alpha_mismatch_rejected(self, dataset, tmp_path):
        from muzzleid.embedder import TripletLossParams
        with pytest.raises(SpecError):
            train_embedder(dataset, tmp_path / "run",
                           net=tiny_embed_net(),
                           mining_cfg=MiningConfig(alpha=0.5),
                           loss_params=TripletLossParams(alpha=0.3),
                           epochs=1, eval_pairs=(5, 5))
