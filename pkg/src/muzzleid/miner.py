"""Online triplet mining and the embedder training loop.

Each epoch re-embeds the training set with the current weights, enumerates
within-identity anchor/positive pairs, samples negatives from the other
identities, and keeps only semi-hard and hard candidates — easy triplets
carry no gradient and are discarded at the door. If the haul comes in under
the minimum triplet threshold, negative sampling widens (doubling per-pair
negatives up to exhaustive) before any weight update happens. Updates then
run over shuffled triplet batches with augmentation applied inside the
batch only; mining and validation always see clean images.
"""

import csv
import logging
from dataclasses import dataclass, replace
from pathlib import Path

import numpy as np

from .augment import AugmentConfig, augment_image
from .embedder import (HARD, SEMI_HARD, Triplet, TripletLossParams,
                       classify_triplet, embed_batch, to_input, triplet_loss)
from .errors import DataError, InsufficientPairs, NumericError, SpecError
from .evalkit import (metrics_at_threshold, pair_distances, sample_pairs,
                      select_threshold, val_at_far)
from .imgproc import PreprocessParams, load_image, preprocess
from .neuralcore import (OptimizerState, adam_step, build_network,
                         embedder_spec, maybe_decay, save_checkpoint)
from .rng import derive_seed
from .synthgen import load_manifest

log = logging.getLogger(__name__)

METRICS_HEADER = ["epoch", "loss", "val", "far", "accuracy", "f1"]
MINING_HEADER = ["epoch", "semi_hard", "hard", "scanned"]


@dataclass
class MiningConfig:
    min_triplet_threshold: int = 512
    negatives_per_pair: int = 16
    batch_size: int = 32
    alpha: float = 0.5
    max_anchor_pairs: int = 20000

    def __post_init__(self):
        if self.min_triplet_threshold < self.batch_size:
            raise SpecError(
                f"min_triplet_threshold {self.min_triplet_threshold} below "
                f"batch_size {self.batch_size}")
        for name in ("min_triplet_threshold", "negatives_per_pair",
                     "batch_size", "max_anchor_pairs"):
            if getattr(self, name) < 1:
                raise SpecError(f"{name} must be positive")

    def to_dict(self):
        return {k: getattr(self, k) for k in self.__dataclass_fields__}

    @classmethod
    def from_dict(cls, d):
        extra = set(d) - set(cls.__dataclass_fields__)
        if extra:
            raise SpecError(f"unknown mining keys: {sorted(extra)}")
        return cls(**d)


@dataclass
class EpochMiningReport:
    epoch: int
    semi_hard: int
    hard: int
    scanned: int


def mine_epoch(embeddings_by_identity, cfg, seed=0, epoch=0):
    """One mining pass at the configured negatives-per-pair rate.

    embeddings_by_identity: dict identity -> (n_i, d) array. Identities
    with a single image are skipped with a warning. Returns the retained
    semi-hard/hard triplets and the epoch report.
    """
    idents = sorted(embeddings_by_identity)
    groups = {i: np.asarray(embeddings_by_identity[i], dtype=np.float64)
              for i in idents}
    usable = []
    for ident in idents:
        if len(groups[ident]) >= 2:
            usable.append(ident)
        else:
            log.warning("identity %s has one image; skipped for mining", ident)
    pairs = [(ident, ia, ip)
             for ident in usable
             for ia in range(len(groups[ident]))
             for ip in range(len(groups[ident]))
             if ia != ip]
    if not pairs:
        raise DataError("no identity has at least two images")
    refs = [(ident, k) for ident in idents for k in range(len(groups[ident]))]
    vecs = np.concatenate([groups[i] for i in idents], axis=0)
    ident_of = np.array([idents.index(i) for i, _ in refs])
    if len({i for i, _ in refs}) < 2:
        raise DataError("mining needs at least two identities")

    rng = np.random.default_rng((0x4D494E45, int(seed), int(epoch)))
    if len(pairs) > cfg.max_anchor_pairs:
        picked = rng.choice(len(pairs), cfg.max_anchor_pairs, replace=False)
        pairs = [pairs[i] for i in sorted(picked)]

    other_idx = {ident: np.flatnonzero(ident_of != idents.index(ident))
                 for ident in usable}
    triplets = []
    scanned = 0
    n_semi = n_hard = 0
    for ident, ia, ip in pairs:
        va = groups[ident][ia]
        d_p = float(((va - groups[ident][ip]) ** 2).sum())
        pool = other_idx[ident]
        if cfg.negatives_per_pair >= len(pool):
            chosen = pool
        else:
            chosen = rng.choice(pool, cfg.negatives_per_pair, replace=False)
        d_ns = ((vecs[chosen] - va) ** 2).sum(axis=1)
        scanned += len(chosen)
        for j, d_n in zip(chosen, d_ns):
            klass = classify_triplet(d_p, float(d_n), cfg.alpha)
            if klass == SEMI_HARD:
                n_semi += 1
            elif klass == HARD:
                n_hard += 1
            else:
                continue
            triplets.append(Triplet((ident, ia), (ident, ip), refs[j],
                                    d_p, float(d_n), klass))
    report = EpochMiningReport(epoch=epoch, semi_hard=n_semi, hard=n_hard,
                               scanned=scanned)
    return triplets, report


def mine_with_widening(embeddings_by_identity, cfg, seed=0, epoch=0):
    """Re-mine with doubled negatives-per-pair until the minimum triplet
    threshold is met or sampling is exhaustive. Returns (triplets, report,
    negatives_per_pair actually used)."""
    sizes = {i: len(v) for i, v in embeddings_by_identity.items()}
    total = sum(sizes.values())
    max_pool = max((total - n) for n in sizes.values()) if sizes else 0
    k = cfg.negatives_per_pair
    while True:
        triplets, report = mine_epoch(embeddings_by_identity,
                                      replace(cfg, negatives_per_pair=k),
                                      seed=seed, epoch=epoch)
        if len(triplets) >= cfg.min_triplet_threshold or k >= max_pool:
            return triplets, report, k
        k = min(2 * k, max_pool)


@dataclass
class TrainResult:
    checkpoint_path: Path
    epoch_checkpoints: list
    reports: list
    metrics: list
    threshold: float
    metrics_csv: Path
    mining_csv: Path
    net: object = None


def load_split_images(root, manifest, split, size, params=None):
    """Preprocess every image of a split; returns dict identity -> (n,H,W)."""
    out = {}
    for ident, files in sorted(manifest["splits"][split].items()):
        imgs = [preprocess(load_image(Path(root) / rel), out_size=size,
                           params=params)
                for rel in files]
        out[ident] = np.stack(imgs) if imgs else np.zeros((0, size, size),
                                                          np.uint8)
    return out


def _append_csv(path, header, row):
    new = not Path(path).exists()
    with open(path, "a", newline="") as f:
        writer = csv.writer(f)
        if new:
            writer.writerow(header)
        writer.writerow(row)


def train_embedder(data_root, out_dir, net=None, opt=None, mining_cfg=None,
                   augment_cfg=None, loss_params=None, epochs=30, dim=128,
                   seed=0, far_target=1e-2, eval_pairs=(400, 400),
                   preprocess_params=None, progress=None):
    """Full training loop; writes per-epoch checkpoints, metrics.csv and
    mining.csv under out_dir and returns a TrainResult.

    On a non-finite loss the loop aborts with NumericError; the newest
    checkpoint already on disk is the last good state.
    """
    mining_cfg = mining_cfg or MiningConfig()
    augment_cfg = augment_cfg or AugmentConfig(seed=seed)
    loss_params = loss_params or TripletLossParams(alpha=mining_cfg.alpha)
    if loss_params.alpha != mining_cfg.alpha:
        raise SpecError("mining alpha and loss alpha must agree")
    preprocess_params = preprocess_params or PreprocessParams()
    net = net or build_network(embedder_spec(dim=dim, seed=seed))
    opt = opt or OptimizerState()
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    metrics_csv = out_dir / "metrics.csv"
    mining_csv = out_dir / "mining.csv"
    for stale in (metrics_csv, mining_csv):
        if stale.exists():
            stale.unlink()

    manifest = load_manifest(data_root)  # raises if splits share identities
    size = net.spec.input_shape[1]
    train_imgs = load_split_images(data_root, manifest, "train", size,
                                   preprocess_params)
    val_imgs = load_split_images(data_root, manifest, "val", size,
                                 preprocess_params)
    if not train_imgs:
        raise DataError("train split is empty")
    train_idents = sorted(train_imgs)
    flat_imgs = np.concatenate([train_imgs[i] for i in train_idents])
    slices = {}
    start = 0
    for ident in train_idents:
        n = len(train_imgs[ident])
        slices[ident] = slice(start, start + n)
        start += n
    img_of = {(ident, k): train_imgs[ident][k]
              for ident in train_idents for k in range(len(train_imgs[ident]))}

    val_refs = {ident: [(ident, k) for k in range(len(val_imgs[ident]))]
                for ident in sorted(val_imgs)}
    val_pairs = sample_pairs(val_refs, eval_pairs[0], eval_pairs[1],
                             seed=derive_seed(seed, 999))
    val_flat = np.concatenate([val_imgs[i] for i in sorted(val_imgs)])
    val_keys = [(i, k) for i in sorted(val_imgs)
                for k in range(len(val_imgs[i]))]

    aug_rng = np.random.default_rng(derive_seed(seed, 1))
    shuffle_rng = np.random.default_rng(derive_seed(seed, 2))
    reports, metrics_rows, epoch_ckpts = [], [], []
    threshold = 0.0

    for epoch in range(epochs):
        embs = embed_batch(net, flat_imgs)
        groups = {ident: embs[slices[ident]] for ident in train_idents}
        triplets, report, used_k = mine_with_widening(
            groups, mining_cfg, seed=seed, epoch=epoch)
        reports.append(report)
        _append_csv(mining_csv, MINING_HEADER,
                    [report.epoch, report.semi_hard, report.hard,
                     report.scanned])

        order = shuffle_rng.permutation(len(triplets))
        loss_total = 0.0
        for lo in range(0, len(order), mining_cfg.batch_size):
            batch = [triplets[i] for i in order[lo:lo + mining_cfg.batch_size]]
            stack = np.stack(
                [augment_image(img_of[t.anchor], augment_cfg, aug_rng)
                 for t in batch]
                + [augment_image(img_of[t.positive], augment_cfg, aug_rng)
                   for t in batch]
                + [augment_image(img_of[t.negative], augment_cfg, aug_rng)
                   for t in batch])
            out, tape = net.forward_with_tape(to_input(stack))
            b = len(batch)
            loss, (ga, gp, gn) = triplet_loss(out[:b], out[b:2 * b],
                                              out[2 * b:], loss_params)
            if not np.isfinite(loss):
                raise NumericError(f"non-finite loss at epoch {epoch}")
            grad_out = np.concatenate([ga, gp, gn]).astype(np.float32)
            grads = net.backward(tape, grad_out)
            adam_step(net, grads, opt)
            loss_total += loss
        maybe_decay(opt, epoch + 1)

        val_embs = embed_batch(net, val_flat)
        emb_map = dict(zip(val_keys, val_embs))
        dists = pair_distances(emb_map, val_pairs)
        threshold = select_threshold(dists)
        point = metrics_at_threshold(dists, threshold)
        try:
            op = val_at_far(dists, far_target)
            op_val, op_far = op.val, op.far
        except InsufficientPairs:
            # No observed threshold fits the FAR budget (a fully collapsed
            # embedding can do this); reject-all is the degenerate point
            # that does.
            op_val, op_far = 0.0, 0.0
        mean_loss = loss_total / max(1, len(triplets))
        row = [epoch, mean_loss, op_val, op_far, point.accuracy, point.f1]
        metrics_rows.append(dict(zip(METRICS_HEADER, row)))
        _append_csv(metrics_csv, METRICS_HEADER,
                    [epoch] + [repr(float(v)) for v in row[1:]])

        ckpt = out_dir / f"model_ep{epoch:03d}.ckpt"
        save_checkpoint(ckpt, net, opt, dim=net.out_shape[0], epoch=epoch,
                        threshold=threshold,
                        extra={"negatives_per_pair_used": int(used_k),
                               "preprocess": preprocess_params.to_dict()})
        epoch_ckpts.append(ckpt)
        if progress:
            progress(epoch, mean_loss, op_val, report)

    final = out_dir / "model.ckpt"
    save_checkpoint(final, net, opt, dim=net.out_shape[0],
                    epoch=max(0, epochs - 1), threshold=threshold,
                    extra={"preprocess": preprocess_params.to_dict()})
    return TrainResult(checkpoint_path=final, epoch_checkpoints=epoch_ckpts,
                       reports=reports, metrics=metrics_rows,
                       threshold=threshold, metrics_csv=metrics_csv,
                       mining_csv=mining_csv, net=net)
