"""Release acceptance gate.

One test per release criterion. Each test prints a single PASS/FAIL line
to the real stdout, so a full run reads as a checklist even under pytest's
output capture. The desk-scale training fixtures are module scoped and
shared between the embedder, detector, and service criteria; everything is
seeded, so reruns reproduce the same numbers.
"""

import io
import json
import time
from types import SimpleNamespace

import numpy as np
import pytest
from fastapi.testclient import TestClient
from PIL import Image

import oracles
from muzzleid.augment import (AugmentConfig, blackout, salt_pepper,
                              sample_blackout, sample_salt_pepper)
from muzzleid.detector import BBox, iou, map_eval, nms, train_detector
from muzzleid.embedder import (TripletLossParams, classify_triplet,
                               embed_batch, triplet_loss)
from muzzleid.errors import (ChecksumError, CheckpointVersionError,
                             FormatError, InsufficientPairs,
                             TruncatedCheckpoint)
from muzzleid.evalkit import (metrics_at_threshold, pair_distances,
                              sample_pairs, select_threshold, val_at_far,
                              val_far)
from muzzleid.gallery import EnrollmentRecord, GalleryStore, load_gallery
from muzzleid.imgproc import clahe, resize_bilinear
from muzzleid.miner import MiningConfig, load_split_images, mine_epoch, \
    train_embedder
from muzzleid.neuralcore import (Conv2d, Dense, Flatten, GlobalAvgPool,
                                 L2Normalize, MaxPool, NetworkSpec,
                                 OptimizerState, ReLU, build_network,
                                 embedder_spec, load_checkpoint,
                                 save_checkpoint)
from muzzleid.service import (CODE_CROP_TOO_SMALL, CODE_DECODE_ERROR,
                              CODE_DUPLICATE_ID, CODE_EMPTY_GALLERY,
                              CODE_MALFORMED, CODE_MULTIPLE_MUZZLES,
                              CODE_NO_MUZZLE, CODE_NOT_ENROLLED, create_app)
from muzzleid.synthgen import (gen_dataset, gen_detection_scenes,
                               load_manifest, render_scene)

RTOL = 1e-4
H = 1e-5
METRIC_TOL = 1e-9
DESK_SEED = 7

# Desk embedder recipe: mild augmentation and a small mining budget keep
# one epoch under a minute at this dataset size without starving the loss.
# 24 epochs lands well inside the post-decay plateau (test VAL steady from
# epoch 18 on) while leaving half the wall-clock budget unused.
EMB_EPOCHS = 24
EMB_DIM = 128
DESK_MINING = dict(negatives_per_pair=4, max_anchor_pairs=256, alpha=0.5)
DESK_AUGMENT = dict(rotation_range=5.0, zoom_range=0.05, crop_fraction=0.05,
                    shear_range=3.0, translation_range=0.05, h_flip_prob=0.2,
                    v_flip_prob=0.0, blackout_prob=0.2, blackout_min_frac=0.02,
                    blackout_max_frac=0.10, salt_pepper_prob=0.2,
                    salt_density=0.005, pepper_density=0.005)

# A randomly initialized embedder already separates these renders somewhat,
# so a fixed multiple of its VAL@FAR=1e-2 can exceed 1.0, which no model
# attains. The trained target is therefore the baseline multiple capped at
# an absolute bar a correct implementation reaches with margin.
BASELINE_MULT = 10.0
VAL_CAP = 0.80
PAIR_ACC_FLOOR = 0.90

DETECTOR_SCENES = 200
DETECTOR_EPOCHS = 50
MAP_FLOOR = 0.90


def report(capsys, criterion, ok, detail):
    # fd-level capture would swallow a plain print even on the real stdout
    tag = "PASS" if ok else "FAIL"
    with capsys.disabled():
        print(f"[acceptance] {criterion:<22} {tag}  {detail}", flush=True)


# ---------------------------------------------------------------------------
# Gradient checks
# ---------------------------------------------------------------------------

def rel_err(analytic, numeric):
    """Worst elementwise relative error; the denominator floor turns the
    quotient into an absolute tolerance where both sides sit near zero."""
    analytic = np.asarray(analytic, dtype=np.float64).ravel()
    numeric = np.asarray(numeric, dtype=np.float64).ravel()
    if analytic.size == 0:
        return 0.0
    denom = np.maximum(np.abs(numeric), 1e-3)
    return float(np.max(np.abs(analytic - numeric) / denom))


def nudge_from_zero(x, margin=1e-3):
    # keep inputs away from the relu kink so central differences stay valid
    x = x.copy()
    small = np.abs(x) < margin
    x[small] = margin * np.sign(x[small] + (x[small] == 0))
    return x


def conv_case(rng):
    layer = Conv2d(int(rng.integers(1, 4)), int(rng.integers(1, 4)),
                   int(rng.integers(1, 4)), int(rng.integers(1, 3)))
    layer.init_params(int(rng.integers(1 << 30)), np.float64)
    x = rng.standard_normal((int(rng.integers(1, 3)), layer.in_channels,
                             int(rng.integers(3, 8)), int(rng.integers(3, 8))))
    return layer, x


def relu_case(rng):
    shape = (int(rng.integers(1, 3)), int(rng.integers(1, 4)),
             int(rng.integers(2, 7)), int(rng.integers(2, 7)))
    return ReLU(), nudge_from_zero(rng.standard_normal(shape))


def maxpool_case(rng):
    size = int(rng.integers(2, 4))
    shape = (int(rng.integers(1, 3)), int(rng.integers(1, 4)),
             int(rng.integers(size, 9)), int(rng.integers(size, 9)))
    return MaxPool(size), rng.standard_normal(shape)


def flatten_case(rng):
    shape = (int(rng.integers(1, 3)), int(rng.integers(1, 4)),
             int(rng.integers(2, 6)), int(rng.integers(2, 6)))
    return Flatten(), rng.standard_normal(shape)


def gap_case(rng):
    shape = (int(rng.integers(1, 3)), int(rng.integers(1, 5)),
             int(rng.integers(2, 7)), int(rng.integers(2, 7)))
    return GlobalAvgPool(), rng.standard_normal(shape)


def dense_case(rng):
    layer = Dense(int(rng.integers(2, 9)), int(rng.integers(1, 7)))
    layer.init_params(int(rng.integers(1 << 30)), np.float64)
    return layer, rng.standard_normal((int(rng.integers(1, 4)), layer.in_dim))


def l2norm_case(rng):
    shape = (int(rng.integers(1, 4)), int(rng.integers(3, 9)))
    return L2Normalize(), rng.standard_normal(shape)


LAYER_CASES = [("conv2d", conv_case), ("relu", relu_case),
               ("maxpool", maxpool_case), ("flatten", flatten_case),
               ("global_avg_pool", gap_case), ("dense", dense_case),
               ("l2_normalize", l2norm_case)]


def layer_fd_err(layer, x, rng):
    """FD check of input and parameter gradients through a random
    projection of the layer output."""
    cache = {}
    out = layer.forward(x, cache)
    proj = rng.standard_normal(out.shape)
    dx, pgrads = layer.backward(proj, cache)

    def loss_x(flat):
        return float(np.sum(layer.forward(flat.reshape(x.shape), None) * proj))

    worst = rel_err(dx, oracles.central_difference(loss_x, x.ravel(), h=H))
    for grad, p in zip(pgrads, layer.params()):
        orig = p.copy()

        def loss_p(flat, p=p, orig=orig):
            p[...] = flat.reshape(p.shape)
            val = float(np.sum(layer.forward(x, None) * proj))
            p[...] = orig
            return val

        num = oracles.central_difference(loss_p, orig.ravel(), h=H)
        worst = max(worst, rel_err(grad, num))
    return worst


def triplet_fd_err(rng, params):
    while True:
        b = int(rng.integers(2, 7))
        d = int(rng.integers(3, 9))
        a = rng.standard_normal((b, d))
        p = rng.standard_normal((b, d))
        n = rng.standard_normal((b, d))
        d_p = ((a - p) ** 2).sum(axis=1)
        d_n = ((a - n) ** 2).sum(axis=1)
        # resample hinge-boundary draws, where the loss is not differentiable
        if np.all(np.abs(d_p - d_n + params.alpha) > 1e-3):
            break
    _, grads = triplet_loss(a, p, n, params)

    def loss_flat(flat):
        z = flat.reshape(3, b, d)
        val, _ = triplet_loss(z[0], z[1], z[2], params)
        return float(val)

    num = oracles.central_difference(loss_flat, np.stack([a, p, n]).ravel(),
                                     h=H)
    return rel_err(np.stack(grads), num)


def test_gradient_checks(capsys):
    t0 = time.monotonic()
    rng = np.random.default_rng(0x6AD)
    worst = 0.0
    for _, case in LAYER_CASES:
        for _ in range(20):
            layer, x = case(rng)
            worst = max(worst, layer_fd_err(layer, x, rng))
    for i in range(20):
        params = TripletLossParams(alpha=(0.2, 0.5, 1.0)[i % 3],
                                   reduction=("sum", "mean")[i % 2])
        worst = max(worst, triplet_fd_err(rng, params))
    elapsed = time.monotonic() - t0
    ok = worst <= RTOL and elapsed < 60.0
    report(capsys, "gradient-checks", ok,
           f"max rel err {worst:.2e} over {len(LAYER_CASES)} layer kinds "
           f"+ triplet loss, {elapsed:.1f}s")
    assert worst <= RTOL
    assert elapsed < 60.0


# ---------------------------------------------------------------------------
# Histogram equalization
# ---------------------------------------------------------------------------

def test_clahe_exactness(capsys):
    rng = np.random.default_rng(0xC1A4E)
    mismatched = 0
    for _ in range(50):
        h = int(rng.integers(2, 33))
        w = int(rng.integers(2, 33))
        img = rng.integers(0, 256, (h, w), dtype=np.uint8)
        gx = int(rng.integers(1, min(w, 4) + 1))
        gy = int(rng.integers(1, min(h, 4) + 1))
        clip = float(rng.choice([1.0, 1.5, 2.0, 3.5, 8.0, 256.0]))
        got = clahe(img, gx, gy, clip)
        want = oracles.clahe_reference(img, gx, gy, clip)
        mismatched += int(np.sum(got != want))
    he_mismatched = 0
    for _ in range(10):
        h = int(rng.integers(4, 33))
        w = int(rng.integers(4, 33))
        img = rng.integers(0, 256, (h, w), dtype=np.uint8)
        # one tile and a clip ceiling at the tile size is plain equalization
        he_mismatched += int(np.sum(clahe(img, 1, 1, 256.0)
                                    != oracles.plain_hist_eq(img)))
    ok = mismatched == 0 and he_mismatched == 0
    report(capsys, "clahe-exactness", ok,
           f"{mismatched} pixels off reference, "
           f"{he_mismatched} off plain equalization")
    assert mismatched == 0
    assert he_mismatched == 0


# ---------------------------------------------------------------------------
# Augmentation mask algebra
# ---------------------------------------------------------------------------

def test_augment_mask_algebra(capsys):
    rng = np.random.default_rng(0xA06)
    cfg = AugmentConfig(blackout_min_frac=0.05, blackout_max_frac=0.5)
    bad = 0
    for _ in range(100):
        img = rng.integers(0, 256, (16, 16), dtype=np.uint8)
        region, r = sample_blackout((16, 16), cfg, rng)
        out = blackout(img, region, r)
        r0, c0, r1, c1 = region
        for i in range(16):
            for j in range(16):
                want = r if (r0 <= i < r1 and c0 <= j < c1) else img[i, j]
                bad += int(out[i, j]) != want
        sets = sample_salt_pepper((16, 16), 0.05, 0.05, rng)
        sp = salt_pepper(img, sets)
        for i in range(16):
            for j in range(16):
                if (i, j) in sets.salt:
                    want = 255
                elif (i, j) in sets.pepper:
                    want = 0
                else:
                    want = img[i, j]
                bad += int(sp[i, j]) != want
    report(capsys, "augment-masks", bad == 0,
           f"{bad} pixels off the mask formulas in 100 trials")
    assert bad == 0


# ---------------------------------------------------------------------------
# Triplet classification and mining
# ---------------------------------------------------------------------------

def test_triplet_mining_vs_brute_force(capsys):
    rng = np.random.default_rng(0x7219)
    alpha = 0.5
    cls_bad = 0
    for _ in range(200):
        d_p = float(rng.uniform(0.0, 4.0))
        d_n = float(rng.uniform(0.0, 4.0))
        if classify_triplet(d_p, d_n, alpha) \
                != oracles.classify_reference(d_p, d_n, alpha):
            cls_bad += 1
    # boundary gaps sit in the closed-edge classes
    cls_bad += classify_triplet(1.0, 1.0 + alpha, alpha) != "easy"
    cls_bad += classify_triplet(1.0, 1.0, alpha) != "hard"

    emb = {f"id{i}": rng.standard_normal((4, 8)) for i in range(5)}
    # sixteen negatives reach every other-identity image, so one mining
    # pass is exhaustive and must reproduce the cubic enumeration
    cfg = MiningConfig(negatives_per_pair=16, alpha=alpha)
    triplets, rep = mine_epoch(emb, cfg, seed=3, epoch=1)
    got = {(t.anchor, t.positive, t.negative, t.hardness) for t in triplets}
    want = oracles.mine_reference({k: list(v) for k, v in emb.items()}, alpha)
    margins_bad = sum(1 for t in triplets if not t.d_n - t.d_p < alpha)
    ok = cls_bad == 0 and got == want and margins_bad == 0 \
        and len(got) == len(triplets)
    report(capsys, "triplet-mining", ok,
           f"{len(triplets)} retained == brute force: {got == want}, "
           f"{cls_bad} classification mismatches, "
           f"{margins_bad} margin violations")
    assert cls_bad == 0
    assert got == want
    assert len(got) == len(triplets)
    assert margins_bad == 0
    assert rep.scanned == 60 * 16


# ---------------------------------------------------------------------------
# Verification metrics and box metrics
# ---------------------------------------------------------------------------

def random_distances(rng):
    n_pos = int(rng.integers(5, 101))
    n_neg = int(rng.integers(5, 101))
    dists = [(float(rng.uniform(0.0, 2.0)), True) for _ in range(n_pos)]
    dists += [(float(rng.uniform(0.0, 2.0)), False) for _ in range(n_neg)]
    order = rng.permutation(len(dists))
    return [dists[i] for i in order]


def random_box(rng, conf=None):
    w = float(rng.uniform(0.05, 0.5))
    h = float(rng.uniform(0.05, 0.5))
    cx = float(rng.uniform(0.1, 0.9))
    cy = float(rng.uniform(0.1, 0.9))
    if conf is None:
        return cx, cy, w, h
    return cx, cy, w, h, float(rng.uniform(0.05, 1.0))


def random_detection_instance(rng):
    """Per-image prediction and truth lists plus their flat tuple forms."""
    preds, gts, flat_p, flat_g = [], [], [], []
    for img in range(int(rng.integers(3, 8))):
        img_gts, img_preds = [], []
        for _ in range(int(rng.integers(0, 4))):
            cx, cy, w, h = random_box(rng)
            img_gts.append(BBox(cx, cy, w, h))
            flat_g.append((img, cx, cy, w, h))
            if rng.random() < 0.75:
                jcx = min(0.95, max(0.05, cx + float(rng.uniform(-0.04, 0.04))))
                jcy = min(0.95, max(0.05, cy + float(rng.uniform(-0.04, 0.04))))
                jw = min(1.0, w * float(rng.uniform(0.85, 1.15)))
                jh = min(1.0, h * float(rng.uniform(0.85, 1.15)))
                conf = float(rng.uniform(0.2, 1.0))
                img_preds.append(BBox(jcx, jcy, jw, jh, conf))
                flat_p.append((img, jcx, jcy, jw, jh, conf))
        for _ in range(int(rng.integers(0, 3))):
            cx, cy, w, h, conf = random_box(rng, conf=True)
            img_preds.append(BBox(cx, cy, w, h, conf))
            flat_p.append((img, cx, cy, w, h, conf))
        preds.append(img_preds)
        gts.append(img_gts)
    return preds, gts, flat_p, flat_g


def test_metric_oracles(capsys):
    rng = np.random.default_rng(0x3E71)
    worst = 0.0
    branch_bad = 0
    for _ in range(20):
        dists = random_distances(rng)
        thr = float(rng.uniform(0.0, 2.0))
        v, f = val_far(dists, thr)
        rv, rf = oracles.val_far_reference(dists, thr)
        worst = max(worst, abs(v - rv), abs(f - rf))
        op = metrics_at_threshold(dists, thr)
        ra, rf1, rtpr, rfpr = oracles.metrics_reference(dists, thr)
        worst = max(worst, abs(op.accuracy - ra), abs(op.f1 - rf1),
                    abs(op.tpr - rtpr), abs(op.fpr - rfpr))
        sel = select_threshold(dists)
        rthr, rbest = oracles.select_threshold_reference(dists)
        worst = max(worst, abs(sel - rthr),
                    abs(metrics_at_threshold(dists, sel).f1 - rbest))
        far_t = float(rng.choice([0.01, 0.02, 0.05, 0.10]))
        ref = oracles.val_at_far_reference(dists, far_t)
        if ref is None:
            try:
                val_at_far(dists, far_t)
                branch_bad += 1
            except InsufficientPairs:
                pass
        else:
            point = val_at_far(dists, far_t)
            worst = max(worst, abs(point.threshold - ref[0]),
                        abs(point.val - ref[1]), abs(point.far - ref[2]))

    nms_bad = 0
    for trial in range(20):
        n = 200 if trial == 0 else int(rng.integers(5, 61))
        tuples = [random_box(rng, conf=True) for _ in range(n)]
        for a in tuples[:10]:
            for b in tuples[:10]:
                worst = max(worst, abs(iou(BBox(*a[:4]), BBox(*b[:4]))
                                       - oracles.iou_reference(a[:4], b[:4])))
        thr = float(rng.choice([0.3, 0.45, 0.6]))
        kept = nms([BBox(*t) for t in tuples], thr)
        got = [(b.cx, b.cy, b.w, b.h, b.confidence) for b in kept]
        if got != oracles.nms_reference(tuples, thr):
            nms_bad += 1

    for _ in range(10):
        preds, gts, flat_p, flat_g = random_detection_instance(rng)
        if not flat_g:
            continue
        scores = map_eval(preds, gts)
        r50 = oracles.average_precision_reference(flat_p, flat_g, 0.5)
        steps = [0.5 + 0.05 * i for i in range(10)]
        r5095 = sum(oracles.average_precision_reference(flat_p, flat_g, t)
                    for t in steps) / len(steps)
        worst = max(worst, abs(scores["map50"] - r50),
                    abs(scores["map50_95"] - r5095))

    ok = worst <= METRIC_TOL and branch_bad == 0 and nms_bad == 0
    report(capsys, "metric-oracles", ok,
           f"max |delta| {worst:.1e}, {nms_bad} nms mismatches, "
           f"{branch_bad} feasibility branch mismatches")
    assert worst <= METRIC_TOL
    assert branch_bad == 0
    assert nms_bad == 0


# ---------------------------------------------------------------------------
# Desk-scale training fixtures
# ---------------------------------------------------------------------------

@pytest.fixture(scope="module")
def desk_data(tmp_path_factory):
    root = tmp_path_factory.mktemp("deskdata")
    gen_dataset(root, 32, 8, 8, 12, DESK_SEED)
    return root


def pair_metrics(net, root, split):
    """Distance list over seeded pairs of one split's embeddings.

    2000 negatives keep the FAR=1e-2 operating point away from the
    coarse quantization a few hundred pairs would impose.
    """
    manifest = load_manifest(root)
    images = load_split_images(root, manifest, split,
                               net.spec.input_shape[1])
    refs, vectors = {}, {}
    for ident in sorted(images):
        vecs = embed_batch(net, images[ident])
        refs[ident] = [(ident, k) for k in range(len(vecs))]
        for k, v in enumerate(vecs):
            vectors[(ident, k)] = v
    return pair_distances(vectors, sample_pairs(refs, 500, 2000,
                                                seed=DESK_SEED))


@pytest.fixture(scope="module")
def desk_embedder(desk_data, tmp_path_factory):
    out = tmp_path_factory.mktemp("embrun")
    untrained = build_network(embedder_spec(dim=EMB_DIM, seed=DESK_SEED))
    base = val_at_far(pair_metrics(untrained, desk_data, "test"), 1e-2)
    t0 = time.monotonic()
    result = train_embedder(desk_data, out,
                            mining_cfg=MiningConfig(**DESK_MINING),
                            augment_cfg=AugmentConfig(**DESK_AUGMENT,
                                                      seed=DESK_SEED),
                            epochs=EMB_EPOCHS, dim=EMB_DIM, seed=DESK_SEED)
    elapsed = time.monotonic() - t0
    dists = pair_metrics(result.net, desk_data, "test")
    return SimpleNamespace(result=result, elapsed=elapsed,
                           baseline_val=base.val, test_dists=dists)


@pytest.fixture(scope="module")
def desk_detector(tmp_path_factory):
    scenes = tmp_path_factory.mktemp("scenes")
    gen_detection_scenes(scenes, DETECTOR_SCENES, DESK_SEED)
    out = tmp_path_factory.mktemp("detrun")
    t0 = time.monotonic()
    result = train_detector(scenes, out_dir=out, epochs=DETECTOR_EPOCHS,
                            seed=DESK_SEED)
    return SimpleNamespace(result=result, elapsed=time.monotonic() - t0)


def test_embedder_desk_run(desk_embedder, capsys):
    e = desk_embedder
    point = val_at_far(e.test_dists, 1e-2)
    thr = select_threshold(e.test_dists)
    acc = metrics_at_threshold(e.test_dists, thr).accuracy
    pos = np.median([d for d, same in e.test_dists if same])
    neg = np.median([d for d, same in e.test_dists if not same])
    first = e.result.reports[0]
    last = e.result.reports[-1]
    mined_first = first.semi_hard + first.hard
    mined_last = last.semi_hard + last.hard
    target = min(BASELINE_MULT * e.baseline_val, VAL_CAP)
    ok = (point.val >= target and acc >= PAIR_ACC_FLOOR and pos < neg
          and mined_last < mined_first and e.elapsed < 1800.0)
    report(capsys, "embedder-desk-run", ok,
           f"VAL@FAR<=1e-2 {point.val:.3f} (target {target:.3f}, untrained "
           f"{e.baseline_val:.3f}), acc {acc:.3f}, medians {pos:.3f}/{neg:.3f}, "
           f"mined {mined_first}->{mined_last}, "
           f"{EMB_EPOCHS} epochs in {e.elapsed / 60:.1f}m")
    assert point.val >= target
    assert acc >= PAIR_ACC_FLOOR
    assert pos < neg
    assert mined_last < mined_first
    assert e.elapsed < 1800.0


def test_detector_desk_run(desk_detector, capsys):
    d = desk_detector
    ok = d.result.holdout_map50 >= MAP_FLOOR and d.elapsed < 600.0
    report(capsys, "detector-desk-run", ok,
           f"holdout mAP@0.5 {d.result.holdout_map50:.4f} on "
           f"{DETECTOR_SCENES} scenes, {DETECTOR_EPOCHS} epochs in "
           f"{d.elapsed / 60:.1f}m")
    assert d.result.holdout_map50 >= MAP_FLOOR
    assert d.elapsed < 600.0


# ---------------------------------------------------------------------------
# Service conformance
# ---------------------------------------------------------------------------

def png_bytes(img):
    buf = io.BytesIO()
    Image.fromarray(img, mode="L").save(buf, format="PNG")
    return buf.getvalue()


def scene_png(seed, n_muzzles=1, side=None):
    img, _ = render_scene(seed, n_muzzles=n_muzzles)
    if side is not None:
        img = resize_bilinear(img, side, side)
    return png_bytes(img)


def test_service_conformance(desk_embedder, desk_detector, tmp_path, capsys):
    gallery = GalleryStore(dim=EMB_DIM,
                           threshold=desk_embedder.result.threshold,
                           path=tmp_path / "herd.jsonl")
    app = create_app(desk_embedder.result.net, desk_detector.result.net,
                     gallery)
    client = TestClient(app)
    probe = scene_png(901)
    checks = []

    r = client.post("/api/v1/cattle/identify", files={"image": probe})
    checks.append(("identify empty gallery 409 " + CODE_EMPTY_GALLERY,
                   r.status_code == 409
                   and r.json()["code"] == CODE_EMPTY_GALLERY))

    r = client.post("/api/v1/cattle/enroll", files={"image": probe},
                    data={"cattle_id": "c1", "breed": "Kankrej"})
    checks.append(("enroll 201", r.status_code == 201))

    r = client.post("/api/v1/cattle/verify", files={"image": probe},
                    data={"cattle_id": "c1"})
    body = r.json() if r.status_code == 200 else {}
    checks.append(("verify roundtrip distance < 1e-6",
                   r.status_code == 200 and body.get("match") is True
                   and body.get("distance", 1.0) < 1e-6))

    cases = [
        ("decode " + CODE_DECODE_ERROR, 422, CODE_DECODE_ERROR,
         {"files": {"image": ("x.png", b"not an image", "image/png")}}),
        ("blank frame " + CODE_NO_MUZZLE, 422, CODE_NO_MUZZLE,
         {"files": {"image": png_bytes(np.full((256, 256), 128,
                                               dtype=np.uint8))}}),
        ("two muzzles " + CODE_MULTIPLE_MUZZLES, 422, CODE_MULTIPLE_MUZZLES,
         {"files": {"image": scene_png(2000, n_muzzles=2)}}),
        ("small frame " + CODE_CROP_TOO_SMALL, 422, CODE_CROP_TOO_SMALL,
         {"files": {"image": scene_png(901, side=96)}}),
    ]
    for name, status, code, kwargs in cases:
        r = client.post("/api/v1/cattle/enroll",
                        data={"cattle_id": "probe-" + code}, **kwargs)
        checks.append((name, r.status_code == status
                       and r.json()["code"] == code))

    r = client.post("/api/v1/cattle/enroll", files={"image": probe},
                    data={"cattle_id": "c1"})
    checks.append(("re-enroll 409 " + CODE_DUPLICATE_ID,
                   r.status_code == 409
                   and r.json()["code"] == CODE_DUPLICATE_ID))

    r = client.post("/api/v1/cattle/verify", files={"image": probe},
                    data={"cattle_id": "ghost"})
    checks.append(("verify unknown 404 " + CODE_NOT_ENROLLED,
                   r.status_code == 404
                   and r.json()["code"] == CODE_NOT_ENROLLED))

    r = client.post("/api/v1/cattle/enroll", files={"image": probe})
    checks.append(("missing id 400 " + CODE_MALFORMED,
                   r.status_code == 400
                   and r.json()["code"] == CODE_MALFORMED))

    failed = [name for name, passed in checks if not passed]
    report(capsys, "service-conformance", not failed,
           f"{len(checks) - len(failed)}/{len(checks)} checks" +
           (f", failed: {', '.join(failed)}" if failed else ""))
    assert failed == []


# ---------------------------------------------------------------------------
# Persistence
# ---------------------------------------------------------------------------

def small_net(seed=11):
    return build_network(NetworkSpec((1, 8, 8), [
        {"type": "conv2d", "in_channels": 1, "out_channels": 4,
         "kernel_size": 3},
        {"type": "relu"},
        {"type": "maxpool", "size": 2},
        {"type": "flatten"},
        {"type": "dense", "in_dim": 64, "out_dim": 8},
        {"type": "l2_normalize"},
    ], seed))


def test_persistence_roundtrips(tmp_path, capsys):
    checks = []

    net = small_net()
    p1 = tmp_path / "a.ckpt"
    p2 = tmp_path / "b.ckpt"
    save_checkpoint(p1, net, OptimizerState(learning_rate=0.003,
                                            step_count=41),
                    dim=8, epoch=5, threshold=0.42, extra={"note": "gate"})
    net2, opt2, meta = load_checkpoint(p1)
    same_params = all(np.array_equal(a, b) and a.dtype == b.dtype
                     for a, b in zip(net.parameters(), net2.parameters()))
    checks.append(("checkpoint params bit-equal", same_params))
    checks.append(("checkpoint meta intact",
                   meta["dim"] == 8 and meta["epoch"] == 5
                   and meta["threshold"] == 0.42 and meta["note"] == "gate"
                   and opt2.learning_rate == 0.003 and opt2.step_count == 41))
    save_checkpoint(p2, net2, opt2, dim=meta["dim"], epoch=meta["epoch"],
                    threshold=meta["threshold"], extra={"note": meta["note"]})
    checks.append(("checkpoint re-save byte-identical",
                   p1.read_bytes() == p2.read_bytes()))

    rng = np.random.default_rng(0x9E12)
    g1 = tmp_path / "a.jsonl"
    g2 = tmp_path / "b.jsonl"
    store = GalleryStore(dim=8, threshold=0.42)
    for i in range(5):
        v = rng.standard_normal(8)
        store.enroll(EnrollmentRecord(cattle_id=f"c{i}",
                                      embedding=v / np.linalg.norm(v),
                                      metadata={"breed": "Gir"}))
    store.save(g1)
    loaded = load_gallery(g1)
    checks.append(("gallery records exact",
                   loaded == store
                   and all(np.array_equal(a.embedding, b.embedding)
                           for a, b in zip(store.records, loaded.records))))
    loaded.save(g2)
    checks.append(("gallery re-save byte-identical",
                   g1.read_bytes() == g2.read_bytes()))

    def corrupt(name, mutate):
        path = tmp_path / name
        save_checkpoint(path, net, OptimizerState(), 8, 0, 0.5)
        mutate(path)
        return path

    def expects(exc, path, loader):
        try:
            loader(path)
            return False
        except exc:
            return True

    junk = tmp_path / "junk.ckpt"
    junk.write_bytes(b"PNGXXXXX" + b"\x00" * 64)
    checks.append(("junk file rejected",
                   expects(FormatError, junk, load_checkpoint)))
    short = tmp_path / "short.ckpt"
    short.write_bytes(b"MZLC")
    checks.append(("truncated header rejected",
                   expects(TruncatedCheckpoint, short, load_checkpoint)))

    def chop(path):
        path.write_bytes(path.read_bytes()[:-8])

    checks.append(("truncated blob rejected",
                   expects(TruncatedCheckpoint, corrupt("chop.ckpt", chop),
                           load_checkpoint)))

    def flip(path):
        data = bytearray(path.read_bytes())
        data[-3] ^= 0xFF
        path.write_bytes(bytes(data))

    checks.append(("bit flip rejected",
                   expects(ChecksumError, corrupt("flip.ckpt", flip),
                           load_checkpoint)))

    def rewrite_version(path):
        data = bytearray(path.read_bytes())
        data[7] = ord("9")
        path.write_bytes(bytes(data))

    checks.append(("version mismatch rejected",
                   expects(CheckpointVersionError,
                           corrupt("ver.ckpt", rewrite_version),
                           load_checkpoint)))

    def trail(path):
        path.write_bytes(path.read_bytes() + b"\x00" * 4)

    checks.append(("trailing bytes rejected",
                   expects(FormatError, corrupt("trail.ckpt", trail),
                           load_checkpoint)))

    torn = tmp_path / "torn.jsonl"
    torn.write_bytes(g1.read_bytes()[:-20])
    checks.append(("torn gallery record rejected",
                   expects(FormatError, torn, load_gallery)))
    badhead = tmp_path / "badhead.jsonl"
    lines = g1.read_text().splitlines()
    badhead.write_text("\n".join(['{"version": 1,'] + lines[1:]) + "\n")
    checks.append(("broken gallery header rejected",
                   expects(FormatError, badhead, load_gallery)))
    wrongver = tmp_path / "wrongver.jsonl"
    header = json.loads(lines[0])
    header["version"] = 9
    wrongver.write_text("\n".join([json.dumps(header)] + lines[1:]) + "\n")
    checks.append(("gallery version mismatch rejected",
                   expects(FormatError, wrongver, load_gallery)))

    failed = [name for name, passed in checks if not passed]
    report(capsys, "persistence", not failed,
           f"{len(checks) - len(failed)}/{len(checks)} checks" +
           (f", failed: {', '.join(failed)}" if failed else ""))
    assert failed == []
