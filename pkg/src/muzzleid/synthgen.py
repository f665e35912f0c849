"""Procedural muzzle-like dataset generator.

An identity is a seeded planar partition: random sites on a 256x256 canvas,
nearest-site cell assignment, bright cells (beads) separated by dark bands
where the two nearest sites are nearly equidistant (ridges). Samples of an
identity re-render its canonical texture through mild capture variation
(pose warp, lighting gain/bias, defocus blur, sensor noise), kept weaker
than the texture differences between identities so the metric-learning task
is solvable. Scene synthesis pastes rendered muzzles onto clutter for the
detector.
"""

import json
from dataclasses import dataclass
from functools import lru_cache
from pathlib import Path

import numpy as np
from scipy.ndimage import gaussian_filter

from .augment import affine_matrix, warp_affine
from .errors import DataError, EmptyDataset, RefuseOverwrite, SpecError
from .imgproc import resize_bilinear, round_half_up, save_image
from .rng import derive_seed

CANVAS = 256
RIDGE_LEVEL = 60.0
SPLITS = ("train", "val", "test")


@dataclass(frozen=True)
class IdentitySpec:
    identity_id: str
    seed: int
    bead_count: int = 20
    ridge_width: float = 3.0
    base_contrast: float = 90.0


@lru_cache(maxsize=256)
def _canonical(spec):
    rng = np.random.default_rng(spec.seed)
    sites = rng.uniform(0.0, CANVAS, (spec.bead_count, 2))  # (y, x) rows
    cell_gain = rng.uniform(-20.0, 20.0, spec.bead_count)
    ys, xs = np.mgrid[0:CANVAS, 0:CANVAS].astype(np.float64)
    d = np.sqrt((ys[None] - sites[:, 0, None, None]) ** 2
                + (xs[None] - sites[:, 1, None, None]) ** 2)
    two = np.partition(d, 1, axis=0)
    ridge = (two[1] - two[0]) < spec.ridge_width
    bright = RIDGE_LEVEL + spec.base_contrast + cell_gain[np.argmin(d, axis=0)]
    img = np.where(ridge, RIDGE_LEVEL, bright)
    out = round_half_up(np.clip(img, 0.0, 255.0)).astype(np.uint8)
    out.setflags(write=False)
    return out


def gen_identity_texture(spec):
    """Canonical 256x256 texture; same spec always yields the same pixels."""
    if spec.bead_count < 4:
        raise SpecError(f"bead_count {spec.bead_count} < 4")
    return _canonical(spec).copy()


def render_sample(spec, variation_seed):
    """One capture of an identity: canonical texture seen through mild
    pose/lighting/focus/noise variation, deterministic per seed pair."""
    canon = gen_identity_texture(spec)
    rng = np.random.default_rng((spec.seed, int(variation_seed)))
    angle = rng.uniform(-8.0, 8.0)
    zoom = 1.0 + rng.uniform(-0.08, 0.08)
    tx = rng.uniform(-8.0, 8.0)
    ty = rng.uniform(-8.0, 8.0)
    out = warp_affine(canon, affine_matrix(angle, zoom), tx, ty)
    f = out.astype(np.float64) * rng.uniform(0.85, 1.15) + rng.uniform(-15.0, 15.0)
    f = gaussian_filter(f, rng.uniform(0.2, 1.2))
    f += rng.normal(0.0, rng.uniform(1.0, 5.0), f.shape)
    return round_half_up(np.clip(f, 0.0, 255.0)).astype(np.uint8)


def identity_spec_for(identity_id, seed):
    """Per-identity shape parameters drawn from the identity's own seed."""
    rng = np.random.default_rng(seed)
    return IdentitySpec(
        identity_id=identity_id,
        seed=seed,
        bead_count=int(rng.integers(14, 30)),
        ridge_width=float(rng.uniform(2.0, 4.0)),
        base_contrast=float(rng.uniform(75.0, 110.0)),
    )


def gen_dataset(root, n_train_ids, n_val_ids, n_test_ids, images_per_id,
                master_seed):
    """Write <root>/<split>/<identity>/<k>.png plus manifest.json.

    Identity ids are globally sequential, so splits are disjoint by
    construction; the manifest records every provenance seed.
    """
    for name, n in (("n_train_ids", n_train_ids), ("n_val_ids", n_val_ids),
                    ("n_test_ids", n_test_ids), ("images_per_id", images_per_id)):
        if n < 1:
            raise SpecError(f"{name} must be >= 1, got {n}")
    root = Path(root)
    if root.exists() and any(root.iterdir()):
        raise RefuseOverwrite(f"{root} exists and is not empty")
    manifest = {
        "version": 1,
        "master_seed": int(master_seed),
        "images_per_id": int(images_per_id),
        "splits": {},
        "identity_seeds": {},
    }
    index = 0
    for split, n_ids in zip(SPLITS, (n_train_ids, n_val_ids, n_test_ids)):
        per_id = {}
        for _ in range(n_ids):
            ident = f"cow_{index:04d}"
            seed = derive_seed(master_seed, index)
            spec = identity_spec_for(ident, seed)
            (root / split / ident).mkdir(parents=True)
            files = []
            for k in range(images_per_id):
                rel = f"{split}/{ident}/{k}.png"
                save_image(render_sample(spec, k), root / rel)
                files.append(rel)
            per_id[ident] = files
            manifest["identity_seeds"][ident] = seed
            index += 1
        manifest["splits"][split] = per_id
    (root / "manifest.json").write_text(
        json.dumps(manifest, indent=2, sort_keys=True) + "\n")
    return manifest


def load_manifest(root):
    path = Path(root) / "manifest.json"
    if not path.exists():
        raise DataError(f"no manifest.json under {root}")
    manifest = json.loads(path.read_text())
    seen = {}
    for split, per_id in manifest["splits"].items():
        for ident in per_id:
            if ident in seen:
                raise DataError(
                    f"identity {ident} appears in both {seen[ident]} and {split}")
            seen[ident] = split
    return manifest


def dataset_stats(manifest, split=None):
    """Count identities/images and the coefficient of variation (population
    std over mean, percent) of images per identity."""
    splits = manifest["splits"]
    if split is not None:
        if split not in splits:
            raise SpecError(f"unknown split {split!r}")
        mappings = [splits[split]]
    else:
        mappings = list(splits.values())
    counts = [len(files) for m in mappings for files in m.values()]
    if not counts or sum(counts) == 0:
        raise EmptyDataset("no identities with images")
    counts = np.asarray(counts, dtype=np.float64)
    cv = 100.0 * counts.std() / counts.mean()
    return {
        "identities": int(len(counts)),
        "images": int(counts.sum()),
        "coefficient_of_variation": float(cv),
    }


def render_scene(seed, n_muzzles=1, canvas=CANVAS):
    """Clutter background with n pasted muzzle patches; returns the image
    and the pasted boxes as (cx, cy, w, h) canvas fractions."""
    rng = np.random.default_rng((0xD37EC7, int(seed), int(n_muzzles)))
    ys, xs = np.mgrid[0:canvas, 0:canvas].astype(np.float64)
    gx, gy = rng.uniform(-25.0, 25.0, 2)
    bg = rng.uniform(25.0, 55.0) + gx * (xs / canvas - 0.5) + gy * (ys / canvas - 0.5)
    for _ in range(int(rng.integers(2, 5))):  # dim clutter blobs
        by, bx = rng.uniform(0, canvas, 2)
        rad = rng.uniform(10.0, 40.0)
        blob = np.exp(-((ys - by) ** 2 + (xs - bx) ** 2) / (2 * rad * rad))
        bg += rng.uniform(-18.0, 18.0) * blob
    bg += rng.normal(0.0, 6.0, bg.shape)
    img = round_half_up(np.clip(bg, 0.0, 255.0)).astype(np.uint8)
    boxes = []
    boxes_px = []
    for i in range(n_muzzles):
        spec = identity_spec_for(f"scene{seed}_{i}", derive_seed(seed, 7000 + i))
        patch = render_sample(spec, 0)
        size = int(rng.integers(72, 161))
        patch = resize_bilinear(patch, size, size)
        for _ in range(50):  # avoid heavy overlap between pasted patches
            y0 = int(rng.integers(0, canvas - size + 1))
            x0 = int(rng.integers(0, canvas - size + 1))
            cand = (x0, y0, x0 + size, y0 + size)
            if all(_overlap(cand, prev) < 0.2 for prev in boxes_px):
                break
        img[y0:y0 + size, x0:x0 + size] = patch
        boxes_px.append(cand)
        boxes.append(((x0 + size / 2.0) / canvas, (y0 + size / 2.0) / canvas,
                      size / canvas, size / canvas))
    return img, boxes


def _overlap(a, b):
    ix = max(0.0, min(a[2], b[2]) - max(a[0], b[0]))
    iy = max(0.0, min(a[3], b[3]) - max(a[1], b[1]))
    inter = ix * iy
    area_a = (a[2] - a[0]) * (a[3] - a[1])
    area_b = (b[2] - b[0]) * (b[3] - b[1])
    return inter / (area_a + area_b - inter)


def gen_detection_scenes(root, n_scenes, master_seed):
    """Write <root>/<i>.png plus <i>.json annotations ({file, box})."""
    if n_scenes < 1:
        raise SpecError(f"n_scenes must be >= 1, got {n_scenes}")
    root = Path(root)
    if root.exists() and any(root.iterdir()):
        raise RefuseOverwrite(f"{root} exists and is not empty")
    root.mkdir(parents=True, exist_ok=True)
    entries = []
    for i in range(n_scenes):
        img, boxes = render_scene(derive_seed(master_seed, i), n_muzzles=1)
        name = f"{i:05d}.png"
        save_image(img, root / name)
        ann = {"file": name, "box": [round(v, 6) for v in boxes[0]]}
        (root / f"{i:05d}.json").write_text(
            json.dumps(ann, sort_keys=True) + "\n")
        entries.append(ann)
    return entries


def load_scenes(root):
    """Read every annotation in a scene directory; returns (paths, boxes)."""
    root = Path(root)
    anns = sorted(root.glob("*.json"))
    if not anns:
        raise EmptyDataset(f"no annotations under {root}")
    paths, boxes = [], []
    for ann_path in anns:
        ann = json.loads(ann_path.read_text())
        if "file" not in ann or "box" not in ann:
            raise DataError(f"{ann_path.name}: annotation needs file and box")
        paths.append(root / ann["file"])
        boxes.append(tuple(ann["box"]))
    return paths, boxes
