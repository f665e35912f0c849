"""Training-time augmentation.

Two families: standard geometry (rotation, zoom, shear, translation, crop,
flips) and the occlusion/noise operators written as explicit mask algebra —
blackout is (F @ B) + C where B zeroes a rectangle and C fills it with one
random intensity, salt-and-pepper is ((F @ S) + R) @ P forcing chosen pixels
to 255 or 0. Everything draws from a caller-supplied numpy Generator so a
dataset pass is reproducible from one seed. Validation and test images must
never pass through here.
"""

from dataclasses import dataclass, field

import numpy as np

from .errors import SpecError
from .imgproc import resize_bilinear, round_half_up


@dataclass
class AugmentConfig:
    rotation_range: float = 15.0     # degrees, angle ~ U(-r, r)
    zoom_range: float = 0.10         # scale ~ U(1-z, 1+z)
    crop_fraction: float = 0.10      # cropped side fraction ~ U(0, c)
    shear_range: float = 10.0        # degrees
    translation_range: float = 0.10  # of the image side, per axis
    h_flip_prob: float = 0.5
    v_flip_prob: float = 0.1
    blackout_prob: float = 0.3
    blackout_min_frac: float = 0.05
    blackout_max_frac: float = 0.20
    salt_pepper_prob: float = 0.3
    salt_density: float = 0.01
    pepper_density: float = 0.01
    seed: int = 0

    def __post_init__(self):
        for name in ("h_flip_prob", "v_flip_prob", "blackout_prob",
                     "salt_pepper_prob"):
            v = getattr(self, name)
            if not 0.0 <= v <= 1.0:
                raise SpecError(f"{name}={v} outside [0, 1]")
        for name in ("salt_density", "pepper_density"):
            v = getattr(self, name)
            if not 0.0 <= v <= 0.5:
                raise SpecError(f"{name}={v} outside [0, 0.5]")
        for name in ("rotation_range", "zoom_range", "shear_range",
                     "translation_range"):
            if getattr(self, name) < 0:
                raise SpecError(f"{name} must be non-negative")
        if not 0.0 <= self.blackout_min_frac <= self.blackout_max_frac <= 1.0:
            raise SpecError("blackout fractions must satisfy 0 <= min <= max <= 1")
        if not 0.0 <= self.crop_fraction < 1.0:
            raise SpecError("crop_fraction must be in [0, 1)")

    @classmethod
    def all_off(cls, seed=0):
        return cls(rotation_range=0.0, zoom_range=0.0, crop_fraction=0.0,
                   shear_range=0.0, translation_range=0.0, h_flip_prob=0.0,
                   v_flip_prob=0.0, blackout_prob=0.0, salt_pepper_prob=0.0,
                   seed=seed)

    def to_dict(self):
        return {k: getattr(self, k) for k in self.__dataclass_fields__}

    @classmethod
    def from_dict(cls, d):
        known = set(cls.__dataclass_fields__)
        extra = set(d) - known
        if extra:
            raise SpecError(f"unknown augment keys: {sorted(extra)}")
        return cls(**d)


@dataclass
class RegionSets:
    """Pixel coordinate sets, (row, col) tuples, driving the mask operators."""
    blackout: frozenset = field(default_factory=frozenset)
    salt: frozenset = field(default_factory=frozenset)
    pepper: frozenset = field(default_factory=frozenset)


def blackout(img, region, r):
    """Fill one rectangle with intensity r: out = (F @ B) + C.

    region is (row0, col0, row1, col1), half-open; r is an integer 0..255.
    """
    h, w = img.shape
    r0, c0, r1, c1 = region
    if not (0 <= r0 <= r1 <= h and 0 <= c0 <= c1 <= w):
        raise SpecError(f"region {region} outside {h}x{w} image")
    if not 0 <= r <= 255:
        raise SpecError(f"fill intensity {r} outside 0..255")
    b = np.ones_like(img)
    b[r0:r1, c0:c1] = 0
    c = np.zeros_like(img)
    c[r0:r1, c0:c1] = r
    return img * b + c


def salt_pepper(img, sets):
    """Force salt pixels to 255 and pepper pixels to 0: ((F @ S) + R) @ P."""
    h, w = img.shape
    overlap = sets.salt & sets.pepper
    if overlap:
        raise SpecError(f"salt and pepper sets overlap at {sorted(overlap)[:3]}")
    for name, coords in (("salt", sets.salt), ("pepper", sets.pepper)):
        for (i, j) in coords:
            if not (0 <= i < h and 0 <= j < w):
                raise SpecError(f"{name} coordinate ({i}, {j}) outside {h}x{w}")
    s = np.ones_like(img)
    rr = np.zeros_like(img)
    p = np.ones_like(img)
    if sets.salt:
        si, sj = zip(*sets.salt)
        s[si, sj] = 0
        rr[si, sj] = 255
    if sets.pepper:
        pi, pj = zip(*sets.pepper)
        p[pi, pj] = 0
    return (img * s + rr) * p


def sample_blackout(shape, cfg, rng):
    """Draw one rectangle (sides uniform in the configured side fractions,
    position uniform) and a fill intensity r ~ U{0..255}."""
    h, w = shape
    rh = max(1, int(round(h * rng.uniform(cfg.blackout_min_frac,
                                          cfg.blackout_max_frac))))
    rw = max(1, int(round(w * rng.uniform(cfg.blackout_min_frac,
                                          cfg.blackout_max_frac))))
    rh, rw = min(rh, h), min(rw, w)
    r0 = int(rng.integers(0, h - rh + 1))
    c0 = int(rng.integers(0, w - rw + 1))
    r = int(rng.integers(0, 256))
    return (r0, c0, r0 + rh, c0 + rw), r


def sample_salt_pepper(shape, salt_density, pepper_density, rng):
    """Independent per-pixel Bernoulli masks; collisions go to salt."""
    salt = rng.random(shape) < salt_density
    pepper = rng.random(shape) < pepper_density
    pepper &= ~salt
    return RegionSets(
        salt=frozenset(zip(*np.nonzero(salt))),
        pepper=frozenset(zip(*np.nonzero(pepper))),
    )


def affine_matrix(angle_deg=0.0, zoom=1.0, shear_deg=0.0):
    """Forward 2x2 map about the image center: rotation @ shear @ scale."""
    a = np.deg2rad(angle_deg)
    s = np.deg2rad(shear_deg)
    rot = np.array([[np.cos(a), -np.sin(a)], [np.sin(a), np.cos(a)]])
    shear = np.array([[1.0, np.tan(s)], [0.0, 1.0]])
    scale = np.array([[zoom, 0.0], [0.0, zoom]])
    return rot @ shear @ scale


def warp_affine(img, matrix, tx=0.0, ty=0.0):
    """Inverse-map every output pixel through matrix about the center,
    bilinear-sample with replicate borders. Neutral parameters reproduce
    the input exactly after re-rounding."""
    h, w = img.shape
    cy, cx = (h - 1) / 2.0, (w - 1) / 2.0
    minv = np.linalg.inv(matrix)
    ys, xs = np.mgrid[0:h, 0:w].astype(np.float64)
    dx = xs - cx - tx
    dy = ys - cy - ty
    sx = np.clip(minv[0, 0] * dx + minv[0, 1] * dy + cx, 0.0, w - 1.0)
    sy = np.clip(minv[1, 0] * dx + minv[1, 1] * dy + cy, 0.0, h - 1.0)
    x0 = np.floor(sx).astype(np.intp)
    y0 = np.floor(sy).astype(np.intp)
    x1 = np.minimum(x0 + 1, w - 1)
    y1 = np.minimum(y0 + 1, h - 1)
    fx = sx - x0
    fy = sy - y0
    f = img.astype(np.float64)
    top = f[y0, x0] * (1.0 - fx) + f[y0, x1] * fx
    bot = f[y1, x0] * (1.0 - fx) + f[y1, x1] * fx
    return round_half_up(top * (1.0 - fy) + bot * fy).astype(np.uint8)


def random_affine(img, cfg, rng):
    """Sampled rotation/zoom/shear/translation, then crop-and-resize, then
    flips. An all-zero config is the exact identity."""
    h, w = img.shape
    angle = rng.uniform(-cfg.rotation_range, cfg.rotation_range)
    zoom = 1.0 + rng.uniform(-cfg.zoom_range, cfg.zoom_range)
    shear = rng.uniform(-cfg.shear_range, cfg.shear_range)
    tx = rng.uniform(-cfg.translation_range, cfg.translation_range) * w
    ty = rng.uniform(-cfg.translation_range, cfg.translation_range) * h
    out = warp_affine(img, affine_matrix(angle, zoom, shear), tx, ty)
    f = rng.uniform(0.0, cfg.crop_fraction)
    ch = max(1, int(round(h * (1.0 - f))))
    cw = max(1, int(round(w * (1.0 - f))))
    if (ch, cw) != (h, w):
        r0 = int(rng.integers(0, h - ch + 1))
        c0 = int(rng.integers(0, w - cw + 1))
        out = resize_bilinear(out[r0:r0 + ch, c0:c0 + cw], w, h)
    if rng.uniform() < cfg.h_flip_prob:
        out = out[:, ::-1].copy()
    if rng.uniform() < cfg.v_flip_prob:
        out = out[::-1, :].copy()
    return out


def augment_image(img, cfg, rng):
    out = random_affine(img, cfg, rng)
    if rng.uniform() < cfg.blackout_prob:
        region, r = sample_blackout(out.shape, cfg, rng)
        out = blackout(out, region, r)
    if rng.uniform() < cfg.salt_pepper_prob:
        sets = sample_salt_pepper(out.shape, cfg.salt_density,
                                  cfg.pepper_density, rng)
        out = salt_pepper(out, sets)
    return out


def augment_triplet(triplet, cfg, rng):
    """Augment anchor, positive, negative independently from one stream."""
    a, p, n = triplet
    return (augment_image(a, cfg, rng),
            augment_image(p, cfg, rng),
            augment_image(n, cfg, rng))
