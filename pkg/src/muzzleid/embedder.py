"""Embedding head: images to unit vectors, squared-L2 dissimilarity,
triplet loss with its analytic gradient, and triplet hardness classes.

Distances are squared L2 throughout; on unit vectors they live in [0, 4].
Hardness of a triplet with margin alpha partitions on d_n - d_p:
>= alpha easy, in (0, alpha) semi-hard, <= 0 hard. Easy triplets carry no
loss and no gradient.
"""

import csv
from dataclasses import dataclass

import numpy as np

from .errors import SpecError

EASY = "easy"
SEMI_HARD = "semi_hard"
HARD = "hard"


@dataclass
class TripletLossParams:
    alpha: float = 0.5
    reduction: str = "sum"  # the printed loss is a plain sum; "mean" optional

    def __post_init__(self):
        if not np.isfinite(self.alpha) or self.alpha <= 0:
            raise SpecError(f"alpha must be finite and > 0, got {self.alpha}")
        if self.reduction not in ("sum", "mean"):
            raise SpecError(f"reduction must be sum or mean, got {self.reduction}")


@dataclass
class Triplet:
    anchor: tuple
    positive: tuple
    negative: tuple
    d_p: float
    d_n: float
    hardness: str


def to_input(imgs):
    """uint8 image stack (N, H, W) -> network input (N, 1, H, W) in [0, 1]."""
    imgs = np.asarray(imgs)
    if imgs.ndim == 2:
        imgs = imgs[None]
    return (imgs.astype(np.float32) / 255.0)[:, None]


def embed(net, img):
    """One preprocessed image to one unit-norm embedding."""
    c, h, w = net.spec.input_shape
    if img.shape != (h, w):
        raise SpecError(f"image {img.shape} does not match input {(h, w)}")
    return net.forward(to_input(img))[0]


def embed_batch(net, imgs, chunk=64):
    """Embeddings for a stack of preprocessed images, computed in chunks
    so the intermediate activations stay small."""
    c, h, w = net.spec.input_shape
    imgs = np.asarray(imgs)
    if imgs.shape[1:] != (h, w):
        raise SpecError(f"batch {imgs.shape} does not match input {(h, w)}")
    parts = [net.forward(to_input(imgs[lo:lo + chunk]))
             for lo in range(0, len(imgs), chunk)]
    return np.concatenate(parts, axis=0)


def squared_l2(a, b):
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.shape != b.shape:
        raise SpecError(f"dimension mismatch: {a.shape} vs {b.shape}")
    d = a - b
    return float(np.dot(d, d))


def pairwise_sq_dists(x, y):
    """Squared L2 between every row of x and every row of y."""
    x = np.asarray(x, dtype=np.float64)
    y = np.asarray(y, dtype=np.float64)
    xx = (x * x).sum(axis=1)[:, None]
    yy = (y * y).sum(axis=1)[None, :]
    d = xx + yy - 2.0 * (x @ y.T)
    return np.maximum(d, 0.0)


def triplet_loss(anchors, positives, negatives, params):
    """Hinge loss sum_i [d_p - d_n + alpha]_+ and its gradient with respect
    to each of the three embedding matrices. The exact-zero hinge
    contributes zero gradient."""
    a = np.asarray(anchors, dtype=np.float64)
    p = np.asarray(positives, dtype=np.float64)
    n = np.asarray(negatives, dtype=np.float64)
    if not (a.shape == p.shape == n.shape):
        raise SpecError("anchor/positive/negative shapes differ")
    d_p = ((a - p) ** 2).sum(axis=1)
    d_n = ((a - n) ** 2).sum(axis=1)
    hinge = d_p - d_n + params.alpha
    active = hinge > 0.0
    loss = float(hinge[active].sum())
    w = active.astype(np.float64)[:, None]
    ga = 2.0 * w * (n - p)
    gp = 2.0 * w * (p - a)
    gn = 2.0 * w * (a - n)
    if params.reduction == "mean" and len(a) > 0:
        loss /= len(a)
        ga /= len(a)
        gp /= len(a)
        gn /= len(a)
    return loss, (ga, gp, gn)


def classify_triplet(d_p, d_n, alpha):
    """Exactly one hardness class per the margin conditions on d_n - d_p."""
    if not (np.isfinite(d_p) and np.isfinite(d_n)):
        raise SpecError("distances must be finite")
    if not np.isfinite(alpha) or alpha <= 0:
        raise SpecError(f"alpha must be finite and > 0, got {alpha}")
    diff = d_n - d_p
    if diff >= alpha:
        return EASY
    if diff <= 0.0:
        return HARD
    return SEMI_HARD


def export_embeddings_csv(path, ids, embeddings):
    """id column plus e0..e{d-1}, one row per embedding."""
    embeddings = np.asarray(embeddings)
    if len(ids) != len(embeddings):
        raise SpecError(f"{len(ids)} ids for {len(embeddings)} embeddings")
    d = embeddings.shape[1]
    with open(path, "w", newline="") as f:
        writer = csv.writer(f)
        writer.writerow(["id"] + [f"e{i}" for i in range(d)])
        for ident, vec in zip(ids, embeddings):
            writer.writerow([ident] + [repr(float(v)) for v in vec])
