"""Single-class muzzle detector on a coarse prediction grid.

The network maps a 128x128 grayscale frame to a 5-channel 8x8 grid: per
cell a box center offset pair (sigmoid-squashed), log-space width and
height as fractions of the whole image, and an objectness logit. Decoding
clips so every emitted box satisfies the box invariants no matter what the
logits are. Training regresses the responsible cell (the one holding the
ground-truth center) with squared error and every cell's objectness with
binary cross-entropy; both gradients are analytic.
"""

import math
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .embedder import to_input
from .errors import DataError, ModelError, NumericError, SpecError
from .imgproc import load_image, resize_bilinear, to_grayscale
from .neuralcore import (DETECTOR_INPUT, OptimizerState, adam_step,
                         build_network, detector_spec, maybe_decay,
                         save_checkpoint)
from .rng import derive_seed
from .synthgen import load_scenes

GRID_SIZE = 8
CONF_THRESHOLD = 0.25
NMS_THRESHOLD = 0.45
MIN_SIDE = 1e-6


@dataclass(frozen=True)
class BBox:
    """Axis-aligned box in image-fraction coordinates."""
    cx: float
    cy: float
    w: float
    h: float
    confidence: float = 1.0

    def __post_init__(self):
        if not (0.0 <= self.cx <= 1.0 and 0.0 <= self.cy <= 1.0):
            raise SpecError(f"center out of range: ({self.cx}, {self.cy})")
        if not (0.0 < self.w <= 1.0 and 0.0 < self.h <= 1.0):
            raise SpecError(f"size out of range: ({self.w}, {self.h})")
        if not 0.0 <= self.confidence <= 1.0:
            raise SpecError(f"confidence out of range: {self.confidence}")

    def corners(self):
        return (self.cx - self.w / 2.0, self.cy - self.h / 2.0,
                self.cx + self.w / 2.0, self.cy + self.h / 2.0)

    def to_pixels(self, width, height):
        x0, y0, x1, y1 = self.corners()
        return (x0 * width, y0 * height, x1 * width, y1 * height)


def iou(a, b):
    ax0, ay0, ax1, ay1 = a.corners()
    bx0, by0, bx1, by1 = b.corners()
    iw = min(ax1, bx1) - max(ax0, bx0)
    ih = min(ay1, by1) - max(ay0, by0)
    if iw <= 0.0 or ih <= 0.0:
        return 0.0
    inter = iw * ih
    # areas from the same corner arithmetic keep inter <= union exactly,
    # so identical boxes land on 1.0 rather than an ulp above it
    union = (ax1 - ax0) * (ay1 - ay0) + (bx1 - bx0) * (by1 - by0) - inter
    return min(1.0, inter / union)


def nms(boxes, iou_threshold=NMS_THRESHOLD):
    """Greedy suppression in descending confidence; equal confidences order
    by center so the outcome never depends on input order."""
    if not 0.0 < iou_threshold <= 1.0:
        raise SpecError(f"iou threshold out of range: {iou_threshold}")
    pending = sorted(boxes, key=lambda b: (-b.confidence, b.cx, b.cy))
    kept = []
    for box in pending:
        if all(iou(box, k) <= iou_threshold for k in kept):
            kept.append(box)
    return kept


def _sigmoid(x):
    x = np.asarray(x, dtype=np.float64)
    out = np.empty_like(x)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    out[~pos] = ex / (1.0 + ex)
    return out


def decode_grid(raw, conf_threshold=0.0):
    """Raw (5, S, S) network output to boxes; clipping keeps every box
    inside the invariants for arbitrary logits."""
    raw = np.asarray(raw, dtype=np.float64)
    if raw.ndim != 3 or raw.shape[0] != 5:
        raise SpecError(f"expected (5, S, S) grid, got {raw.shape}")
    s = raw.shape[1]
    if raw.shape[2] != s:
        raise SpecError(f"grid must be square, got {raw.shape}")
    sx = _sigmoid(raw[0])
    sy = _sigmoid(raw[1])
    w = np.maximum(np.exp(np.minimum(raw[2], 0.0)), MIN_SIDE)
    h = np.maximum(np.exp(np.minimum(raw[3], 0.0)), MIN_SIDE)
    conf = _sigmoid(raw[4])
    boxes = []
    for row in range(s):
        for col in range(s):
            if conf[row, col] < conf_threshold:
                continue
            boxes.append(BBox(cx=(col + sx[row, col]) / s,
                              cy=(row + sy[row, col]) / s,
                              w=float(w[row, col]), h=float(h[row, col]),
                              confidence=float(conf[row, col])))
    return boxes


def encode_target(box, grid_size=GRID_SIZE):
    """Responsible cell and regression targets for one ground-truth box:
    (row, col, offset_x, offset_y, log_w, log_h)."""
    col = min(int(box.cx * grid_size), grid_size - 1)
    row = min(int(box.cy * grid_size), grid_size - 1)
    return (row, col, box.cx * grid_size - col, box.cy * grid_size - row,
            math.log(box.w), math.log(box.h))


def detect(net, image, conf_threshold=CONF_THRESHOLD,
           nms_threshold=NMS_THRESHOLD):
    """Muzzle boxes for one grayscale image of any size, best first.

    Boxes are image fractions, so they apply to the original frame even
    though inference runs at the fixed detector resolution.
    """
    if net is None:
        raise ModelError("no detector network loaded")
    image = np.asarray(image)
    if image.ndim == 3:
        image = to_grayscale(image)
    c, h, w = net.spec.input_shape
    if image.shape != (h, w):
        image = resize_bilinear(image, w, h)
    raw = net.forward(to_input(image))[0]
    boxes = decode_grid(raw, conf_threshold=conf_threshold)
    return nms(boxes, nms_threshold)


def _batch_loss_grad(raw, cells, targets):
    """Squared-error box loss on responsible cells plus objectness BCE on
    all cells. Returns (object_loss, box_loss, d loss / d raw)."""
    n, _, s, _ = raw.shape
    obj = np.zeros((n, s, s))
    for b, (row, col) in enumerate(cells):
        obj[b, row, col] = 1.0
    x = raw[:, 4].astype(np.float64)
    # stable BCE on logits: max(x, 0) - x y + log(1 + exp(-|x|))
    bce = np.maximum(x, 0.0) - x * obj + np.log1p(np.exp(-np.abs(x)))
    object_loss = float(bce.sum())
    grad = np.zeros(raw.shape)
    grad[:, 4] = _sigmoid(x) - obj

    box_loss = 0.0
    for b, (row, col) in enumerate(cells):
        ox, oy, lw, lh = targets[b]
        sx = float(_sigmoid(raw[b, 0, row, col]))
        sy = float(_sigmoid(raw[b, 1, row, col]))
        ex, ey = sx - ox, sy - oy
        ew = raw[b, 2, row, col] - lw
        eh = raw[b, 3, row, col] - lh
        box_loss += ex * ex + ey * ey + ew * ew + eh * eh
        grad[b, 0, row, col] = 2.0 * ex * sx * (1.0 - sx)
        grad[b, 1, row, col] = 2.0 * ey * sy * (1.0 - sy)
        grad[b, 2, row, col] = 2.0 * ew
        grad[b, 3, row, col] = 2.0 * eh
    return object_loss, float(box_loss), grad


@dataclass
class DetectorTrainResult:
    net: object
    object_losses: list
    box_losses: list
    holdout_map50: float
    checkpoint_path: object


def train_detector(scenes_root, out_dir=None, net=None, opt=None, epochs=50,
                   seed=0, split_ratio=0.8, batch_size=16, progress=None):
    """Fit the detector on annotated scenes; the trailing fraction of a
    seeded shuffle is held out for the final mAP@0.5 readout.

    Training frames are mirrored at random (with their boxes) to double the
    effective scene pool. Per-epoch mean object loss and box loss are
    recorded; the checkpoint (written when out_dir is given) holds the
    final weights.
    """
    if not 0.0 < split_ratio < 1.0:
        raise SpecError(f"split_ratio must be in (0, 1), got {split_ratio}")
    paths, raw_boxes = load_scenes(scenes_root)
    if len(paths) < 2:
        raise DataError("need at least two scenes to split")
    for p, box in zip(paths, raw_boxes):
        if len(box) != 4:
            raise DataError(f"{p.name}: box must be [cx, cy, w, h]")
    gt = [BBox(*box) for box in raw_boxes]
    net = net or build_network(detector_spec(seed=seed))
    opt = opt or OptimizerState()
    c, hh, ww = net.spec.input_shape
    frames = np.stack([resize_bilinear(load_image(p), ww, hh)
                       for p in paths])

    rng = np.random.default_rng(derive_seed(seed, 17))
    order = rng.permutation(len(frames))
    n_train = max(1, int(round(len(frames) * split_ratio)))
    if n_train == len(frames):
        n_train = len(frames) - 1
    train_idx, hold_idx = order[:n_train], order[n_train:]
    if len(hold_idx) == 0:
        raise DataError("need at least two scenes to split")

    s = net.out_shape[1]
    enc = [encode_target(b, s) for b in gt]
    enc_flip = [encode_target(BBox(1.0 - b.cx, b.cy, b.w, b.h), s)
                for b in gt]

    object_losses, box_losses = [], []
    for epoch in range(epochs):
        perm = rng.permutation(train_idx)
        obj_total = box_total = 0.0
        for lo in range(0, len(perm), batch_size):
            idx = perm[lo:lo + batch_size]
            flips = rng.random(len(idx)) < 0.5
            batch = np.where(flips[:, None, None],
                             frames[idx][:, :, ::-1], frames[idx])
            picked = [enc_flip[i] if f else enc[i]
                      for i, f in zip(idx, flips)]
            x = to_input(batch)
            out, tape = net.forward_with_tape(x)
            obj_loss, box_loss, grad = _batch_loss_grad(
                out, [(row, col) for row, col, *_ in picked],
                [tuple(rest) for _, _, *rest in picked])
            if not np.isfinite(obj_loss + box_loss):
                raise NumericError(f"non-finite detector loss at epoch "
                                   f"{epoch}")
            grads = net.backward(tape, grad.astype(np.float32))
            adam_step(net, grads, opt)
            obj_total += obj_loss
            box_total += box_loss
        maybe_decay(opt, epoch + 1)
        object_losses.append(obj_total / len(perm))
        box_losses.append(box_total / len(perm))
        if progress:
            progress(epoch, object_losses[-1], box_losses[-1])

    # rank every candidate box: AP is threshold-free, so the serving
    # confidence cutoff must not cap holdout recall
    preds = [detect(net, frames[i], conf_threshold=0.0) for i in hold_idx]
    holdout_map50 = average_precision(preds, [[gt[i]] for i in hold_idx], 0.5)

    ckpt_path = None
    if out_dir is not None:
        out_dir = Path(out_dir)
        out_dir.mkdir(parents=True, exist_ok=True)
        ckpt_path = out_dir / "detector.ckpt"
        save_checkpoint(ckpt_path, net, opt, dim=5, epoch=max(0, epochs - 1),
                        threshold=CONF_THRESHOLD,
                        extra={"holdout_map50": holdout_map50})
    return DetectorTrainResult(net=net, object_losses=object_losses,
                               box_losses=box_losses,
                               holdout_map50=holdout_map50,
                               checkpoint_path=ckpt_path)


def average_precision(predictions, ground_truths, iou_threshold):
    """101-point interpolated AP at one IoU threshold.

    predictions: per image, a list of BBox with confidences.
    ground_truths: per image, a list of BBox.
    Predictions rank globally by confidence; each greedily claims the
    highest-overlap unclaimed truth in its image.
    """
    if len(predictions) != len(ground_truths):
        raise SpecError("predictions and ground truths must align by image")
    n_gt = sum(len(g) for g in ground_truths)
    if n_gt == 0:
        return 0.0
    flat = [(img, box) for img, boxes in enumerate(predictions)
            for box in boxes]
    flat.sort(key=lambda e: (-e[1].confidence, e[1].cx, e[1].cy,
                             e[1].w, e[1].h))
    claimed = [[False] * len(g) for g in ground_truths]
    hits = np.zeros(len(flat))
    for i, (img, box) in enumerate(flat):
        best, best_j = 0.0, -1
        for j, truth in enumerate(ground_truths[img]):
            if claimed[img][j]:
                continue
            ov = iou(box, truth)
            if ov > best:
                best, best_j = ov, j
        if best_j >= 0 and best >= iou_threshold:
            claimed[img][best_j] = True
            hits[i] = 1.0
    if len(flat) == 0:
        return 0.0
    tp = np.cumsum(hits)
    precision = tp / np.arange(1, len(flat) + 1)
    recall = tp / n_gt
    total = 0.0
    for level in np.linspace(0.0, 1.0, 101):
        at_least = precision[recall >= level - 1e-12]
        total += float(at_least.max()) if len(at_least) else 0.0
    return total / 101.0


def mean_average_precision(predictions, ground_truths,
                           thresholds=None):
    """mAP over IoU thresholds 0.50:0.05:0.95 by default."""
    if thresholds is None:
        thresholds = [0.5 + 0.05 * k for k in range(10)]
    if len(thresholds) == 0:
        raise SpecError("need at least one IoU threshold")
    return float(np.mean([average_precision(predictions, ground_truths, t)
                          for t in thresholds]))


def map_eval(predictions, ground_truths):
    """Both headline detection numbers in one pass."""
    return {"map50": average_precision(predictions, ground_truths, 0.5),
            "map50_95": mean_average_precision(predictions, ground_truths)}


def top_box_accuracy(predictions, ground_truths, iou_threshold=0.5):
    """Fraction of images whose highest-confidence box overlaps the single
    ground truth at the IoU threshold or better."""
    if len(predictions) != len(ground_truths):
        raise SpecError("predictions and ground truths must align by image")
    if len(predictions) == 0:
        raise DataError("no images to score")
    good = 0
    for boxes, truths in zip(predictions, ground_truths):
        if len(truths) != 1:
            raise SpecError("top-box accuracy expects one truth per image")
        if boxes and iou(boxes[0], truths[0]) >= iou_threshold:
            good += 1
    return good / len(predictions)
