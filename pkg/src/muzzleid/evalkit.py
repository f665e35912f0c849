"""Verification metrics over pair distance lists.

The working currency is a list of (distance, same_identity) tuples. A pair
is accepted as "same" when its squared distance is at or below the
threshold, so VAL doubles as TPR and FAR as FPR. Threshold sweeps only
visit observed distance values, which keeps every result attainable on the
data it was computed from.
"""

import csv
from dataclasses import dataclass
from itertools import combinations

import numpy as np

from .errors import DataError, InsufficientPairs, SpecError
from .embedder import squared_l2


@dataclass
class OperatingPoint:
    threshold: float
    accuracy: float
    f1: float
    tpr: float
    fpr: float
    val: float
    far: float


def validate_pairs(pairs):
    """No repeated pair in either orientation."""
    seen = set()
    for a, b, _ in pairs:
        key = (a, b) if (a, b) <= (b, a) else (b, a)
        if key in seen:
            raise SpecError(f"pair {a!r}/{b!r} appears more than once")
        seen.add(key)


def sample_pairs(refs_by_identity, n_pos, n_neg, seed):
    """Seeded draw of distinct positive and negative pairs.

    refs_by_identity: dict identity -> list of hashable sample refs.
    Enumerates the full pair population, so the draw is uniform without
    replacement; raises InsufficientPairs when the population is too small.
    """
    idents = sorted(refs_by_identity)
    pos = []
    for ident in idents:
        for a, b in combinations(refs_by_identity[ident], 2):
            pos.append((a, b, True))
    neg = []
    for i, ident_a in enumerate(idents):
        for ident_b in idents[i + 1:]:
            for a in refs_by_identity[ident_a]:
                for b in refs_by_identity[ident_b]:
                    neg.append((a, b, False))
    if len(pos) < n_pos:
        raise InsufficientPairs(
            f"need {n_pos} positive pairs, only {len(pos)} exist")
    if len(neg) < n_neg:
        raise InsufficientPairs(
            f"need {n_neg} negative pairs, only {len(neg)} exist")
    rng = np.random.default_rng(seed)
    picked = [pos[i] for i in rng.choice(len(pos), n_pos, replace=False)]
    picked += [neg[i] for i in rng.choice(len(neg), n_neg, replace=False)]
    return picked


def pair_distances(embeddings, pairs):
    """Squared-L2 distance per pair: list of (distance, same_identity)."""
    validate_pairs(pairs)
    out = []
    for a, b, same in pairs:
        if a not in embeddings:
            raise DataError(f"no embedding for sample {a!r}")
        if b not in embeddings:
            raise DataError(f"no embedding for sample {b!r}")
        out.append((squared_l2(embeddings[a], embeddings[b]), bool(same)))
    return out


def _split(distances):
    same = np.array([d for d, s in distances if s], dtype=np.float64)
    diff = np.array([d for d, s in distances if not s], dtype=np.float64)
    return same, diff


def val_far(distances, threshold):
    """VAL: accepted fraction of same pairs; FAR: accepted fraction of
    different pairs, both at distance <= threshold."""
    same, diff = _split(distances)
    if len(same) == 0:
        raise DataError("no same-identity pairs")
    if len(diff) == 0:
        raise DataError("no different-identity pairs")
    return (float((same <= threshold).mean()),
            float((diff <= threshold).mean()))


def metrics_at_threshold(distances, threshold):
    same, diff = _split(distances)
    if len(same) == 0 or len(diff) == 0:
        raise DataError("need both pair classes for confusion metrics")
    tp = int((same <= threshold).sum())
    fn = len(same) - tp
    fp = int((diff <= threshold).sum())
    tn = len(diff) - fp
    n = tp + fp + tn + fn
    accuracy = (tp + tn) / n
    precision = tp / (tp + fp) if tp + fp else 0.0
    recall = tp / (tp + fn) if tp + fn else 0.0
    if precision + recall:
        f1 = 2.0 * precision * recall / (precision + recall)
    else:
        f1 = 0.0
    tpr = recall
    fpr = fp / (fp + tn) if fp + tn else 0.0
    return OperatingPoint(threshold=float(threshold), accuracy=accuracy,
                          f1=f1, tpr=tpr, fpr=fpr, val=tpr, far=fpr)


def val_at_far(distances, far_target):
    """Operating point at the largest observed threshold with FAR <= target."""
    if not 0.0 < far_target < 1.0:
        raise SpecError(f"far_target must be in (0, 1), got {far_target}")
    same, diff = _split(distances)
    if len(same) == 0 or len(diff) == 0:
        raise DataError("need both pair classes")
    candidates = np.unique(np.array([d for d, _ in distances]))
    fars = (diff[None, :] <= candidates[:, None]).mean(axis=1)
    ok = np.flatnonzero(fars <= far_target)
    if len(ok) == 0:
        raise InsufficientPairs(
            f"no observed threshold reaches FAR <= {far_target} "
            f"({len(diff)} negative pairs)")
    return metrics_at_threshold(distances, float(candidates[ok[-1]]))


def val_at_far_resampled(distances, far_target, k=10, seed=0):
    """Mean and std of VAL over k seeded bootstrap resamples of the pair
    lists, plus the operating point on the full set."""
    point = val_at_far(distances, far_target)
    same, diff = _split(distances)
    rng = np.random.default_rng(seed)
    vals = []
    for _ in range(k):
        rs = [(d, True) for d in rng.choice(same, len(same), replace=True)]
        rs += [(d, False) for d in rng.choice(diff, len(diff), replace=True)]
        vals.append(val_at_far(rs, far_target).val)
    return float(np.mean(vals)), float(np.std(vals)), point


def select_threshold(distances):
    """Observed distance maximizing F1; ties resolve to the smallest value,
    making the choice deterministic on separable data."""
    same, diff = _split(distances)
    if len(same) == 0 or len(diff) == 0:
        raise DataError("need both pair classes")
    best_t, best_f1 = None, -1.0
    for t in np.unique(np.array([d for d, _ in distances])):
        f1 = metrics_at_threshold(distances, float(t)).f1
        if f1 > best_f1:
            best_f1 = f1
            best_t = float(t)
    return best_t


def cohen_kappa(labels_a, labels_b):
    """Observed vs marginal-product chance agreement.

    The degenerate p_e = 1 case (both raters constant with one shared
    label) is defined as 1.0 on perfect agreement and 0.0 otherwise.
    """
    a = list(labels_a)
    b = list(labels_b)
    if len(a) != len(b):
        raise SpecError(f"label lengths differ: {len(a)} vs {len(b)}")
    if not a:
        raise DataError("empty label vectors")
    n = len(a)
    p_o = sum(1 for x, y in zip(a, b) if x == y) / n
    classes = set(a) | set(b)
    p_e = sum((a.count(c) / n) * (b.count(c) / n) for c in classes)
    if p_e == 1.0:
        return 1.0 if p_o == 1.0 else 0.0
    return (p_o - p_e) / (1.0 - p_e)


def write_pairs_csv(path, distances):
    with open(path, "w", newline="") as f:
        writer = csv.writer(f)
        writer.writerow(["distance", "same"])
        for d, same in distances:
            writer.writerow([repr(float(d)), int(same)])


def read_pairs_csv(path):
    with open(path, newline="") as f:
        reader = csv.reader(f)
        header = next(reader)
        if header != ["distance", "same"]:
            raise DataError(f"unexpected pairs header {header}")
        return [(float(d), bool(int(s))) for d, s in reader]
