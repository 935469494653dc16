"""Point-matching precision-recall, Aggregated Jaccard Index and Dice."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from ._validation import DimensionError, check_positive


@dataclass(frozen=True)
class MatchResult:
    true_positives: int
    false_positives: int
    false_negatives: int
    pairs: list[tuple[int, int]] = field(default_factory=list)

    @property
    def precision(self) -> float:
        n = self.true_positives + self.false_positives
        return 1.0 if n == 0 else self.true_positives / n

    @property
    def recall(self) -> float:
        n = self.true_positives + self.false_negatives
        return 0.0 if n == 0 else self.true_positives / n

    @property
    def f1(self) -> float:
        p, r = self.precision, self.recall
        return 0.0 if p + r == 0 else 2 * p * r / (p + r)


def _points(points) -> np.ndarray:
    arr = np.asarray(points, dtype=np.float64)
    if arr.size == 0:
        return np.empty((0, 2))
    if arr.ndim != 2 or arr.shape[1] != 2:
        raise DimensionError("points must be an (n, 2) array of (x, y)")
    return arr


def _score_order(scores, n: int) -> np.ndarray:
    if scores is None:
        return np.arange(n)
    scores = np.asarray(scores, dtype=np.float64)
    if scores.shape != (n,):
        raise DimensionError("one score per prediction is required")
    # stable sort: equal scores keep their input order
    return np.argsort(-scores, kind="stable")


def _gt_raster_rank(gt: np.ndarray) -> np.ndarray:
    order = np.lexsort((gt[:, 0], gt[:, 1]))
    rank = np.empty(len(gt), dtype=np.int64)
    rank[order] = np.arange(len(gt))
    return rank


def match_points(pred, gt, radius: float = 3.0, scores=None) -> MatchResult:
    """Greedy matching: by descending score each prediction claims the nearest
    free ground-truth point within ``radius``; distance ties go to the
    ground-truth point first in raster (row, then column) order."""
    radius = check_positive(radius, "radius")
    pred, gt = _points(pred), _points(gt)
    if len(gt) == 0 or len(pred) == 0:
        return MatchResult(0, len(pred), len(gt))
    rank = _gt_raster_rank(gt)
    d2 = ((pred[:, None, :] - gt[None, :, :]) ** 2).sum(axis=2)
    free = np.ones(len(gt), dtype=bool)
    pairs = []
    for i in _score_order(scores, len(pred)):
        ok = free & (d2[i] <= radius * radius)
        if not ok.any():
            continue
        cand = np.flatnonzero(ok)
        j = int(min(cand, key=lambda c: (d2[i, c], rank[c])))
        free[j] = False
        pairs.append((int(i), j))
    tp = len(pairs)
    return MatchResult(tp, len(pred) - tp, len(gt) - tp, pairs)


def pr_curve(pred, scores, gt, radius: float = 3.0) -> list[tuple[float, float, float]]:
    """(threshold, precision, recall) at each distinct prediction score, descending."""
    return pr_curve_multi([(pred, scores, gt)], radius)


def pr_curve_multi(items, radius: float = 3.0) -> list[tuple[float, float, float]]:
    """Pooled curve over several images given as (pred, scores, gt) triples.

    Greedy matching visits predictions in score order, so the matches among
    the predictions above any threshold are exactly the first steps of one
    full matching; a single pass per image gives every point of the curve.
    """
    items = [(_points(p), np.asarray(s, dtype=np.float64).reshape(-1), _points(g))
             for p, s, g in items]
    n_gt = sum(len(g) for _, _, g in items)
    if n_gt == 0:
        raise ValueError("recall is undefined without ground-truth points")
    scores, hits = [], []
    for p, s, g in items:
        res = match_points(p, g, radius, s)
        hit = np.zeros(len(p), dtype=np.int64)
        for i, _ in res.pairs:
            hit[i] = 1
        scores.append(s)
        hits.append(hit)
    if not scores or sum(len(s) for s in scores) == 0:
        return []
    scores = np.concatenate(scores)
    hits = np.concatenate(hits)
    order = np.argsort(-scores, kind="stable")
    scores, hits = scores[order], hits[order]
    tp = np.cumsum(hits)
    curve = []
    # last index of each run of equal scores
    ends = np.flatnonzero(np.append(scores[1:] != scores[:-1], True))
    for e in ends:
        n = int(e) + 1
        curve.append((float(scores[e]), int(tp[e]) / n, int(tp[e]) / n_gt))
    return curve


def best_f1(curve) -> tuple[float, float, float, float]:
    """(f1, threshold, precision, recall) at the curve point with the largest F1.

    Ties go to the higher threshold.
    """
    best = (-1.0, np.inf, 1.0, 0.0)
    for t, p, r in curve:
        f = 0.0 if p + r == 0 else 2 * p * r / (p + r)
        if f > best[0]:
            best = (f, t, p, r)
    return best


def _check_pair(gt, pred) -> tuple[np.ndarray, np.ndarray]:
    gt = np.asarray(gt)
    pred = np.asarray(pred)
    if gt.shape != pred.shape:
        raise DimensionError(f"shape mismatch {gt.shape} vs {pred.shape}")
    if np.any(gt < 0) or np.any(pred < 0):
        raise ValueError("label maps must be non-negative")
    return gt.astype(np.int64), pred.astype(np.int64)


def aji(gt, pred) -> float:
    """Aggregated Jaccard Index over instance label maps (0 = background).

    Each ground-truth instance is paired with the prediction of largest
    intersection (lower id on ties; none when nothing overlaps). A
    prediction may serve several ground-truth instances; predictions that
    serve none add their area to the denominator.
    """
    gt, pred = _check_pair(gt, pred)
    g_ids = np.unique(gt[gt > 0])
    s_ids = np.unique(pred[pred > 0])
    if len(g_ids) == 0 and len(s_ids) == 0:
        return 1.0
    s_area = {int(s): int(np.count_nonzero(pred == s)) for s in s_ids}
    used: set[int] = set()
    inter_sum = 0
    union_sum = 0
    for g in g_ids:
        gmask = gt == g
        g_area = int(gmask.sum())
        hits = pred[gmask]
        hits = hits[hits > 0]
        if len(hits) == 0:
            union_sum += g_area
            continue
        counts = np.bincount(hits)
        s = int(np.argmax(counts))
        inter = int(counts[s])
        used.add(s)
        inter_sum += inter
        union_sum += g_area + s_area[s] - inter
    union_sum += sum(a for s, a in s_area.items() if s not in used)
    return inter_sum / union_sum if union_sum else 0.0


def dsc(gt_fg, pred_fg) -> float:
    """``2|A & B| / (|A| + |B|)`` over foreground pixels; both empty gives 1."""
    a, b = _check_pair(np.asarray(gt_fg) > 0, np.asarray(pred_fg) > 0)
    total = int(a.sum() + b.sum())
    if total == 0:
        return 1.0
    return 2.0 * int((a & b).sum()) / total
