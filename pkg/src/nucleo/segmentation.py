"""Weakly supervised instance masks from the background kernel and decomposition."""

from __future__ import annotations

import logging
from dataclasses import dataclass

import numpy as np
from scipy import ndimage
from skimage.filters import threshold_otsu

from ._validation import check_gray_image, check_positive
from .decomposition import decompose
from .features import FeatureMap, convolve_extract
from .vmf import VmfKernelBank

log = logging.getLogger(__name__)

MIN_AREA = 20
OTSU_BINS = 256
PRIOR_FLOOR = 0.05
# Otsu levels below this are noise splits of pure background (cosine > 0.9 to mu_0)
MIN_OTSU_LEVEL = 0.1
_FOUR = ndimage.generate_binary_structure(2, 1)


def foreground_score_map(fm: FeatureMap, bank: VmfKernelBank) -> np.ndarray:
    """``1 - mu_0 . f`` per position; textureless (invalid) positions score 0."""
    if bank.background_index is None:
        raise ValueError("kernel bank has no background kernel")
    mu0 = bank.kernels[bank.background_index]
    scores = 1.0 - fm.vectors @ mu0
    scores[~fm.valid] = 0.0
    return scores


def otsu_threshold(scores: np.ndarray, nbins: int = OTSU_BINS) -> float | None:
    """Otsu level, or None when the scores hold a single value.

    The level is raised to ``MIN_OTSU_LEVEL`` so that an image of background
    alone is not split into two noise classes.
    """
    scores = np.asarray(scores, dtype=np.float64)
    if scores.min() == scores.max():
        return None
    return max(float(threshold_otsu(scores, nbins=nbins)), MIN_OTSU_LEVEL)


def threshold_components(scores, threshold: float | str = "otsu",
                         min_area: int = MIN_AREA, support_radius: int = 0) -> list[np.ndarray]:
    """Foreground = scores above the threshold, holes filled, split 4-connected.

    A feature responds wherever its filter window overlaps a nucleus, so the
    raw foreground is the nucleus dilated by the window. ``support_radius``
    (the filter half-width) erodes it back by the same square. Components
    smaller than ``min_area`` pixels are dropped. Uniform scores under Otsu
    give no foreground.
    """
    scores = np.asarray(scores, dtype=np.float64)
    if not np.all(np.isfinite(scores)):
        raise ValueError("scores must be finite")
    if isinstance(threshold, str):
        if threshold != "otsu":
            raise ValueError(f"unknown threshold mode {threshold!r}")
        level = otsu_threshold(scores)
        if level is None:
            return []
    else:
        level = float(threshold)
    fg = scores > level
    if support_radius > 0:
        square = np.ones((2 * support_radius + 1,) * 2, dtype=bool)
        fg = ndimage.binary_erosion(fg, square, border_value=1)
    fg = ndimage.binary_fill_holes(fg)
    labels, n = ndimage.label(fg, structure=_FOUR)
    if n == 0:
        return []
    areas = np.bincount(labels.ravel(), minlength=n + 1)
    return [labels == k for k in range(1, n + 1) if areas[k] >= min_area]


@dataclass(frozen=True)
class Candidate:
    mask: np.ndarray
    centroid: tuple[float, float]
    warning: str | None = None


def _centroid(mask: np.ndarray) -> tuple[float, float]:
    rows, cols = np.nonzero(mask)
    return float(cols.mean()), float(rows.mean())


def generate_candidates(components, psi: float = 3.0, lam: float = 0.1) -> list[Candidate]:
    """Decompose each component; every near-convex part becomes one candidate."""
    out = []
    for comp in components:
        result = decompose(comp, psi=psi, lam=lam)
        for part in result.parts:
            out.append(Candidate(part, _centroid(part), result.warning))
    return out


def candidate_prior(candidates, variance: float = 10.0, shape=None,
                    floor: float = PRIOR_FLOOR) -> np.ndarray:
    """Max over candidates of an unnormalized Gaussian bump, floored at ``floor``.

    Each bump is centered on the pixel nearest its centroid so the prior is
    exactly 1 there. ``candidates`` may be :class:`Candidate` objects or
    (x, y) points.
    """
    variance = check_positive(variance, "variance")
    if shape is None:
        raise ValueError("shape is required")
    h, w = shape
    q = np.full((h, w), float(floor))
    yy, xx = np.mgrid[0:h, 0:w].astype(np.float64)
    for c in candidates:
        x, y = c.centroid if isinstance(c, Candidate) else c
        cx, cy = np.floor(x + 0.5), np.floor(y + 0.5)
        bump = np.exp(-((xx - cx) ** 2 + (yy - cy) ** 2) / (2.0 * variance))
        np.maximum(q, bump, out=q)
    return q


def _four_connect(labels: np.ndarray) -> np.ndarray:
    """Hand every 4-disconnected fragment of an instance to its main 4-neighbour."""
    labels = labels.copy()
    for _ in range(8):
        moved = False
        for k in range(1, int(labels.max()) + 1):
            pieces, n = ndimage.label(labels == k, structure=_FOUR)
            if n <= 1:
                continue
            sizes = np.bincount(pieces.ravel())[1:]
            keep = int(np.argmax(sizes)) + 1
            for j in range(1, n + 1):
                if j == keep:
                    continue
                frag = pieces == j
                ring = ndimage.binary_dilation(frag, _FOUR) & ~frag
                neigh = labels[ring]
                neigh = neigh[(neigh > 0) & (neigh != k)]
                if len(neigh) == 0:
                    continue
                labels[frag] = int(np.bincount(neigh).argmax())
                moved = True
        if not moved:
            break
    return labels


def assemble_labels(candidates, shape) -> np.ndarray:
    """Label map with ids 1..N in raster order of the candidate centroids."""
    order = sorted(range(len(candidates)),
                   key=lambda i: (candidates[i].centroid[1], candidates[i].centroid[0], i))
    labels = np.zeros(shape, dtype=np.int64)
    for new_id, i in enumerate(order, start=1):
        labels[candidates[i].mask & (labels == 0)] = new_id
    labels = _four_connect(labels)
    # candidates hidden under earlier ones leave gaps; renumber 1..N
    present = np.unique(labels)
    lookup = np.zeros(int(present[-1]) + 1, dtype=np.int64)
    lookup[present] = np.arange(len(present)) if present[0] == 0 else np.arange(1, len(present) + 1)
    return lookup[labels]


def segment_features(fm: FeatureMap, bank: VmfKernelBank, psi: float = 3.0, lam: float = 0.1,
                     threshold: float | str = "otsu", min_area: int = MIN_AREA,
                     support_radius: int = 0):
    scores = foreground_score_map(fm, bank)
    comps = threshold_components(scores, threshold, min_area, support_radius)
    candidates = generate_candidates(comps, psi, lam)
    return assemble_labels(candidates, scores.shape), candidates


def segment(image, model, psi: float | None = None, lam: float | None = None,
            threshold: float | str = "otsu", min_area: int = MIN_AREA) -> np.ndarray:
    """Instance label map: 0 background, 1..N nuclei."""
    image = check_gray_image(image)
    fm = convolve_extract(image, model.filters)
    labels, _ = segment_features(fm, model.kernels,
                                 model.psi if psi is None else psi,
                                 model.lam if lam is None else lam, threshold, min_area,
                                 model.filters.kernel_size // 2)
    return labels
