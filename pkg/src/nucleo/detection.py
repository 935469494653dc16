"""Sliding-window mixture scoring, rotation search, prior and peak picking."""

from __future__ import annotations

import io
import math
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np
from numpy.lib.stride_tricks import as_strided
from scipy import ndimage

from ._validation import DimensionError, check_gray_image
from .features import FeatureMap, convolve_extract
from .imaging import rotate_image, rotate_nearest
from .mixture import CompositionalMixture, kernel_logits
from .parallel import ordered_map

PEAK_SIZE = 5
DEFAULT_NMS_RADIUS = 6.0
BLOCK_ROWS = 8  # output rows per cache block in the likelihood sweep
_PEAK_FOOTPRINT = np.ones((PEAK_SIZE, PEAK_SIZE), dtype=bool)
_PEAK_FOOTPRINT[PEAK_SIZE // 2, PEAK_SIZE // 2] = False


@dataclass(frozen=True)
class LikelihoodMap:
    """Per-pixel best window score with the winning component and rotation.

    Scores are ``-inf`` where the window centered on the pixel does not fit;
    there ``component_map`` is -1. ``rotation_map`` indexes ``rotations``.
    """

    scores: np.ndarray
    component_map: np.ndarray
    rotation_map: np.ndarray
    rotations: tuple[float, ...] = (0.0,)

    @property
    def shape(self) -> tuple[int, int]:
        return self.scores.shape

    def rotation_degrees(self, row: int, col: int) -> float:
        return self.rotations[int(self.rotation_map[row, col])]


def _shifted_rows(a: np.ndarray, n: int) -> np.ndarray:
    """Read-only view ``v[r, j] = a[r, j + r]`` of a 2-D array."""
    s0, s1 = a.strides
    return as_strided(a, shape=(a.shape[0], n), strides=(s0 + s1, s1), writeable=False)


def _buffer(rows: int, n: int, dtype) -> tuple[np.ndarray, np.ndarray]:
    g = np.empty((rows, n), dtype=dtype)
    return g, _shifted_rows(g, n - (rows - 1))


def _window_scores(fm: FeatureMap, mixture: CompositionalMixture, dtype) -> np.ndarray:
    """Masked log-likelihood of every fitting window under every component.

    Per position the log-sum-exp over kernels is shifted by the largest logit,
    so ``log sum_k alpha_k exp(l_k) = max_l + log sum_k alpha_k exp(l_k - max_l)``.
    The shift term is a plain weighted window sum, done for all components at
    once in float64. The remaining logs are computed for a few output rows at a time
    so the working set stays in cache; on the flattened row-major grid the
    sum over a template row is a product with a skewed view.
    """
    P, M = mixture.patch_size, mixture.n_components
    H, W = fm.height, fm.width
    Ho, Wo = H - P + 1, W - P + 1
    logits = kernel_logits(fm, mixture.bank)
    top = logits.max(axis=2)
    ET = np.ascontiguousarray(np.moveaxis(np.exp(logits - top[..., None]), 2, 0), dtype=dtype)
    K = ET.shape[0]
    weights = mixture.fg_masks / mixture.fg_masks.sum(axis=(1, 2), keepdims=True)
    alphas = mixture.alphas.astype(dtype)
    w_low = weights.astype(dtype)
    # shifted copies of the flattened max-logit grid: shifts[dx, j] = top[j + dx]
    top_flat = top.reshape(-1)
    n_top = Ho * W - (P - 1)
    shifts = np.stack([top_flat[dx:dx + H * W - (P - 1)] for dx in range(P)])
    shift = np.zeros((M, Ho * W))
    for dy in range(P):
        shift[:, :n_top] += weights[:, dy, :] @ shifts[:, dy * W:dy * W + n_top]
    out = np.empty((M, Ho, Wo))
    buffers: dict = {}
    for m in range(M):
        acc = np.zeros(Ho * W, dtype=dtype)
        for y0 in range(0, Ho, BLOCK_ROWS):
            h = min(BLOCK_ROWS, Ho - y0)
            n = h * W
            if h not in buffers:
                buffers[h] = _buffer(P, n, dtype)
            g, g_rows = buffers[h]
            tail = acc[y0 * W:y0 * W + n - (P - 1)]
            for dy in range(P):
                np.matmul(alphas[m, dy], ET[:, y0 + dy:y0 + dy + h, :].reshape(K, n), out=g)
                np.log(g, out=g)
                tail += w_low[m, dy] @ g_rows
        out[m] = acc.reshape(Ho, W)[:, :Wo]
    out += shift.reshape(M, Ho, W)[:, :, :Wo]
    return out


def likelihood_map(fm: FeatureMap, mixture: CompositionalMixture,
                   dtype=np.float64) -> LikelihoodMap:
    """Best component score of the P x P window centered at each pixel, stride 1.

    ``dtype=np.float32`` trades about six significant digits for speed.
    """
    P = mixture.patch_size
    if fm.height < P or fm.width < P:
        raise DimensionError(f"feature map {fm.height}x{fm.width} is smaller than the {P}x{P} window")
    dtype = np.dtype(dtype).type
    per_comp = _window_scores(fm, mixture, dtype)
    # argmax returns the first maximum, i.e. the lowest component index
    best = np.argmax(per_comp, axis=0)
    inner = np.take_along_axis(per_comp, best[None], axis=0)[0]
    scores = np.full((fm.height, fm.width), -np.inf)
    comps = np.full((fm.height, fm.width), -1, dtype=np.int64)
    r = P // 2
    scores[r:r + inner.shape[0], r:r + inner.shape[1]] = inner
    comps[r:r + inner.shape[0], r:r + inner.shape[1]] = best
    return LikelihoodMap(scores, comps, np.zeros(scores.shape, dtype=np.int64))


def check_prior(prior, shape) -> np.ndarray:
    q = np.asarray(prior, dtype=np.float64)
    if q.shape != tuple(shape):
        raise DimensionError(f"prior shape {q.shape} does not match map shape {tuple(shape)}")
    if np.any(~np.isfinite(q)) or np.any(q <= 0) or np.any(q > 1):
        raise ValueError("prior values must lie in (0, 1]")
    return q


def apply_prior(lmap: LikelihoodMap, prior) -> LikelihoodMap:
    """Add ``log q`` pointwise; ``-inf`` positions stay ``-inf``."""
    q = check_prior(prior, lmap.shape)
    return replace(lmap, scores=lmap.scores + np.log(q))


def rotation_angles(rotations) -> tuple[float, ...]:
    """0 degrees first, then the requested angles without repeats."""
    out = [0.0]
    for r in rotations:
        r = float(r)
        if r % 360.0 != 0.0 and r not in out:
            out.append(r)
    return tuple(out)


def rotated_likelihood(image, model, rotations=None, dtype=np.float32,
                       threads: int | None = None) -> LikelihoodMap:
    """Pixel-wise maximum of the likelihood maps over all rotations.

    Each map is computed on the rotated image and rotated back. Ties keep
    the earlier angle, so 0 degrees wins unless another angle is strictly
    better.
    """
    image = check_gray_image(image)
    angles = rotation_angles(model.rotations if rotations is None else rotations)

    def one(angle):
        rotated = rotate_image(image, angle, order=1, mode="reflect")
        lm = likelihood_map(convolve_extract(rotated, model.filters), model.mixture, dtype)
        return (rotate_nearest(lm.scores, -angle, -np.inf),
                rotate_nearest(lm.component_map, -angle, -1))

    maps = ordered_map(one, angles, threads)
    scores, comps = maps[0][0].copy(), maps[0][1].copy()
    rot = np.zeros(scores.shape, dtype=np.int64)
    for i, (s, c) in enumerate(maps[1:], start=1):
        better = s > scores
        scores[better] = s[better]
        comps[better] = c[better]
        rot[better] = i
    return LikelihoodMap(scores, comps, rot, angles)


def find_peaks(scores: np.ndarray, threshold: float = -np.inf) -> list[tuple[int, int]]:
    """Pixels strictly above every other value in their 5 x 5 neighbourhood.

    Returned in row-major order.
    """
    scores = np.asarray(scores, dtype=np.float64)
    neigh = ndimage.maximum_filter(scores, footprint=_PEAK_FOOTPRINT, mode="constant",
                                   cval=-np.inf)
    peaks = np.isfinite(scores) & (scores > neigh) & (scores >= threshold)
    rows, cols = np.nonzero(peaks)
    return list(zip(rows.tolist(), cols.tolist()))


def non_max_suppression(candidates, scores: np.ndarray, radius: float) -> list[tuple[int, int]]:
    """Greedy by descending score, ties in row-major order; keeps points >= radius apart."""
    order = sorted(candidates, key=lambda rc: (-scores[rc], rc[0], rc[1]))
    kept: list[tuple[int, int]] = []
    r2 = radius * radius
    for r, c in order:
        if all((r - kr) ** 2 + (c - kc) ** 2 >= r2 for kr, kc in kept):
            kept.append((r, c))
    return kept


@dataclass(frozen=True)
class Detection:
    x: int
    y: int
    score: float
    component: int
    rotation: float


@dataclass
class DetectionSet:
    detections: list[Detection] = field(default_factory=list)
    image_id: str = ""
    threshold: float = -np.inf

    def __len__(self) -> int:
        return len(self.detections)

    def __iter__(self):
        return iter(self.detections)

    @property
    def points(self) -> np.ndarray:
        return np.array([[d.x, d.y] for d in self.detections], dtype=np.float64).reshape(-1, 2)

    @property
    def scores(self) -> np.ndarray:
        return np.array([d.score for d in self.detections], dtype=np.float64)

    def to_text(self) -> str:
        buf = io.StringIO()
        buf.write(f"# image={self.image_id} threshold={_fmt_score(self.threshold)}\n")
        buf.write("x\ty\tscore\tcomponent\trotation\n")
        for d in self.detections:
            buf.write(f"{d.x}\t{d.y}\t{_fmt_score(d.score)}\t{d.component}\t{d.rotation:g}\n")
        return buf.getvalue()

    @classmethod
    def from_text(cls, text: str) -> "DetectionSet":
        lines = text.splitlines()
        image_id, threshold = "", -np.inf
        if lines and lines[0].startswith("#"):
            meta = dict(tok.split("=", 1) for tok in lines[0][1:].split() if "=" in tok)
            image_id = meta.get("image", "")
            threshold = float(meta.get("threshold", "-inf"))
            lines = lines[1:]
        if not lines or lines[0].split() != ["x", "y", "score", "component", "rotation"]:
            raise ValueError("missing detection table header")
        dets = []
        for line in lines[1:]:
            if not line.strip():
                continue
            x, y, s, c, r = line.split("\t")
            dets.append(Detection(int(x), int(y), float(s), int(c), float(r)))
        return cls(dets, image_id, threshold)

    def save(self, path) -> None:
        Path(path).write_text(self.to_text(), encoding="utf-8")

    @classmethod
    def load(cls, path) -> "DetectionSet":
        return cls.from_text(Path(path).read_text(encoding="utf-8"))


def _fmt_score(s: float) -> str:
    if math.isinf(s):
        return "-inf" if s < 0 else "inf"
    return f"{s:.6f}"


def peaks_to_detections(lmap: LikelihoodMap, threshold: float, nms_radius: float,
                        image_id: str = "") -> DetectionSet:
    kept = non_max_suppression(find_peaks(lmap.scores, threshold), lmap.scores, nms_radius)
    dets = [Detection(int(c), int(r), float(lmap.scores[r, c]), int(lmap.component_map[r, c]),
                      lmap.rotation_degrees(r, c)) for r, c in kept]
    return DetectionSet(dets, image_id, float(threshold))


def detect(image, model, prior=None, rotations=None, nms_radius: float | None = None,
           score_threshold: float | None = None, dtype=np.float32,
           threads: int | None = None, image_id: str = "") -> DetectionSet:
    """Detect nuclei as non-suppressed 5 x 5 peaks of the rotation-maximized map.

    ``prior`` (values in (0, 1]) is multiplied in as ``+ log q``. Unset
    arguments fall back to the model's stored defaults.
    """
    lmap = rotated_likelihood(image, model, rotations, dtype, threads)
    if prior is not None:
        lmap = apply_prior(lmap, prior)
    threshold = model.score_threshold if score_threshold is None else score_threshold
    radius = model.nms_radius if nms_radius is None else nms_radius
    return peaks_to_detections(lmap, threshold, radius, image_id)
