"""Mixture of compositional models over aligned nucleus patches."""

from __future__ import annotations

import logging
from dataclasses import dataclass

import numpy as np
from scipy.special import logsumexp
from skimage.filters import threshold_otsu
from sklearn.cluster import kmeans_plusplus

from ._validation import DimensionError
from .features import FeatureMap, FilterBank, convolve_extract
from .imaging import rotate_image
from .vmf import VmfKernelBank

log = logging.getLogger(__name__)

COEF_FLOOR = 1e-4
INNER_SWEEPS = 5


@dataclass(frozen=True)
class NucleusCrop:
    features: FeatureMap
    box: tuple
    long_axis: float
    short_axis: float
    orientation: float

    def __post_init__(self):
        P = self.features.height
        if P != self.features.width or P % 2 == 0:
            raise DimensionError("crop patches must be square with odd size")
        if not self.long_axis >= self.short_axis > 0:
            raise ValueError("need long_axis >= short_axis > 0")
        if not -np.pi / 2 <= self.orientation < np.pi / 2:
            raise ValueError("orientation must lie in [-pi/2, pi/2)")


def _wrap_orientation(theta: float) -> float:
    theta = (theta + np.pi / 2) % np.pi - np.pi / 2
    return float(theta)


def measure_nucleus_geometry(region) -> tuple[float, float, float]:
    """Ellipse-equivalent (long, short, orientation) of a nucleus region.

    ``region`` is a boolean mask, or intensities that get Otsu-binarized.
    Diameters are ``4 sqrt(eigenvalue)`` of the pixel covariance; the
    orientation is the major-axis angle from +x towards +y (row direction).
    An empty foreground falls back to the box extent with orientation 0.
    """
    region = np.asarray(region)
    if region.ndim != 2 or region.size == 0:
        raise ValueError("region must be a non-empty 2-D array")
    if region.dtype == bool:
        fg = region
    else:
        vals = region.astype(np.float64)
        fg = vals > threshold_otsu(vals) if np.ptp(vals) > 0 else np.zeros(vals.shape, bool)
    h, w = region.shape
    if fg.sum() < 2:
        return float(max(h, w)), float(min(h, w)), 0.0
    ys, xs = np.nonzero(fg)
    dx, dy = xs - xs.mean(), ys - ys.mean()
    mu20, mu02, mu11 = np.mean(dx * dx), np.mean(dy * dy), np.mean(dx * dy)
    common = np.sqrt(((mu20 - mu02) / 2.0) ** 2 + mu11 ** 2)
    lam1 = (mu20 + mu02) / 2.0 + common
    lam2 = max((mu20 + mu02) / 2.0 - common, 0.0)
    long_axis = 4.0 * np.sqrt(lam1)
    short_axis = max(4.0 * np.sqrt(lam2), 1e-6)
    theta = 0.5 * np.arctan2(2.0 * mu11, mu20 - mu02)
    return float(long_axis), float(short_axis), _wrap_orientation(theta)


def extract_crop(image: np.ndarray, center, orientation: float, bank: FilterBank,
                 patch_size: int) -> FeatureMap:
    """Featurize a ``patch_size`` patch around ``center`` with the major axis made horizontal.

    The image is rotated before feature extraction; a margin of half the
    filter size keeps reflect padding out of the returned patch.
    """
    image = np.asarray(image, dtype=np.float64)
    cx, cy = int(round(center[0])), int(round(center[1]))
    inner = patch_size + bank.kernel_size - 1
    half = int(np.ceil(inner * np.sqrt(2) / 2)) + 2
    padded = np.pad(image, half, mode="reflect")
    window = padded[cy:cy + 2 * half + 1, cx:cx + 2 * half + 1]
    rotated = rotate_image(window, -np.degrees(orientation))
    c = half
    r = inner // 2
    sub = np.clip(rotated[c - r:c + r + 1, c - r:c + r + 1], 0.0, 1.0)
    fm = convolve_extract(sub, bank)
    m = bank.kernel_size // 2
    return fm.window(m, m, patch_size)


def cluster_crops(crops, M: int, seed: int = 0, max_iter: int = 100) -> np.ndarray:
    """k-means on (long_axis, short_axis) with k-means++ seeding.

    Accepts crops or an (n, 2) array of axis lengths. Ties in the nearest
    center go to the lowest cluster index.
    """
    points = _axis_points(crops)
    n = points.shape[0]
    if M < 1:
        raise ValueError("M must be >= 1")
    if n < M:
        raise ValueError(f"only {n} crops for M={M} clusters; lower the number of mixtures")
    if M == 1:
        return np.zeros(n, dtype=np.int64)
    centers, _ = kmeans_plusplus(points, M, random_state=seed)
    return lloyd(points, centers, max_iter)[0]


def lloyd(points: np.ndarray, centers: np.ndarray, max_iter: int = 100):
    centers = centers.astype(np.float64).copy()
    assign = None
    for _ in range(max_iter):
        d2 = ((points[:, None, :] - centers[None, :, :]) ** 2).sum(axis=2)
        new_assign = np.argmin(d2, axis=1)
        if assign is not None and np.array_equal(new_assign, assign):
            break
        assign = new_assign
        for j in range(centers.shape[0]):
            members = assign == j
            if members.any():
                centers[j] = points[members].mean(axis=0)
    return assign, centers


def _axis_points(crops) -> np.ndarray:
    if isinstance(crops, np.ndarray):
        pts = crops.astype(np.float64)
    else:
        pts = np.array([[c.long_axis, c.short_axis] for c in crops], dtype=np.float64)
    if pts.ndim != 2 or pts.shape[1] != 2:
        raise DimensionError("expected (long_axis, short_axis) pairs")
    return pts


@dataclass(frozen=True)
class CompositionalMixture:
    """Spatial kernel coefficients per component, shape (M, P, P, K)."""

    alphas: np.ndarray
    nu: np.ndarray
    bank: VmfKernelBank

    def __post_init__(self):
        alphas = np.asarray(self.alphas, dtype=np.float64)
        if alphas.ndim != 4 or alphas.shape[1] != alphas.shape[2]:
            raise DimensionError("alphas must be (M, P, P, K)")
        if alphas.shape[3] != self.bank.n_kernels:
            raise DimensionError("alphas kernel axis does not match the bank")
        if np.any(alphas < 0) or np.any(np.abs(alphas.sum(axis=3) - 1.0) > 1e-6):
            raise ValueError("alphas must be non-negative and sum to 1 over kernels")
        nu = np.asarray(self.nu, dtype=np.float64)
        if nu.shape != (alphas.shape[0],) or abs(nu.sum() - 1.0) > 1e-6:
            raise ValueError("nu must hold one prior per component and sum to 1")
        object.__setattr__(self, "alphas", alphas)
        object.__setattr__(self, "nu", nu)
        fg = list(self.bank.foreground_indices)
        if not fg:
            fg = list(range(self.bank.n_kernels))
        object.__setattr__(self, "fg_masks", alphas[..., fg].sum(axis=3))

    @property
    def n_components(self) -> int:
        return self.alphas.shape[0]

    @property
    def patch_size(self) -> int:
        return self.alphas.shape[1]


def kernel_logits(features: FeatureMap, bank: VmfKernelBank) -> np.ndarray:
    """``sigma * f . mu`` per position and kernel; invalid positions are 0."""
    if features.dim != bank.dim:
        raise DimensionError(f"feature dim {features.dim} != kernel dim {bank.dim}")
    logits = bank.sigma * (features.vectors @ bank.kernels.T)
    logits[~features.valid] = 0.0
    return logits


def position_loglik(logits: np.ndarray, alphas: np.ndarray) -> np.ndarray:
    """``log sum_k alpha_k exp(logit_k)`` per position (broadcasting)."""
    with np.errstate(divide="ignore"):
        return logsumexp(logits + np.log(alphas), axis=-1)


def _masked_score(pos_ll: np.ndarray, mask: np.ndarray) -> float:
    total = mask.sum()
    if total <= 0:
        return -np.inf
    return float((mask * pos_ll).sum() / total)


def masked_log_likelihood(patch: FeatureMap, mixture: CompositionalMixture, m: int) -> float:
    """Foreground-weighted mean of per-position log-likelihoods under component ``m``."""
    P = mixture.patch_size
    if patch.height != P or patch.width != P:
        raise DimensionError(f"patch must be {P}x{P}")
    logits = kernel_logits(patch, mixture.bank)
    return _masked_score(position_loglik(logits, mixture.alphas[m]), mixture.fg_masks[m])


def mixture_score(patch: FeatureMap, mixture: CompositionalMixture) -> tuple[int, float]:
    """Best component and its score; ties go to the lowest index."""
    P = mixture.patch_size
    if patch.height != P or patch.width != P:
        raise DimensionError(f"patch must be {P}x{P}")
    logits = kernel_logits(patch, mixture.bank)
    scores = [_masked_score(position_loglik(logits, mixture.alphas[m]), mixture.fg_masks[m])
              for m in range(mixture.n_components)]
    best = int(np.argmax(scores))
    return best, float(scores[best])


def _floor_normalize(alpha: np.ndarray) -> np.ndarray:
    alpha = np.maximum(alpha, COEF_FLOOR)
    return alpha / alpha.sum(axis=-1, keepdims=True)


def _estimate_component(logits: np.ndarray, K: int) -> np.ndarray:
    """Coefficient MLE for one component from stacked crop logits (n, P, P, K)."""
    P = logits.shape[1]
    alpha = np.full((P, P, K), 1.0 / K)
    for _ in range(INNER_SWEEPS):
        log_joint = logits + np.log(alpha)
        post = np.exp(log_joint - logsumexp(log_joint, axis=-1, keepdims=True))
        alpha = _floor_normalize(post.mean(axis=0))
    return alpha


def _score_matrix(logits: np.ndarray, alphas: np.ndarray, fg: list[int]) -> np.ndarray:
    masks = alphas[..., fg].sum(axis=3) if fg else np.ones(alphas.shape[:3])
    out = np.empty((logits.shape[0], alphas.shape[0]))
    for m in range(alphas.shape[0]):
        pos = position_loglik(logits, alphas[m])
        total = masks[m].sum()
        out[:, m] = (pos * masks[m]).sum(axis=(1, 2)) / total if total > 0 else -np.inf
    return out


def learn_mixture(crops, assignment, bank: VmfKernelBank, M: int | None = None,
                  em_iters: int = 3, return_history: bool = False):
    """EM-style learning of the compositional mixture.

    Coefficients start uniform and take ``INNER_SWEEPS`` posterior/update
    sweeps per component. Each outer iteration reassigns crops to their best
    masked log-likelihood component and re-estimates. An outer step that
    would lower the mean best score is rejected and learning stops there.
    """
    assignment = np.asarray(assignment, dtype=np.int64)
    crops = list(crops)
    if len(crops) == 0:
        raise ValueError("no crops to learn from")
    if assignment.shape != (len(crops),):
        raise ValueError("assignment must cover every crop")
    M = int(assignment.max()) + 1 if M is None else int(M)
    P = crops[0].features.height
    logits = np.stack([kernel_logits(c.features, bank) for c in crops])
    if logits.shape[1:3] != (P, P):
        raise DimensionError("all crops must share the patch size")
    K = bank.n_kernels
    fg = list(bank.foreground_indices)

    alphas = np.full((M, P, P, K), 1.0 / K)
    for m in range(M):
        members = assignment == m
        if members.any():
            alphas[m] = _estimate_component(logits[members], K)
    scores = _score_matrix(logits, alphas, fg)
    objective = float(np.mean(scores.max(axis=1)))
    history = [objective]

    for it in range(em_iters):
        new_assign = np.argmax(scores, axis=1)
        new_alphas = alphas.copy()
        for m in range(M):
            members = new_assign == m
            if members.any():
                new_alphas[m] = _estimate_component(logits[members], K)
            else:
                log.info("component %d emptied at outer iteration %d", m, it)
        new_scores = _score_matrix(logits, new_alphas, fg)
        new_objective = float(np.mean(new_scores.max(axis=1)))
        if new_objective < objective:
            log.info("outer EM step %d would lower the objective; stopping", it)
            break
        assignment, alphas, scores, objective = new_assign, new_alphas, new_scores, new_objective
        history.append(objective)

    counts = np.bincount(assignment, minlength=M).astype(np.float64)
    mixture = CompositionalMixture(alphas, counts / counts.sum(), bank)
    if return_history:
        return mixture, assignment, np.asarray(history)
    return mixture
