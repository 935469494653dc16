"""von Mises-Fisher kernel bank: densities, EM learning, activations.

All densities are unnormalized. The concentration is shared and fixed, so
the normalizing constant cancels in every posterior and comparison.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field, replace

import numpy as np
from scipy import ndimage
from scipy.special import logsumexp

from ._validation import DimensionError, check_positive, check_unit_rows
from .features import FeatureMap

log = logging.getLogger(__name__)

UNIT_ATOL = 1e-6


@dataclass(frozen=True)
class VmfKernelBank:
    kernels: np.ndarray
    sigma: float
    background_index: int | None = None
    foreground_indices: tuple[int, ...] = field(default=())

    def __post_init__(self):
        kernels = check_unit_rows(np.asarray(self.kernels, dtype=np.float64), "kernels",
                                  atol=UNIT_ATOL)
        if kernels.ndim != 2:
            raise DimensionError("kernels must be a K x D array")
        object.__setattr__(self, "kernels", kernels)
        object.__setattr__(self, "sigma", check_positive(self.sigma, "sigma"))
        fg = tuple(int(i) for i in self.foreground_indices)
        object.__setattr__(self, "foreground_indices", fg)
        K = kernels.shape[0]
        if self.background_index is not None:
            bg = int(self.background_index)
            object.__setattr__(self, "background_index", bg)
            if not 0 <= bg < K or bg in fg:
                raise ValueError("background index must be a kernel outside the foreground set")
        if any(not 0 <= i < K for i in fg):
            raise ValueError("foreground indices out of range")

    @property
    def n_kernels(self) -> int:
        return self.kernels.shape[0]

    @property
    def dim(self) -> int:
        return self.kernels.shape[1]


def vmf_log_density(f, mu, sigma: float) -> float:
    """``sigma * f . mu``; the zero (invalid) vector is uninformative."""
    f = np.asarray(f, dtype=np.float64)
    mu = check_unit_rows(mu, "mu")
    if np.linalg.norm(f) == 0.0:
        return 0.0
    check_unit_rows(f, "f")
    return float(sigma * (f @ mu))


def _mixture_loglik(features: np.ndarray, kernels: np.ndarray, sigma: float):
    logits = sigma * (features @ kernels.T)
    lse = logsumexp(logits, axis=1)
    avg = float(np.mean(lse) - np.log(kernels.shape[0]))
    return avg, logits, lse


def _kmeanspp_cosine(features: np.ndarray, K: int, rng: np.random.Generator) -> np.ndarray:
    n = features.shape[0]
    centers = np.empty((K, features.shape[1]))
    centers[0] = features[rng.integers(n)]
    closest = 1.0 - features @ centers[0]
    for k in range(1, K):
        d2 = np.clip(closest, 0.0, None) ** 2
        total = d2.sum()
        idx = rng.integers(n) if total <= 0 else rng.choice(n, p=d2 / total)
        centers[k] = features[idx]
        closest = np.minimum(closest, 1.0 - features @ centers[k])
    return centers


def learn_vmf_kernels(features, K: int = 12, sigma: float = 30.0, seed: int = 0,
                      tol: float = 1e-5, max_iter: int = 200,
                      return_history: bool = False):
    """EM for a K-component vMF mixture with shared fixed concentration.

    Component weights are held uniform. Returns the kernel bank and, when
    requested, the average log-likelihood recorded before every M-step plus
    the value at the final parameters.
    """
    X = check_unit_rows(np.asarray(features, dtype=np.float64), "features", atol=UNIT_ATOL)
    if X.ndim != 2:
        raise DimensionError("features must be an N x D array")
    check_positive(sigma, "sigma")
    if K < 1:
        raise ValueError("K must be >= 1")
    if X.shape[0] < K:
        raise ValueError(f"need at least {K} feature vectors, got {X.shape[0]}")
    rng = np.random.default_rng(seed)
    mu = _kmeanspp_cosine(X, K, rng)
    mu /= np.linalg.norm(mu, axis=1, keepdims=True)

    history = []
    for it in range(max_iter):
        avg, logits, lse = _mixture_loglik(X, mu, sigma)
        history.append(avg)
        resp = np.exp(logits - lse[:, None])
        weighted = resp.T @ X
        mass = resp.sum(axis=0)
        norms = np.linalg.norm(weighted, axis=1)
        new_mu = np.empty_like(mu)
        for k in range(K):
            if mass[k] < 1e-12 or norms[k] < 1e-12:
                worst = int(np.argmin(lse))
                log.debug("kernel %d emptied at iteration %d; reseeding", k, it)
                new_mu[k] = X[worst]
            else:
                new_mu[k] = weighted[k] / norms[k]
        movement = float(np.mean(np.linalg.norm(new_mu - mu, axis=1)))
        mu = new_mu
        if movement < tol:
            break
    history.append(_mixture_loglik(X, mu, sigma)[0])
    bank = VmfKernelBank(mu, sigma)
    if return_history:
        return bank, np.asarray(history)
    return bank


def activation_maps(fm: FeatureMap, bank: VmfKernelBank) -> np.ndarray:
    """Cosine similarity of every feature vector with every kernel, K x H x W."""
    if fm.dim != bank.dim:
        raise DimensionError(f"feature dim {fm.dim} != kernel dim {bank.dim}")
    act = np.einsum("hwd,kd->khw", fm.vectors, bank.kernels)
    act = np.clip(act, -1.0, 1.0)
    act[:, ~fm.valid] = -1.0
    return act


def box_mask(shape, boxes, dilation: int = 0) -> np.ndarray:
    """Boolean mask covering inclusive ``[x0, y0, x1, y1]`` boxes grown by ``dilation``."""
    h, w = shape
    mask = np.zeros(shape, dtype=bool)
    for x0, y0, x1, y1 in boxes:
        r0 = max(int(np.floor(y0)) - dilation, 0)
        r1 = min(int(np.ceil(y1)) + dilation + 1, h)
        c0 = max(int(np.floor(x0)) - dilation, 0)
        c1 = min(int(np.ceil(x1)) + dilation + 1, w)
        mask[r0:r1, c0:c1] = True
    return mask


def background_activation_sums(fm: FeatureMap, bank: VmfKernelBank, boxes,
                               dilation: int = 3) -> tuple[np.ndarray, int]:
    """Per-kernel activation sum and pixel count outside all dilated boxes."""
    outside = ~box_mask((fm.height, fm.width), boxes, dilation)
    if not outside.any():
        return np.zeros(bank.n_kernels), 0
    act = activation_maps(fm, bank)
    return act[:, outside].sum(axis=1), int(outside.sum())


def select_background_kernel(bank: VmfKernelBank, fms, annotations,
                             dilation: int = 3) -> VmfKernelBank:
    """Pick the kernel with the highest mean activation away from nuclei.

    ``annotations`` holds one list of boxes per feature map. Ties within
    1e-12 go to the lowest index; every other kernel becomes foreground.
    """
    totals = np.zeros(bank.n_kernels)
    count = 0
    for fm, boxes in zip(fms, annotations):
        s, c = background_activation_sums(fm, bank, boxes, dilation)
        if c == 0:
            log.info("skipping an image without background pixels")
            continue
        totals += s
        count += c
    if count == 0:
        raise ValueError("no background pixels in any training image")
    return with_background(bank, totals / count)


def with_background(bank: VmfKernelBank, mean_activation: np.ndarray) -> VmfKernelBank:
    best = float(np.max(mean_activation))
    bg = int(np.flatnonzero(mean_activation >= best - 1e-12)[0])
    fg = tuple(k for k in range(bank.n_kernels) if k != bg)
    return replace(bank, background_index=bg, foreground_indices=fg)
