"""Single-layer convolutional features and unsupervised filter-bank learning.

Feature vectors are rectified filter responses scaled to unit length, so
every valid position lives on the unit sphere where the vMF kernels operate.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from ._validation import DimensionError, check_gray_image, check_odd

NORM_EPS = 1e-8
WHITEN_RIDGE = 1e-3


@dataclass(frozen=True)
class FilterBank:
    """``weights`` has shape (D, k, k); responses are ``<w, patch> + bias``."""

    weights: np.ndarray
    bias: np.ndarray

    def __post_init__(self):
        w = np.asarray(self.weights, dtype=np.float64)
        b = np.asarray(self.bias, dtype=np.float64).reshape(-1)
        if w.ndim != 3 or w.shape[1] != w.shape[2]:
            raise DimensionError(f"filter weights must be (D, k, k), got {w.shape}")
        check_odd(w.shape[1], "kernel_size")
        if w.shape[0] < 2:
            raise ValueError("a filter bank needs at least 2 filters")
        if b.shape != (w.shape[0],):
            raise DimensionError("bias length must equal the number of filters")
        if not (np.all(np.isfinite(w)) and np.all(np.isfinite(b))):
            raise ValueError("filter weights must be finite")
        object.__setattr__(self, "weights", w)
        object.__setattr__(self, "bias", b)

    @property
    def num_filters(self) -> int:
        return self.weights.shape[0]

    @property
    def kernel_size(self) -> int:
        return self.weights.shape[1]


@dataclass(frozen=True)
class FeatureMap:
    """Unit-normalized feature vectors on an H x W grid.

    Positions whose raw response norm fell below ``NORM_EPS`` are invalid and
    hold the zero vector.
    """

    vectors: np.ndarray
    valid: np.ndarray

    @property
    def height(self) -> int:
        return self.vectors.shape[0]

    @property
    def width(self) -> int:
        return self.vectors.shape[1]

    @property
    def dim(self) -> int:
        return self.vectors.shape[2]

    def window(self, row: int, col: int, size: int) -> "FeatureMap":
        """The ``size`` x ``size`` sub-map whose top-left corner is (row, col)."""
        return FeatureMap(self.vectors[row:row + size, col:col + size],
                          self.valid[row:row + size, col:col + size])


def rectify_normalize(responses: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """ReLU then L2 normalization along the last axis."""
    rect = np.maximum(responses, 0.0)
    norms = np.sqrt(np.einsum("...d,...d->...", rect, rect))
    valid = norms >= NORM_EPS
    out = np.zeros_like(rect)
    out[valid] = rect[valid] / norms[valid][:, None]
    return out, valid


def convolve_extract(image, bank: FilterBank) -> FeatureMap:
    """Same-size correlation with reflect padding, rectified and normalized."""
    image = check_gray_image(image)
    k = bank.kernel_size
    if image.shape[0] < k or image.shape[1] < k:
        raise DimensionError(
            f"image {image.shape} is smaller than the {k}x{k} filter kernel")
    r = k // 2
    padded = np.pad(image, r, mode="reflect")
    windows = sliding_window_view(padded, (k, k))
    h, w = image.shape
    flat = windows.reshape(h * w, k * k)
    responses = flat @ bank.weights.reshape(bank.num_filters, k * k).T + bank.bias
    vectors, valid = rectify_normalize(responses)
    return FeatureMap(vectors.reshape(h, w, -1), valid.reshape(h, w))


def sample_patches(images, kernel_size: int, n_patches: int, seed: int,
                   regions=None) -> np.ndarray:
    """Draw ``n_patches`` random k x k patches spread evenly over ``images``.

    With ``regions`` (one boolean mask per image) half of each image's
    patches are centered inside its region and half outside, so sparse
    objects are not swamped by background.
    """
    rng = np.random.default_rng(seed)
    images = [check_gray_image(im) for im in images]
    per_image = np.full(len(images), n_patches // len(images))
    per_image[: n_patches % len(images)] += 1
    r = kernel_size // 2
    out = []
    for i, (im, count) in enumerate(zip(images, per_image)):
        if count == 0:
            continue
        h, w = im.shape
        if h < kernel_size or w < kernel_size:
            raise DimensionError("image smaller than the patch size")
        win = sliding_window_view(im, (kernel_size, kernel_size))
        # centers whose window fits without padding
        inner = np.zeros((h, w), dtype=bool)
        inner[r:h - r, r:w - r] = True
        if regions is None:
            pools = [inner]
            counts = [count]
        else:
            region = np.asarray(regions[i], dtype=bool)
            pools = [inner & region, inner & ~region]
            counts = [count // 2, count - count // 2]
            if not pools[0].any() or not pools[1].any():
                pools, counts = [inner], [count]
        for pool, c in zip(pools, counts):
            rows, cols = np.nonzero(pool)
            pick = rng.integers(0, len(rows), size=c)
            out.append(win[rows[pick] - r, cols[pick] - r])
    return np.concatenate(out, axis=0)


def _spherical_kmeans(points: np.ndarray, k: int, rng: np.random.Generator,
                      max_iter: int = 100) -> np.ndarray:
    n = points.shape[0]
    centers = np.empty((k, points.shape[1]))
    centers[0] = points[rng.integers(n)]
    closest = 1.0 - points @ centers[0]
    for j in range(1, k):
        d2 = np.clip(closest, 0.0, None) ** 2
        total = d2.sum()
        idx = rng.integers(n) if total <= 0 else rng.choice(n, p=d2 / total)
        centers[j] = points[idx]
        closest = np.minimum(closest, 1.0 - points @ centers[j])
    assign = None
    for _ in range(max_iter):
        sims = points @ centers.T
        new_assign = np.argmax(sims, axis=1)
        if assign is not None and np.array_equal(assign, new_assign):
            break
        assign = new_assign
        for j in range(k):
            members = assign == j
            if not np.any(members):
                # reseed on the point worst explained by its own centroid
                worst = np.argmin(sims[np.arange(n), assign])
                centers[j] = points[worst]
                continue
            s = points[members].sum(axis=0)
            norm = np.linalg.norm(s)
            centers[j] = s / norm if norm > 0 else points[members][0]
    return centers


def learn_filter_bank(patches, num_filters: int = 32, seed: int = 0) -> FilterBank:
    """Whitened spherical k-means on raw image patches.

    Centroids are found in the ZCA-whitened patch space and mapped back to
    pixel space (``w = W c``, ``b = -w . mean``), then scaled to unit norm.
    Identical patches cannot be whitened; the bank then repeats the single
    normalized patch direction.
    """
    patches = np.asarray(patches, dtype=np.float64)
    if patches.ndim == 3:
        if patches.shape[1] != patches.shape[2]:
            raise DimensionError("patches must be square")
        k = patches.shape[1]
    elif patches.ndim == 2:
        k = int(round(np.sqrt(patches.shape[1])))
        if k * k != patches.shape[1]:
            raise DimensionError("flattened patches must have a square length")
    else:
        raise DimensionError(f"bad patch array shape {patches.shape}")
    check_odd(k, "kernel_size")
    n = patches.shape[0]
    if num_filters < 1:
        raise ValueError("num_filters must be >= 1")
    if n < num_filters:
        raise ValueError(f"need at least {num_filters} patches, got {n}")
    X = patches.reshape(n, k * k)
    mean = X.mean(axis=0)
    Xc = X - mean

    if np.all(np.abs(Xc) < 1e-12):
        direction = X[0] / np.linalg.norm(X[0]) if np.linalg.norm(X[0]) > 0 else np.full(k * k, 1.0 / k)
        weights = np.tile(direction, (num_filters, 1))
        bias = np.zeros(num_filters)
        return _as_bank(weights, bias, k)

    cov = Xc.T @ Xc / n
    evals, evecs = np.linalg.eigh(cov)
    whiten = (evecs / np.sqrt(evals + WHITEN_RIDGE)) @ evecs.T
    Z = Xc @ whiten
    norms = np.linalg.norm(Z, axis=1)
    Z = Z[norms > 1e-12] / norms[norms > 1e-12, None]

    rng = np.random.default_rng(seed)
    centers = _spherical_kmeans(Z, num_filters, rng)
    weights = centers @ whiten
    bias = -weights @ mean
    scale = np.linalg.norm(weights, axis=1)
    scale[scale == 0] = 1.0
    return _as_bank(weights / scale[:, None], bias / scale, k)


def _as_bank(weights: np.ndarray, bias: np.ndarray, k: int) -> FilterBank:
    weights = weights.reshape(-1, k, k)
    if weights.shape[0] == 1:
        # a bank needs two channels; pad with the sign-flipped filter
        weights = np.concatenate([weights, -weights])
        bias = np.concatenate([bias, -bias])
    return FilterBank(weights, bias)
