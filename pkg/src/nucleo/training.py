"""Training pipeline: filters, vMF kernels, background kernel, mixture, threshold."""

from __future__ import annotations

import logging
from dataclasses import dataclass

import numpy as np

from ._validation import check_gray_image
from .detection import DEFAULT_NMS_RADIUS, detect
from .features import FilterBank, convolve_extract, learn_filter_bank, sample_patches
from .metrics import best_f1, pr_curve_multi
from .mixture import (NucleusCrop, cluster_crops, extract_crop, learn_mixture,
                      measure_nucleus_geometry)
from .model import DEFAULT_ROTATIONS, NucleoModel
from .vmf import background_activation_sums, box_mask, learn_vmf_kernels, with_background

log = logging.getLogger(__name__)


class InsufficientDataError(ValueError):
    """Too few isolated nuclei for the requested number of mixtures."""


@dataclass(frozen=True)
class TrainConfig:
    num_filters: int = 32
    kernel_size: int = 3
    n_patches: int = 50_000
    n_kernels: int = 12
    sigma: float = 30.0
    max_vmf_samples: int = 500_000
    n_mixtures: int = 20
    patch_size: int = 27
    em_iters: int = 3
    bg_dilation: int = 3
    rotations: tuple[float, ...] = DEFAULT_ROTATIONS
    nms_radius: float = DEFAULT_NMS_RADIUS
    psi: float = 3.0
    lam: float = 0.1
    prior_variance: float = 10.0
    prior_floor: float = 0.05
    match_radius: float = 3.0
    seed: int = 0


def sample_feature_vectors(images, filters: FilterBank, limit: int, seed: int) -> np.ndarray:
    """Uniform subsample of at most ``limit`` valid feature vectors over all images.

    Every valid position gets an independent uniform key; the ``limit``
    smallest keys are kept, so no image's feature map has to stay in memory.
    """
    rng = np.random.default_rng(seed)
    keys = np.empty(0)
    vecs = np.empty((0, filters.num_filters))
    for image in images:
        fm = convolve_extract(image, filters)
        v = fm.vectors[fm.valid]
        k = rng.random(len(v))
        keys = np.concatenate([keys, k])
        vecs = np.concatenate([vecs, v])
        if len(keys) > limit:
            keep = np.argpartition(keys, limit - 1)[:limit]
            keep.sort()
            keys, vecs = keys[keep], vecs[keep]
    order = np.argsort(keys, kind="stable")
    return vecs[order]


def _crop_for(image: np.ndarray, record, filters: FilterBank, patch_size: int) -> NucleusCrop:
    x0, y0, x1, y1 = record.box
    long_axis, short_axis, theta = measure_nucleus_geometry(image[y0:y1 + 1, x0:x1 + 1])
    fm = extract_crop(image, record.center, theta, filters, patch_size)
    return NucleusCrop(fm, tuple(record.box), long_axis, short_axis, theta)


def train(images, annotations, config: TrainConfig = TrainConfig(),
          filters: FilterBank | None = None) -> NucleoModel:
    """Fit a model from images and their annotations.

    Only boxes (for the background kernel) and isolated nuclei (for the
    mixture) are used. ``filters`` skips filter learning when given.
    """
    images = [check_gray_image(im) for im in images]
    annotations = list(annotations)
    if len(images) != len(annotations) or not images:
        raise ValueError("need one annotation per image and at least one image")
    n_iso = sum(len(a.isolated()) for a in annotations)
    if n_iso < config.n_mixtures:
        raise InsufficientDataError(
            f"need >= M isolated nuclei: found {n_iso}, M = {config.n_mixtures}")
    for im, ann in zip(images, annotations):
        ann.check_bounds(im.shape)

    if filters is None:
        near = [box_mask(im.shape, a.boxes, config.bg_dilation) for im, a in zip(images, annotations)]
        patches = sample_patches(images, config.kernel_size, config.n_patches, config.seed, near)
        filters = learn_filter_bank(patches, config.num_filters, config.seed)
        log.info("learned %d filters", filters.num_filters)

    vectors = sample_feature_vectors(images, filters, config.max_vmf_samples, config.seed)
    bank = learn_vmf_kernels(vectors, config.n_kernels, config.sigma, config.seed)
    del vectors
    log.info("learned %d vMF kernels", bank.n_kernels)

    totals = np.zeros(bank.n_kernels)
    count = 0
    crops = []
    for image, ann in zip(images, annotations):
        fm = convolve_extract(image, filters)
        s, c = background_activation_sums(fm, bank, ann.boxes, config.bg_dilation)
        totals += s
        count += c
        for rec in ann.isolated():
            crops.append(_crop_for(image, rec, filters, config.patch_size))
    if count == 0:
        raise ValueError("no background pixels in any training image")
    bank = with_background(bank, totals / count)
    log.info("background kernel %d; %d isolated crops", bank.background_index, len(crops))

    assignment = cluster_crops(crops, config.n_mixtures, config.seed)
    mixture = learn_mixture(crops, assignment, bank, config.n_mixtures, config.em_iters)
    return NucleoModel(filters, mixture, config.rotations, config.nms_radius, -np.inf,
                       config.psi, config.lam, config.prior_variance, config.prior_floor,
                       {"n_isolated": n_iso, "seed": config.seed})


def calibrate_threshold(model: NucleoModel, images, points, radius: float = 3.0,
                        threads: int | None = None) -> tuple[float, float]:
    """Best-F1 score threshold on a validation set; returns (threshold, f1)."""
    items = []
    for image, gt in zip(images, points):
        dets = detect(image, model, score_threshold=-np.inf, threads=threads)
        items.append((dets.points, dets.scores, gt))
    curve = pr_curve_multi(items, radius)
    f1, threshold, _, _ = best_f1(curve)
    return float(threshold), float(f1)
