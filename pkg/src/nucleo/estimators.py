"""scikit-learn style wrappers around training, detection and segmentation.

``X`` is always a sequence of 2-D grayscale images in [0, 1]. Targets for
``fit`` are per-image annotations: :class:`~nucleo.annotations.Annotation`
objects or anything with ``centers``, ``boxes`` and ``isolated`` (such as
the generator's ground truth).
"""

from __future__ import annotations

import numpy as np
from sklearn.base import BaseEstimator
from sklearn.utils.validation import check_is_fitted

from ._validation import check_gray_image
from .annotations import Annotation, from_ground_truth
from .detection import DEFAULT_NMS_RADIUS, detect
from .features import convolve_extract
from .metrics import aji, best_f1, pr_curve_multi
from .model import DEFAULT_ROTATIONS, NucleoModel
from .segmentation import MIN_AREA, candidate_prior, segment, segment_features
from .training import TrainConfig, train


def check_images(X) -> list[np.ndarray]:
    """Validate a non-empty sequence of grayscale images."""
    if isinstance(X, np.ndarray) and X.ndim == 2:
        raise ValueError("expected a sequence of images, got a single 2-D array")
    images = [check_gray_image(im, f"X[{i}]") for i, im in enumerate(X)]
    if not images:
        raise ValueError("X is empty")
    return images


def as_annotation(item, name: str = "") -> Annotation:
    if isinstance(item, Annotation):
        return item
    if all(hasattr(item, a) for a in ("centers", "boxes", "isolated")):
        return from_ground_truth(name, item)
    raise TypeError(f"cannot use {type(item).__name__} as an annotation")


def _gt_points(item) -> np.ndarray:
    if hasattr(item, "centers"):
        return np.asarray(item.centers, dtype=np.float64).reshape(-1, 2)
    return np.asarray(item, dtype=np.float64).reshape(-1, 2)


class _ModelEstimator(BaseEstimator):
    """Shared hyperparameters and fitting for the two public estimators."""

    def __init__(self, num_filters: int = 32, kernel_size: int = 3, n_kernels: int = 12,
                 sigma: float = 30.0, n_mixtures: int = 20, patch_size: int = 27,
                 em_iters: int = 3, rotations=DEFAULT_ROTATIONS,
                 nms_radius: float = DEFAULT_NMS_RADIUS, psi: float = 3.0, lam: float = 0.1,
                 prior_variance: float = 10.0, n_patches: int = 50_000,
                 max_vmf_samples: int = 500_000, random_state: int = 0, n_jobs=None):
        self.num_filters = num_filters
        self.kernel_size = kernel_size
        self.n_kernels = n_kernels
        self.sigma = sigma
        self.n_mixtures = n_mixtures
        self.patch_size = patch_size
        self.em_iters = em_iters
        self.rotations = rotations
        self.nms_radius = nms_radius
        self.psi = psi
        self.lam = lam
        self.prior_variance = prior_variance
        self.n_patches = n_patches
        self.max_vmf_samples = max_vmf_samples
        self.random_state = random_state
        self.n_jobs = n_jobs

    def _config(self) -> TrainConfig:
        return TrainConfig(
            num_filters=self.num_filters, kernel_size=self.kernel_size,
            n_patches=self.n_patches, n_kernels=self.n_kernels, sigma=self.sigma,
            max_vmf_samples=self.max_vmf_samples, n_mixtures=self.n_mixtures,
            patch_size=self.patch_size, em_iters=self.em_iters,
            rotations=tuple(self.rotations), nms_radius=self.nms_radius, psi=self.psi,
            lam=self.lam, prior_variance=self.prior_variance, seed=int(self.random_state))

    def fit(self, X, y):
        images = check_images(X)
        y = list(y)
        if len(y) != len(images):
            raise ValueError(f"got {len(images)} images but {len(y)} annotations")
        annotations = [as_annotation(a, f"{i}") for i, a in enumerate(y)]
        self.model_ = train(images, annotations, self._config())
        self.n_parameters_ = self.model_.n_parameters
        return self

    @classmethod
    def from_model(cls, model: NucleoModel, **params):
        """Wrap an already trained model without refitting."""
        est = cls(**params)
        est.model_ = model
        est.n_parameters_ = model.n_parameters
        return est


class NucleusDetector(_ModelEstimator):
    """Nucleus center detector.

    ``predict`` returns one :class:`~nucleo.detection.DetectionSet` per
    image. With ``use_prior`` the segmentation candidates are turned into a
    location prior before peak picking.
    """

    def __init__(self, num_filters: int = 32, kernel_size: int = 3, n_kernels: int = 12,
                 sigma: float = 30.0, n_mixtures: int = 20, patch_size: int = 27,
                 em_iters: int = 3, rotations=DEFAULT_ROTATIONS,
                 nms_radius: float = DEFAULT_NMS_RADIUS, psi: float = 3.0, lam: float = 0.1,
                 prior_variance: float = 10.0, n_patches: int = 50_000,
                 max_vmf_samples: int = 500_000, random_state: int = 0, n_jobs=None,
                 use_prior: bool = True, score_threshold: float | None = None,
                 match_radius: float = 3.0):
        super().__init__(num_filters, kernel_size, n_kernels, sigma, n_mixtures, patch_size,
                         em_iters, rotations, nms_radius, psi, lam, prior_variance,
                         n_patches, max_vmf_samples, random_state, n_jobs)
        self.use_prior = use_prior
        self.score_threshold = score_threshold
        self.match_radius = match_radius

    def _prior(self, image: np.ndarray):
        if not self.use_prior:
            return None
        model = self.model_
        fm = convolve_extract(image, model.filters)
        _, cands = segment_features(fm, model.kernels, model.psi, model.lam,
                                    support_radius=model.filters.kernel_size // 2)
        return candidate_prior(cands, model.prior_variance, image.shape, model.prior_floor)

    def _detect(self, image: np.ndarray, threshold: float):
        return detect(image, self.model_, prior=self._prior(image), nms_radius=self.nms_radius,
                      score_threshold=threshold, threads=self.n_jobs)

    def calibrate(self, X, y):
        """Set ``threshold_`` to the best-F1 score threshold on (X, y)."""
        check_is_fitted(self, "model_")
        images = check_images(X)
        points = [_gt_points(item) for item in y]
        curve = pr_curve_multi(self._curve_items(images, points), self.match_radius)
        f1, threshold, _, _ = best_f1(curve)
        self.threshold_ = float(threshold)
        self.calibration_f1_ = float(f1)
        return self

    def _curve_items(self, images, points):
        items = []
        for image, gt in zip(images, points):
            dets = self._detect(image, -np.inf)
            items.append((dets.points, dets.scores, gt))
        return items

    def predict(self, X) -> list:
        check_is_fitted(self, "model_")
        if self.score_threshold is not None:
            threshold = self.score_threshold
        else:
            threshold = getattr(self, "threshold_", self.model_.score_threshold)
        return [self._detect(image, threshold) for image in check_images(X)]

    def score(self, X, y) -> float:
        """Best F1 over all score thresholds (point matching within ``match_radius``)."""
        check_is_fitted(self, "model_")
        images = check_images(X)
        curve = pr_curve_multi(self._curve_items(images, [_gt_points(i) for i in y]),
                               self.match_radius)
        return float(best_f1(curve)[0])


class NucleusSegmenter(_ModelEstimator):
    """Instance segmenter; ``predict`` returns one integer label map per image."""

    def __init__(self, num_filters: int = 32, kernel_size: int = 3, n_kernels: int = 12,
                 sigma: float = 30.0, n_mixtures: int = 20, patch_size: int = 27,
                 em_iters: int = 3, rotations=DEFAULT_ROTATIONS,
                 nms_radius: float = DEFAULT_NMS_RADIUS, psi: float = 3.0, lam: float = 0.1,
                 prior_variance: float = 10.0, n_patches: int = 50_000,
                 max_vmf_samples: int = 500_000, random_state: int = 0, n_jobs=None,
                 threshold="otsu", min_area: int = MIN_AREA):
        super().__init__(num_filters, kernel_size, n_kernels, sigma, n_mixtures, patch_size,
                         em_iters, rotations, nms_radius, psi, lam, prior_variance,
                         n_patches, max_vmf_samples, random_state, n_jobs)
        self.threshold = threshold
        self.min_area = min_area

    def predict(self, X) -> list[np.ndarray]:
        check_is_fitted(self, "model_")
        return [segment(image, self.model_, self.psi, self.lam, self.threshold, self.min_area)
                for image in check_images(X)]

    def score(self, X, y) -> float:
        """Mean aggregated Jaccard index against ground-truth label maps ``y``.

        Items of ``y`` may also be generator ground truths (their ``masks``).
        """
        preds = self.predict(X)
        y = list(y)
        if len(y) != len(preds):
            raise ValueError(f"got {len(preds)} images but {len(y)} label maps")
        return float(np.mean([aji(np.asarray(getattr(gt, "masks", gt)), p) for gt, p in zip(y, preds)]))
