"""Seeded synthetic nucleus images with full ground truth.

Randomness comes from numpy's counter-based Philox bit generator, whose
stream is fixed by the seed on every platform.
"""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field

import numpy as np
from scipy import ndimage

log = logging.getLogger(__name__)

MAX_ATTEMPTS = 10_000
_FOUR = ndimage.generate_binary_structure(2, 1)


@dataclass(frozen=True)
class SynthConfig:
    """Axis ranges are full lengths in pixels; orientation in radians."""

    height: int = 256
    width: int = 256
    count: tuple[int, int] = (8, 14)
    long_axis: tuple[float, float] = (16.0, 24.0)
    short_axis: tuple[float, float] = (12.0, 18.0)
    orientation: tuple[float, float] = (-math.pi / 2, math.pi / 2)
    touching_prob: float = 0.2
    neck: tuple[float, float] = (0.7, 0.95)
    background: float = 0.1
    foreground: float = 0.6
    noise_std: float = 0.005
    texture: float = 0.15
    texture_scale: int = 6
    edge_blur: float = 0.5
    gap: int = 3
    seed: int = 0

    def __post_init__(self):
        for name in ("long_axis", "short_axis", "count", "neck", "orientation"):
            lo, hi = getattr(self, name)
            if lo > hi:
                raise ValueError(f"{name} range is reversed")
        if self.long_axis[0] <= 0 or self.short_axis[0] <= 0:
            raise ValueError("axis ranges must be positive")
        if self.count[0] < 0:
            raise ValueError("count must be non-negative")
        if not 0.0 <= self.touching_prob <= 1.0:
            raise ValueError("touching_prob must lie in [0, 1]")
        if not self.background < self.foreground:
            raise ValueError("background mean must be below the nucleus mean")
        if self.noise_std < 0 or self.texture < 0 or self.edge_blur < 0:
            raise ValueError("noise, texture and blur must be non-negative")
        if self.height < 8 or self.width < 8:
            raise ValueError("image too small")


@dataclass
class GroundTruth:
    """Instance ``i`` has label ``i + 1`` in ``masks``."""

    centers: np.ndarray
    boxes: np.ndarray
    masks: np.ndarray
    isolated: np.ndarray
    pairs: list[tuple[int, int]] = field(default_factory=list)
    complete: bool = True

    def __len__(self) -> int:
        return len(self.centers)


@dataclass(frozen=True)
class _Ellipse:
    x: float
    y: float
    a: float
    b: float
    theta: float

    def radius2(self, xx: np.ndarray, yy: np.ndarray) -> np.ndarray:
        """Squared normalized radius; <= 1 inside."""
        c, s = math.cos(self.theta), math.sin(self.theta)
        dx, dy = xx - self.x, yy - self.y
        u = (dx * c + dy * s) / self.a
        v = (-dx * s + dy * c) / self.b
        return u * u + v * v

    def bounds(self) -> tuple[float, float]:
        """Half extents along x and y."""
        c, s = math.cos(self.theta), math.sin(self.theta)
        return (math.hypot(self.a * c, self.b * s), math.hypot(self.a * s, self.b * c))


def _uniform(rng: np.random.Generator, lo: float, hi: float) -> float:
    return float(lo + (hi - lo) * rng.random())


def _draw_ellipse(rng, cfg: SynthConfig, x: float, y: float, theta: float) -> _Ellipse:
    a = _uniform(rng, *cfg.long_axis) / 2.0
    b = _uniform(rng, *cfg.short_axis) / 2.0
    if b > a:
        a, b = b, a
    return _Ellipse(x, y, a, b, theta)


def _draw_unit(rng, cfg: SynthConfig, touching: bool) -> list[_Ellipse]:
    theta = _uniform(rng, *cfg.orientation)
    x = _uniform(rng, 0, cfg.width - 1)
    y = _uniform(rng, 0, cfg.height - 1)
    first = _draw_ellipse(rng, cfg, x, y, theta)
    if not touching:
        return [first]
    second = _draw_ellipse(rng, cfg, 0.0, 0.0, theta)
    u = _uniform(rng, *cfg.neck)
    dist = (first.b + second.b) * u
    side = 1.0 if rng.random() < 0.5 else -1.0
    nx, ny = -math.sin(theta) * side, math.cos(theta) * side
    second = _Ellipse(x + dist * nx, y + dist * ny, second.a, second.b, theta)
    return [first, second]


def _fits(unit, cfg: SynthConfig) -> bool:
    for e in unit:
        hx, hy = e.bounds()
        if e.x - hx < 1 or e.y - hy < 1 or e.x + hx > cfg.width - 2 or e.y + hy > cfg.height - 2:
            return False
    return True


def _render_unit(unit, shape) -> list[np.ndarray]:
    """Masks of one unit; overlapping pixels go to the smaller normalized radius."""
    yy, xx = np.mgrid[0:shape[0], 0:shape[1]].astype(np.float64)
    r2 = np.stack([e.radius2(xx, yy) for e in unit])
    inside = r2 <= 1.0
    owner = np.argmin(r2, axis=0)
    return [inside[i] & (owner == i) for i in range(len(unit))]


def _value_noise(rng, shape, scale: int) -> np.ndarray:
    """Bilinearly upsampled uniform grid noise in [-1, 1]."""
    gh, gw = shape[0] // scale + 2, shape[1] // scale + 2
    grid = rng.random((gh, gw)) * 2.0 - 1.0
    yy, xx = np.mgrid[0:shape[0], 0:shape[1]].astype(np.float64) / scale
    return ndimage.map_coordinates(grid, [yy, xx], order=1, mode="nearest")


def generate(config: SynthConfig) -> tuple[np.ndarray, GroundTruth]:
    """Image in [0, 1] and its ground truth, fully determined by ``config``."""
    cfg = config
    rng = np.random.Generator(np.random.Philox(cfg.seed))
    shape = (cfg.height, cfg.width)
    lo, hi = cfg.count
    target = lo + int(rng.integers(0, hi - lo + 1)) if hi > lo else lo
    labels = np.zeros(shape, dtype=np.int64)
    occupied = np.zeros(shape, dtype=bool)
    ellipses: list[_Ellipse] = []
    pairs: list[tuple[int, int]] = []
    attempts = 0
    while len(ellipses) < target and attempts < MAX_ATTEMPTS:
        attempts += 1
        touching = target - len(ellipses) >= 2 and rng.random() < cfg.touching_prob
        unit = _draw_unit(rng, cfg, touching)
        if not _fits(unit, cfg):
            continue
        masks = _render_unit(unit, shape)
        union = np.logical_or.reduce(masks)
        if (ndimage.binary_dilation(union, iterations=cfg.gap) & occupied).any():
            continue
        if any(not m.any() for m in masks):
            continue
        for e, m in zip(unit, masks):
            ellipses.append(e)
            labels[m] = len(ellipses)
        if len(unit) == 2:
            pairs.append((len(ellipses) - 2, len(ellipses) - 1))
        occupied |= union
    complete = len(ellipses) == target
    if not complete:
        log.warning("placed %d of %d nuclei after %d attempts", len(ellipses), target, attempts)

    n = len(ellipses)
    centers = np.array([[e.x, e.y] for e in ellipses], dtype=np.float64).reshape(-1, 2)
    boxes = np.zeros((n, 4), dtype=np.int64)
    isolated = np.ones(n, dtype=bool)
    for i in range(n):
        m = labels == i + 1
        rows, cols = np.nonzero(m)
        boxes[i] = [cols.min(), rows.min(), cols.max(), rows.max()]
        ring = ndimage.binary_dilation(m, _FOUR) & ~m
        isolated[i] = not np.any(labels[ring] > 0)

    fg = (labels > 0).astype(np.float64)
    soft = ndimage.gaussian_filter(fg, cfg.edge_blur) if cfg.edge_blur > 0 else fg
    texture = _value_noise(rng, shape, cfg.texture_scale)
    noise = rng.standard_normal(shape) * cfg.noise_std
    image = (cfg.background + (cfg.foreground - cfg.background) * soft
             + cfg.texture * texture * soft + noise)
    image = np.clip(image, 0.0, 1.0)
    return image, GroundTruth(centers, boxes, labels, isolated, pairs, complete)
