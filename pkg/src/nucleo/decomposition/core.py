"""End-to-end near-convex decomposition of one binary component."""

from __future__ import annotations

import logging
from dataclasses import dataclass, field

import numpy as np
from scipy import ndimage

from .boundary import (BoundaryPolygon, boundary_curvature, concave_points,
                       fill_component, trace_boundary)
from .cuts import (Cut, CutSelectionProblem, all_pair_concavity, enumerate_cuts_and_mutex,
                   measure_concavity)
from .solver import CutCapacityError, InfeasibleCutSelection, solve_cut_selection

log = logging.getLogger(__name__)

_PAD = 2
RASTER_SLACK = 0.5
_EIGHT = np.ones((3, 3), dtype=bool)
_FOUR = ndimage.generate_binary_structure(2, 1)


@dataclass
class DecomposedParts:
    """Disjoint parts covering the hole-filled component.

    ``warning`` is set when the cut-selection problem was infeasible or too
    large and the component was returned whole.
    """

    parts: list[np.ndarray]
    selected_cuts: list[Cut] = field(default_factory=list)
    warning: str | None = None
    polygon: BoundaryPolygon | None = None
    concave: list[int] = field(default_factory=list)
    candidate_cuts: list[Cut] = field(default_factory=list)
    problem: CutSelectionProblem | None = None
    offset: tuple[int, int] = (0, 0)

    @property
    def infeasible(self) -> bool:
        return self.warning is not None


def rasterize_segment(p, q) -> list[tuple[int, int]]:
    """4-connected pixel path from p to q, both given as (x, y)."""
    p = np.asarray(p, dtype=np.float64)
    q = np.asarray(q, dtype=np.float64)
    n = max(int(np.ceil(np.abs(q - p).max() * 4)), 1)
    t = np.linspace(0.0, 1.0, n + 1)
    pts = np.floor(p[None, :] + t[:, None] * (q - p)[None, :] + 0.5).astype(np.int64)
    path: list[tuple[int, int]] = []
    for x, y in pts.tolist():
        if path and path[-1] == (x, y):
            continue
        if path:
            px, py = path[-1]
            if px != x and py != y:
                path.append((x, py))
        path.append((x, y))
    return path


def _extended(p, q, amount: float = 1.0):
    p = np.asarray(p, dtype=np.float64)
    q = np.asarray(q, dtype=np.float64)
    d = q - p
    d = d / np.linalg.norm(d)
    return p - amount * d, q + amount * d


def split_by_cuts(mask: np.ndarray, poly: BoundaryPolygon, cuts) -> list[np.ndarray]:
    """Remove rasterized cuts, label the pieces, hand cut pixels back.

    Each cut pixel joins the neighbouring part it shares the most 4-adjacent
    pixels with (lower part id on ties), sweeping until all are assigned.
    """
    verts = poly.vertices.astype(np.float64)
    h, w = mask.shape
    cut_px = np.zeros_like(mask)
    for c in cuts:
        a, b = _extended(verts[c.p_index], verts[c.q_index])
        for x, y in rasterize_segment(a, b):
            if 0 <= y < h and 0 <= x < w and mask[y, x]:
                cut_px[y, x] = True
    labels, n = ndimage.label(mask & ~cut_px, structure=_EIGHT)
    pending = mask & (labels == 0)
    while pending.any():
        counts = np.stack([ndimage.convolve((labels == k).astype(np.int64), _FOUR.astype(np.int64),
                                            mode="constant") for k in range(1, n + 1)])
        best = np.argmax(counts, axis=0) + 1
        reachable = pending & (counts.max(axis=0) > 0)
        if not reachable.any():
            # cut pixels cut off from every part form a part of their own
            extra, m = ndimage.label(pending, structure=_EIGHT)
            labels[pending] = extra[pending] + n
            n += m
            break
        labels[reachable] = best[reachable]
        pending &= ~reachable
    return [labels == k for k in range(1, n + 1)]


def _single(mask, offset, shape, warning=None, **extra):
    return DecomposedParts([_embed(mask, offset, shape)], warning=warning, offset=offset, **extra)


def _embed(local: np.ndarray, offset, shape) -> np.ndarray:
    out = np.zeros(shape, dtype=bool)
    r0, c0 = offset
    out[r0:r0 + local.shape[0], c0:c0 + local.shape[1]] = local
    return out


def decompose(component, psi: float = 3.0, lam: float = 0.1,
              max_depth: int = 3) -> DecomposedParts:
    """Split a component into near-convex parts with optimally weighted cuts.

    Parts are returned as full-size masks in the component's frame; the
    polygon, concave points and cuts refer to the cropped local frame at
    ``offset`` (row, col). A part whose measured concavity still exceeds
    ``psi + RASTER_SLACK`` after the cuts is decomposed again, up to
    ``max_depth`` levels; if that fails the result carries a warning.
    """
    if not psi > 0:
        raise ValueError("psi must be > 0")
    result = _decompose_once(component, psi, lam)
    if result.infeasible or len(result.parts) < 2:
        return result
    parts = []
    for part in result.parts:
        if measure_concavity(part) <= psi + RASTER_SLACK:
            parts.append(part)
            continue
        if max_depth <= 0:
            result.warning = "a part exceeds the concavity tolerance"
            parts.append(part)
            continue
        sub = decompose(part, psi, lam, max_depth - 1)
        if sub.warning and result.warning is None:
            result.warning = sub.warning
        if len(sub.parts) == 1 and sub.warning is None:
            result.warning = "a part exceeds the concavity tolerance"
        parts.extend(sub.parts)
    if result.warning:
        log.warning("decomposition incomplete: %s", result.warning)
    result.parts = parts
    return result


def _decompose_once(component, psi: float, lam: float) -> DecomposedParts:
    full = fill_component(component)
    shape = full.shape
    rows, cols = np.nonzero(full)
    r0, c0 = max(rows.min() - _PAD, 0), max(cols.min() - _PAD, 0)
    r1, c1 = min(rows.max() + _PAD + 1, shape[0]), min(cols.max() + _PAD + 1, shape[1])
    local = full[r0:r1, c0:c1]
    offset = (int(r0), int(c0))

    poly = trace_boundary(local)
    if poly.degenerate:
        return _single(local, offset, shape, polygon=poly)
    concave = concave_points(boundary_curvature(poly))
    if not concave:
        return _single(local, offset, shape, polygon=poly)
    concavity = all_pair_concavity(poly, local)
    cuts, mutex, problem = enumerate_cuts_and_mutex(poly, local, concave, psi, lam, concavity)
    context = dict(polygon=poly, concave=concave, candidate_cuts=cuts, problem=problem)
    if not mutex:
        return _single(local, offset, shape, **context)
    try:
        x = solve_cut_selection(problem)
    except (InfeasibleCutSelection, CutCapacityError) as exc:
        log.warning("component left whole: %s", exc)
        return _single(local, offset, shape, warning=str(exc), **context)
    selected = [c for c, keep in zip(cuts, x) if keep]
    parts = split_by_cuts(local, poly, selected)
    return DecomposedParts([_embed(p, offset, shape) for p in parts], selected,
                           offset=offset, **context)
