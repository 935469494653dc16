"""Outer-contour tracing and discrete curvature of binary components."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy import ndimage

SMOOTH_WINDOW = 7
STENCIL = 3
KAPPA_MIN = 0.02

# Moore neighbourhood as (drow, dcol), clockwise on screen starting west.
_RING = ((0, -1), (-1, -1), (-1, 0), (-1, 1), (0, 1), (1, 1), (1, 0), (1, -1))
_RING_INDEX = {d: i for i, d in enumerate(_RING)}


@dataclass(frozen=True)
class BoundaryPolygon:
    """Closed outer contour through boundary pixel centers, as (x, y) rows.

    Orientation is counter-clockwise in the (x, y) = (col, row) frame, i.e.
    the shoelace area is positive and the interior lies to the left.
    """

    vertices: np.ndarray
    component_id: int = 0

    def __len__(self) -> int:
        return len(self.vertices)

    @property
    def degenerate(self) -> bool:
        """True for dots and pixel lines: trivially convex, nothing to cut."""
        return len(self.vertices) < 3 or signed_area(self.vertices) <= 0.0


def signed_area(vertices: np.ndarray) -> float:
    x, y = vertices[:, 0].astype(float), vertices[:, 1].astype(float)
    return 0.5 * float(np.sum(x * np.roll(y, -1) - np.roll(x, -1) * y))


def fill_component(component) -> np.ndarray:
    mask = np.asarray(component, dtype=bool)
    if mask.ndim != 2:
        raise ValueError("component must be a 2-D mask")
    if not mask.any():
        raise ValueError("component is empty")
    return ndimage.binary_fill_holes(mask)


def trace_boundary(component, component_id: int = 0) -> BoundaryPolygon:
    """Moore-neighbour tracing of the outer contour, holes filled first.

    Tracing starts at the lexicographically smallest (row, col) pixel. A
    mask holding several 8-connected pieces is traced around the piece that
    contains that pixel.
    """
    mask = fill_component(component)
    h, w = mask.shape
    rows, cols = np.nonzero(mask)
    start = (int(rows[0]), int(cols[0]))

    def fg(r, c):
        return 0 <= r < h and 0 <= c < w and mask[r, c]

    def step(p, b):
        d = _RING_INDEX[(b[0] - p[0], b[1] - p[1])]
        prev = b
        for k in range(1, 9):
            dr, dc = _RING[(d + k) % 8]
            q = (p[0] + dr, p[1] + dc)
            if fg(*q):
                return q, prev
            prev = q
        return None, None

    contour = [start]
    p, b = start, (start[0], start[1] - 1)
    first_move = step(p, b)
    if first_move[0] is None:
        return BoundaryPolygon(np.array([[start[1], start[0]]], dtype=np.int64), component_id)
    limit = 4 * int(mask.sum()) + 16
    while len(contour) <= limit:
        q, nb = step(p, b)
        if p == start and len(contour) > 1 and q == contour[1]:
            break
        contour.append(q)
        p, b = q, nb
    if len(contour) > 1 and contour[-1] == start:
        contour.pop()
    verts = np.array([[c, r] for r, c in contour], dtype=np.int64)
    if len(verts) >= 3 and signed_area(verts) < 0:
        verts = np.concatenate([verts[:1], verts[1:][::-1]])
    return BoundaryPolygon(verts, component_id)


def smooth_contour(vertices: np.ndarray, window: int = SMOOTH_WINDOW) -> np.ndarray:
    """Circular moving average of the vertex coordinates."""
    v = np.asarray(vertices, dtype=np.float64)
    n = len(v)
    if n < window:
        return v.copy()
    r = window // 2
    idx = (np.arange(n)[:, None] + np.arange(-r, r + 1)[None, :]) % n
    return v[idx].mean(axis=1)


def boundary_curvature(poly: BoundaryPolygon, smooth_window: int = SMOOTH_WINDOW) -> np.ndarray:
    """Signed turning-angle curvature per vertex; positive is convex.

    Contours shorter than the smoothing window get ``+inf`` everywhere.
    """
    n = len(poly)
    if n < smooth_window or n <= 2 * STENCIL:
        return np.full(n, np.inf)
    v = smooth_contour(poly.vertices, smooth_window)
    t1 = v - np.roll(v, STENCIL, axis=0)
    t2 = np.roll(v, -STENCIL, axis=0) - v
    cross = t1[:, 0] * t2[:, 1] - t1[:, 1] * t2[:, 0]
    dot = (t1 * t2).sum(axis=1)
    turn = np.arctan2(cross, dot)
    arc = 0.5 * (np.linalg.norm(t1, axis=1) + np.linalg.norm(t2, axis=1))
    arc[arc == 0] = 1.0
    return turn / arc


def inward_normals(poly: BoundaryPolygon, smooth_window: int = SMOOTH_WINDOW) -> np.ndarray:
    """Unit normals of the smoothed contour pointing into the shape."""
    v = smooth_contour(poly.vertices, smooth_window)
    k = min(STENCIL, max(len(v) // 2, 1))
    t = np.roll(v, -k, axis=0) - np.roll(v, k, axis=0)
    normals = np.stack([-t[:, 1], t[:, 0]], axis=1)
    norms = np.linalg.norm(normals, axis=1, keepdims=True)
    norms[norms == 0] = 1.0
    return normals / norms


def concave_points(curvatures, kappa_min: float = KAPPA_MIN) -> list[int]:
    """One index per contiguous negative-curvature run whose minimum is below ``-kappa_min``."""
    kappa = np.asarray(curvatures, dtype=np.float64)
    n = len(kappa)
    neg = kappa < 0
    if n == 0 or not neg.any():
        return []
    if neg.all():
        i = int(np.argmin(kappa))
        return [i] if kappa[i] < -kappa_min else []
    # rotate so the scan starts just after a non-negative vertex
    start = int(np.flatnonzero(~neg)[0])
    order = (np.arange(n) + start) % n
    out = []
    run: list[int] = []
    for i in list(order) + [start]:
        if neg[i]:
            run.append(int(i))
        elif run:
            best = min(run, key=lambda j: (kappa[j], j))
            if kappa[best] < -kappa_min:
                out.append(best)
            run = []
    return sorted(out)
