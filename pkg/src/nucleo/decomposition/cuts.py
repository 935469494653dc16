"""Concavity, candidate cuts, mutex pairs and cut weights."""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
from scipy.spatial import cKDTree

from .boundary import BoundaryPolygon, inward_normals

SAMPLE_STEP = 0.25
# A chord only "leaves" a pixel shape when it passes more than this far from
# every shape pixel center; pixel staircases and one-pixel spurs stay below it.
EXIT_TOL = 1.0


@dataclass(frozen=True)
class Cut:
    p_index: int
    q_index: int
    weight: float

    def __post_init__(self):
        if self.p_index == self.q_index:
            raise ValueError("cut endpoints must differ")
        if not self.weight > 0:
            raise ValueError("cut weight must be positive")


@dataclass(frozen=True)
class CutSelectionProblem:
    """``A[i, j]`` = cut i splits mutex pair j; ``B`` = pairwise cut crossings."""

    A: np.ndarray
    B: np.ndarray
    w: np.ndarray
    psi: float = 3.0

    def __post_init__(self):
        A = np.asarray(self.A, dtype=np.uint8)
        B = np.asarray(self.B, dtype=np.uint8)
        w = np.asarray(self.w, dtype=np.float64).reshape(-1)
        N = w.shape[0]
        if A.ndim != 2 or A.shape[0] != N:
            A = A.reshape(N, -1)
        if B.shape != (N, N):
            raise ValueError("B must be N x N")
        if np.any(A > 1) or np.any(B > 1):
            raise ValueError("A and B must be 0/1 matrices")
        if not np.array_equal(B, B.T) or np.any(np.diag(B)):
            raise ValueError("B must be symmetric with a zero diagonal")
        if np.any(w <= 0) or not np.all(np.isfinite(w)):
            raise ValueError("weights must be positive and finite")
        object.__setattr__(self, "A", A)
        object.__setattr__(self, "B", B)
        object.__setattr__(self, "w", w)

    @property
    def n_cuts(self) -> int:
        return self.w.shape[0]

    @property
    def n_mutex(self) -> int:
        return self.A.shape[1]

    @property
    def feasible_columns(self) -> bool:
        return bool(np.all(self.A.sum(axis=0) > 0))


def _round(v):
    return np.floor(np.asarray(v) + 0.5).astype(np.int64)


def segment_samples(p, q, step: float = SAMPLE_STEP) -> np.ndarray:
    """Interior sample points of the open segment pq, ``step`` apart."""
    p = np.asarray(p, dtype=np.float64)
    q = np.asarray(q, dtype=np.float64)
    length = float(np.hypot(*(q - p)))
    n = int(math.floor(length / step))
    if n < 1:
        return np.empty((0, 2))
    t = np.arange(1, n + 1) * step / length
    t = t[t < 1.0]
    return p[None, :] + t[:, None] * (q - p)[None, :]


def segment_inside(mask: np.ndarray, p, q) -> bool:
    """Whether every interior sample of segment pq falls on a mask pixel."""
    pts = segment_samples(p, q)
    if len(pts) == 0:
        return True
    xs, ys = _round(pts[:, 0]), _round(pts[:, 1])
    h, w = mask.shape
    ok = (xs >= 0) & (xs < w) & (ys >= 0) & (ys < h)
    if not ok.all():
        return False
    return bool(mask[ys, xs].all())


class OutsideDistance:
    """Exact distance from points to the nearest shape pixel center."""

    def __init__(self, mask: np.ndarray):
        self.mask = np.asarray(mask, dtype=bool)
        ys, xs = np.nonzero(self.mask)
        self.tree = cKDTree(np.column_stack([xs, ys]).astype(np.float64))

    def beyond(self, xs: np.ndarray, ys: np.ndarray, tol: float) -> np.ndarray:
        """Boolean array: the point lies more than ``tol`` from every shape pixel."""
        xs, ys = np.asarray(xs, dtype=np.float64), np.asarray(ys, dtype=np.float64)
        out = np.zeros(xs.shape, dtype=bool)
        h, w = self.mask.shape
        px, py = np.rint(xs).astype(np.int64), np.rint(ys).astype(np.int64)
        near = (px >= 0) & (px < w) & (py >= 0) & (py < h)
        near[near] = self.mask[py[near], px[near]]
        if tol < math.sqrt(0.5):
            near[:] = False  # a pixel's own cell reaches sqrt(1/2) from its center
        far = ~near
        if far.any():
            d, _ = self.tree.query(np.column_stack([xs[far], ys[far]]),
                                   distance_upper_bound=tol * (1 + 1e-12))
            out[far] = d > tol
        return out


    def covers(self, p, q, tol: float) -> bool:
        """Whether every point of segment pq lies within ``tol`` of a shape pixel.

        Each pixel center covers a closed parameter interval of the segment
        (its disk of radius ``tol`` cut by the line); the union is swept.
        """
        p, q = np.asarray(p, dtype=np.float64), np.asarray(q, dtype=np.float64)
        d = q - p
        l2 = float(d @ d)
        if l2 == 0.0:
            return not self.beyond(p[:1], p[1:], tol)[0]
        idx = self.tree.query_ball_point((p + q) / 2, math.sqrt(l2) / 2 + tol)
        if not idx:
            return False
        rel = self.tree.data[idx] - p
        u = rel @ d / l2
        perp2 = np.einsum("ij,ij->i", rel, rel) - u * u * l2
        ok = perp2 <= tol * tol
        half = np.sqrt((tol * tol - perp2[ok]) / l2)
        lo, hi = u[ok] - half, u[ok] + half
        order = np.argsort(lo, kind="stable")
        reach = 0.0
        for a, b in zip(lo[order], hi[order]):
            if a > reach:
                return False
            reach = max(reach, b)
            if reach >= 1.0:
                return True
        return reach >= 1.0


def chord_exits(outside: OutsideDistance, p, q, tol: float = EXIT_TOL) -> bool:
    """Whether chord pq passes more than ``tol`` outside the shape, exactly."""
    pts = segment_samples(p, q)
    if len(pts) == 0:
        return False
    if outside.beyond(pts[:, 0], pts[:, 1], tol).any():
        return True
    # distance to the shape is 1-Lipschitz along the chord, so samples this
    # close to the shape settle it; otherwise sweep the exact coverage
    if not outside.beyond(pts[:, 0], pts[:, 1], tol - SAMPLE_STEP / 2).any():
        return False
    return not outside.covers(p, q, tol)


def point_segment_distance(u: np.ndarray, a, b) -> np.ndarray:
    u = np.atleast_2d(np.asarray(u, dtype=np.float64))
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    ab = b - a
    denom = float(ab @ ab)
    if denom == 0.0:
        return np.linalg.norm(u - a, axis=1)
    t = np.clip(((u - a) @ ab) / denom, 0.0, 1.0)
    return np.linalg.norm(u - (a + t[:, None] * ab), axis=1)


def shorter_arc(n: int, i: int, j: int) -> np.ndarray:
    """Vertex indices strictly between i and j along the shorter way round.

    Equal-length arcs resolve to the forward arc from min(i, j).
    """
    a, b = min(i, j), max(i, j)
    forward = np.arange(a + 1, b)
    backward = np.concatenate([np.arange(b + 1, n), np.arange(0, a)])
    return forward if len(forward) <= len(backward) else backward


def pair_concavity(poly: BoundaryPolygon, mask: np.ndarray, v1: int, v2: int,
                   outside: OutsideDistance | None = None) -> float:
    """Depth of the boundary arc behind chord v1v2 when the chord leaves the shape."""
    if v1 == v2:
        return 0.0
    verts = poly.vertices.astype(np.float64)
    a, b = verts[v1], verts[v2]
    if outside is None:
        outside = OutsideDistance(mask)
    if not chord_exits(outside, a, b):
        return 0.0
    arc = shorter_arc(len(verts), v1, v2)
    if len(arc) == 0:
        return 0.0
    return float(point_segment_distance(verts[arc], a, b).max())


def all_pair_concavity(poly: BoundaryPolygon, mask: np.ndarray) -> np.ndarray:
    """Symmetric matrix of :func:`pair_concavity` over all vertex pairs."""
    verts = poly.vertices.astype(np.float64)
    n = len(verts)
    out = np.zeros((n, n))
    if n < 3:
        return out
    outside = OutsideDistance(mask)
    idx = np.arange(n)
    for i in range(n - 1):
        js = idx[i + 1:]
        a = verts[i]
        bs = verts[js]
        d = bs - a
        lengths = np.hypot(d[:, 0], d[:, 1])
        n_samp = np.floor(lengths / SAMPLE_STEP).astype(np.int64)
        smax = int(n_samp.max()) if len(n_samp) else 0
        if smax < 1:
            continue
        s = np.arange(1, smax + 1)
        with np.errstate(divide="ignore", invalid="ignore"):
            t = s[None, :] * SAMPLE_STEP / lengths[:, None]
        valid = (s[None, :] <= n_samp[:, None]) & (t < 1.0)
        t = np.where(valid, t, 0.5)
        px = a[0] + t * d[:, 0:1]
        py = a[1] + t * d[:, 1:2]
        exits = np.any(valid & outside.beyond(px, py, EXIT_TOL), axis=1)
        unsure = ~exits & np.any(valid & outside.beyond(px, py, EXIT_TOL - SAMPLE_STEP / 2),
                                 axis=1)
        for jj in np.flatnonzero(unsure):
            exits[jj] = not outside.covers(a, verts[js[jj]], EXIT_TOL)
        for jj in np.flatnonzero(exits):
            j = int(js[jj])
            arc = shorter_arc(n, i, j)
            if len(arc):
                out[i, j] = out[j, i] = float(point_segment_distance(verts[arc], a, verts[j]).max())
    return out


def measure_concavity(component) -> float:
    """Brute-force concavity of a binary shape: max pair concavity over its contour."""
    from .boundary import fill_component, trace_boundary

    mask = fill_component(component)
    poly = trace_boundary(mask)
    if poly.degenerate:
        return 0.0
    return float(all_pair_concavity(poly, mask).max())


def cut_weight(poly: BoundaryPolygon, p: int, q: int, lam: float = 0.1,
               normals: np.ndarray | None = None) -> float:
    """``exp(angle(n_p, pq)) + exp(angle(n_q, qp)) + exp(lam |pq|)``, angles in degrees."""
    verts = poly.vertices.astype(np.float64)
    pq = verts[q] - verts[p]
    length = float(np.hypot(*pq))
    if length == 0.0:
        raise ValueError("zero-length cut")
    if normals is None:
        normals = inward_normals(poly)
    return (math.exp(vector_angle_deg(normals[p], pq))
            + math.exp(vector_angle_deg(normals[q], -pq))
            + math.exp(lam * length))


def vector_angle_deg(u, v) -> float:
    u = np.asarray(u, dtype=np.float64)
    v = np.asarray(v, dtype=np.float64)
    c = float(u @ v) / (np.linalg.norm(u) * np.linalg.norm(v))
    return math.degrees(math.acos(max(-1.0, min(1.0, c))))


def _orient(a, b, c) -> float:
    return (b[0] - a[0]) * (c[1] - a[1]) - (b[1] - a[1]) * (c[0] - a[0])


def segments_cross(p1, p2, q1, q2) -> bool:
    """Proper intersection of open segments; collinear overlap also counts."""
    p1, p2, q1, q2 = (np.asarray(v, dtype=np.float64) for v in (p1, p2, q1, q2))
    d1, d2 = _orient(q1, q2, p1), _orient(q1, q2, p2)
    d3, d4 = _orient(p1, p2, q1), _orient(p1, p2, q2)
    if d1 * d2 < 0 and d3 * d4 < 0:
        return True
    if d1 == d2 == d3 == d4 == 0:
        # collinear: overlap of interiors along the common line
        axis = 0 if abs(p2[0] - p1[0]) >= abs(p2[1] - p1[1]) else 1
        lo1, hi1 = sorted((p1[axis], p2[axis]))
        lo2, hi2 = sorted((q1[axis], q2[axis]))
        return min(hi1, hi2) > max(lo1, lo2)
    return False


def splits(cut: tuple[int, int], pair: tuple[int, int]) -> bool:
    """Cut endpoints separate the pair's endpoints in cyclic boundary order.

    A cut sharing an endpoint with the pair does not count as splitting it.
    """
    i, j = sorted(pair)
    p, q = cut
    if p in (i, j) or q in (i, j):
        return False
    return (i < p < j) != (i < q < j)


def enumerate_cuts_and_mutex(poly: BoundaryPolygon, mask: np.ndarray, concave,
                             psi: float = 3.0, lam: float = 0.1,
                             concavity: np.ndarray | None = None):
    """Candidate cuts, thinned mutex pairs and the selection problem.

    Mutex pairs that every cut treats alike (identical rows of the split
    relation) are interchangeable as constraints; only the deepest pair of
    each such class is kept.
    """
    if not psi > 0:
        raise ValueError("psi must be > 0")
    verts = poly.vertices.astype(np.float64)
    concave = sorted(int(c) for c in concave)
    normals = inward_normals(poly)
    cuts: list[Cut] = []
    for a_i, p in enumerate(concave):
        for q in concave[a_i + 1:]:
            if np.allclose(verts[p], verts[q]):
                continue
            if segment_inside(mask, verts[p], verts[q]):
                cuts.append(Cut(p, q, cut_weight(poly, p, q, lam, normals)))

    if concavity is None:
        concavity = all_pair_concavity(poly, mask)
    ii, jj = np.nonzero(np.triu(concavity > psi, k=1))
    groups: dict[tuple, tuple[float, int, int]] = {}
    for i, j in zip(ii.tolist(), jj.tolist()):
        key = tuple(splits((c.p_index, c.q_index), (i, j)) for c in cuts)
        depth = float(concavity[i, j])
        best = groups.get(key)
        if best is None or depth > best[0]:
            groups[key] = (depth, i, j)
    mutex = sorted((i, j) for _, i, j in groups.values())

    N = len(cuts)
    A = np.zeros((N, len(mutex)), dtype=np.uint8)
    for c_i, c in enumerate(cuts):
        for m_i, pair in enumerate(mutex):
            A[c_i, m_i] = splits((c.p_index, c.q_index), pair)
    B = np.zeros((N, N), dtype=np.uint8)
    for a in range(N):
        for b in range(a + 1, N):
            ca, cb = cuts[a], cuts[b]
            if segments_cross(verts[ca.p_index], verts[ca.q_index],
                              verts[cb.p_index], verts[cb.q_index]):
                B[a, b] = B[b, a] = 1
    problem = CutSelectionProblem(A, B, np.array([c.weight for c in cuts]), psi)
    return cuts, mutex, problem
