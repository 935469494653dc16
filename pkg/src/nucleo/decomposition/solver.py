"""Exact branch-and-bound for the cut-selection integer program.

    min w.x  s.t.  A^T x >= 1,  x^T B x = 0,  x in {0, 1}^N
"""

from __future__ import annotations

import math

import numpy as np

from .cuts import CutSelectionProblem

MAX_CUTS = 64
_BOUND_SLACK = 1e-12


class InfeasibleCutSelection(ValueError):
    """No set of non-crossing cuts splits every mutex pair."""


class CutCapacityError(ValueError):
    """More candidate cuts than the exact solver accepts."""


def selection_cost(w, x) -> float:
    w = np.asarray(w, dtype=np.float64)
    return math.fsum(w[np.asarray(x, dtype=bool)].tolist())


def _better(cost, x, best_cost, best_x) -> bool:
    if best_x is None or cost < best_cost:
        return True
    return cost == best_cost and x < best_x


def solve_cut_selection(problem: CutSelectionProblem) -> np.ndarray:
    """Exact optimum as a 0/1 vector; equal-cost optima resolve to the lexicographically smallest.

    Depth-first over cuts in ascending weight, include-branch first. A node
    is pruned when a still-uncovered pair has no usable splitter, or when
    its cost plus a disjoint-pair packing bound exceeds the incumbent.
    """
    N, Mm = problem.n_cuts, problem.n_mutex
    if N > MAX_CUTS:
        raise CutCapacityError(f"{N} candidate cuts exceed the exact-solver limit of {MAX_CUTS}")
    if Mm == 0:
        return np.zeros(N, dtype=np.int64)
    if not problem.feasible_columns:
        raise InfeasibleCutSelection("a mutex pair is split by no candidate cut")

    w = problem.w
    order = sorted(range(N), key=lambda c: (w[c], c))
    rank = {c: r for r, c in enumerate(order)}
    split_bits = [0] * N
    for c in range(N):
        for j in np.flatnonzero(problem.A[c]):
            split_bits[c] |= 1 << int(j)
    conflict_bits = [0] * N
    for c in range(N):
        for d in np.flatnonzero(problem.B[c]):
            conflict_bits[c] |= 1 << int(d)
    splitters = [[c for c in order if problem.A[c, j]] for j in range(Mm)]
    full = (1 << Mm) - 1

    best = {"cost": math.inf, "x": None}

    def bound(k, forbidden, covered):
        """Admissible remaining-cost bound, or None when some pair is unsplittable."""
        cheapest = []
        for j in range(Mm):
            if covered >> j & 1:
                continue
            avail = [c for c in splitters[j] if rank[c] >= k and not forbidden >> c & 1]
            if not avail:
                return None
            cheapest.append((w[avail[0]], j, avail))
        cheapest.sort(key=lambda t: (-t[0], t[1]))
        used = 0
        total = 0.0
        for cost, _, avail in cheapest:
            bits = 0
            for c in avail:
                bits |= 1 << c
            if bits & used:
                continue
            used |= bits
            total += cost
        return total

    def visit(k, chosen, covered, forbidden, cost):
        if covered == full:
            x = tuple((chosen >> c) & 1 for c in range(N))
            exact = math.fsum(w[c] for c in range(N) if x[c])
            if _better(exact, x, best["cost"], best["x"]):
                best["cost"], best["x"] = exact, x
            return
        if k == N:
            return
        lb = bound(k, forbidden, covered)
        if lb is None:
            return
        if best["x"] is not None and cost + lb > best["cost"] * (1.0 + _BOUND_SLACK):
            return
        c = order[k]
        useful = not (forbidden >> c & 1) and (split_bits[c] & ~covered)
        if useful:
            visit(k + 1, chosen | 1 << c, covered | split_bits[c],
                  forbidden | conflict_bits[c], cost + w[c])
        visit(k + 1, chosen, covered, forbidden, cost)

    visit(0, 0, 0, 0, 0.0)
    if best["x"] is None:
        raise InfeasibleCutSelection("every covering cut set contains crossing cuts")
    return np.array(best["x"], dtype=np.int64)
