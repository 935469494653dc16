"""End-to-end acceptance suite, criteria 1-8.

Each test records one PASS/FAIL line (repeated in the terminal summary) and
then asserts. The detection and segmentation fixture trains a full-size
model on 200 synthetic images, so this module takes several minutes.
"""

import math
import os
import time

import numpy as np
import pytest
from scipy import ndimage
from scipy.optimize import linear_sum_assignment
from scipy.spatial import cKDTree

from nucleo.annotations import from_ground_truth
from nucleo.decomposition import (InfeasibleCutSelection, decompose, selection_cost,
                                  solve_cut_selection, trace_boundary)
from nucleo.detection import apply_prior, detect, peaks_to_detections, rotated_likelihood
from nucleo.features import convolve_extract
from nucleo.metrics import aji, best_f1, dsc, match_points, pr_curve, pr_curve_multi
from nucleo.model import dumps, load_model
from nucleo.segmentation import candidate_prior, segment_features
from nucleo.synth import SynthConfig, generate
from nucleo.training import TrainConfig, train
from nucleo.vmf import learn_vmf_kernels

from test_cli import pipeline
from test_decomposition import arc_depth_oracle, exhaustive, random_problem
from test_vmf import sample_vmf

RESULTS: dict[int, str] = {}

PSI = 3.0
EXIT_DISTANCE = 1.0
N_TRAIN, N_TEST = 200, 50


def record(n: int, ok: bool, detail: str) -> None:
    line = f"criterion {n}: {'PASS' if ok else 'FAIL'}  {detail}"
    RESULTS[n] = line
    print(line)
    assert ok, line


def oracle_concavity(shape: np.ndarray) -> float:
    """All-pairs concavity with exact point-to-pixel distances and a scalar arc scan."""
    mask = ndimage.binary_fill_holes(shape)
    verts = trace_boundary(mask).vertices.astype(float)
    n = len(verts)
    if n < 3:
        return 0.0
    ys, xs = np.nonzero(mask)
    tree = cKDTree(np.column_stack([xs, ys]))
    h, w = mask.shape
    best = 0.0
    for i in range(n - 1):
        for j in range(i + 1, n):
            a, b = verts[i], verts[j]
            steps = int(np.hypot(*(b - a)) / 0.25)
            if steps < 2:
                continue
            t = np.arange(1, steps) / steps
            pts = a + t[:, None] * (b - a)
            px, py = np.rint(pts[:, 0]).astype(int), np.rint(pts[:, 1]).astype(int)
            inside = (px >= 0) & (px < w) & (py >= 0) & (py < h)
            inside[inside] = mask[py[inside], px[inside]]
            if inside.all():
                continue  # every sample sits in a shape pixel, so within 0.71 px of one
            d, _ = tree.query(pts[~inside], distance_upper_bound=EXIT_DISTANCE + 1e-9)
            if np.any(d > EXIT_DISTANCE):
                best = max(best, arc_depth_oracle(verts, i, j))
    return best


# 1. cut-selection solver vs enumeration ----------------------------------------

def solve_or_none(problem):
    try:
        return solve_cut_selection(problem)
    except InfeasibleCutSelection:
        return None


def test_criterion_1_solver_matches_enumeration():
    rng = np.random.default_rng(2024)
    problems = [random_problem(rng) for _ in range(200)]
    t0 = time.perf_counter()
    solutions = [solve_or_none(p) for p in problems]
    elapsed = time.perf_counter() - t0
    bad = infeasible = 0
    for p, x in zip(problems, solutions):
        ref = exhaustive(p)
        if ref is None or x is None:
            infeasible += ref is None
            bad += (ref is None) != (x is None)
        elif tuple(int(v) for v in x) != ref[1] or selection_cost(p.w, x) != ref[0]:
            bad += 1
    record(1, bad == 0 and elapsed < 10.0,
           f"{200 - bad}/200 agree with enumeration ({infeasible} infeasible, both sides); "
           f"solver time {elapsed:.2f}s (limit 10s)")


# 2. decomposition postconditions ------------------------------------------------

def random_blob(rng, size=80) -> np.ndarray:
    """Union of 1-4 ellipses, each later one centered inside the union so far."""
    yy, xx = np.mgrid[0:size, 0:size]
    mask = np.zeros((size, size), bool)
    for k in range(int(rng.integers(1, 5))):
        if k == 0:
            cx, cy = size / 2 + rng.uniform(-5, 5, 2)
        else:
            ys, xs = np.nonzero(mask)
            pick = rng.integers(len(xs))
            cx, cy = float(xs[pick]), float(ys[pick])
        a, b = rng.uniform(6, 14), rng.uniform(4, 9)
        t = rng.uniform(0, math.pi)
        u = (xx - cx) * math.cos(t) + (yy - cy) * math.sin(t)
        v = -(xx - cx) * math.sin(t) + (yy - cy) * math.cos(t)
        mask |= (u / a) ** 2 + (v / b) ** 2 <= 1.0
    return mask


def test_criterion_2_decomposition_postconditions():
    rng = np.random.default_rng(7)
    blobs = [random_blob(rng) for _ in range(100)]
    t0 = time.perf_counter()
    results = [decompose(b, psi=PSI) for b in blobs]
    elapsed = time.perf_counter() - t0
    partition_errors = concavity_errors = reported = 0
    worst = 0.0
    for blob, res in zip(blobs, results):
        filled = ndimage.binary_fill_holes(blob)
        stack = np.stack(res.parts).astype(int)
        if not (np.array_equal(stack.sum(0) > 0, filled) and stack.sum(0).max() == 1):
            partition_errors += 1
        if res.warning is not None:
            reported += 1
            continue
        for part in res.parts:
            c = oracle_concavity(part)
            worst = max(worst, c)
            if c > PSI + 0.5:
                concavity_errors += 1
    ok = partition_errors == 0 and concavity_errors == 0 and elapsed < 30.0
    record(2, ok, f"partition errors {partition_errors}, parts over psi+0.5 {concavity_errors} "
                  f"(worst {worst:.2f}), reported infeasible {reported}; "
                  f"decompose time {elapsed:.2f}s (limit 30s)")


# 3. vMF learning ----------------------------------------------------------------

def test_criterion_3_vmf_learning():
    drops = 0
    for seed in range(20):
        rng = np.random.default_rng(seed)
        X = rng.normal(size=(200, 8))
        X /= np.linalg.norm(X, axis=1, keepdims=True)
        _, hist = learn_vmf_kernels(X, K=1 + seed % 5, sigma=30.0, seed=seed, return_history=True)
        drops += int(np.any(np.diff(hist) < -1e-9))
    rng = np.random.default_rng(2024)
    means = np.linalg.qr(rng.normal(size=(8, 3)))[0].T
    X = np.concatenate([sample_vmf(m, 50.0, 500, rng) for m in means])
    bank, hist = learn_vmf_kernels(X, K=3, sigma=30.0, seed=0, return_history=True)
    drops += int(np.any(np.diff(hist) < -1e-9))
    cos = means @ bank.kernels.T
    rows, cols = linear_sum_assignment(-cos)
    worst = float(cos[rows, cols].min())
    again = learn_vmf_kernels(X, K=3, sigma=30.0, seed=0)
    same = again.kernels.tobytes() == bank.kernels.tobytes()
    record(3, drops == 0 and worst >= 0.98 and same,
           f"log-likelihood decreases in {drops}/21 runs; worst matched cosine {worst:.4f}; "
           f"seed rerun bit-exact {same}")


# 4. metric hand cases -----------------------------------------------------------

def test_criterion_4_metric_cases():
    def square(x0, label=1, out=None):
        out = np.zeros((30, 30), int) if out is None else out
        out[5:15, x0:x0 + 10] = label
        return out

    gt = square(5)
    checks = [aji(gt, gt) == 1.0, dsc(gt, gt) == 1.0,
              aji(gt, square(18)) == 0.0, dsc(gt, square(18)) == 0.0,
              round(aji(gt, square(10)), 4) == 0.3333, dsc(gt, square(10)) == 0.5]
    points = np.array([[10.0, 10.0], [30.0, 10.0], [50.0, 10.0], [70.0, 10.0], [90.0, 10.0]])
    pred = np.array([[10.5, 10.0], [30.0, 11.0], [50.0, 8.0], [70.0, 20.0], [200.0, 200.0]])
    curve = pr_curve(pred, [0.9, 0.8, 0.7, 0.6, 0.5], points)
    expected = [(0.9, 1.0, 0.2), (0.8, 1.0, 0.4), (0.7, 1.0, 0.6), (0.6, 0.75, 0.6), (0.5, 0.6, 0.6)]
    checks.append(len(curve) == 5 and all(
        all(abs(u - v) < 1e-12 for u, v in zip(got, want)) for got, want in zip(curve, expected)))
    record(4, all(checks), f"{sum(checks)}/{len(checks)} hand cases reproduced")


# 5-7. synthetic end to end -------------------------------------------------------

def pair_split(labels: np.ndarray, a: np.ndarray, b: np.ndarray) -> bool:
    """Both nuclei's best-overlapping predicted instances exist and differ."""
    picks = []
    for m in (a, b):
        hits = labels[m & (labels > 0)]
        if len(hits) == 0:
            return False
        picks.append(int(np.argmax(np.bincount(hits))))
    return picks[0] != picks[1]


@pytest.fixture(scope="module")
def synthetic():
    images, anns = [], []
    for s in range(N_TRAIN):
        im, gt = generate(SynthConfig(seed=s))
        images.append(im)
        anns.append(from_ground_truth(f"train_{s}.png", gt))
    n_isolated = sum(len(a.isolated()) for a in anns)
    model = train(images, anns, TrainConfig())
    del images

    out = {"model": model, "n_isolated": n_isolated, "plain": [], "prior": [],
           "aji": [], "dsc": [], "pairs": 0, "split": 0, "timing_images": []}
    radius = model.filters.kernel_size // 2
    for i in range(N_TEST):
        image, gt = generate(SynthConfig(seed=10_000 + i, touching_prob=0.3))
        if i < 3:
            out["timing_images"].append(image)
        lmap = rotated_likelihood(image, model)
        plain = peaks_to_detections(lmap, -np.inf, model.nms_radius)
        labels, cands = segment_features(convolve_extract(image, model.filters), model.kernels,
                                         model.psi, model.lam, support_radius=radius)
        q = candidate_prior(cands, model.prior_variance, image.shape, model.prior_floor)
        boosted = peaks_to_detections(apply_prior(lmap, q), -np.inf, model.nms_radius)
        out["plain"].append((plain.points, plain.scores, gt.centers))
        out["prior"].append((boosted.points, boosted.scores, gt.centers))
        out["aji"].append(aji(gt.masks, labels))
        out["dsc"].append(dsc(gt.masks > 0, labels > 0))
        for a, b in gt.pairs:
            ma, mb = gt.masks == a + 1, gt.masks == b + 1
            if oracle_concavity(ma | mb) > PSI:
                out["pairs"] += 1
                out["split"] += pair_split(labels, ma, mb)
    return out


def false_positives(items, threshold: float) -> int:
    fp = 0
    for pts, scores, gt in items:
        keep = scores >= threshold
        fp += match_points(pts[keep], gt, 3.0, scores[keep]).false_positives
    return fp


def test_criterion_5_detection(synthetic):
    f1, _, p, r = best_f1(pr_curve_multi(synthetic["plain"]))
    model = synthetic["model"]
    threads = os.cpu_count() or 1
    times = []
    for image in synthetic["timing_images"]:
        t0 = time.perf_counter()
        detect(image, model, threads=threads)
        times.append(time.perf_counter() - t0)
    slowest = max(times)
    ok = synthetic["n_isolated"] >= 1000 and f1 >= 0.85 and slowest < 5.0
    record(5, ok, f"{synthetic['n_isolated']} isolated training nuclei; best F1 {f1:.4f} "
                  f"(P {p:.3f}, R {r:.3f}, need 0.85); detect {slowest:.2f}s per 256x256 "
                  f"image on {threads} core(s) (limit 5s)")


def test_criterion_6_segmentation(synthetic):
    mean_dsc, mean_aji = float(np.mean(synthetic["dsc"])), float(np.mean(synthetic["aji"]))
    pairs, split = synthetic["pairs"], synthetic["split"]
    rate = split / pairs if pairs else 0.0
    ok = mean_dsc >= 0.80 and mean_aji >= 0.55 and pairs > 0 and rate >= 0.80
    record(6, ok, f"DSC {mean_dsc:.4f} (need 0.80), AJI {mean_aji:.4f} (need 0.55), "
                  f"deep-neck pairs split {split}/{pairs} = {rate:.1%} (need 80%)")


def test_criterion_7_prior(synthetic):
    f1, threshold, _, _ = best_f1(pr_curve_multi(synthetic["plain"]))
    f1_prior = best_f1(pr_curve_multi(synthetic["prior"]))[0]
    fp = false_positives(synthetic["plain"], threshold)
    fp_prior = false_positives(synthetic["prior"], threshold)
    ok = f1 - f1_prior <= 0.02 and fp_prior < fp
    record(7, ok, f"best F1 {f1:.4f} -> {f1_prior:.4f} with prior (max drop 0.02); "
                  f"FP at threshold {threshold:.3f}: {fp} -> {fp_prior}")


# 8. reproducibility --------------------------------------------------------------

def test_criterion_8_reproducibility(tmp_path):
    a, b = pipeline(tmp_path / "a"), pipeline(tmp_path / "b")
    files = sorted(p.relative_to(a) for p in a.rglob("*") if p.is_file())
    same_names = files == sorted(p.relative_to(b) for p in b.rglob("*") if p.is_file())
    differing = [str(f) for f in files if (a / f).read_bytes() != (b / f).read_bytes()]
    text = (a / "model.nuc").read_text()
    model = load_model(a / "model.nuc")
    round_trip = dumps(model) == text
    ok = same_names and not differing and round_trip
    record(8, ok, f"{len(files)} CLI output files, {len(differing)} differ between runs; "
                  f"model text round trip exact {round_trip}")
