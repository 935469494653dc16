"""``nucleo`` command line: synth, train, detect, segment, eval, plot.

Exit codes: 0 success, 1 runtime failure, 2 usage or validation error.
Logs go to standard error; results go to files only.
"""

from __future__ import annotations

import argparse
import logging
import sys
from dataclasses import replace
from pathlib import Path

import numpy as np

from . import __version__
from .annotations import Annotation, from_ground_truth
from .detection import DetectionSet, detect
from .diagnostics import (export_activations, export_decompositions, export_foreground_masks,
                          label_overlay)
from .features import convolve_extract
from .imaging import load_image, load_labels, save_image, save_labels
from .metrics import aji, best_f1, dsc, pr_curve_multi
from .model import DEFAULT_ROTATIONS, ModelFormatError, load_model, save_model
from .parallel import ordered_map
from .segmentation import (MIN_AREA, candidate_prior, foreground_score_map, segment_features,
                           threshold_components)
from .synth import SynthConfig, generate
from .training import InsufficientDataError, TrainConfig, calibrate_threshold, train

log = logging.getLogger("nucleo")

IMAGE_SUFFIXES = (".png", ".tif", ".tiff")


class UsageError(Exception):
    """Bad input files or arguments; exit code 2."""


def _float_list(text: str) -> tuple[float, ...]:
    try:
        return tuple(float(t) for t in text.split(",") if t.strip())
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected comma-separated numbers, got {text!r}")


def _int_pair(text: str) -> tuple[int, int]:
    parts = text.split(",")
    if len(parts) != 2:
        raise argparse.ArgumentTypeError(f"expected LO,HI, got {text!r}")
    try:
        return int(parts[0]), int(parts[1])
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected integers, got {text!r}")


def _threshold_mode(text: str):
    if text == "otsu":
        return text
    try:
        return float(text)
    except ValueError:
        raise argparse.ArgumentTypeError("threshold must be 'otsu' or a number")


def _image_paths(path: Path) -> list[Path]:
    if not path.exists():
        raise UsageError(f"no such file or directory: {path}")
    if path.is_file():
        return [path]
    files = sorted(p for p in path.iterdir() if p.suffix.lower() in IMAGE_SUFFIXES)
    if not files:
        raise UsageError(f"no images in {path}")
    return files


def _load_model(path: Path):
    if not path.is_file():
        raise UsageError(f"model file not found: {path}")
    try:
        return load_model(path)
    except ModelFormatError as exc:
        raise UsageError(str(exc)) from exc


def _image_seed(seed: int, index: int) -> int:
    return int(np.random.SeedSequence([seed, index]).generate_state(1, dtype=np.uint64)[0])


# synth ---------------------------------------------------------------------

def cmd_synth(args) -> None:
    out = Path(args.out)
    for sub in ("images", "annotations", "masks"):
        (out / sub).mkdir(parents=True, exist_ok=True)
    for i in range(args.n):
        cfg = SynthConfig(height=args.size, width=args.size, count=args.count,
                          touching_prob=args.touching_prob, seed=_image_seed(args.seed, i))
        image, gt = generate(cfg)
        name = f"img_{i:04d}"
        save_image(out / "images" / f"{name}.png", image)
        save_labels(out / "masks" / f"{name}.png", gt.masks)
        from_ground_truth(f"{name}.png", gt, f"../masks/{name}.png").save(
            out / "annotations" / f"{name}.json")
    log.info("wrote %d images to %s", args.n, out)


# train ---------------------------------------------------------------------

def _load_training_set(images_dir: Path, ann_dir: Path):
    if not ann_dir.is_dir():
        raise UsageError(f"annotation directory not found: {ann_dir}")
    images, anns = [], []
    for p in _image_paths(images_dir):
        ap = ann_dir / f"{p.stem}.json"
        if not ap.is_file():
            log.warning("no annotation for %s; skipped", p.name)
            continue
        images.append(load_image(p))
        try:
            anns.append(Annotation.load(ap))
        except ValueError as exc:
            raise UsageError(f"{ap}: {exc}") from exc
    if not images:
        raise UsageError("no annotated images")
    return images, anns


def cmd_train(args) -> None:
    images, anns = _load_training_set(Path(args.images), Path(args.annotations))
    n_val = int(round(len(images) * args.validation_fraction))
    if n_val >= len(images):
        raise UsageError("validation split leaves no training images")
    train_imgs, train_anns = images[:len(images) - n_val], anns[:len(anns) - n_val]
    cfg = TrainConfig(num_filters=args.filters, kernel_size=args.kernel_size,
                      n_patches=args.patches, n_kernels=args.kernels, sigma=args.sigma,
                      max_vmf_samples=args.max_samples, n_mixtures=args.mixtures,
                      patch_size=args.patch, em_iters=args.em_iters,
                      rotations=args.rotations, nms_radius=args.nms_radius, psi=args.psi,
                      lam=args.lam, prior_variance=args.prior_variance,
                      prior_floor=args.prior_floor, match_radius=args.radius, seed=args.seed)
    try:
        model = train(train_imgs, train_anns, cfg)
    except InsufficientDataError as exc:
        raise UsageError(str(exc)) from exc
    if n_val:
        threshold, f1 = calibrate_threshold(model, images[-n_val:],
                                            [a.centers for a in anns[-n_val:]], args.radius)
        log.info("calibrated threshold %.6f (validation F1 %.4f)", threshold, f1)
        model = replace(model, score_threshold=threshold)
    save_model(model, args.out)
    print(f"parameters: {model.n_parameters}", file=sys.stderr)
    if args.diagnostics:
        export_foreground_masks(model, args.diagnostics)


# detect / segment ------------------------------------------------------------

def _prior_for(image, model):
    fm = convolve_extract(image, model.filters)
    _, cands = segment_features(fm, model.kernels, model.psi, model.lam,
                                support_radius=model.filters.kernel_size // 2)
    return candidate_prior(cands, model.prior_variance, image.shape, model.prior_floor)


def cmd_detect(args) -> None:
    model = _load_model(Path(args.model))
    paths = _image_paths(Path(args.images))
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    threshold = model.score_threshold if args.threshold is None else args.threshold
    rotations = model.rotations if args.rotations is None else args.rotations
    radius = model.nms_radius if args.nms_radius is None else args.nms_radius

    def run(p: Path) -> DetectionSet:
        image = load_image(p)
        prior = _prior_for(image, model) if args.prior else None
        if args.activations:
            export_activations(model, image, Path(args.activations) / p.stem)
        # one thread per image; rotations stay sequential inside
        return detect(image, model, prior, rotations, radius, threshold, threads=1,
                      image_id=p.name)

    for p, dets in zip(paths, ordered_map(run, paths, args.threads)):
        dets.save(out / f"{p.stem}.tsv")
    log.info("wrote %d detection tables to %s", len(paths), out)


def cmd_segment(args) -> None:
    model = _load_model(Path(args.model))
    paths = _image_paths(Path(args.images))
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    psi = model.psi if args.psi is None else args.psi
    lam = model.lam if args.lam is None else args.lam

    radius = model.filters.kernel_size // 2

    def run(p: Path):
        image = load_image(p)
        fm = convolve_extract(image, model.filters)
        labels, _ = segment_features(fm, model.kernels, psi, lam, args.threshold, args.min_area,
                                     radius)
        if args.decomposition:
            comps = threshold_components(foreground_score_map(fm, model.kernels),
                                         args.threshold, args.min_area, radius)
            export_decompositions(comps, args.decomposition, p.stem, psi, lam)
        return image, labels

    for p, (image, labels) in zip(paths, ordered_map(run, paths, args.threads)):
        save_labels(out / f"{p.stem}.png", labels)
        if args.overlay:
            save_image(out / f"{p.stem}_overlay.png", label_overlay(image, labels))


# eval / plot -------------------------------------------------------------------

def _write_report(path: Path, fields: list[tuple[str, object]]) -> None:
    lines = []
    for k, v in fields:
        lines.append(f"{k} = {v:.6f}" if isinstance(v, float) else f"{k} = {v}")
    path.write_text("\n".join(lines) + "\n", encoding="utf-8")


def _write_pr_table(path: Path, curve) -> None:
    rows = ["threshold\tprecision\trecall"]
    rows += [f"{t:.6f}\t{p:.6f}\t{r:.6f}" for t, p, r in curve]
    path.write_text("\n".join(rows) + "\n", encoding="utf-8")


def _read_pr_table(path: Path):
    lines = path.read_text(encoding="utf-8").splitlines()
    if not lines or lines[0].split() != ["threshold", "precision", "recall"]:
        raise UsageError(f"{path} is not a P-R table")
    return [tuple(float(v) for v in ln.split()) for ln in lines[1:] if ln.strip()]


def cmd_eval(args) -> None:
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    pred_dir = Path(args.pred)
    if not pred_dir.is_dir():
        raise UsageError(f"prediction directory not found: {pred_dir}")
    if args.mode == "detection":
        ann_dir = Path(args.annotations or "")
        if not args.annotations or not ann_dir.is_dir():
            raise UsageError("--annotations directory is required for detection mode")
        items = []
        for tp in sorted(pred_dir.glob("*.tsv")):
            ap = ann_dir / f"{tp.stem}.json"
            if not ap.is_file():
                raise UsageError(f"no annotation for {tp.name}")
            dets = DetectionSet.load(tp)
            items.append((dets.points, dets.scores, Annotation.load(ap).centers))
        if not items:
            raise UsageError(f"no detection tables in {pred_dir}")
        curve = pr_curve_multi(items, args.radius)
        f1, threshold, precision, recall = best_f1(curve)
        _write_pr_table(out / "pr.tsv", curve)
        _write_report(out / "metrics.txt", [
            ("mode", "detection"), ("images", len(items)),
            ("ground_truth", sum(len(g) for _, _, g in items)),
            ("predictions", sum(len(p) for p, _, _ in items)),
            ("radius", float(args.radius)), ("best_f1_threshold", float(threshold)),
            ("precision", float(precision)), ("recall", float(recall)), ("f1", float(f1))])
    else:
        gt_dir = Path(args.gt or "")
        if not args.gt or not gt_dir.is_dir():
            raise UsageError("--gt directory of label maps is required for segmentation mode")
        ajis, dscs, rows = [], [], []
        for pp in sorted(pred_dir.glob("*.png")):
            if pp.stem.endswith("_overlay"):
                continue
            gp = gt_dir / pp.name
            if not gp.is_file():
                raise UsageError(f"no ground-truth mask for {pp.name}")
            pred, gt = load_labels(pp), load_labels(gp)
            if pred.shape != gt.shape:
                raise UsageError(f"shape mismatch for {pp.name}")
            ajis.append(aji(gt, pred))
            dscs.append(dsc(gt, pred))
            rows.append((f"aji[{pp.stem}]", ajis[-1]))
            rows.append((f"dsc[{pp.stem}]", dscs[-1]))
        if not ajis:
            raise UsageError(f"no label maps in {pred_dir}")
        _write_report(out / "metrics.txt", [
            ("mode", "segmentation"), ("images", len(ajis)),
            ("AJI", float(np.mean(ajis))), ("DSC", float(np.mean(dscs)))] + rows)


def resample_pr(curve, points: int = 101) -> list[tuple[float, float]]:
    """Interpolated precision (best precision at recall >= r) on an even recall grid."""
    grid = np.linspace(0.0, 1.0, points)
    prec = np.array([p for _, p, _ in curve])
    rec = np.array([r for _, _, r in curve])
    out = []
    for r in grid:
        ok = rec >= r - 1e-12
        out.append((float(r), float(prec[ok].max()) if ok.any() else 0.0))
    return out


def cmd_plot(args) -> None:
    if args.model:
        model = _load_model(Path(args.model))
        out = Path(args.out)
        export_foreground_masks(model, out)
        if args.image:
            export_activations(model, load_image(args.image), out)
        return
    if not args.pr:
        raise UsageError("plot needs --pr TABLE or --model MODEL")
    pr_path = Path(args.pr)
    if not pr_path.is_file():
        raise UsageError(f"P-R table not found: {pr_path}")
    curve = _read_pr_table(pr_path)
    if not curve:
        raise UsageError("empty P-R table")
    out = Path(args.out)
    table = resample_pr(curve)
    rows = ["recall\tprecision"] + [f"{r:.2f}\t{p:.6f}" for r, p in table]
    out.with_suffix(".tsv").write_text("\n".join(rows) + "\n", encoding="utf-8")

    import matplotlib
    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    fig, ax = plt.subplots(figsize=(4, 4), dpi=100)
    ax.plot([r for _, _, r in curve], [p for _, p, _ in curve], lw=1.5)
    ax.set_xlabel("recall")
    ax.set_ylabel("precision")
    ax.set_xlim(0, 1)
    ax.set_ylim(0, 1.02)
    ax.grid(alpha=0.3)
    fig.tight_layout()
    fig.savefig(out.with_suffix(".png"), metadata={"Software": None})
    plt.close(fig)


# parser ------------------------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="nucleo", description=__doc__.splitlines()[0])
    ap.add_argument("--version", action="version", version=__version__)
    ap.add_argument("-v", "--verbose", action="count", default=0)
    ap.add_argument("--threads", type=int, default=None,
                    help="worker threads (default: NUCLEO_THREADS or CPU count)")
    sub = ap.add_subparsers(dest="command", required=True)

    p = sub.add_parser("synth", help="generate a synthetic dataset")
    p.add_argument("--out", required=True)
    p.add_argument("--n", type=int, default=10)
    p.add_argument("--size", type=int, default=256)
    p.add_argument("--count", type=_int_pair, default=(8, 14))
    p.add_argument("--touching-prob", type=float, default=0.2)
    p.add_argument("--seed", type=int, default=0)
    p.set_defaults(func=cmd_synth)

    p = sub.add_parser("train", help="train a model")
    p.add_argument("--images", required=True)
    p.add_argument("--annotations", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--filters", type=int, default=32)
    p.add_argument("--kernel-size", type=int, default=3)
    p.add_argument("--patches", type=int, default=50_000)
    p.add_argument("--kernels", type=int, default=12)
    p.add_argument("--sigma", type=float, default=30.0)
    p.add_argument("--max-samples", type=int, default=500_000)
    p.add_argument("--mixtures", type=int, default=20)
    p.add_argument("--patch", type=int, default=27)
    p.add_argument("--em-iters", type=int, default=3)
    p.add_argument("--psi", type=float, default=3.0)
    p.add_argument("--lambda", dest="lam", type=float, default=0.1)
    p.add_argument("--prior-variance", type=float, default=10.0)
    p.add_argument("--prior-floor", type=float, default=0.05)
    p.add_argument("--rotations", type=_float_list, default=DEFAULT_ROTATIONS)
    p.add_argument("--nms-radius", type=float, default=6.0)
    p.add_argument("--radius", type=float, default=3.0, help="match radius for calibration")
    p.add_argument("--validation-fraction", type=float, default=0.0)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--diagnostics", default=None, help="directory for foreground-mask PNGs")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("detect", help="detect nuclei")
    p.add_argument("--model", required=True)
    p.add_argument("--images", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--threshold", type=float, default=None)
    p.add_argument("--rotations", type=_float_list, default=None)
    p.add_argument("--nms-radius", type=float, default=None)
    p.add_argument("--prior", action="store_true", help="multiply in the candidate prior")
    p.add_argument("--activations", default=None, help="directory for kernel activation PNGs")
    p.set_defaults(func=cmd_detect)

    p = sub.add_parser("segment", help="instance segmentation")
    p.add_argument("--model", required=True)
    p.add_argument("--images", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--psi", type=float, default=None)
    p.add_argument("--lambda", dest="lam", type=float, default=None)
    p.add_argument("--threshold", type=_threshold_mode, default="otsu")
    p.add_argument("--min-area", type=int, default=MIN_AREA)
    p.add_argument("--overlay", action="store_true")
    p.add_argument("--decomposition", default=None,
                   help="directory for per-component cut overlays")
    p.set_defaults(func=cmd_segment)

    p = sub.add_parser("eval", help="score predictions")
    p.add_argument("--mode", choices=("detection", "segmentation"), default="detection")
    p.add_argument("--pred", required=True)
    p.add_argument("--annotations", default=None)
    p.add_argument("--gt", default=None)
    p.add_argument("--out", required=True)
    p.add_argument("--radius", type=float, default=3.0)
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("plot", help="render a P-R table or model diagnostics")
    p.add_argument("--pr", default=None)
    p.add_argument("--model", default=None)
    p.add_argument("--image", default=None)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_plot)
    return ap


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.WARNING - 10 * min(args.verbose, 2),
                        format="%(levelname)s %(name)s: %(message)s", stream=sys.stderr)
    if args.threads is not None and args.threads < 1:
        parser.error("--threads must be >= 1")
    try:
        args.func(args)
    except UsageError as exc:
        print(f"nucleo: error: {exc}", file=sys.stderr)
        return 2
    except Exception as exc:  # noqa: BLE001 - reported as a runtime failure
        log.debug("failure", exc_info=True)
        print(f"nucleo: failed: {exc}", file=sys.stderr)
        return 1
    return 0


if __name__ == "__main__":
    sys.exit(main())
