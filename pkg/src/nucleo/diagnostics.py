"""Image exports for inspecting a trained model and its outputs."""

from __future__ import annotations

from pathlib import Path

import numpy as np
from PIL import Image, ImageDraw
from scipy import ndimage

from .decomposition import DecomposedParts, decompose
from .features import convolve_extract
from .imaging import save_image
from .vmf import activation_maps


def _unit_range(a: np.ndarray) -> np.ndarray:
    lo, hi = float(a.min()), float(a.max())
    if hi <= lo:
        return np.zeros(a.shape)
    return (a - lo) / (hi - lo)


def export_foreground_masks(model, out_dir) -> list[Path]:
    """One 8-bit PNG per mixture component: its average foreground mask."""
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    paths = []
    for m, mask in enumerate(model.mixture.fg_masks):
        p = out_dir / f"foreground_{m:02d}.png"
        save_image(p, np.clip(mask, 0.0, 1.0))
        paths.append(p)
    return paths


def export_activations(model, image, out_dir) -> list[Path]:
    """One 8-bit PNG per vMF kernel: cosine activation mapped from [-1, 1]."""
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    act = activation_maps(convolve_extract(image, model.filters), model.kernels)
    paths = []
    for k, a in enumerate(act):
        tag = "_background" if k == model.kernels.background_index else ""
        p = out_dir / f"activation_{k:02d}{tag}.png"
        save_image(p, (a + 1.0) / 2.0)
        paths.append(p)
    return paths


def label_overlay(image: np.ndarray, labels: np.ndarray) -> np.ndarray:
    """Grayscale image with instance boundaries drawn white."""
    labels = np.asarray(labels)
    edge = (ndimage.grey_dilation(labels, size=3) != ndimage.grey_erosion(labels, size=3))
    out = _unit_range(np.asarray(image, dtype=np.float64)) * 0.8
    out[edge & (ndimage.grey_dilation(labels, size=3) > 0)] = 1.0
    return out


_GRAY = (90, 90, 90)
_WHITE = (255, 255, 255)
_RED = (230, 40, 40)
_BLUE = (60, 120, 255)
_GREEN = (40, 220, 60)


def decomposition_overlay(result: DecomposedParts, scale: int = 4) -> np.ndarray:
    """RGB picture of one decomposition in its cropped frame.

    Gray component, white boundary, blue candidate cuts, green selected
    cuts, red concave points.
    """
    r0, c0 = result.offset
    union = np.logical_or.reduce(result.parts)
    rows, cols = np.nonzero(union)
    h = int(rows.max()) - r0 + 3
    w = int(cols.max()) - c0 + 3
    local = union[r0:r0 + h, c0:c0 + w]
    big = np.kron(local, np.ones((scale, scale), dtype=bool))
    rgb = np.zeros(big.shape + (3,), dtype=np.uint8)
    rgb[big] = _GRAY
    img = Image.fromarray(rgb)
    draw = ImageDraw.Draw(img)
    poly = result.polygon
    if poly is None or len(poly) == 0:
        return np.asarray(img)

    def at(i):
        x, y = poly.vertices[i]
        return ((x + 0.5) * scale, (y + 0.5) * scale)

    pts = [at(i) for i in range(len(poly))]
    if len(pts) > 1:
        draw.line(pts + [pts[0]], fill=_WHITE, width=1)
    chosen = {(c.p_index, c.q_index) for c in result.selected_cuts}
    for c in result.candidate_cuts:
        if (c.p_index, c.q_index) not in chosen:
            draw.line([at(c.p_index), at(c.q_index)], fill=_BLUE, width=1)
    for c in result.selected_cuts:
        draw.line([at(c.p_index), at(c.q_index)], fill=_GREEN, width=2)
    rad = max(scale // 2, 1)
    for i in result.concave:
        x, y = at(i)
        draw.ellipse([x - rad, y - rad, x + rad, y + rad], fill=_RED)
    return np.asarray(img)


def export_decompositions(components, out_dir, stem: str, psi: float = 3.0,
                          lam: float = 0.1) -> list[Path]:
    """One overlay PNG per component that has at least one concave point."""
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    paths = []
    for k, comp in enumerate(components):
        result = decompose(comp, psi=psi, lam=lam)
        if not result.concave:
            continue
        p = out_dir / f"{stem}_component{k:03d}.png"
        Image.fromarray(decomposition_overlay(result)).save(p, format="PNG")
        paths.append(p)
    return paths
