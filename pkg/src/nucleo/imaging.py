"""Image I/O and geometric resampling.

Coordinates follow the array convention used throughout the package:
``x`` is the column index, ``y`` the row index (pointing down). Angles are
measured from the +x axis towards +y, so rotating content by ``theta``
moves a direction at angle ``phi`` to ``phi + theta``.
"""

from __future__ import annotations

from pathlib import Path

import numpy as np
from PIL import Image
from scipy import ndimage

from ._validation import check_gray_image


def load_image(path) -> np.ndarray:
    """Read an 8/16-bit single-channel PNG or TIFF into [0, 1] floats."""
    with Image.open(path) as im:
        arr = np.array(im)
    if arr.ndim != 2:
        raise ValueError(f"{path}: expected a single-channel image, got shape {arr.shape}")
    if arr.dtype == np.uint8:
        return arr / 255.0
    if arr.dtype in (np.uint16, np.int32) or im.mode.startswith("I;16"):
        # Pillow may hand 16-bit PNGs back as int32.
        return arr.astype(np.float64) / 65535.0
    if arr.dtype == bool:
        return arr.astype(np.float64)
    raise ValueError(f"{path}: unsupported pixel type {arr.dtype}")


def save_image(path, image: np.ndarray, bits: int = 8) -> None:
    """Write a [0, 1] float image as an 8- or 16-bit PNG."""
    image = check_gray_image(image)
    if bits == 8:
        data = np.round(image * 255.0).astype(np.uint8)
    elif bits == 16:
        data = np.round(image * 65535.0).astype(np.uint16)
    else:
        raise ValueError("bits must be 8 or 16")
    Image.fromarray(data).save(Path(path), format="PNG")


def load_labels(path) -> np.ndarray:
    with Image.open(path) as im:
        arr = np.array(im)
    if arr.ndim != 2:
        raise ValueError(f"{path}: label maps must be single-channel")
    return arr.astype(np.int64)


def save_labels(path, labels: np.ndarray) -> None:
    """Write an instance label map as a 16-bit PNG (ids as pixel values)."""
    labels = np.asarray(labels)
    if labels.min(initial=0) < 0 or labels.max(initial=0) > 65535:
        raise ValueError("label ids must fit in 16 bits")
    Image.fromarray(labels.astype(np.uint16)).save(Path(path), format="PNG")


def _rotation_coords(shape, degrees: float) -> np.ndarray:
    h, w = shape
    cy, cx = (h - 1) / 2.0, (w - 1) / 2.0
    theta = np.deg2rad(degrees)
    c, s = np.cos(theta), np.sin(theta)
    yy, xx = np.mgrid[0:h, 0:w].astype(np.float64)
    dx, dy = xx - cx, yy - cy
    # inverse map: output pixel p samples input at R(-theta) p
    src_x = c * dx + s * dy + cx
    src_y = -s * dx + c * dy + cy
    return np.stack([src_y, src_x])


def rotate_image(image: np.ndarray, degrees: float, order: int = 1,
                 mode: str = "reflect", cval: float = 0.0) -> np.ndarray:
    """Rotate content by ``degrees`` about the array center, keeping the shape."""
    image = np.asarray(image)
    if degrees % 360 == 0:
        return image.copy()
    coords = _rotation_coords(image.shape, degrees)
    return ndimage.map_coordinates(image, coords, order=order, mode=mode,
                                   cval=cval, prefilter=False)


def rotate_nearest(values: np.ndarray, degrees: float, fill) -> np.ndarray:
    """Nearest-neighbour rotation; samples falling outside take ``fill``."""
    values = np.asarray(values)
    if degrees % 360 == 0:
        return values.copy()
    h, w = values.shape
    src_y, src_x = np.round(_rotation_coords(values.shape, degrees)).astype(np.int64)
    inside = (src_y >= 0) & (src_y < h) & (src_x >= 0) & (src_x < w)
    out = np.full(values.shape, fill, dtype=values.dtype)
    out[inside] = values[src_y[inside], src_x[inside]]
    return out


def rotate_point(x: float, y: float, degrees: float, shape) -> tuple[float, float]:
    """Where a point lands after :func:`rotate_image` with the same angle."""
    h, w = shape
    cy, cx = (h - 1) / 2.0, (w - 1) / 2.0
    theta = np.deg2rad(degrees)
    c, s = np.cos(theta), np.sin(theta)
    dx, dy = x - cx, y - cy
    return c * dx - s * dy + cx, s * dx + c * dy + cy
