"""Trained model container and its versioned text file format.

The file starts with the line ``NUCLEO-MODEL <version>``; the rest is a JSON
document whose arrays are stored as base64 of little-endian raw bytes with
an explicit dtype and shape, so a round trip is bit-exact.
"""

from __future__ import annotations

import base64
import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .features import FilterBank
from .mixture import CompositionalMixture
from .vmf import VmfKernelBank

MAGIC = "NUCLEO-MODEL"
VERSION = 1
DEFAULT_ROTATIONS = (-90.0, -60.0, -30.0, 30.0, 60.0)


class ModelFormatError(ValueError):
    """The file is not a model this version can read."""


@dataclass(frozen=True)
class NucleoModel:
    filters: FilterBank
    mixture: CompositionalMixture
    rotations: tuple[float, ...] = DEFAULT_ROTATIONS
    nms_radius: float = 6.0  # matches detection.DEFAULT_NMS_RADIUS
    score_threshold: float = -np.inf
    psi: float = 3.0
    lam: float = 0.1
    prior_variance: float = 10.0
    prior_floor: float = 0.05
    metadata: dict = field(default_factory=dict)

    def __post_init__(self):
        if self.filters.num_filters != self.mixture.bank.dim:
            raise ValueError("filter bank size does not match the kernel dimension")
        object.__setattr__(self, "rotations", tuple(float(r) for r in self.rotations))

    @property
    def kernels(self) -> VmfKernelBank:
        return self.mixture.bank

    @property
    def n_parameters(self) -> int:
        """Learned scalars: filters and biases, kernels, coefficients, priors."""
        return int(self.filters.weights.size + self.filters.bias.size
                   + self.kernels.kernels.size + self.mixture.alphas.size
                   + self.mixture.nu.size)


def _encode(arr: np.ndarray) -> dict:
    arr = np.asarray(arr)
    le = arr.astype(arr.dtype.newbyteorder("<"), copy=False)
    return {"dtype": le.dtype.str, "shape": list(arr.shape),
            "data": base64.b64encode(np.ascontiguousarray(le).tobytes()).decode("ascii")}


def _decode(obj: dict) -> np.ndarray:
    raw = base64.b64decode(obj["data"])
    arr = np.frombuffer(raw, dtype=np.dtype(obj["dtype"])).reshape(obj["shape"])
    return arr.astype(arr.dtype.newbyteorder("="))


def _finite_or_none(x: float):
    return float(x) if np.isfinite(x) else None


def dumps(model: NucleoModel) -> str:
    bank = model.kernels
    doc = {
        "version": VERSION,
        "filters": {"weights": _encode(model.filters.weights), "bias": _encode(model.filters.bias)},
        "kernels": {
            "mu": _encode(bank.kernels),
            "sigma": bank.sigma,
            "background_index": bank.background_index,
            "foreground_indices": list(bank.foreground_indices),
        },
        "mixture": {
            "alphas": _encode(model.mixture.alphas),
            "nu": _encode(model.mixture.nu),
            "patch_size": model.mixture.patch_size,
        },
        "detection": {
            "rotations": list(model.rotations),
            "nms_radius": model.nms_radius,
            "score_threshold": _finite_or_none(model.score_threshold),
        },
        "decomposition": {
            "psi": model.psi,
            "lambda": model.lam,
            "prior_variance": model.prior_variance,
            "prior_floor": model.prior_floor,
        },
        "n_parameters": model.n_parameters,
        "metadata": model.metadata,
    }
    return f"{MAGIC} {VERSION}\n" + json.dumps(doc, sort_keys=True, indent=1) + "\n"


def loads(text: str) -> NucleoModel:
    head, _, body = text.partition("\n")
    parts = head.split()
    if len(parts) != 2 or parts[0] != MAGIC:
        raise ModelFormatError("unrecognized model format")
    if parts[1] != str(VERSION):
        raise ModelFormatError(f"unsupported model version {parts[1]!r}")
    try:
        doc = json.loads(body)
        k = doc["kernels"]
        bank = VmfKernelBank(_decode(k["mu"]), k["sigma"], k["background_index"],
                             tuple(k["foreground_indices"]))
        mix = doc["mixture"]
        mixture = CompositionalMixture(_decode(mix["alphas"]), _decode(mix["nu"]), bank)
        filters = FilterBank(_decode(doc["filters"]["weights"]), _decode(doc["filters"]["bias"]))
        det, dec = doc["detection"], doc["decomposition"]
        threshold = det["score_threshold"]
        return NucleoModel(
            filters, mixture, tuple(det["rotations"]), det["nms_radius"],
            -np.inf if threshold is None else threshold,
            dec["psi"], dec["lambda"], dec["prior_variance"], dec["prior_floor"],
            doc.get("metadata", {}))
    except (KeyError, TypeError, ValueError) as exc:
        if isinstance(exc, ModelFormatError):
            raise
        raise ModelFormatError(f"unrecognized model format: {exc}") from exc


def save_model(model: NucleoModel, path) -> None:
    Path(path).write_text(dumps(model), encoding="utf-8")


def load_model(path) -> NucleoModel:
    try:
        text = Path(path).read_text(encoding="utf-8")
    except UnicodeDecodeError as exc:
        raise ModelFormatError("unrecognized model format") from exc
    return loads(text)
