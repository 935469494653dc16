"""Per-image nucleus annotation files (JSON)."""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np


@dataclass(frozen=True)
class NucleusRecord:
    center: tuple[float, float]
    box: tuple[int, int, int, int]
    isolated: bool

    def __post_init__(self):
        x, y = self.center
        x0, y0, x1, y1 = self.box
        if not (x0 <= x1 and y0 <= y1):
            raise ValueError(f"malformed box {self.box}")
        if not (x0 <= x <= x1 and y0 <= y <= y1):
            raise ValueError(f"box {self.box} does not contain center {self.center}")


@dataclass
class Annotation:
    image: str
    nuclei: list[NucleusRecord] = field(default_factory=list)
    mask: str | None = None

    @property
    def centers(self) -> np.ndarray:
        return np.array([n.center for n in self.nuclei], dtype=np.float64).reshape(-1, 2)

    @property
    def boxes(self) -> list[tuple[int, int, int, int]]:
        return [n.box for n in self.nuclei]

    def isolated(self) -> list[NucleusRecord]:
        return [n for n in self.nuclei if n.isolated]

    def check_bounds(self, shape) -> None:
        h, w = shape
        for n in self.nuclei:
            x0, y0, x1, y1 = n.box
            if x0 < 0 or y0 < 0 or x1 >= w or y1 >= h:
                raise ValueError(f"box {n.box} lies outside the {w}x{h} image")

    def to_json(self) -> str:
        doc = {
            "image": self.image,
            "nuclei": [{"center": [float(n.center[0]), float(n.center[1])],
                        "box": [int(v) for v in n.box], "isolated": bool(n.isolated)}
                       for n in self.nuclei],
            "mask": self.mask,
        }
        return json.dumps(doc, indent=1, sort_keys=True) + "\n"

    @classmethod
    def from_json(cls, text: str) -> "Annotation":
        doc = json.loads(text)
        try:
            nuclei = [NucleusRecord((float(n["center"][0]), float(n["center"][1])),
                                    tuple(int(v) for v in n["box"]), bool(n["isolated"]))
                      for n in doc["nuclei"]]
            return cls(str(doc["image"]), nuclei, doc.get("mask"))
        except (KeyError, TypeError, IndexError) as exc:
            raise ValueError(f"malformed annotation: {exc}") from exc

    def save(self, path) -> None:
        Path(path).write_text(self.to_json(), encoding="utf-8")

    @classmethod
    def load(cls, path) -> "Annotation":
        return cls.from_json(Path(path).read_text(encoding="utf-8"))


def from_ground_truth(image_name: str, gt, mask_name: str | None = None) -> Annotation:
    records = [NucleusRecord((float(c[0]), float(c[1])), tuple(int(v) for v in b), bool(iso))
               for c, b, iso in zip(gt.centers, gt.boxes, gt.isolated)]
    return Annotation(image_name, records, mask_name)
