"""Axis-aligned boxes, IoU and the normalized label/prediction text format.

Label lines are ``class_id cx cy w h`` with coordinates normalized by the
image size; prediction lines append a trailing ``score``.
"""

from __future__ import annotations

import os
from dataclasses import dataclass, replace
from pathlib import Path
from typing import Iterable

from crossflow.errors import ContractError, ValidationError


@dataclass(frozen=True)
class Box:
    x_min: float
    y_min: float
    x_max: float
    y_max: float
    class_id: int = 0
    score: float | None = None

    @property
    def valid(self) -> bool:
        return self.x_min < self.x_max and self.y_min < self.y_max

    @property
    def area(self) -> float:
        return (self.x_max - self.x_min) * (self.y_max - self.y_min)

    def clamp(self, width: float, height: float) -> "Box":
        return replace(
            self,
            x_min=min(max(self.x_min, 0.0), width),
            y_min=min(max(self.y_min, 0.0), height),
            x_max=min(max(self.x_max, 0.0), width),
            y_max=min(max(self.y_max, 0.0), height),
        )

    def to_line(self, width: int, height: int) -> str:
        cx = (self.x_min + self.x_max) / 2 / width
        cy = (self.y_min + self.y_max) / 2 / height
        w = (self.x_max - self.x_min) / width
        h = (self.y_max - self.y_min) / height
        line = f"{self.class_id} {cx:.6f} {cy:.6f} {w:.6f} {h:.6f}"
        if self.score is not None:
            line += f" {self.score:.6f}"
        return line

    @classmethod
    def from_line(cls, line: str, width: int, height: int, with_score: bool = False) -> "Box":
        parts = line.split()
        if len(parts) != (6 if with_score else 5):
            raise ValidationError(f"malformed {'prediction' if with_score else 'label'} line: {line!r}")
        cls_id = int(parts[0])
        cx, cy, w, h = (float(p) for p in parts[1:5])
        score = float(parts[5]) if with_score else None
        return cls(
            (cx - w / 2) * width,
            (cy - h / 2) * height,
            (cx + w / 2) * width,
            (cy + h / 2) * height,
            cls_id,
            score,
        )


def iou(a: Box, b: Box) -> float:
    if not a.valid or not b.valid:
        raise ContractError(f"degenerate box in IoU: {a if not a.valid else b}")
    iw = min(a.x_max, b.x_max) - max(a.x_min, b.x_min)
    ih = min(a.y_max, b.y_max) - max(a.y_min, b.y_min)
    if iw <= 0 or ih <= 0:
        return 0.0
    inter = iw * ih
    return inter / (a.area + b.area - inter)


def format_labels(boxes: Iterable[Box], width: int, height: int) -> str:
    return "".join(b.to_line(width, height) + "\n" for b in boxes)


def parse_labels(text: str, width: int, height: int, with_score: bool = False, source: str = "") -> list[Box]:
    boxes = []
    for lineno, line in enumerate(text.splitlines(), 1):
        if not line.strip():
            continue
        try:
            boxes.append(Box.from_line(line, width, height, with_score))
        except (ValueError, ValidationError) as exc:
            raise ValidationError(f"{source}:{lineno}: {exc}") from None
    return boxes


def read_label_file(path: str | os.PathLike, width: int, height: int, with_score: bool = False) -> list[Box]:
    return parse_labels(Path(path).read_text(), width, height, with_score, source=str(path))


def write_label_file(path: str | os.PathLike, boxes: Iterable[Box], width: int, height: int) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    tmp = path.with_name(f".{path.name}.tmp")
    tmp.write_text(format_labels(boxes, width, height))
    os.replace(tmp, path)
