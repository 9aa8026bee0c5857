"""Axis-aligned boxes, IoU, average scale and greedy NMS.

Boxes are half-open real rectangles with area ``(xmax - xmin) * (ymax - ymin)``;
there is no +1 pixel convention.
"""
from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Iterable, Sequence

SMALL_THRESHOLD = 20.0


@dataclass(frozen=True, order=True)
class BBox:
    xmin: float
    ymin: float
    xmax: float
    ymax: float

    def __post_init__(self):
        if not (self.xmax > self.xmin and self.ymax > self.ymin):
            raise ValueError(f"degenerate box {self.as_tuple()}")

    @property
    def width(self) -> float:
        return self.xmax - self.xmin

    @property
    def height(self) -> float:
        return self.ymax - self.ymin

    @property
    def area(self) -> float:
        return self.width * self.height

    @property
    def center(self) -> tuple[float, float]:
        return (self.xmin + self.xmax) / 2, (self.ymin + self.ymax) / 2

    def as_tuple(self) -> tuple[float, float, float, float]:
        return (self.xmin, self.ymin, self.xmax, self.ymax)

    def scaled(self, s: float) -> "BBox":
        return BBox(self.xmin * s, self.ymin * s, self.xmax * s, self.ymax * s)

    def shifted(self, dx: float, dy: float) -> "BBox":
        return BBox(self.xmin + dx, self.ymin + dy, self.xmax + dx, self.ymax + dy)


@dataclass(frozen=True)
class Detection:
    box: BBox
    score: float

    def __post_init__(self):
        if not (math.isfinite(self.score) and 0.0 <= self.score <= 1.0):
            raise ValueError(f"score {self.score} outside [0, 1]")


def intersection_area(a: BBox, b: BBox) -> float:
    w = min(a.xmax, b.xmax) - max(a.xmin, b.xmin)
    h = min(a.ymax, b.ymax) - max(a.ymin, b.ymin)
    if w <= 0 or h <= 0:
        return 0.0
    return w * h


def iou(a: BBox, b: BBox) -> float:
    inter = intersection_area(a, b)
    if inter == 0.0:
        return 0.0
    return inter / (a.area + b.area - inter)


def average_scale(b: BBox) -> float:
    return (b.width + b.height) / 2


def is_small(b: BBox, threshold: float = SMALL_THRESHOLD) -> bool:
    return average_scale(b) < threshold


def detection_order(dets: Iterable[Detection]) -> list[Detection]:
    """Descending score, ties broken by lexicographic box coordinates."""
    return sorted(dets, key=lambda d: (-d.score, d.box.as_tuple()))


def nms(dets: Sequence[Detection], iou_threshold: float) -> list[Detection]:
    """Greedy NMS: keep the best remaining detection, drop everything that
    overlaps it by IoU > ``iou_threshold``."""
    if not 0.0 <= iou_threshold <= 1.0:
        raise ValueError("iou_threshold must be in [0, 1]")
    remaining = detection_order(dets)
    keep = []
    while remaining:
        best = remaining.pop(0)
        keep.append(best)
        remaining = [d for d in remaining if iou(best.box, d.box) <= iou_threshold]
    return keep
