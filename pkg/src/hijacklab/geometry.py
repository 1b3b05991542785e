"""Axis-aligned box algebra: IOU, centers, shifts and NMS.

Boxes are (x1, y1, x2, y2) in continuous pixel coordinates, origin at the
image's top-left corner. Everything here is a pure function over values and
safe to call concurrently.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

__all__ = [
    "BBox",
    "Vec2",
    "iou",
    "iou_matrix",
    "center",
    "shift",
    "nms",
]


@dataclass(frozen=True)
class BBox:
    """Corner-format box. Constructors reject degenerate or non-finite boxes."""

    x1: float
    y1: float
    x2: float
    y2: float

    def __post_init__(self):
        for v in (self.x1, self.y1, self.x2, self.y2):
            if not math.isfinite(v):
                raise ValueError(f"non-finite box coordinate: {self!r}")
        if not (self.x1 < self.x2 and self.y1 < self.y2):
            raise ValueError(f"degenerate box (needs x1<x2, y1<y2): {self!r}")

    @property
    def w(self) -> float:
        return self.x2 - self.x1

    @property
    def h(self) -> float:
        return self.y2 - self.y1

    @property
    def area(self) -> float:
        return self.w * self.h

    def as_array(self) -> np.ndarray:
        return np.array([self.x1, self.y1, self.x2, self.y2], dtype=np.float64)

    @staticmethod
    def from_array(a) -> "BBox":
        x1, y1, x2, y2 = (float(v) for v in a)
        return BBox(x1, y1, x2, y2)

    @staticmethod
    def from_cxcywh(cx: float, cy: float, w: float, h: float) -> "BBox":
        return BBox(cx - w / 2, cy - h / 2, cx + w / 2, cy + h / 2)


@dataclass(frozen=True)
class Vec2:
    """Per-step displacement in pixels."""

    dx: float
    dy: float

    def __post_init__(self):
        if not (math.isfinite(self.dx) and math.isfinite(self.dy)):
            raise ValueError(f"non-finite vector: {self!r}")

    @property
    def norm(self) -> float:
        return math.hypot(self.dx, self.dy)


def _coords(b) -> tuple[float, float, float, float]:
    if isinstance(b, BBox):
        return b.x1, b.y1, b.x2, b.y2
    x1, y1, x2, y2 = b
    return float(x1), float(y1), float(x2), float(y2)


def iou(a, b) -> float:
    """Intersection over union of two corner-format boxes.

    Degenerate (zero/negative area) inputs yield 0.0 rather than an error so
    optimizer-internal boxes that momentarily collapse stay harmless.
    """
    ax1, ay1, ax2, ay2 = _coords(a)
    bx1, by1, bx2, by2 = _coords(b)
    area_a = max(0.0, ax2 - ax1) * max(0.0, ay2 - ay1)
    area_b = max(0.0, bx2 - bx1) * max(0.0, by2 - by1)
    if area_a <= 0.0 or area_b <= 0.0:
        return 0.0
    iw = min(ax2, bx2) - max(ax1, bx1)
    ih = min(ay2, by2) - max(ay1, by1)
    if iw <= 0.0 or ih <= 0.0:
        return 0.0
    inter = iw * ih
    return inter / (area_a + area_b - inter)


def iou_matrix(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    """Pairwise IOU between (N,4) and (M,4) corner-format arrays."""
    a = np.asarray(a, dtype=np.float64).reshape(-1, 4)
    b = np.asarray(b, dtype=np.float64).reshape(-1, 4)
    area_a = np.clip(a[:, 2] - a[:, 0], 0, None) * np.clip(a[:, 3] - a[:, 1], 0, None)
    area_b = np.clip(b[:, 2] - b[:, 0], 0, None) * np.clip(b[:, 3] - b[:, 1], 0, None)
    iw = np.clip(
        np.minimum(a[:, None, 2], b[None, :, 2]) - np.maximum(a[:, None, 0], b[None, :, 0]),
        0,
        None,
    )
    ih = np.clip(
        np.minimum(a[:, None, 3], b[None, :, 3]) - np.maximum(a[:, None, 1], b[None, :, 1]),
        0,
        None,
    )
    inter = iw * ih
    union = area_a[:, None] + area_b[None, :] - inter
    out = np.zeros_like(inter)
    valid = (union > 0) & (area_a[:, None] > 0) & (area_b[None, :] > 0)
    out[valid] = inter[valid] / union[valid]
    return out


def center(b) -> tuple[float, float]:
    x1, y1, x2, y2 = _coords(b)
    return (x1 + x2) / 2.0, (y1 + y2) / 2.0


def shift(b: BBox, v: Vec2, k: int) -> BBox:
    """Translate every coordinate of ``b`` by ``k`` steps of ``v``.

    Negative coordinates are permitted: callers clamp to the frame when they
    need to.
    """
    if k < 0:
        raise ValueError("k must be >= 0")
    dx, dy = v.dx * k, v.dy * k
    return BBox(b.x1 + dx, b.y1 + dy, b.x2 + dx, b.y2 + dy)


def nms(proposals, iou_threshold: float, conf_threshold: float) -> list[int]:
    """Class-aware greedy suppression returning kept input indices.

    ``proposals`` is a sequence of (box, confidence, class_id). Boxes with
    confidence <= conf_threshold are dropped; the survivors are visited in
    descending confidence (ties by ascending input index) and kept iff their
    IOU with every already-kept box of the same class is <= iou_threshold.
    """
    if not (0.0 <= iou_threshold <= 1.0 and 0.0 <= conf_threshold <= 1.0):
        raise ValueError("thresholds must lie in [0, 1]")
    order = sorted(
        (i for i, (_, conf, _) in enumerate(proposals) if conf > conf_threshold),
        key=lambda i: (-proposals[i][1], i),
    )
    kept: list[int] = []
    for i in order:
        box_i, _, cls_i = proposals[i]
        ok = True
        for j in kept:
            box_j, _, cls_j = proposals[j]
            if cls_j == cls_i and iou(box_i, box_j) > iou_threshold:
                ok = False
                break
        if ok:
            kept.append(i)
    return kept
