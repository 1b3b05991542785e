"""Target-box construction and proposal filtering.

Given the original object box and an attack direction, ``find_target_bbox``
walks the box along the direction to the largest shift still inside the
association gate. The filters then pick, from a live forward pass, the one
proposal to fabricate (by grid-cell identity) and the set to erase.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from . import geometry
from .detector import DetectionOutput, DetectorConfig
from .geometry import BBox, Vec2

__all__ = [
    "AttackDirection",
    "FilterResult",
    "find_target_bbox",
    "cbbox_filter",
    "erasure_filter",
    "split",
    "ERASE_IOU",
]

# erasure overlap gate; mirrors the default association threshold so any
# proposal the tracker could re-associate with the original box is suppressed
ERASE_IOU = 0.3

_GOALS = ("move_in", "move_out")


@dataclass(frozen=True)
class AttackDirection:
    v: Vec2
    goal: str = "move_out"

    def __post_init__(self):
        if self.v.dx == 0.0 and self.v.dy == 0.0:
            raise ValueError("direction vector must be non-zero")
        if self.goal not in _GOALS:
            raise ValueError(f"goal must be one of {_GOALS}")


@dataclass(frozen=True)
class FilterResult:
    b_f: int
    b_e: frozenset[int]

    def __post_init__(self):
        if self.b_f in self.b_e:
            raise ValueError("fabrication index cannot be in the erasure set")


def find_target_bbox(
    b_o: BBox,
    v: Vec2,
    t_iou: float,
    mode: str = "last_above_threshold",
    k_max: int | None = None,
) -> BBox:
    """Shift the original box k steps along v, as far as the gate allows.

    Default mode returns the largest shift whose IOU with the original still
    exceeds t_iou. Literal mode returns one more step (the first shift at or
    below the gate), which is what the naive iterative procedure evaluates;
    it is kept behind this flag for fidelity experiments.
    """
    if v.dx == 0.0 and v.dy == 0.0:
        raise ValueError("direction vector must be non-zero")
    if not (0.0 < t_iou < 1.0):
        raise ValueError("t_iou must lie in (0, 1)")
    if mode not in ("last_above_threshold", "literal"):
        raise ValueError(f"unknown mode {mode!r}")
    if k_max is None:
        diag = math.hypot(b_o.w, b_o.h)
        k_max = math.ceil(diag / v.norm) + 2
    k_first = None
    for k in range(1, k_max + 1):
        if geometry.iou(geometry.shift(b_o, v, k), b_o) <= t_iou:
            k_first = k
            break
    if k_first is None:
        raise ValueError(f"no shift within k_max={k_max} falls to the gate {t_iou}")
    k = k_first if mode == "literal" else k_first - 1
    return geometry.shift(b_o, v, k)


def _grid_cell(px: float, py: float, cfg: DetectorConfig) -> tuple[int, int]:
    scale = cfg.w / cfg.grid_w
    cx = min(max(int(px / scale), 0), cfg.grid_w - 1)
    cy = min(max(int(py / scale), 0), cfg.grid_h - 1)
    return cx, cy


def cbbox_filter(
    det: DetectionOutput,
    b_t: BBox,
    cfg: DetectorConfig,
    v: Vec2 | None = None,
    k_s: float | None = None,
) -> int:
    """Pick the proposal to fabricate from the cell under b_t's center.

    Anchor-based: the cell's anchor proposal with maximal IOU against b_t
    (ties to the lowest anchor index). Anchor-free: the center is first
    nudged one step along the attack direction, then the cell's single
    proposal is returned.
    """
    bcx, bcy = geometry.center(b_t)
    if cfg.anchor_free:
        if v is None:
            raise ValueError("anchor-free filtering needs the attack direction")
        k_s = float(cfg.stride) if k_s is None else float(k_s)
        norm = v.norm
        bcx += k_s * v.dx / norm
        bcy += k_s * v.dy / norm
        cx, cy = _grid_cell(bcx, bcy, cfg)
        return (cy * cfg.grid_w + cx) * cfg.n_anchors
    cx, cy = _grid_cell(bcx, bcy, cfg)
    base = (cy * cfg.grid_w + cx) * cfg.n_anchors
    target = b_t.as_array()[None, :]
    ious = geometry.iou_matrix(det.boxes[base : base + cfg.n_anchors], target)[:, 0]
    return base + int(np.argmax(ious))


def erasure_filter(
    det: DetectionOutput,
    b_o: BBox,
    b_f: int | None,
    cfg: DetectorConfig,
    erase_iou: float = ERASE_IOU,
) -> frozenset[int]:
    """Proposals to suppress so the original object vanishes.

    Anchor-based: every anchor proposal of the cell holding the original
    box's center, plus any confident proposal overlapping the original box
    beyond the erasure gate. Anchor-free: the confident-overlap net alone.
    The fabrication index (when given) is always excluded. Because the
    erasure gate mirrors the association gate, the net covers every proposal
    a tracker could re-associate with the original object.
    """
    ious = geometry.iou_matrix(det.boxes, b_o.as_array()[None, :])[:, 0]
    net = (det.conf > cfg.t_conf) & (ious > erase_iou)
    members = set(np.nonzero(net)[0].tolist())
    if not cfg.anchor_free:
        cx, cy = _grid_cell(*geometry.center(b_o), cfg)
        base = (cy * cfg.grid_w + cx) * cfg.n_anchors
        members |= set(range(base, base + cfg.n_anchors))
    if b_f is not None:
        members.discard(b_f)
    return frozenset(int(i) for i in members)


def split(
    det: DetectionOutput,
    b_t: BBox,
    b_o: BBox,
    cfg: DetectorConfig,
    v: Vec2 | None = None,
    k_s: float | None = None,
) -> FilterResult:
    """Compose the two filters against the current forward pass."""
    if not isinstance(cfg, DetectorConfig):
        raise ValueError("proposal filtering requires a grid-based detector config")
    b_f = cbbox_filter(det, b_t, cfg, v, k_s)
    b_e = erasure_filter(det, b_o, b_f, cfg)
    return FilterResult(b_f=b_f, b_e=b_e)
