"""Scalar attack objectives: score, regression, total-variation, erasure and
the conditional composite that switches between score and regression descent
depending on the current NMS outcome.

All functions build on the autodiff tape, so their gradients with respect to
proposal raw outputs (and through them, input pixels) are exact. Indicator
masks and branch choices are computed on plain values and carry no gradient.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .autodiff import Tensor, tensor
from .detector import DetectionOutput, ForwardTrace, SelectedProposals
from .geometry import BBox

__all__ = [
    "LossHyper",
    "LossBreakdown",
    "score_loss",
    "regression_loss",
    "tv_loss",
    "erase_loss",
    "conditional_adv_loss",
    "iou_with_box",
    "LOSS_LOG_HEADER",
    "breakdown_row",
]

_TV_DELTA = 1e-8


@dataclass(frozen=True)
class LossHyper:
    mu1: float = 1.0  # fabrication weight inside the score loss
    beta: float = 0.01  # center-distance weight inside the regression loss
    mu2: float = 0.1  # total-variation weight in the full objective
    t_conf: float = 0.25  # indicator threshold for the erasure term
    iou_floor: float = 1e-6  # clamp inside the -log(IOU)

    def __post_init__(self):
        if min(self.mu1, self.beta, self.mu2, self.t_conf) < 0:
            raise ValueError("hyperparameters must be non-negative")
        if not (0.0 < self.iou_floor <= 1e-3):
            raise ValueError("iou_floor must lie in (0, 1e-3]")


@dataclass
class LossBreakdown:
    """Numeric snapshot of one objective evaluation, for logging.

    branch is "score" or "regression" for the conditional objective and
    "slrm" for the fixed-weight baseline.
    """

    branch: str
    l_adv: float
    l_s: float
    l_e: float
    l_f: float
    l_r: float
    l_iou: float
    l_center: float
    l_tv: float = 0.0


LOSS_LOG_HEADER = ["iteration", "branch", "L_adv", "L_s", "L_e", "L_f", "L_r", "L_IOU", "L_center", "L_TV"]


def breakdown_row(iteration: int, b: LossBreakdown) -> list:
    return [iteration, b.branch, b.l_adv, b.l_s, b.l_e, b.l_f, b.l_r, b.l_iou, b.l_center, b.l_tv]


def score_loss(b_e: SelectedProposals | None, b_f: SelectedProposals, hyper: LossHyper):
    """(L_s, L_e, L_f): push fabricated confidences up, gated erasure
    confidences down. The threshold indicator is strict and frozen."""
    if b_f is None or b_f.conf.data.size == 0:
        raise ValueError("the fabrication set must not be empty")
    if b_e is not None and b_e.conf.data.size > 0:
        gate = (b_e.conf.data > hyper.t_conf).astype(np.float64)
        l_e = (b_e.conf * b_e.conf * gate).mean()
    else:
        l_e = tensor(0.0)
    one_minus = 1.0 - b_f.conf
    l_f = (one_minus * one_minus).mean()
    l_s = l_e + hyper.mu1 * l_f
    return l_s, l_e, l_f


def iou_with_box(p: SelectedProposals, b: BBox) -> Tensor:
    """Differentiable IOU of each selected proposal with a fixed box."""
    iw = (p.x2.minimum(b.x2) - p.x1.maximum(b.x1)).maximum(0.0)
    ih = (p.y2.minimum(b.y2) - p.y1.maximum(b.y1)).maximum(0.0)
    inter = iw * ih
    area_p = (p.x2 - p.x1) * (p.y2 - p.y1)
    union = area_p + b.area - inter
    return inter / union


def regression_loss(b_f: SelectedProposals, b_t: BBox, hyper: LossHyper):
    """(L_r, L_IOU, L_center): align the fabricated box with the target box."""
    if b_f is None or b_f.conf.data.size == 0:
        raise ValueError("the fabrication set must not be empty")
    l_iou = (-(iou_with_box(b_f, b_t).maximum(hyper.iou_floor).log())).mean()
    tcx, tcy = (b_t.x1 + b_t.x2) / 2.0, (b_t.y1 + b_t.y2) / 2.0
    cx = (b_f.x1 + b_f.x2) * 0.5
    cy = (b_f.y1 + b_f.y2) * 0.5
    l_center = ((cx - tcx) ** 2.0 + (cy - tcy) ** 2.0).mean()
    l_r = l_iou + hyper.beta * l_center
    return l_r, l_iou, l_center


def tv_loss(patch) -> Tensor:
    """Total variation over interior pixels, smoothed for differentiability."""
    if not isinstance(patch, Tensor):
        patch = tensor(np.asarray(patch, dtype=np.float64))
    dh, dw = patch.data.shape[0], patch.data.shape[1]
    if dh < 2 or dw < 2:
        raise ValueError("patch must be at least 2x2")
    a = patch[0 : dh - 1, 0 : dw - 1]
    down = patch[1:dh, 0 : dw - 1]
    right = patch[0 : dh - 1, 1:dw]
    return (((down - a) ** 2.0 + (right - a) ** 2.0 + _TV_DELTA**2) ** 0.5).sum()


def erase_loss(b_e: SelectedProposals | None) -> Tensor:
    """Mean squared confidence of the disappearance set; empty set is 0."""
    if b_e is None or b_e.conf.data.size == 0:
        return tensor(0.0)
    return (b_e.conf * b_e.conf).mean()


def conditional_adv_loss(
    det: DetectionOutput,
    fr,
    b_t: BBox,
    hyper: LossHyper,
    trace: ForwardTrace,
    branch: str | None = None,
) -> tuple[Tensor, LossBreakdown]:
    """Loss-switching composite: regression once the fabricated proposal
    survives NMS alone, score otherwise.

    ``fr`` carries the filter result (.b_f proposal index, .b_e index set);
    membership in the survivor set is by proposal identity. Both component
    losses are evaluated numerically for the returned breakdown; only the
    active branch carries gradient. Pass ``branch`` to pin the choice.
    """
    kept = set(det.kept)
    if branch is None:
        fabricated_alive = fr.b_f in kept
        erased_gone = not (set(fr.b_e) & kept)
        branch = "regression" if (fabricated_alive and erased_gone) else "score"
    elif branch not in ("regression", "score"):
        raise ValueError(f"unknown branch {branch!r}")
    b_f = trace.select([fr.b_f])
    b_e = trace.select(sorted(fr.b_e)) if fr.b_e else None
    l_s, l_e, l_f = score_loss(b_e, b_f, hyper)
    l_r, l_iou, l_center = regression_loss(b_f, b_t, hyper)
    l_adv = l_r if branch == "regression" else l_s
    breakdown = LossBreakdown(
        branch=branch,
        l_adv=float(l_adv.data),
        l_s=float(l_s.data),
        l_e=float(l_e.data),
        l_f=float(l_f.data),
        l_r=float(l_r.data),
        l_iou=float(l_iou.data),
        l_center=float(l_center.data),
    )
    return l_adv, breakdown
