"""Patch location preselection.

Jointly optimizes a full-frame perturbation p and unconstrained mask
parameters m for a few iterations; the mask, squashed through tanh and
upsampled in s x s blocks, gates the perturbation into the frame. A uniform
sliding window then scores every candidate placement and the best window
inside the allowed region wins.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from . import detector as det_mod
from . import imaging, losses, targeting
from .geometry import BBox
from .losses import LossHyper
from .targeting import AttackDirection

__all__ = [
    "Stage1Config",
    "Stage1Diagnostics",
    "mask_from_params",
    "window_scores",
    "cluster_loss",
    "preselect_location",
    "location_stability",
]

_FROZEN_M = -10.0


@dataclass(frozen=True)
class Stage1Config:
    window_h: int = 13
    window_w: int = 13
    alpha: float = 1.0  # cluster-loss weight, signed
    gamma: float = 1.0  # tanh sharpness
    s: int = 4  # mask block granularity in pixels
    iterations: int = 20
    lr_p: float = 0.05
    lr_m: float = 0.5
    target_t_iou: float = 0.3
    bbox_mode: str = "last_above_threshold"
    hyper: LossHyper = field(default_factory=LossHyper)

    def __post_init__(self):
        if self.s < 1 or self.iterations < 1:
            raise ValueError("need s >= 1 and iterations >= 1")
        if self.window_h < 1 or self.window_w < 1:
            raise ValueError("window must be positive")


@dataclass
class Stage1Diagnostics:
    m: np.ndarray  # final unconstrained parameters
    mask: np.ndarray  # final pixel mask M
    scores: np.ndarray  # window-score map M'
    loss_log: list[tuple[float, float]]  # (adv, cluster) per iteration
    chosen: tuple[int, int]  # (x, y) of the selected window


def mask_from_params(m: np.ndarray, gamma: float, s: int, shape: tuple[int, int] | None = None) -> np.ndarray:
    """Elementwise 0.5*tanh(gamma*m)+0.5 with s x s block upsampling."""
    m = np.asarray(m, dtype=np.float64)
    blocks = 0.5 * np.tanh(gamma * m) + 0.5
    up = np.repeat(np.repeat(blocks, s, axis=0), s, axis=1)
    if shape is not None:
        up = up[: shape[0], : shape[1]]
    return up


def window_scores(mask: np.ndarray, dh: int, dw: int) -> np.ndarray:
    """Average of every dh x dw window (uniform weights), valid extent only."""
    h, w = mask.shape
    if dh > h or dw > w:
        raise ValueError("window larger than the mask")
    return sliding_window_view(mask, (dh, dw)).mean(axis=(2, 3))


def cluster_loss(scores: np.ndarray, frame_shape: tuple[int, int]) -> float:
    """|max(M') - mean(M')| with the mean taken over all h*w pixels of the
    zero-padded score map."""
    h, w = frame_shape
    return float(abs(scores.max() - scores.sum() / (h * w)))


def _cluster_grad(scores: np.ndarray, frame_shape: tuple[int, int], dh: int, dw: int) -> np.ndarray:
    """d(cluster loss)/dM: subgradient through the max plus the padded mean,
    scattered back through the uniform window."""
    h, w = frame_shape
    sign = np.sign(scores.max() - scores.sum() / (h * w))
    g = np.full(scores.shape, -sign / (h * w))
    am = np.unravel_index(int(np.argmax(scores)), scores.shape)
    g[am] += sign
    gp = np.pad(g, ((dh - 1, dh - 1), (dw - 1, dw - 1)))
    return sliding_window_view(gp, (dh, dw)).sum(axis=(2, 3)) / (dh * dw)


def _block_sum(grad_mask: np.ndarray, gh: int, gw: int, s: int) -> np.ndarray:
    padded = np.zeros((gh * s, gw * s))
    padded[: grad_mask.shape[0], : grad_mask.shape[1]] = grad_mask
    return padded.reshape(gh, s, gw, s).sum(axis=(1, 3))


def _candidate_windows(region: BBox, dh: int, dw: int, h: int, w: int) -> np.ndarray:
    """Boolean map over the valid-window extent: windows fully inside region."""
    ok = np.zeros((h - dh + 1, w - dw + 1), dtype=bool)
    y0 = max(0, int(np.ceil(region.y1)))
    x0 = max(0, int(np.ceil(region.x1)))
    y1 = min(h - dh, int(np.floor(region.y2 - dh)))
    x1 = min(w - dw, int(np.floor(region.x2 - dw)))
    if y1 >= y0 and x1 >= x0:
        ok[y0 : y1 + 1, x0 : x1 + 1] = True
    return ok


class _Adam:
    def __init__(self, shape, lr):
        self.m = np.zeros(shape)
        self.v = np.zeros(shape)
        self.t = 0
        self.lr = lr

    def step(self, x, g):
        self.t += 1
        self.m = 0.9 * self.m + 0.1 * g
        self.v = 0.999 * self.v + 0.001 * g * g
        mh = self.m / (1 - 0.9**self.t)
        vh = self.v / (1 - 0.999**self.t)
        return x - self.lr * mh / (np.sqrt(vh) + 1e-8)


def preselect_location(
    frame: np.ndarray,
    b_o: BBox,
    direction: AttackDirection,
    region: BBox,
    config: Stage1Config,
    weights,
    det_cfg,
) -> tuple[tuple[int, int], Stage1Diagnostics]:
    """Optimize (p, m) under the conditional loss plus the cluster term, then
    return the argmax-score window fully inside the allowed region."""
    frame = imaging.check_image(frame)
    h, w, _ = frame.shape
    dh, dw = config.window_h, config.window_w
    candidates = _candidate_windows(region, dh, dw, h, w)
    if not candidates.any():
        raise ValueError("allowed region smaller than the patch window")
    s = config.s
    gh = -(-h // s)
    gw = -(-w // s)

    # freeze mask blocks that do not touch the allowed region
    bys = np.arange(gh) * s
    bxs = np.arange(gw) * s
    overlap_y = (bys[:, None] < region.y2) & (bys[:, None] + s > region.y1)
    overlap_x = (bxs[None, :] < region.x2) & (bxs[None, :] + s > region.x1)
    free = overlap_y & overlap_x
    m = np.where(free, 0.0, _FROZEN_M)

    p = frame.copy()
    b_t = targeting.find_target_bbox(b_o, direction.v, config.target_t_iou, config.bbox_mode)
    opt_p = _Adam(p.shape, config.lr_p)
    opt_m = _Adam(m.shape, config.lr_m)
    loss_log: list[tuple[float, float]] = []

    for _ in range(config.iterations):
        mask = mask_from_params(m, config.gamma, s, (h, w))
        x_prime = imaging.apply_soft_mask(frame, p, mask)

        def adv(det, trace):
            fr = targeting.split(det, b_t, b_o, det_cfg, direction.v)
            l_adv, _ = losses.conditional_adv_loss(det, fr, b_t, config.hyper, trace)
            return l_adv

        adv_val, grad_x = det_mod.input_gradient(x_prime, weights, det_cfg, adv)
        scores = window_scores(mask, dh, dw)
        cl = cluster_loss(scores, (h, w))
        loss_log.append((adv_val, cl))

        grad_p = grad_x * mask[:, :, None]
        grad_mask = (grad_x * (p - frame)).sum(axis=2)
        grad_mask += config.alpha * _cluster_grad(scores, (h, w), dh, dw)
        dtanh = 0.5 * config.gamma * (1.0 - np.tanh(config.gamma * m) ** 2)
        grad_m = _block_sum(grad_mask, gh, gw, s)[:gh, :gw] * dtanh
        grad_m[~free] = 0.0

        p = np.clip(opt_p.step(p, grad_p), 0.0, 1.0)
        m = np.where(free, opt_m.step(m, grad_m), m)

    mask = mask_from_params(m, config.gamma, s, (h, w))
    scores = window_scores(mask, dh, dw)
    masked = np.where(candidates, scores, -np.inf)
    iy, ix = np.unravel_index(int(np.argmax(masked)), masked.shape)
    diag = Stage1Diagnostics(m=m, mask=mask, scores=scores, loss_log=loss_log, chosen=(int(ix), int(iy)))
    return (int(ix), int(iy)), diag


def location_stability(
    frames: list[np.ndarray],
    b_o: list[BBox],
    direction: AttackDirection,
    regions: list[BBox],
    config: Stage1Config,
    weights,
    det_cfg,
) -> list[float]:
    """Center displacement between the windows selected on consecutive frames."""
    if len(frames) < 2:
        raise ValueError("need at least two frames")
    centers = []
    for frame, bo, region in zip(frames, b_o, regions):
        (x, y), _ = preselect_location(frame, bo, direction, region, config, weights, det_cfg)
        centers.append((x + config.window_w / 2.0, y + config.window_h / 2.0))
    return [
        float(np.hypot(cx2 - cx1, cy2 - cy1))
        for (cx1, cy1), (cx2, cy2) in zip(centers[:-1], centers[1:])
    ]
