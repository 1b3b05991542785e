"""Patch generation loops.

``generate_patch`` runs the conditional optimizer: every iteration pastes the
patch under a fresh EoT draw, runs the detector, recomputes the target box
and the fabrication/erasure split against that live pass, picks the score or
regression branch from the current NMS outcome, and Adam-updates the patch
pixels (projected to [0, 1]) with gradients averaged over the EoT samples.
``slrm_generate`` is the fixed-weight baseline (L_r + eta * L_s every
iteration); ``dual_generate`` adds an independent disappearance patch.

The optimizer reads detector outputs only; it never touches MOT state.
"""

from __future__ import annotations

from dataclasses import dataclass, field, replace

import numpy as np

from . import autodiff as ad
from . import detector as det_mod
from . import imaging, losses, targeting
from .geometry import BBox, Vec2
from .imaging import EotParams, EotSample, PatchSpec
from .losses import LossBreakdown, LossHyper
from .targeting import AttackDirection

__all__ = [
    "AttackConfig",
    "AdamState",
    "AttackResult",
    "adam_step",
    "generate_patch",
    "slrm_generate",
    "dual_generate",
]


@dataclass(frozen=True)
class AttackConfig:
    iterations: int = 1000
    optimizer: str = "conditional"  # "conditional" | "slrm"
    eta: float = 1.0  # slrm mixing weight
    lr: float = 0.01
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    hyper: LossHyper = field(default_factory=LossHyper)
    eot: EotParams = field(default_factory=EotParams)
    seed: int = 0
    patch_h: int = 13
    patch_w: int = 13
    patch_x: int = 0  # top-left on the first supplied frame
    patch_y: int = 0
    target_t_iou: float = 0.3  # association gate assumed by the attacker
    bbox_mode: str = "last_above_threshold"
    init: str = "gray"  # "gray" | "random"
    dual: bool = False
    dual_x: int | None = None
    dual_y: int | None = None

    def __post_init__(self):
        if self.iterations < 1:
            raise ValueError("need at least one iteration")
        if self.optimizer not in ("conditional", "slrm"):
            raise ValueError(f"unknown optimizer {self.optimizer!r}")
        if self.lr <= 0 or (self.optimizer == "slrm" and self.eta < 0):
            raise ValueError("lr must be > 0 and eta >= 0")
        if self.patch_h < 2 or self.patch_w < 2:
            raise ValueError("patch must be at least 2x2")
        if self.init not in ("gray", "random"):
            raise ValueError(f"unknown init {self.init!r}")


@dataclass
class AdamState:
    m: np.ndarray
    v: np.ndarray
    step: int = 0

    @staticmethod
    def zeros(shape) -> "AdamState":
        return AdamState(np.zeros(shape), np.zeros(shape), 0)


@dataclass
class AttackResult:
    patch: PatchSpec
    log: list[LossBreakdown]
    terminal: bool
    iterations: int
    second_patch: PatchSpec | None = None
    second_log: list[LossBreakdown] | None = None


def adam_step(
    state: AdamState,
    pixels: np.ndarray,
    grad: np.ndarray,
    lr: float,
    beta1: float = 0.9,
    beta2: float = 0.999,
    eps: float = 1e-8,
) -> tuple[AdamState, np.ndarray]:
    """Bias-corrected Adam update followed by projection to [0, 1]."""
    if grad.shape != pixels.shape or state.m.shape != pixels.shape:
        raise ValueError("gradient/state shape mismatch")
    if not np.all(np.isfinite(grad)):
        raise RuntimeError("non-finite patch gradient; aborting the attack loop")
    t = state.step + 1
    m = beta1 * state.m + (1 - beta1) * grad
    v = beta2 * state.v + (1 - beta2) * grad * grad
    mh = m / (1 - beta1**t)
    vh = v / (1 - beta2**t)
    out = np.clip(pixels - lr * mh / (np.sqrt(vh) + eps), 0.0, 1.0)
    return AdamState(m, v, t), out


def _per_frame_locations(b_o: list[BBox], x0: int, y0: int) -> list[tuple[int, int]]:
    """The patch rides the target: keep its offset to the first frame's box."""
    off_x = x0 - b_o[0].x1
    off_y = y0 - b_o[0].y1
    return [(int(round(b.x1 + off_x)), int(round(b.y1 + off_y))) for b in b_o]


def _init_pixels(config: AttackConfig) -> np.ndarray:
    if config.init == "random":
        rng = np.random.default_rng([config.seed, 0xA77AC])
        return rng.uniform(0.0, 1.0, (config.patch_h, config.patch_w, 3))
    return np.full((config.patch_h, config.patch_w, 3), 0.5)


def _terminal_condition(
    pixels: np.ndarray,
    locs: list[tuple[int, int]],
    frames: list[np.ndarray],
    b_o: list[BBox],
    b_t: list[BBox],
    v: Vec2,
    weights,
    det_cfg,
) -> bool:
    """Fabricated-alive-and-erasure-gone, checked with a plain paste on every
    training frame."""
    for frame, (lx, ly), bo, bt in zip(frames, locs, b_o, b_t):
        det = det_mod.forward(imaging.apply_patch(frame, PatchSpec(pixels, lx, ly)), weights, det_cfg)
        fr = targeting.split(det, bt, bo, det_cfg, v)
        kept = set(det.kept)
        if fr.b_f not in kept or (set(fr.b_e) & kept):
            return False
    return True


def _optimize(
    frames: list[np.ndarray],
    b_o: list[BBox],
    direction: AttackDirection,
    config: AttackConfig,
    weights,
    det_cfg,
    locs: list[tuple[int, int]],
    objective: str,
) -> tuple[np.ndarray, list[LossBreakdown], AdamState]:
    if len(frames) != len(b_o):
        raise ValueError("need one original box per frame")
    v = direction.v
    b_t = [targeting.find_target_bbox(b, v, config.target_t_iou, config.bbox_mode) for b in b_o]
    pixels = _init_pixels(config)
    state = AdamState.zeros(pixels.shape)
    log: list[LossBreakdown] = []
    hyper = config.hyper
    n_frames = len(frames)
    for it in range(config.iterations):
        f = it % n_frames
        samples = imaging.sample_eot(config.eot, it)
        grad = np.zeros_like(pixels)
        sums = np.zeros(7)  # l_adv, l_s, l_e, l_f, l_r, l_iou, l_center
        branches: list[str] = []
        for smp in samples:
            img, imap = imaging.apply_eot(
                frames[f], PatchSpec(pixels, *locs[f]), smp, noise_std=config.eot.noise_std
            )
            det, trace = det_mod.forward_with_trace(img, weights, det_cfg)
            fr = targeting.split(det, b_t[f], b_o[f], det_cfg, v)
            if objective == "conditional":
                l_adv, bd = losses.conditional_adv_loss(det, fr, b_t[f], hyper, trace)
            elif objective == "slrm":
                b_f = trace.select([fr.b_f])
                b_e = trace.select(sorted(fr.b_e)) if fr.b_e else None
                l_s, l_e, l_f = losses.score_loss(b_e, b_f, hyper)
                l_r, l_iou, l_center = losses.regression_loss(b_f, b_t[f], hyper)
                l_adv = l_r + config.eta * l_s
                bd = LossBreakdown(
                    branch="slrm",
                    l_adv=float(l_adv.data),
                    l_s=float(l_s.data),
                    l_e=float(l_e.data),
                    l_f=float(l_f.data),
                    l_r=float(l_r.data),
                    l_iou=float(l_iou.data),
                    l_center=float(l_center.data),
                )
            else:  # "erase": disappearance objective over the erasure net
                be_set = targeting.erasure_filter(det, b_o[f], None, det_cfg)
                b_e = trace.select(sorted(be_set)) if be_set else None
                l_adv = losses.erase_loss(b_e)
                val = float(l_adv.data)
                bd = LossBreakdown("score", val, val, val, 0.0, 0.0, 0.0, 0.0)
            if not np.isfinite(bd.l_adv):
                raise RuntimeError(f"non-finite loss at iteration {it}")
            if l_adv._vjps:
                l_adv.backward()
                if trace.x.grad is not None:
                    grad += imaging.route_gradient(trace.x.grad, imap, pixels.shape)
            sums += [bd.l_adv, bd.l_s, bd.l_e, bd.l_f, bd.l_r, bd.l_iou, bd.l_center]
            branches.append(bd.branch)
        grad /= len(samples)
        pt = ad.tensor(pixels)
        l_tv = losses.tv_loss(pt)
        l_tv.backward()
        grad += hyper.mu2 * pt.grad
        mean = sums / len(samples)
        branch = branches[0] if all(b == branches[0] for b in branches) else "score"
        log.append(
            LossBreakdown(branch, mean[0], mean[1], mean[2], mean[3], mean[4], mean[5], mean[6], float(l_tv.data))
        )
        state, pixels = adam_step(state, pixels, grad, config.lr, config.beta1, config.beta2, config.eps)
    return pixels, log, state


def generate_patch(
    frames: list[np.ndarray],
    b_o: list[BBox],
    direction: AttackDirection,
    config: AttackConfig,
    weights,
    det_cfg,
) -> AttackResult:
    """Run the configured optimizer and report the per-iteration loss log
    plus whether the hijack condition held at the end."""
    locs = _per_frame_locations(b_o, config.patch_x, config.patch_y)
    pixels, log, _ = _optimize(frames, b_o, direction, config, weights, det_cfg, locs, config.optimizer)
    v = direction.v
    b_t = [targeting.find_target_bbox(b, v, config.target_t_iou, config.bbox_mode) for b in b_o]
    terminal = _terminal_condition(pixels, locs, frames, b_o, b_t, v, weights, det_cfg)
    return AttackResult(
        patch=PatchSpec(pixels, *locs[0]),
        log=log,
        terminal=terminal,
        iterations=config.iterations,
    )


def slrm_generate(
    frames: list[np.ndarray],
    b_o: list[BBox],
    direction: AttackDirection,
    config: AttackConfig,
    weights,
    det_cfg,
    eta: float | None = None,
) -> AttackResult:
    cfg = replace(config, optimizer="slrm", eta=config.eta if eta is None else eta)
    return generate_patch(frames, b_o, direction, cfg, weights, det_cfg)


def dual_generate(
    frames: list[np.ndarray],
    b_o: list[BBox],
    direction: AttackDirection,
    config: AttackConfig,
    weights,
    det_cfg,
) -> AttackResult:
    """Hijack patch plus an independent disappearance patch trained against
    the erasure objective."""
    if not config.dual:
        raise ValueError("dual_generate needs the dual flag set")
    first = generate_patch(frames, b_o, direction, replace(config, dual=False), weights, det_cfg)
    dx = config.dual_x
    dy = config.dual_y
    if dx is None or dy is None:
        frame_w = frames[0].shape[1]
        dx = min(max(config.patch_x + config.patch_w, 0), frame_w - config.patch_w)
        dy = config.patch_y
    locs = _per_frame_locations(b_o, dx, dy)
    pixels, log, _ = _optimize(frames, b_o, direction, config, weights, det_cfg, locs, "erase")
    return AttackResult(
        patch=first.patch,
        log=first.log,
        terminal=first.terminal,
        iterations=config.iterations,
        second_patch=PatchSpec(pixels, *locs[0]),
        second_log=log,
    )
