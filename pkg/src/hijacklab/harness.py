"""Synthetic scenes, end-to-end attack execution and evaluation metrics.

A scenario is a short clip: a textured background, one target rectangle
("vehicle", class 0) on a linear trajectory, a few distractor rectangles
(class 1), a per-frame allowed patch region (the lower half of the target
box), and an attack window. The success predicate follows the
tracker-hijacking definition: at the first patch-free frame the target's
fresh detection must fail association with every existing tracker, i.e. it
spawns a new tentative track.
"""

from __future__ import annotations

import json
import math
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np

from . import attackopt, detector, imaging, mot, stage1, targeting
from .attackopt import AttackConfig, AttackResult
from .geometry import BBox, Vec2, iou
from .imaging import PatchSpec
from .mot import MotConfig, TrackSet
from .stage1 import Stage1Config
from .targeting import AttackDirection

__all__ = [
    "SceneSpec",
    "Scenario",
    "Outcome",
    "EvalRow",
    "gen_scene",
    "make_benchmark",
    "make_corpus",
    "frame_detections",
    "run_benign",
    "run_attack",
    "max_capability",
    "attack_scenario",
    "evaluate",
    "defense_eval",
    "ap_at_05",
    "save_scenario",
    "load_scenario",
]

_GT_MATCH_IOU = 0.5  # detection <-> ground-truth pairing gate for bookkeeping


@dataclass(frozen=True)
class SceneSpec:
    frame_h: int = 128
    frame_w: int = 128
    n_frames: int = 16
    bg_cells: int = 8
    bg_lo: float = 0.35
    bg_hi: float = 0.65
    target_w: tuple[int, int] = (30, 36)
    target_h: tuple[int, int] = (24, 30)
    target_speed: tuple[float, float] = (0.5, 1.5)
    n_distractors: int = 2
    patch_ratio: float = 0.12
    t_start: int = 6
    t_end: int = 9

    def __post_init__(self):
        if not (0.0 < self.patch_ratio < 1.0):
            raise ValueError("patch ratio must lie in (0, 1)")
        if not (0 <= self.t_start <= self.t_end < self.n_frames - 1):
            raise ValueError("attack window must leave at least one patch-free frame")


@dataclass
class Scenario:
    frames: list[np.ndarray]
    target_boxes: list[BBox]
    distractors: list[list[tuple[BBox, int]]]
    regions: list[BBox]  # allowed patch region per frame
    t_start: int
    t_end: int
    goal: str
    v: Vec2
    seed: int
    patch_h: int
    patch_w: int

    @property
    def n_frames(self) -> int:
        return len(self.frames)

    @property
    def direction(self) -> AttackDirection:
        return AttackDirection(self.v, self.goal)

    def gts(self, f: int) -> list[tuple[BBox, int]]:
        return [(self.target_boxes[f], 0)] + list(self.distractors[f])


@dataclass
class Outcome:
    success: bool
    frames_to_success: int | None
    pre_attack_id: int | None
    post_attack_new_id: int | None
    target_ids: list[int | None]
    confirmed_frame: int | None
    track_rows: list[tuple]


@dataclass
class EvalRow:
    label: str
    asr: float
    mean_frames: float | None
    successes: int
    total: int


# -- scene generation ----------------------------------------------------------


def _box_blur(img: np.ndarray, r: int) -> np.ndarray:
    pad = np.pad(img, ((r, r), (r, r), (0, 0)), mode="edge")
    c = pad.cumsum(axis=0)
    c = np.vstack([np.zeros((1,) + c.shape[1:]), c])
    rows = (c[2 * r + 1 :] - c[: -2 * r - 1]) / (2 * r + 1)
    c = rows.cumsum(axis=1)
    c = np.concatenate([np.zeros((c.shape[0], 1, c.shape[2])), c], axis=1)
    return (c[:, 2 * r + 1 :] - c[:, : -2 * r - 1]) / (2 * r + 1)


def _render_rect(img: np.ndarray, box: BBox, body: np.ndarray, border: np.ndarray, window: np.ndarray | None):
    """Bordered textured rectangle. Vehicles (window is not None) carry their
    high-contrast trim low on the body, the rear-bumper zone where physical
    patches go; the top edge stays muted."""
    h, w, _ = img.shape
    x1, y1 = int(round(box.x1)), int(round(box.y1))
    x2, y2 = int(round(box.x2)), int(round(box.y2))
    x1, y1 = max(x1, 0), max(y1, 0)
    x2, y2 = min(x2, w), min(y2, h)
    if window is None:
        img[y1:y2, x1:x2] = border
        img[y1 + 2 : y2 - 2, x1 + 2 : x2 - 2] = body
        return
    img[y1:y2, x1:x2] = body
    dim = body + 0.35 * (border - body)
    img[y1 : y1 + 2, x1:x2] = dim  # muted roofline
    mid = (y1 + y2) // 2
    img[mid:y2, x1 : x1 + 2] = border
    img[mid:y2, x2 - 2 : x2] = border
    img[y2 - 3 : y2, x1:x2] = border  # bumper band
    wy1 = y1 + 3
    wy2 = y1 + max(4, (y2 - y1) // 3)
    img[wy1:wy2, x1 + 4 : x2 - 4] = window


def gen_scene(spec: SceneSpec, seed: int, goal: str = "move_out", direction: Vec2 | None = None) -> Scenario:
    """Deterministic clip: seeded low-frequency background, one bordered
    textured target on a linear trajectory, distractors kept clear of it."""
    rng = np.random.default_rng([seed, 0x5CE7E])
    h, w = spec.frame_h, spec.frame_w

    cells = rng.uniform(spec.bg_lo, spec.bg_hi, (spec.bg_cells, spec.bg_cells, 3))
    bg = np.kron(cells, np.ones((h // spec.bg_cells, w // spec.bg_cells, 1)))
    bg = np.clip(_box_blur(bg, 5), 0.0, 1.0)

    tw = int(rng.integers(spec.target_w[0], spec.target_w[1] + 1))
    th = int(rng.integers(spec.target_h[0], spec.target_h[1] + 1))
    speed = float(rng.uniform(*spec.target_speed)) * (1 if rng.random() < 0.5 else -1)
    margin = 8.0
    span = speed * (spec.n_frames - 1)
    x_lo = margin + max(0.0, -span)
    x_hi = w - margin - tw - max(0.0, span)
    if x_hi < x_lo:
        raise ValueError("target would exit the frame; shrink speed or size")
    x0 = float(rng.uniform(x_lo, x_hi))
    y0 = float(rng.uniform(margin, h - margin - th))
    target_boxes = [BBox(x0 + speed * f, y0, x0 + speed * f + tw, y0 + th) for f in range(spec.n_frames)]
    for b in target_boxes:
        if b.x1 < 0 or b.y1 < 0 or b.x2 > w or b.y2 > h:
            raise ValueError("target would exit the frame")

    target_body = rng.uniform(0.08, 0.25, 3)
    target_border = rng.uniform(0.85, 0.95, 3)
    target_window = rng.uniform(0.5, 0.7, 3)

    distractors: list[list[tuple[BBox, int]]] = [[] for _ in range(spec.n_frames)]
    d_looks = []
    for _ in range(spec.n_distractors):
        for _try in range(40):
            dw_ = int(rng.integers(14, 25))
            dh_ = int(rng.integers(12, 22))
            dx0 = float(rng.uniform(2, w - dw_ - 2))
            dy0 = float(rng.uniform(2, h - dh_ - 2))
            dsp = float(rng.uniform(-1.0, 1.0))
            traj = [BBox(dx0 + dsp * f, dy0, dx0 + dsp * f + dw_, dy0 + dh_) for f in range(spec.n_frames)]
            if any(b.x1 < 0 or b.x2 > w for b in traj):
                continue
            grown = [BBox(b.x1 - 4, b.y1 - 4, b.x2 + 4, b.y2 + 4) for b in target_boxes]
            if any(iou(d, g) > 0 for d, g in zip(traj, grown)):
                continue
            body = rng.uniform(0.6, 0.85, 3)
            border = rng.uniform(0.02, 0.15, 3)
            d_looks.append((traj, body, border))
            break
    for traj, _, _ in d_looks:
        for f in range(spec.n_frames):
            distractors[f].append((traj[f], 1))

    frames = []
    for f in range(spec.n_frames):
        img = bg.copy()
        for traj, body, border in d_looks:
            _render_rect(img, traj[f], body, border, None)
        _render_rect(img, target_boxes[f], target_body, target_border, target_window)
        frames.append(np.clip(img, 0.0, 1.0).astype(np.float32).astype(np.float64))

    regions = []
    for b in target_boxes:
        cy = (b.y1 + b.y2) / 2.0
        regions.append(BBox(math.ceil(b.x1), math.ceil(cy), math.floor(b.x2), math.floor(b.y2)))

    side = int(math.floor(math.sqrt(spec.patch_ratio * tw * th)))
    side = min(side, int(regions[0].y2 - regions[0].y1), int(regions[0].x2 - regions[0].x1))
    if side < 2:
        raise ValueError("patch budget too small for this target")

    if direction is None:
        center_x = (target_boxes[spec.t_start].x1 + target_boxes[spec.t_start].x2) / 2.0
        outward = 1.0 if center_x >= w / 2 else -1.0
        sign = outward if goal == "move_out" else -outward
        direction = Vec2(2.0 * sign, 0.0)

    return Scenario(
        frames=frames,
        target_boxes=target_boxes,
        distractors=distractors,
        regions=regions,
        t_start=spec.t_start,
        t_end=spec.t_end,
        goal=goal,
        v=direction,
        seed=seed,
        patch_h=side,
        patch_w=side,
    )


def make_benchmark(n: int = 20, seed: int = 1000, spec: SceneSpec | None = None) -> list[Scenario]:
    """Half move-in, half move-out scenarios with derived seeds."""
    spec = spec or SceneSpec()
    out = []
    for i in range(n):
        goal = "move_in" if i < n // 2 else "move_out"
        out.append(gen_scene(spec, seed + i, goal=goal))
    return out


def make_corpus(n_scenes: int = 100, seed: int = 5000, spec: SceneSpec | None = None, frames_per_scene: int = 2):
    """(image, ground-truth) training pairs sampled from each scene."""
    spec = spec or SceneSpec()
    corpus = []
    for i in range(n_scenes):
        sc = gen_scene(spec, seed + i)
        step = max(1, sc.n_frames // frames_per_scene)
        for f in list(range(0, sc.n_frames, step))[:frames_per_scene]:
            corpus.append((sc.frames[f], sc.gts(f)))
    return corpus


# -- pipeline ------------------------------------------------------------------


def frame_detections(frame: np.ndarray, weights, det_cfg, defense: tuple[str, float, int] | None = None):
    """Post-NMS detections of one frame as (BBox, confidence) pairs."""
    if defense is not None:
        frame = imaging.defense_transform(frame, defense[0], defense[1], defense[2] if len(defense) > 2 else 0)
    det = detector.forward(frame, weights, det_cfg)
    return [(BBox.from_array(det.boxes[i]), float(det.conf[i])) for i in det.kept]


def _best_target_det(dets, gt: BBox) -> int | None:
    best, best_iou = None, _GT_MATCH_IOU
    for i, (b, _) in enumerate(dets):
        v = iou(b, gt)
        if v >= best_iou:
            best, best_iou = i, v
    return best


def _simulate(det_seq, sc: Scenario, mot_cfg: MotConfig):
    """Run MOT over per-frame detections; return per-frame results and logs."""
    tracks = TrackSet()
    frame_results = []
    track_rows: list[tuple] = []
    target_ids: list[int | None] = []
    confirmed_frame = None
    for f, dets in enumerate(det_seq):
        tracks, res = mot.step(tracks, dets, mot_cfg)
        frame_results.append(res)
        matched_by_det = {di: tid for tid, di in res.matches}
        spawn_by_det = {}
        spawned = iter(res.new_ids)
        unmatched = [di for di in range(len(dets)) if di not in matched_by_det]
        for di, tid in zip(unmatched, spawned):
            spawn_by_det[di] = tid
        ti = _best_target_det(dets, sc.target_boxes[f])
        tid = matched_by_det.get(ti, spawn_by_det.get(ti)) if ti is not None else None
        target_ids.append(tid)
        det_of_track = {t: d for t, d in res.matches}
        for t in tracks.trackers:
            m = t.mean
            track_rows.append(
                (f, t.track_id, t.status, m[0], m[1], m[2], m[3], m[4], m[5], det_of_track.get(t.track_id, -1))
            )
        if confirmed_frame is None and tid is not None:
            tr = next((t for t in tracks.trackers if t.track_id == tid), None)
            if tr is not None and tr.status == mot.CONFIRMED:
                confirmed_frame = f
    return frame_results, track_rows, target_ids, confirmed_frame


def _success_at(det_seq, sc: Scenario, mot_cfg: MotConfig, check_frame: int):
    """Hijack predicate: the target's detection at check_frame associates with
    no existing tracker (it spawns a new tentative track)."""
    frame_results, track_rows, target_ids, confirmed_frame = _simulate(det_seq, sc, mot_cfg)
    res = frame_results[check_frame]
    dets = det_seq[check_frame]
    ti = _best_target_det(dets, sc.target_boxes[check_frame])
    if ti is None:
        return False, None, (frame_results, track_rows, target_ids, confirmed_frame)
    matched = {di for _, di in res.matches}
    if ti in matched:
        return False, None, (frame_results, track_rows, target_ids, confirmed_frame)
    unmatched = [di for di in range(len(dets)) if di not in matched]
    new_id = None
    for di, tid in zip(unmatched, res.new_ids):
        if di == ti:
            new_id = tid
    return True, new_id, (frame_results, track_rows, target_ids, confirmed_frame)


def run_benign(sc: Scenario, weights, det_cfg, mot_cfg: MotConfig, defense=None) -> Outcome:
    det_seq = [frame_detections(fr, weights, det_cfg, defense) for fr in sc.frames]
    check = sc.t_end + 1
    success, new_id, (fr_res, rows, target_ids, confirmed) = _success_at(det_seq, sc, mot_cfg, check)
    return Outcome(
        success=success,
        frames_to_success=None,
        pre_attack_id=target_ids[sc.t_start - 1] if sc.t_start > 0 else None,
        post_attack_new_id=new_id,
        target_ids=target_ids,
        confirmed_frame=confirmed,
        track_rows=rows,
    )


def _patch_locations(sc: Scenario, patch: PatchSpec) -> dict[int, tuple[int, int]]:
    base = sc.target_boxes[sc.t_start]
    off_x = patch.x - base.x1
    off_y = patch.y - base.y1
    return {
        f: (int(round(sc.target_boxes[f].x1 + off_x)), int(round(sc.target_boxes[f].y1 + off_y)))
        for f in range(sc.n_frames)
    }


def run_attack(
    sc: Scenario,
    patches: PatchSpec | list[PatchSpec],
    weights,
    det_cfg,
    mot_cfg: MotConfig,
    defense=None,
    window: tuple[int, int] | None = None,
    measure_frames: bool = True,
) -> Outcome:
    """Full pipeline with the patch riding the target inside the window."""
    if isinstance(patches, PatchSpec):
        patches = [patches]
    t0, t1 = window if window is not None else (sc.t_start, sc.t_end)
    locs = [_patch_locations(sc, p) for p in patches]
    benign = [frame_detections(fr, weights, det_cfg, defense) for fr in sc.frames]
    patched: dict[int, list] = {}
    for f in range(t0, t1 + 1):
        img = sc.frames[f]
        for p, lmap in zip(patches, locs):
            img = imaging.apply_patch(img, p.at(*lmap[f]))
        patched[f] = frame_detections(img, weights, det_cfg, defense)

    def seq_for(end_frame: int):
        return [patched[f] if t0 <= f <= end_frame else benign[f] for f in range(sc.n_frames)]

    success, new_id, (fr_res, rows, target_ids, confirmed) = _success_at(seq_for(t1), sc, mot_cfg, t1 + 1)
    frames_to_success = None
    if success and measure_frames:
        for k in range(1, t1 - t0 + 2):
            ok, _, _ = _success_at(seq_for(t0 + k - 1), sc, mot_cfg, t0 + k)
            if ok:
                frames_to_success = k
                break
    elif success:
        frames_to_success = t1 - t0 + 1
    return Outcome(
        success=success,
        frames_to_success=frames_to_success,
        pre_attack_id=target_ids[t0 - 1] if t0 > 0 else None,
        post_attack_new_id=new_id,
        target_ids=target_ids,
        confirmed_frame=confirmed,
        track_rows=rows,
    )


def max_capability(
    sc: Scenario, direction: AttackDirection | None, mot_cfg: MotConfig, window: tuple[int, int] | None = None
) -> Outcome:
    """Detector-free upper bound: ground-truth detections everywhere, and
    during the window the target's detection is replaced by the maximal
    gate-compatible shift away from the tracker's own prediction, so the
    displacement accumulates frame over frame."""
    direction = direction or sc.direction
    t0, t1 = window if window is not None else (sc.t_start, sc.t_end)

    def simulate(end_frame: int):
        tracks = TrackSet()
        frame_results = []
        target_ids: list[int | None] = []
        det_seq = []
        target_tid = None
        for f in range(sc.n_frames):
            dets = [(b, 0.9) for b, _ in sc.distractors[f]]
            if t0 <= f <= end_frame and target_tid is not None:
                tracker = next((t for t in tracks.alive() if t.track_id == target_tid), None)
                if tracker is not None:
                    pred = mot.predict(tracker.copy())
                    fake = targeting.find_target_bbox(pred, direction.v, mot_cfg.t_iou)
                else:
                    fake = targeting.find_target_bbox(sc.target_boxes[f], direction.v, mot_cfg.t_iou)
                dets = [(fake, 0.9)] + dets
            else:
                dets = [(sc.target_boxes[f], 0.9)] + dets
            tracks, res = mot.step(tracks, dets, mot_cfg)
            frame_results.append(res)
            det_seq.append(dets)
            matched_by_det = {di: tid for tid, di in res.matches}
            if not (t0 <= f <= end_frame):
                ti = _best_target_det(dets, sc.target_boxes[f])
                tid = matched_by_det.get(ti) if ti is not None else None
                target_ids.append(tid)
                if tid is not None:
                    target_tid = tid
            else:
                target_ids.append(matched_by_det.get(0))
        return frame_results, det_seq, target_ids

    def verdict(end_frame: int):
        frame_results, det_seq, target_ids = simulate(end_frame)
        check = end_frame + 1
        res = frame_results[check]
        dets = det_seq[check]
        ti = _best_target_det(dets, sc.target_boxes[check])
        if ti is None:
            return False, None, target_ids
        matched = {di for _, di in res.matches}
        if ti in matched:
            return False, None, target_ids
        unmatched = [di for di in range(len(dets)) if di not in matched]
        new_id = None
        for di, tid in zip(unmatched, res.new_ids):
            if di == ti:
                new_id = tid
        return True, new_id, target_ids

    success, new_id, target_ids = verdict(t1)
    frames_to_success = None
    if success:
        for k in range(1, t1 - t0 + 2):
            ok, _, _ = verdict(t0 + k - 1)
            if ok:
                frames_to_success = k
                break
    return Outcome(
        success=success,
        frames_to_success=frames_to_success,
        pre_attack_id=target_ids[t0 - 1] if t0 > 0 else None,
        post_attack_new_id=new_id,
        target_ids=target_ids,
        confirmed_frame=None,
        track_rows=[],
    )


# -- scenario-level attack driver ---------------------------------------------


def choose_location(
    sc: Scenario,
    strategy,
    weights,
    det_cfg,
    stage1_cfg: Stage1Config | None = None,
    seed: int = 0,
) -> tuple[int, int]:
    """Patch placement: "stage1" optimization, "random" in the allowed
    region, "center" of the region, or an explicit (x, y)."""
    f = sc.t_start
    region = sc.regions[f]
    if isinstance(strategy, tuple):
        return int(strategy[0]), int(strategy[1])
    if strategy == "stage1":
        cfg = stage1_cfg or Stage1Config(window_h=sc.patch_h, window_w=sc.patch_w)
        if (cfg.window_h, cfg.window_w) != (sc.patch_h, sc.patch_w):
            cfg = replace(cfg, window_h=sc.patch_h, window_w=sc.patch_w)
        (x, y), _ = stage1.preselect_location(
            sc.frames[f], sc.target_boxes[f], sc.direction, region, cfg, weights, det_cfg
        )
        return x, y
    if strategy == "random":
        rng = np.random.default_rng([seed, sc.seed, 0x10C])
        x_hi = int(region.x2 - sc.patch_w)
        y_hi = int(region.y2 - sc.patch_h)
        x = int(rng.integers(int(region.x1), max(int(region.x1), x_hi) + 1))
        y = int(rng.integers(int(region.y1), max(int(region.y1), y_hi) + 1))
        return x, y
    if strategy == "center":
        x = int((region.x1 + region.x2) / 2 - sc.patch_w / 2)
        y = int((region.y1 + region.y2) / 2 - sc.patch_h / 2)
        return x, y
    raise ValueError(f"unknown location strategy {strategy!r}")


def attack_scenario(
    sc: Scenario,
    weights,
    det_cfg,
    mot_cfg: MotConfig,
    atk_cfg: AttackConfig,
    location="stage1",
    stage1_cfg: Stage1Config | None = None,
) -> tuple[Outcome, AttackResult, tuple[int, int]]:
    """Pick a location, generate the patch on the window frames, evaluate."""
    x, y = choose_location(sc, location, weights, det_cfg, stage1_cfg, seed=atk_cfg.seed)
    cfg = replace(
        atk_cfg,
        patch_h=sc.patch_h,
        patch_w=sc.patch_w,
        patch_x=x,
        patch_y=y,
        seed=int(np.random.default_rng([atk_cfg.seed, sc.seed]).integers(0, 2**31)),
    )
    frames = sc.frames[sc.t_start : sc.t_end + 1]
    boxes = sc.target_boxes[sc.t_start : sc.t_end + 1]
    result = attackopt.generate_patch(frames, boxes, sc.direction, cfg, weights, det_cfg)
    outcome = run_attack(sc, result.patch, weights, det_cfg, mot_cfg)
    return outcome, result, (x, y)


def _attack_one(args):
    sc, weights, det_cfg, mot_cfg, atk_cfg, location, stage1_cfg = args
    return attack_scenario(sc, weights, det_cfg, mot_cfg, atk_cfg, location, stage1_cfg)


def evaluate(
    benchmark: list[Scenario],
    weights,
    det_cfg,
    mot_cfg: MotConfig,
    atk_cfg: AttackConfig,
    location="stage1",
    stage1_cfg: Stage1Config | None = None,
    jobs: int = 1,
    label: str | None = None,
):
    """ASR and mean frames-to-success (over successes only) for one attack
    configuration across the benchmark."""
    if not benchmark:
        raise ValueError("need at least one scenario")
    tasks = [(sc, weights, det_cfg, mot_cfg, atk_cfg, location, stage1_cfg) for sc in benchmark]
    if jobs > 1:
        with ProcessPoolExecutor(max_workers=jobs) as pool:
            results = list(pool.map(_attack_one, tasks))
    else:
        results = [_attack_one(t) for t in tasks]
    outcomes = [r[0] for r in results]
    row = summarize(outcomes, label or f"{atk_cfg.optimizer}")
    return row, results


def summarize(outcomes: list[Outcome], label: str) -> EvalRow:
    succ = [o for o in outcomes if o.success]
    frames = [o.frames_to_success for o in succ if o.frames_to_success is not None]
    return EvalRow(
        label=label,
        asr=len(succ) / len(outcomes),
        mean_frames=(sum(frames) / len(frames)) if frames else None,
        successes=len(succ),
        total=len(outcomes),
    )


def ap_at_05(corpus, weights, det_cfg, defense=None, class_id: int = 0) -> float:
    """Average precision at IOU 0.5, all-point interpolation, one class."""
    records = []  # (conf, image index, box)
    gts = []
    for idx, (img, gt) in enumerate(corpus):
        gts.append([b for b, c in gt if c == class_id])
        if defense is not None:
            img = imaging.defense_transform(img, defense[0], defense[1], defense[2] if len(defense) > 2 else 0)
        det = detector.forward(img, weights, det_cfg)
        for i in det.kept:
            if int(det.class_id[i]) == class_id:
                records.append((float(det.conf[i]), idx, BBox.from_array(det.boxes[i])))
    n_gt = sum(len(g) for g in gts)
    if n_gt == 0:
        return 0.0
    records.sort(key=lambda r: -r[0])
    used = [set() for _ in gts]
    tps = []
    for conf, idx, box in records:
        best_j, best_iou = None, 0.5
        for j, g in enumerate(gts[idx]):
            if j in used[idx]:
                continue
            v = iou(box, g)
            if v >= best_iou:
                best_j, best_iou = j, v
        if best_j is not None:
            used[idx].add(best_j)
            tps.append(1.0)
        else:
            tps.append(0.0)
    tp = np.cumsum(tps)
    fp = np.cumsum([1.0 - t for t in tps])
    recall = tp / n_gt
    precision = tp / np.maximum(tp + fp, 1e-12)
    # precision envelope, integrated over recall steps
    env = np.maximum.accumulate(precision[::-1])[::-1]
    ap = 0.0
    prev_r = 0.0
    for r, p in zip(recall, env):
        ap += (r - prev_r) * p
        prev_r = r
    return float(ap)


def defense_eval(
    benchmark: list[Scenario],
    patches: list[PatchSpec],
    corpus,
    weights,
    det_cfg,
    mot_cfg: MotConfig,
    defenses: list[tuple[str, float]],
    seed: int = 0,
) -> list[dict]:
    """ASR under each input-transformation defense (patches held fixed) plus
    the clean-corpus AP it costs."""
    rows = []
    for kind, strength in defenses:
        d = None if kind == "none" else (kind, strength, seed)
        outcomes = [
            run_attack(sc, p, weights, det_cfg, mot_cfg, defense=d, measure_frames=False)
            for sc, p in zip(benchmark, patches)
        ]
        row = summarize(outcomes, f"{kind}:{strength}")
        rows.append(
            {
                "defense": kind,
                "strength": strength,
                "asr": row.asr,
                "ap": ap_at_05(corpus, weights, det_cfg, defense=d),
            }
        )
    return rows


# -- scenario files --------------------------------------------------------------


def save_scenario(path, sc: Scenario) -> None:
    """Scenario directory: frames/NNN.clim plus scenario.json."""
    path = Path(path)
    (path / "frames").mkdir(parents=True, exist_ok=True)
    refs = []
    for i, frame in enumerate(sc.frames):
        ref = f"frames/{i:03d}.clim"
        imaging.write_image(path / ref, frame)
        refs.append(ref)
    doc = {
        "frames": refs,
        "target_boxes": [[b.x1, b.y1, b.x2, b.y2] for b in sc.target_boxes],
        "distractors": [[[list(b.as_array()), c] for b, c in per] for per in sc.distractors],
        "regions": [[b.x1, b.y1, b.x2, b.y2] for b in sc.regions],
        "t_start": sc.t_start,
        "t_end": sc.t_end,
        "goal": sc.goal,
        "v": [sc.v.dx, sc.v.dy],
        "seed": sc.seed,
        "patch_h": sc.patch_h,
        "patch_w": sc.patch_w,
    }
    (path / "scenario.json").write_text(json.dumps(doc, indent=2, sort_keys=True))


def load_scenario(path) -> Scenario:
    path = Path(path)
    doc = json.loads((path / "scenario.json").read_text())
    frames = [imaging.read_image(path / ref) for ref in doc["frames"]]
    return Scenario(
        frames=frames,
        target_boxes=[BBox(*b) for b in doc["target_boxes"]],
        distractors=[[(BBox(*b), int(c)) for b, c in per] for per in doc["distractors"]],
        regions=[BBox(*b) for b in doc["regions"]],
        t_start=int(doc["t_start"]),
        t_end=int(doc["t_end"]),
        goal=doc["goal"],
        v=Vec2(*doc["v"]),
        seed=int(doc["seed"]),
        patch_h=int(doc["patch_h"]),
        patch_w=int(doc["patch_w"]),
    )
