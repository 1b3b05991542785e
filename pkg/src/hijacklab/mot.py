"""Tracking-by-detection state machine.

Constant-velocity Kalman tracking over (cx, cy, w, h) plus velocities, IOU
gating with Hungarian assignment, and the hit/miss lifecycle: a tracker is
Tentative until H consecutive hits confirm it, and any tracker is Deleted
once it goes unmatched for more than R consecutive frames. Track ids are
strictly increasing and never reused.
"""

from __future__ import annotations

from dataclasses import dataclass, field, replace

import numpy as np
from scipy.optimize import linear_sum_assignment

from .geometry import BBox, iou_matrix

__all__ = [
    "TENTATIVE",
    "CONFIRMED",
    "DELETED",
    "MotConfig",
    "TrackerState",
    "TrackSet",
    "MotFrameResult",
    "new_tracker",
    "predict",
    "associate",
    "step",
    "TRACK_LOG_HEADER",
]

TENTATIVE = "tentative"
CONFIRMED = "confirmed"
DELETED = "deleted"

_DIM = 8
_F = np.eye(_DIM)
for _i in range(4):
    _F[_i, _i + 4] = 1.0
_Q = np.diag([1.0, 1.0, 1.0, 1.0, 0.01, 0.01, 0.01, 0.01])
_H = np.zeros((4, _DIM))
_H[:4, :4] = np.eye(4)
_P0 = np.diag([10.0, 10.0, 10.0, 10.0, 1e3, 1e3, 1e3, 1e3])

_GATE_COST = 1e6
_TIE_EPS = 1e-9

TRACK_LOG_HEADER = ["frame", "track_id", "status", "cx", "cy", "w", "h", "v_cx", "v_cy", "det_index"]


@dataclass(frozen=True)
class MotConfig:
    t_iou: float = 0.3
    confirm_hits: int = 3  # H
    max_misses: int = 2  # R
    cov: float = 1.0
    association: str = "hungarian"

    def __post_init__(self):
        if not (0.0 < self.t_iou < 1.0):
            raise ValueError("t_iou must lie in (0, 1)")
        if self.confirm_hits < 1 or self.max_misses < 0 or self.cov <= 0:
            raise ValueError("need H >= 1, R >= 0 and cov > 0")
        if self.association != "hungarian":
            raise ValueError(f"unsupported association method {self.association!r}")


@dataclass
class TrackerState:
    track_id: int
    mean: np.ndarray  # (cx, cy, w, h, v_cx, v_cy, v_w, v_h)
    cov: np.ndarray  # 8x8
    hits: int = 1
    time_since_update: int = 0
    status: str = TENTATIVE

    def copy(self) -> "TrackerState":
        return TrackerState(
            self.track_id, self.mean.copy(), self.cov.copy(), self.hits, self.time_since_update, self.status
        )

    def box(self) -> BBox:
        cx, cy, w, h = self.mean[:4]
        w = max(w, 1e-3)
        h = max(h, 1e-3)
        return BBox(cx - w / 2, cy - h / 2, cx + w / 2, cy + h / 2)


@dataclass
class TrackSet:
    trackers: list[TrackerState] = field(default_factory=list)
    next_id: int = 1

    def alive(self) -> list[TrackerState]:
        return [t for t in self.trackers if t.status != DELETED]


@dataclass
class MotFrameResult:
    predicted: dict[int, BBox]
    matches: list[tuple[int, int]]  # (track id, detection index)
    new_ids: list[int]
    deleted_ids: list[int]


def _measure(box: BBox) -> np.ndarray:
    cx, cy = (box.x1 + box.x2) / 2, (box.y1 + box.y2) / 2
    return np.array([cx, cy, box.w, box.h], dtype=np.float64)


def new_tracker(track_id: int, box: BBox) -> TrackerState:
    mean = np.zeros(_DIM)
    mean[:4] = _measure(box)
    return TrackerState(track_id=track_id, mean=mean, cov=_P0.copy())


def predict(t: TrackerState) -> BBox:
    """Time update in place: constant-velocity mean, inflated covariance."""
    if t.status == DELETED:
        raise ValueError("deleted trackers never re-enter prediction")
    t.mean = _F @ t.mean
    t.cov = _F @ t.cov @ _F.T + _Q
    return t.box()


def _kalman_update(t: TrackerState, box: BBox, cov_scale: float) -> None:
    r = cov_scale * np.eye(4)
    s = _H @ t.cov @ _H.T + r
    k = np.linalg.solve(s, _H @ t.cov).T
    innovation = _measure(box) - _H @ t.mean
    t.mean = t.mean + k @ innovation
    p = (np.eye(_DIM) - k @ _H) @ t.cov
    t.cov = (p + p.T) / 2.0


def associate(
    predicted: list[BBox], detections: list[BBox], t_iou: float
) -> tuple[list[tuple[int, int]], list[int], list[int]]:
    """Min-cost assignment over 1-IOU with pairs at or below the gate
    inadmissible; ties broken toward low (tracker, detection) indices."""
    if not (0.0 < t_iou < 1.0):
        raise ValueError("t_iou must lie in (0, 1)")
    n, m = len(predicted), len(detections)
    if n == 0 or m == 0:
        return [], list(range(n)), list(range(m))
    ious = iou_matrix(
        np.stack([b.as_array() for b in predicted]),
        np.stack([b.as_array() for b in detections]),
    )
    cost = 1.0 - ious
    cost[ious <= t_iou] = _GATE_COST
    cost = cost + _TIE_EPS * (np.arange(n)[:, None] * m + np.arange(m)[None, :])
    rows, cols = linear_sum_assignment(cost)
    matches = [(int(r), int(c)) for r, c in zip(rows, cols) if ious[r, c] > t_iou]
    matches.sort()
    matched_t = {r for r, _ in matches}
    matched_d = {c for _, c in matches}
    return (
        matches,
        [i for i in range(n) if i not in matched_t],
        [j for j in range(m) if j not in matched_d],
    )


def step(
    tracks: TrackSet, detections: list[tuple[BBox, float]], config: MotConfig
) -> tuple[TrackSet, MotFrameResult]:
    """One frame: predict, associate, update, manage lifecycle.

    Pure with respect to the input TrackSet (trackers are copied), so frame
    sequences can be re-simulated from any saved state.
    """
    live = [t.copy() for t in tracks.alive()]
    predicted: dict[int, BBox] = {}
    pred_boxes: list[BBox] = []
    for t in live:
        pred_boxes.append(predict(t))
        predicted[t.track_id] = pred_boxes[-1]
    det_boxes = [b for b, _ in detections]
    matches, unmatched_t, unmatched_d = associate(pred_boxes, det_boxes, config.t_iou)

    result_matches: list[tuple[int, int]] = []
    for ti, di in matches:
        t = live[ti]
        _kalman_update(t, det_boxes[di], config.cov)
        t.hits += 1
        t.time_since_update = 0
        if t.status == TENTATIVE and t.hits >= config.confirm_hits:
            t.status = CONFIRMED
        result_matches.append((t.track_id, di))

    deleted_ids: list[int] = []
    for ti in unmatched_t:
        t = live[ti]
        t.hits = 0
        t.time_since_update += 1
        if t.time_since_update > config.max_misses:
            t.status = DELETED
            deleted_ids.append(t.track_id)

    next_id = tracks.next_id
    new_ids: list[int] = []
    spawned: list[TrackerState] = []
    for di in unmatched_d:
        t = new_tracker(next_id, det_boxes[di])
        if t.hits >= config.confirm_hits:
            t.status = CONFIRMED
        spawned.append(t)
        new_ids.append(next_id)
        next_id += 1

    survivors = [t for t in live if t.status != DELETED] + spawned
    return TrackSet(survivors, next_id), MotFrameResult(predicted, result_matches, new_ids, deleted_ids)
