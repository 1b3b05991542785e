"""Toy differentiable grid detector standing in for a production one-stage model.

Two strided convolutions (overall stride 8, leaky-ReLU 0.1) and a 1x1 head
predict, per grid cell and anchor, raw values (t_x, t_y, t_w, t_h, t_obj,
t_class..). Centers decode to sigma(t) + cell (in cell units, times stride);
sizes to anchor * exp(t clamped to +-4). Confidence is
sigma(t_obj) * max_i sigma(t_class_i).

The forward pass is built on the reverse-mode tape in ``autodiff``, so exact
input gradients of any scalar loss over the proposals come from one backward
walk. Discrete events of a pass (NMS membership, filter choices, indicator
thresholds) are decided on plain values and stay frozen under
differentiation.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass, field, replace

import numpy as np

from . import autodiff as ad
from . import geometry
from .autodiff import Tensor
from .geometry import BBox
from .util import canonical_json

__all__ = [
    "DetectorConfig",
    "DetectorWeights",
    "Proposal",
    "DetectionOutput",
    "ForwardTrace",
    "SelectedProposals",
    "forward",
    "input_gradient",
    "grad_check",
    "train",
    "save_weights",
    "load_weights",
]

_LEAKY_SLOPE = 0.1
_EXP_CLAMP = 4.0


@dataclass(frozen=True)
class DetectorConfig:
    h: int = 128
    w: int = 128
    stride: int = 8
    anchors: tuple[tuple[float, float], ...] = ((16.0, 16.0), (24.0, 12.0), (12.0, 24.0))
    n_classes: int = 2
    c1: int = 16
    c2: int = 32
    k1: int = 9
    k2: int = 11
    nms_iou: float = 0.5
    t_conf: float = 0.25
    anchor_free: bool = False

    def __post_init__(self):
        if self.stride != 8:
            raise ValueError("two-conv architecture fixes the overall stride at 8")
        if self.h % self.stride or self.w % self.stride:
            raise ValueError("input size must be divisible by the stride")
        if not self.anchors:
            raise ValueError("need at least one anchor")
        if self.anchor_free and len(self.anchors) != 1:
            raise ValueError("anchor-free mode uses exactly one base anchor")
        if self.n_classes < 1:
            raise ValueError("need at least one class")
        if not (0.0 < self.t_conf < 1.0):
            raise ValueError("t_conf must lie in (0, 1)")

    @property
    def grid_h(self) -> int:
        return self.h // self.stride

    @property
    def grid_w(self) -> int:
        return self.w // self.stride

    @property
    def n_anchors(self) -> int:
        return len(self.anchors)

    @property
    def n_proposals(self) -> int:
        return self.grid_h * self.grid_w * self.n_anchors

    @property
    def head_width(self) -> int:
        return self.n_anchors * (5 + self.n_classes)

    def to_dict(self) -> dict:
        return {
            "h": self.h,
            "w": self.w,
            "stride": self.stride,
            "anchors": [list(a) for a in self.anchors],
            "n_classes": self.n_classes,
            "c1": self.c1,
            "c2": self.c2,
            "k1": self.k1,
            "k2": self.k2,
            "nms_iou": self.nms_iou,
            "t_conf": self.t_conf,
            "anchor_free": self.anchor_free,
        }

    @staticmethod
    def from_dict(d: dict) -> "DetectorConfig":
        d = dict(d)
        d["anchors"] = tuple(tuple(a) for a in d["anchors"])
        return DetectorConfig(**d)


@dataclass
class DetectorWeights:
    w1: np.ndarray
    b1: np.ndarray
    w2: np.ndarray
    b2: np.ndarray
    wh: np.ndarray  # (c2, head_width) 1x1 head
    bh: np.ndarray
    anchor_base: np.ndarray  # (n_anchors, 2); decode source in anchor-free mode

    def arrays(self) -> list[np.ndarray]:
        return [self.w1, self.b1, self.w2, self.b2, self.wh, self.bh, self.anchor_base]

    def check(self, config: DetectorConfig) -> None:
        shapes = _weight_shapes(config)
        for a, s in zip(self.arrays(), shapes):
            if a.shape != s:
                raise ValueError(f"weight shape {a.shape} != expected {s}")
            if not np.all(np.isfinite(a)):
                raise ValueError("non-finite weights")

    def quantized(self) -> "DetectorWeights":
        """Snap values to the float32 grid so file round-trips are bit-exact."""
        return DetectorWeights(*[a.astype(np.float32).astype(np.float64) for a in self.arrays()])


def _weight_shapes(cfg: DetectorConfig) -> list[tuple[int, ...]]:
    return [
        (cfg.k1, cfg.k1, 3, cfg.c1),
        (cfg.c1,),
        (cfg.k2, cfg.k2, cfg.c1, cfg.c2),
        (cfg.c2,),
        (cfg.c2, cfg.head_width),
        (cfg.head_width,),
        (cfg.n_anchors, 2),
    ]


@dataclass(frozen=True)
class Proposal:
    index: int
    box: BBox
    obj: float
    cls: tuple[float, ...]
    conf: float
    cell: tuple[int, int]  # (c_x, c_y)
    anchor: int
    raw: tuple[float, ...]


@dataclass
class DetectionOutput:
    boxes: np.ndarray  # (N, 4) decoded corners
    obj: np.ndarray  # (N,)
    cls: np.ndarray  # (N, n_classes)
    conf: np.ndarray  # (N,)
    class_id: np.ndarray  # (N,) argmax class
    cell: np.ndarray  # (N, 2) as (c_x, c_y)
    anchor: np.ndarray  # (N,)
    raw: np.ndarray  # (N, 5 + n_classes)
    kept: list[int]  # post-NMS survivor indices into the above
    config: DetectorConfig

    @property
    def n(self) -> int:
        return self.boxes.shape[0]

    def proposal(self, i: int) -> Proposal:
        return Proposal(
            index=i,
            box=BBox.from_array(self.boxes[i]),
            obj=float(self.obj[i]),
            cls=tuple(self.cls[i]),
            conf=float(self.conf[i]),
            cell=(int(self.cell[i, 0]), int(self.cell[i, 1])),
            anchor=int(self.anchor[i]),
            raw=tuple(self.raw[i]),
        )


@dataclass
class SelectedProposals:
    """Tensor views of a proposal subset, for building differentiable losses."""

    conf: Tensor
    x1: Tensor
    y1: Tensor
    x2: Tensor
    y2: Tensor


@dataclass
class ForwardTrace:
    x: Tensor
    conf: Tensor  # (N,)
    bx1: Tensor
    by1: Tensor
    bx2: Tensor
    by2: Tensor
    raw: Tensor  # (N, 5 + n_classes)

    def select(self, indices) -> SelectedProposals:
        idx = np.asarray(list(indices), dtype=np.int64)
        return SelectedProposals(
            conf=self.conf[idx],
            x1=self.bx1[idx],
            y1=self.by1[idx],
            x2=self.bx2[idx],
            y2=self.by2[idx],
        )


_GRID_CACHE: dict[tuple, tuple[np.ndarray, ...]] = {}


def _grid_constants(cfg: DetectorConfig):
    key = (cfg.grid_h, cfg.grid_w, cfg.anchors)
    got = _GRID_CACHE.get(key)
    if got is None:
        gh, gw, na = cfg.grid_h, cfg.grid_w, cfg.n_anchors
        cy, cx, a = np.meshgrid(np.arange(gh), np.arange(gw), np.arange(na), indexing="ij")
        anchors = np.asarray(cfg.anchors, dtype=np.float64)
        got = (
            cx.reshape(-1).astype(np.float64),
            cy.reshape(-1).astype(np.float64),
            a.reshape(-1),
            np.stack([cx.reshape(-1), cy.reshape(-1)], axis=1),
            anchors,
        )
        _GRID_CACHE[key] = got
    return got


def _forward_trace(x: np.ndarray, weights: DetectorWeights, cfg: DetectorConfig) -> ForwardTrace:
    if x.shape != (cfg.h, cfg.w, 3):
        raise ValueError(f"input shape {x.shape} != configured {(cfg.h, cfg.w, 3)}")
    weights.check(cfg)
    xt = ad.tensor(x)
    f1 = ad.leaky_relu(ad.conv2d(xt, weights.w1, weights.b1, stride=4, pad=cfg.k1 // 2), _LEAKY_SLOPE)
    f2 = ad.leaky_relu(ad.conv2d(f1, weights.w2, weights.b2, stride=2, pad=cfg.k2 // 2), _LEAKY_SLOPE)
    head = f2.reshape(cfg.grid_h * cfg.grid_w, cfg.c2) @ weights.wh + weights.bh
    return _decode(xt, head, weights, cfg)


def _decode(xt: Tensor, head: Tensor, weights: DetectorWeights, cfg: DetectorConfig) -> ForwardTrace:
    n = cfg.n_proposals
    t = head.reshape(n, 5 + cfg.n_classes)
    cellx, celly, _, _, _ = _grid_constants(cfg)
    if cfg.anchor_free:
        base = weights.anchor_base
        anch_w = np.repeat(base[None, :, 0], cfg.grid_h * cfg.grid_w, axis=0).reshape(-1)
        anch_h = np.repeat(base[None, :, 1], cfg.grid_h * cfg.grid_w, axis=0).reshape(-1)
        bx = (2.0 * ad.sigmoid(t[:, 0]) - 0.5 + cellx) * cfg.stride
        by = (2.0 * ad.sigmoid(t[:, 1]) - 0.5 + celly) * cfg.stride
    else:
        anchors = np.asarray(cfg.anchors, dtype=np.float64)
        anch = np.tile(anchors, (cfg.grid_h * cfg.grid_w, 1))
        anch_w, anch_h = anch[:, 0], anch[:, 1]
        bx = (ad.sigmoid(t[:, 0]) + cellx) * cfg.stride
        by = (ad.sigmoid(t[:, 1]) + celly) * cfg.stride
    pw = t[:, 2].clip(-_EXP_CLAMP, _EXP_CLAMP).exp() * anch_w
    ph = t[:, 3].clip(-_EXP_CLAMP, _EXP_CLAMP).exp() * anch_h
    obj = ad.sigmoid(t[:, 4])
    cls = ad.sigmoid(t[:, 5:])
    best = np.argmax(cls.data, axis=1)  # frozen class choice
    conf = obj * cls[np.arange(n), best]
    return ForwardTrace(
        x=xt,
        conf=conf,
        bx1=bx - pw * 0.5,
        by1=by - ph * 0.5,
        bx2=bx + pw * 0.5,
        by2=by + ph * 0.5,
        raw=t,
    )


def _detections_from_trace(trace: ForwardTrace, cfg: DetectorConfig) -> DetectionOutput:
    n = cfg.n_proposals
    boxes = np.stack([trace.bx1.data, trace.by1.data, trace.bx2.data, trace.by2.data], axis=1)
    conf = trace.conf.data
    raw = trace.raw.data
    obj = 1.0 / (1.0 + np.exp(-raw[:, 4]))
    cls = 1.0 / (1.0 + np.exp(-raw[:, 5:]))
    class_id = np.argmax(cls, axis=1)
    _, _, anchor_ids, cells, _ = _grid_constants(cfg)
    nms_in = [
        ((boxes[i, 0], boxes[i, 1], boxes[i, 2], boxes[i, 3]), float(conf[i]), int(class_id[i]))
        for i in np.nonzero(conf > cfg.t_conf)[0]
    ]
    survivors = np.nonzero(conf > cfg.t_conf)[0]
    kept_local = geometry.nms(nms_in, cfg.nms_iou, cfg.t_conf)
    kept = [int(survivors[i]) for i in kept_local]
    return DetectionOutput(
        boxes=boxes,
        obj=obj,
        cls=cls,
        conf=conf,
        class_id=class_id,
        cell=cells.copy(),
        anchor=anchor_ids.copy(),
        raw=raw,
        kept=kept,
        config=cfg,
    )


def forward(x: np.ndarray, weights: DetectorWeights, cfg: DetectorConfig) -> DetectionOutput:
    """Deterministic full pass: every pre-NMS proposal plus the survivor set."""
    trace = _forward_trace(x, weights, cfg)
    return _detections_from_trace(trace, cfg)


def forward_with_trace(
    x: np.ndarray, weights: DetectorWeights, cfg: DetectorConfig
) -> tuple[DetectionOutput, ForwardTrace]:
    trace = _forward_trace(x, weights, cfg)
    return _detections_from_trace(trace, cfg), trace


def input_gradient(x: np.ndarray, weights: DetectorWeights, cfg: DetectorConfig, loss) -> tuple[float, np.ndarray]:
    """Loss value and d(loss)/d(pixel) for a scalar loss over the proposals.

    ``loss`` is a callable (DetectionOutput, ForwardTrace) -> Tensor, as built
    by the losses module. Discrete selections inside it are constants of this
    pass.
    """
    det, trace = forward_with_trace(x, weights, cfg)
    value = loss(det, trace)
    if value.data.shape != ():
        raise ValueError("loss must be scalar")
    value.backward()
    grad = trace.x.grad
    if grad is None:
        grad = np.zeros_like(x)
    return float(value.data), grad


def grad_check(
    x: np.ndarray,
    weights: DetectorWeights,
    cfg: DetectorConfig,
    loss,
    n_pixels: int = 64,
    eps: float = 1e-3,
    tol: float = 1e-3,
    seed: int = 0,
) -> dict:
    """Compare the analytic input gradient to central finite differences at
    seeded random pixels."""
    if n_pixels < 1:
        raise ValueError("n_pixels must be >= 1")
    if eps <= 0:
        raise ValueError("eps must be > 0")
    _, grad = input_gradient(x, weights, cfg, loss)
    rng = np.random.default_rng(seed)
    h, w, _ = x.shape
    max_rel = 0.0
    for _ in range(n_pixels):
        i = int(rng.integers(h))
        j = int(rng.integers(w))
        c = int(rng.integers(3))
        xp = x.copy()
        xp[i, j, c] += eps
        lp = loss(*forward_with_trace(xp, weights, cfg)).data
        xm = x.copy()
        xm[i, j, c] -= eps
        lm = loss(*forward_with_trace(xm, weights, cfg)).data
        fd = (float(lp) - float(lm)) / (2.0 * eps)
        a = grad[i, j, c]
        rel = abs(a - fd) / max(abs(a), abs(fd), 1e-6)
        max_rel = max(max_rel, rel)
    return {"max_rel_err": max_rel, "pass": max_rel <= tol, "n_checked": n_pixels}


# -- training -----------------------------------------------------------------


def init_weights(cfg: DetectorConfig, seed: int) -> DetectorWeights:
    """He-style seeded init; the objectness bias starts low so the untrained
    head is quiet."""
    rng = np.random.default_rng(seed)

    def he(shape, fan_in):
        return rng.normal(0.0, np.sqrt(2.0 / fan_in), shape)

    bh = np.zeros(cfg.head_width)
    per = 5 + cfg.n_classes
    bh[4::per] = -2.0
    return DetectorWeights(
        w1=he((cfg.k1, cfg.k1, 3, cfg.c1), cfg.k1 * cfg.k1 * 3),
        b1=np.zeros(cfg.c1),
        w2=he((cfg.k2, cfg.k2, cfg.c1, cfg.c2), cfg.k2 * cfg.k2 * cfg.c1),
        b2=np.zeros(cfg.c2),
        wh=he((cfg.c2, cfg.head_width), cfg.c2),
        bh=bh,
        anchor_base=np.asarray(cfg.anchors, dtype=np.float64),
    )


def _logit(p: float) -> float:
    p = min(max(p, 1e-4), 1.0 - 1e-4)
    return float(np.log(p / (1.0 - p)))


def assign_targets(gts: list[tuple[BBox, int]], cfg: DetectorConfig):
    """Per-image targets: the cell containing each ground-truth center gets
    its best shape-IOU anchor as the positive."""
    gh, gw, na = cfg.grid_h, cfg.grid_w, cfg.n_anchors
    obj_t = np.zeros(gh * gw * na)
    box_t = np.zeros((gh * gw * na, 4))
    cls_t = np.zeros((gh * gw * na, cfg.n_classes))
    pos: list[int] = []
    anchors = np.asarray(cfg.anchors, dtype=np.float64)
    for box, cls_id in gts:
        bx, by = geometry.center(box)
        if not (0 <= bx < cfg.w and 0 <= by < cfg.h):
            raise ValueError(f"ground-truth box {box} outside the frame")
        cx = min(int(bx / cfg.stride), gw - 1)
        cy = min(int(by / cfg.stride), gh - 1)
        shape_box = BBox.from_cxcywh(0.0, 0.0, box.w, box.h)
        ious = [geometry.iou(shape_box, BBox.from_cxcywh(0.0, 0.0, aw, ah)) for aw, ah in anchors]
        a = int(np.argmax(ious))
        i = (cy * gw + cx) * na + a
        obj_t[i] = 1.0
        fx = bx / cfg.stride - cx
        fy = by / cfg.stride - cy
        if cfg.anchor_free:
            box_t[i, 0] = _logit((fx + 0.5) / 2.0)
            box_t[i, 1] = _logit((fy + 0.5) / 2.0)
        else:
            box_t[i, 0] = _logit(fx)
            box_t[i, 1] = _logit(fy)
        box_t[i, 2] = np.clip(np.log(box.w / anchors[a, 0]), -_EXP_CLAMP, _EXP_CLAMP)
        box_t[i, 3] = np.clip(np.log(box.h / anchors[a, 1]), -_EXP_CLAMP, _EXP_CLAMP)
        cls_t[i, cls_id] = 1.0
        pos.append(i)
    gt_boxes = np.stack([b.as_array() for b, _ in gts]) if gts else np.zeros((0, 4))
    gt_cls = np.asarray([c for _, c in gts], dtype=np.int64)
    return obj_t, box_t, cls_t, pos, gt_boxes, gt_cls


_HARD_NEGATIVES = 16
_IGNORE_IOU = 0.55
# asymmetric label smoothing keeps logits bounded and sigmoids responsive:
# positives settle near logit +2.2, negatives near -3.9
_SMOOTH_POS = 0.10
_SMOOTH_NEG = 0.02


def _smooth(target: np.ndarray) -> np.ndarray:
    return target * (1 - _SMOOTH_POS - _SMOOTH_NEG) + _SMOOTH_NEG


def _train_loss(trace: ForwardTrace, targets, cfg: DetectorConfig) -> Tensor:
    obj_t, box_t, cls_t, pos, gt_boxes, gt_cls = targets
    t = trace.raw
    obj_bce = ad.bce_with_logits(t[:, 4], _smooth(obj_t))
    neg_mask = 1.0 - obj_t
    # ignore region: negatives whose current decoded box already overlaps a
    # ground truth well are neither punished nor rewarded on objectness, but
    # their class is supervised so class-aware NMS can deduplicate them
    ignored = np.zeros(obj_t.shape, dtype=bool)
    best_gt = np.zeros(obj_t.shape, dtype=np.int64)
    if gt_boxes.shape[0]:
        boxes = np.stack([trace.bx1.data, trace.by1.data, trace.bx2.data, trace.by2.data], axis=1)
        ious = geometry.iou_matrix(boxes, gt_boxes)
        best_gt = np.argmax(ious, axis=1)
        ignored = (ious.max(axis=1) > _IGNORE_IOU) & (neg_mask > 0)
    neg_eff = neg_mask * ~ignored
    n_neg = max(float(neg_eff.sum()), 1.0)
    loss = (obj_bce * neg_eff).sum() / n_neg
    # hard-negative mining: background anchors that fire the loudest
    neg_scores = np.where(neg_eff > 0, t.data[:, 4], -np.inf)
    k = min(_HARD_NEGATIVES, int(neg_eff.sum()))
    if k > 0:
        hard = np.argsort(-neg_scores)[:k]
        loss = loss + obj_bce[hard].mean()
    cls_idx = list(pos) + np.nonzero(ignored)[0].tolist()
    if cls_idx:
        idx = np.asarray(cls_idx, dtype=np.int64)
        cls_target = cls_t[idx].copy()
        for row, i in enumerate(idx):
            if ignored[i]:
                cls_target[row] = 0.0
                cls_target[row, gt_cls[best_gt[i]]] = 1.0
        cls_bce = ad.bce_with_logits(t[idx, 5 : 5 + cfg.n_classes], _smooth(cls_target))
        loss = loss + cls_bce.sum() / len(cls_idx)
    if pos:
        idx = np.asarray(pos, dtype=np.int64)
        loss = loss + (obj_bce[idx]).mean()
        se = (t[idx, 0:4] - box_t[idx]) ** 2.0
        loss = loss + se.sum() / len(pos)
    return loss


class _Adam:
    def __init__(self, shapes, lr, b1=0.9, b2=0.999, eps=1e-8):
        self.lr, self.b1, self.b2, self.eps = lr, b1, b2, eps
        self.m = [np.zeros(s) for s in shapes]
        self.v = [np.zeros(s) for s in shapes]
        self.t = 0

    def step(self, params: list[np.ndarray], grads: list[np.ndarray]) -> None:
        self.t += 1
        for p, g, m, v in zip(params, grads, self.m, self.v):
            m += (1 - self.b1) * (g - m)
            v += (1 - self.b2) * (g * g - v)
            mh = m / (1 - self.b1**self.t)
            vh = v / (1 - self.b2**self.t)
            p -= self.lr * mh / (np.sqrt(vh) + self.eps)


def train(
    corpus: list[tuple[np.ndarray, list[tuple[BBox, int]]]],
    cfg: DetectorConfig,
    seed: int,
    epochs: int = 150,
    lr: float = 3e-3,
) -> DetectorWeights:
    """Deterministic Adam training on a synthetic corpus.

    One Adam step per image, fixed visiting order, with a single 10x learning
    rate drop at two thirds of the run; the returned weights are
    float32-quantized so saved files round-trip bit-exactly.
    """
    if not corpus:
        raise ValueError("empty corpus")
    weights = init_weights(cfg, seed)
    targets = [assign_targets(gts, cfg) for _, gts in corpus]
    names = ["w1", "b1", "w2", "b2", "wh", "bh"]
    opt = _Adam([getattr(weights, n).shape for n in names], lr)
    for epoch in range(epochs):
        opt.lr = lr * (0.1 if epoch >= (2 * epochs) // 3 else 1.0)
        for (img, _), tgt in zip(corpus, targets):
            params = {n: ad.tensor(getattr(weights, n)) for n in names}
            xt = ad.tensor(img)
            f1 = ad.leaky_relu(ad.conv2d(xt, params["w1"], params["b1"], 4, cfg.k1 // 2), _LEAKY_SLOPE)
            f2 = ad.leaky_relu(ad.conv2d(f1, params["w2"], params["b2"], 2, cfg.k2 // 2), _LEAKY_SLOPE)
            head = f2.reshape(cfg.grid_h * cfg.grid_w, cfg.c2) @ params["wh"] + params["bh"]
            trace = _decode(xt, head, weights, cfg)
            loss = _train_loss(trace, tgt, cfg)
            loss.backward()
            arrays = [getattr(weights, n) for n in names]
            grads = [
                params[n].grad if params[n].grad is not None else np.zeros_like(getattr(weights, n))
                for n in names
            ]
            opt.step(arrays, grads)
    return weights.quantized()


def training_loss(corpus, weights: DetectorWeights, cfg: DetectorConfig) -> float:
    total = 0.0
    for img, gts in corpus:
        trace = _forward_trace(img, weights, cfg)
        total += float(_train_loss(trace, assign_targets(gts, cfg), cfg).data)
    return total / len(corpus)


# -- weight files ---------------------------------------------------------------

_MAGIC = b"CLDW"
_VERSION = 1


def save_weights(path, weights: DetectorWeights, cfg: DetectorConfig) -> None:
    weights.check(cfg)
    echo = canonical_json(cfg.to_dict()).encode()
    with open(str(path), "wb") as f:
        f.write(_MAGIC)
        f.write(struct.pack("<HI", _VERSION, len(echo)))
        f.write(echo)
        for a in weights.arrays():
            f.write(np.ascontiguousarray(a, dtype="<f4").tobytes())


def load_weights(path) -> tuple[DetectorWeights, DetectorConfig]:
    with open(str(path), "rb") as f:
        buf = f.read()
    if buf[:4] != _MAGIC:
        raise ValueError("bad weights magic")
    if len(buf) < 10:
        raise ValueError("truncated weights header")
    version, echo_len = struct.unpack("<HI", buf[4:10])
    if version != _VERSION:
        raise ValueError(f"unsupported weights version {version}")
    echo = buf[10 : 10 + echo_len]
    if len(echo) != echo_len:
        raise ValueError("truncated config echo")
    import json

    cfg = DetectorConfig.from_dict(json.loads(echo.decode()))
    off = 10 + echo_len
    arrays = []
    for shape in _weight_shapes(cfg):
        n = int(np.prod(shape))
        raw = buf[off : off + 4 * n]
        if len(raw) != 4 * n:
            raise ValueError("truncated weights tensor data")
        arrays.append(np.frombuffer(raw, dtype="<f4").reshape(shape).astype(np.float64))
        off += 4 * n
    if off != len(buf):
        raise ValueError("trailing bytes in weights file")
    w = DetectorWeights(*arrays)
    w.check(cfg)
    return w, cfg
