"""Minimal reverse-mode tape over numpy arrays.

Just enough machinery to differentiate the toy detector and the attack
losses exactly: float64 throughout, a handful of elementwise primitives, a
strided conv2d with an index-cache for the col2im scatter, and stable
sigmoid / BCE-with-logits primitives for training.

Constants participate as plain numpy arrays or scalars and never enter the
graph; only ``Tensor`` operands receive gradients. Discrete decisions
(argmax, NMS membership, indicators) are made outside the tape on ``.data``
and are therefore frozen during differentiation, which is exactly the
freeze-the-forward-pass semantics the attack loop needs.
"""

from __future__ import annotations

import numpy as np

__all__ = ["Tensor", "tensor", "conv2d", "leaky_relu", "sigmoid", "bce_with_logits"]


def _unbroadcast(g: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    if g.shape == shape:
        return g
    extra = g.ndim - len(shape)
    if extra > 0:
        g = g.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, s in enumerate(shape) if s == 1 and g.shape[i] != 1)
    if axes:
        g = g.sum(axis=axes, keepdims=True)
    return g.reshape(shape)


def _data(x):
    return x.data if isinstance(x, Tensor) else np.asarray(x, dtype=np.float64)


class Tensor:
    __slots__ = ("data", "grad", "_vjps")

    def __init__(self, data, _vjps=()):
        self.data = np.asarray(data, dtype=np.float64)
        self.grad = None
        self._vjps = _vjps  # tuple of (parent, fn(upstream_grad) -> contribution)

    @property
    def shape(self):
        return self.data.shape

    def __repr__(self):
        return f"Tensor(shape={self.data.shape})"

    # -- graph walk ---------------------------------------------------------

    def backward(self, grad=None):
        topo: list[Tensor] = []
        seen: set[int] = set()
        stack: list[tuple[Tensor, bool]] = [(self, False)]
        while stack:
            node, expanded = stack.pop()
            if expanded:
                topo.append(node)
                continue
            if id(node) in seen:
                continue
            seen.add(id(node))
            stack.append((node, True))
            for parent, _ in node._vjps:
                if id(parent) not in seen:
                    stack.append((parent, False))
        self.grad = (
            np.ones_like(self.data) if grad is None else np.asarray(grad, dtype=np.float64)
        )
        for node in reversed(topo):
            g = node.grad
            if g is None:
                continue
            for parent, fn in node._vjps:
                contrib = fn(g)
                parent.grad = contrib if parent.grad is None else parent.grad + contrib

    # -- arithmetic ---------------------------------------------------------

    def __add__(self, other):
        od = _data(other)
        vjps = [(self, lambda g: _unbroadcast(g, self.data.shape))]
        if isinstance(other, Tensor):
            vjps.append((other, lambda g: _unbroadcast(g, od.shape)))
        return Tensor(self.data + od, tuple(vjps))

    __radd__ = __add__

    def __neg__(self):
        return Tensor(-self.data, ((self, lambda g: -g),))

    def __sub__(self, other):
        return self + (-other if isinstance(other, Tensor) else -_data(other))

    def __rsub__(self, other):
        return (-self) + other

    def __mul__(self, other):
        od = _data(other)
        vjps = [(self, lambda g: _unbroadcast(g * od, self.data.shape))]
        if isinstance(other, Tensor):
            sd = self.data
            vjps.append((other, lambda g: _unbroadcast(g * sd, od.shape)))
        return Tensor(self.data * od, tuple(vjps))

    __rmul__ = __mul__

    def __truediv__(self, other):
        od = _data(other)
        out = self.data / od
        vjps = [(self, lambda g: _unbroadcast(g / od, self.data.shape))]
        if isinstance(other, Tensor):
            vjps.append((other, lambda g: _unbroadcast(-g * out / od, od.shape)))
        return Tensor(out, tuple(vjps))

    def __rtruediv__(self, other):
        od = _data(other)
        out = od / self.data
        return Tensor(out, ((self, lambda g: _unbroadcast(-g * out / self.data, self.data.shape)),))

    def __pow__(self, p: float):
        out = self.data**p
        return Tensor(out, ((self, lambda g: g * p * self.data ** (p - 1)),))

    def __matmul__(self, other):
        od = _data(other)
        vjps = [(self, lambda g: g @ od.T)]
        if isinstance(other, Tensor):
            sd = self.data
            vjps.append((other, lambda g: sd.T @ g))
        return Tensor(self.data @ od, tuple(vjps))

    def __getitem__(self, key):
        def vjp(g):
            out = np.zeros_like(self.data)
            np.add.at(out, key, g)
            return out

        return Tensor(self.data[key], ((self, vjp),))

    # -- shape --------------------------------------------------------------

    def reshape(self, *shape):
        return Tensor(self.data.reshape(*shape), ((self, lambda g: g.reshape(self.data.shape)),))

    def sum(self, axis=None):
        out = self.data.sum(axis=axis)

        def vjp(g):
            if axis is None:
                return np.broadcast_to(g, self.data.shape).copy()
            gg = np.expand_dims(g, axis)
            return np.broadcast_to(gg, self.data.shape).copy()

        return Tensor(out, ((self, vjp),))

    def mean(self, axis=None):
        n = self.data.size if axis is None else self.data.shape[axis]
        return self.sum(axis=axis) / n

    # -- elementwise --------------------------------------------------------

    def exp(self):
        out = np.exp(self.data)
        return Tensor(out, ((self, lambda g: g * out),))

    def log(self):
        return Tensor(np.log(self.data), ((self, lambda g: g / self.data),))

    def sqrt(self):
        out = np.sqrt(self.data)
        return Tensor(out, ((self, lambda g: g * 0.5 / out),))

    def tanh(self):
        out = np.tanh(self.data)
        return Tensor(out, ((self, lambda g: g * (1.0 - out * out)),))

    def maximum(self, other):
        od = _data(other)
        mask = self.data >= od
        vjps = [(self, lambda g: _unbroadcast(g * mask, self.data.shape))]
        if isinstance(other, Tensor):
            vjps.append((other, lambda g: _unbroadcast(g * ~mask, od.shape)))
        return Tensor(np.maximum(self.data, od), tuple(vjps))

    def minimum(self, other):
        od = _data(other)
        mask = self.data <= od
        vjps = [(self, lambda g: _unbroadcast(g * mask, self.data.shape))]
        if isinstance(other, Tensor):
            vjps.append((other, lambda g: _unbroadcast(g * ~mask, od.shape)))
        return Tensor(np.minimum(self.data, od), tuple(vjps))

    def clip(self, lo: float, hi: float):
        return self.maximum(lo).minimum(hi)


def tensor(data) -> Tensor:
    return Tensor(data)


def sigmoid(x: Tensor) -> Tensor:
    d = x.data
    out = np.where(d >= 0, 1.0 / (1.0 + np.exp(-np.abs(d))), np.exp(-np.abs(d)) / (1.0 + np.exp(-np.abs(d))))
    return Tensor(out, ((x, lambda g: g * out * (1.0 - out)),))


def leaky_relu(x: Tensor, slope: float = 0.1) -> Tensor:
    mask = x.data > 0
    scale = np.where(mask, 1.0, slope)
    return Tensor(x.data * scale, ((x, lambda g: g * scale),))


def bce_with_logits(logits: Tensor, targets: np.ndarray) -> Tensor:
    """Elementwise binary cross-entropy on logits, numerically stable."""
    t = logits.data
    y = np.asarray(targets, dtype=np.float64)
    out = np.maximum(t, 0.0) - t * y + np.log1p(np.exp(-np.abs(t)))
    s = np.where(t >= 0, 1.0 / (1.0 + np.exp(-np.abs(t))), np.exp(-np.abs(t)) / (1.0 + np.exp(-np.abs(t))))
    return Tensor(out, ((logits, lambda g: g * (s - y)),))


# -- conv2d -----------------------------------------------------------------

_IDX_CACHE: dict[tuple, np.ndarray] = {}


def _gather_indices(hp: int, wp: int, c: int, kh: int, kw: int, stride: int) -> np.ndarray:
    """Flat indices into the padded (hp, wp, c) input, one row per output cell."""
    key = (hp, wp, c, kh, kw, stride)
    idx = _IDX_CACHE.get(key)
    if idx is None:
        ho = (hp - kh) // stride + 1
        wo = (wp - kw) // stride + 1
        base_y = (np.arange(ho) * stride)[:, None, None, None, None]
        base_x = (np.arange(wo) * stride)[None, :, None, None, None]
        off_y = np.arange(kh)[None, None, :, None, None]
        off_x = np.arange(kw)[None, None, None, :, None]
        ch = np.arange(c)[None, None, None, None, :]
        idx = ((base_y + off_y) * wp + (base_x + off_x)) * c + ch
        idx = idx.reshape(ho * wo, kh * kw * c)
        _IDX_CACHE[key] = idx
    return idx


def conv2d(x: Tensor, w, b, stride: int, pad: int) -> Tensor:
    """Strided 2-D convolution, channels-last.

    ``x`` is (H, W, Cin); ``w`` is (kh, kw, Cin, Cout); ``b`` is (Cout,).
    Pass ``w``/``b`` as Tensors to get weight gradients (training) or as
    plain arrays to treat them as constants (attack optimization).
    """
    wd, bd = _data(w), _data(b)
    kh, kw, cin, cout = wd.shape
    xd = x.data
    xp = np.pad(xd, ((pad, pad), (pad, pad), (0, 0))) if pad else xd
    hp, wp, _ = xp.shape
    ho = (hp - kh) // stride + 1
    wo = (wp - kw) // stride + 1
    idx = _gather_indices(hp, wp, cin, kh, kw, stride)
    cols = xp.reshape(-1)[idx]
    w2d = wd.reshape(kh * kw * cin, cout)
    out = cols @ w2d + bd

    def vjp_x(g):
        g2d = g.reshape(ho * wo, cout)
        dcols = g2d @ w2d.T
        dxp = np.bincount(idx.reshape(-1), weights=dcols.reshape(-1), minlength=xp.size)
        dxp = dxp.reshape(xp.shape)
        return dxp[pad : pad + xd.shape[0], pad : pad + xd.shape[1], :] if pad else dxp

    vjps = [(x, vjp_x)]
    if isinstance(w, Tensor):
        vjps.append((w, lambda g: (cols.T @ g.reshape(ho * wo, cout)).reshape(wd.shape)))
    if isinstance(b, Tensor):
        vjps.append((b, lambda g: g.reshape(ho * wo, cout).sum(axis=0)))
    return Tensor(out.reshape(ho, wo, cout), tuple(vjps))
