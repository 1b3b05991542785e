"""Images, patches, EoT transforms, input-transformation defenses and file I/O.

An image is a float64 numpy array of shape (h, w, 3) with values in [0, 1],
origin top-left, indexed [row, col]. A patch is a small pixel block plus an
integer top-left placement (x, y) in the image frame.

Two file formats: binary PPM (P6, maxval 255) and a raw planar float32
little-endian format with a 16-byte header (magic "CLIM", u32 h, u32 w,
u32 channels). PPM quantizes to 8 bits; CLIM round-trips float32 exactly.
"""

from __future__ import annotations

import logging
import math
import struct
from dataclasses import dataclass, field

import numpy as np
from scipy.ndimage import median_filter

log = logging.getLogger(__name__)

__all__ = [
    "PatchSpec",
    "EotParams",
    "EotSample",
    "IndexMap",
    "new_image",
    "check_image",
    "apply_patch",
    "apply_soft_mask",
    "sample_eot",
    "apply_eot",
    "route_gradient",
    "bit_depth",
    "gaussian_noise",
    "median_blur",
    "defense_transform",
    "read_image",
    "write_image",
]


def new_image(h: int, w: int, value: float = 0.0) -> np.ndarray:
    return np.full((h, w, 3), value, dtype=np.float64)


def check_image(x: np.ndarray) -> np.ndarray:
    x = np.asarray(x, dtype=np.float64)
    if x.ndim != 3 or x.shape[2] != 3 or x.shape[0] < 1 or x.shape[1] < 1:
        raise ValueError(f"expected (h, w, 3) image, got shape {x.shape}")
    if x.min() < 0.0 or x.max() > 1.0:
        raise ValueError("image values must lie in [0, 1]")
    return x


@dataclass
class PatchSpec:
    """Adversarial patch: pixel block and top-left placement (x, y)."""

    pixels: np.ndarray  # (dh, dw, 3) in [0, 1]
    x: int
    y: int

    def __post_init__(self):
        self.pixels = np.asarray(self.pixels, dtype=np.float64)
        if self.pixels.ndim != 3 or self.pixels.shape[2] != 3:
            raise ValueError("patch pixels must be (dh, dw, 3)")
        if self.pixels.min() < 0.0 or self.pixels.max() > 1.0:
            raise ValueError("patch values must lie in [0, 1]")
        self.x = int(self.x)
        self.y = int(self.y)

    @property
    def dh(self) -> int:
        return self.pixels.shape[0]

    @property
    def dw(self) -> int:
        return self.pixels.shape[1]

    def at(self, x: int, y: int) -> "PatchSpec":
        return PatchSpec(self.pixels, x, y)


@dataclass(frozen=True)
class EotParams:
    """Transform sampling ranges. All ranges zero/degenerate = identity."""

    translation: float = 4.0  # +- pixels
    rotation: float = 5.0  # +- degrees
    brightness: float = 0.1  # +- additive
    contrast: tuple[float, float] = (0.9, 1.1)  # multiplicative range
    noise_std: float = 0.02
    samples: int = 4
    seed: int = 0

    def __post_init__(self):
        if self.translation < 0 or self.rotation < 0 or self.brightness < 0 or self.noise_std < 0:
            raise ValueError("ranges must be non-negative")
        if self.contrast[0] > self.contrast[1]:
            raise ValueError("contrast range must be (lo, hi) with lo <= hi")
        if self.samples < 1:
            raise ValueError("need at least one sample per iteration")


@dataclass(frozen=True)
class EotSample:
    dx: float
    dy: float
    angle: float  # degrees, positive = clockwise on screen
    brightness: float
    contrast: float
    noise_seed: int

    @staticmethod
    def identity() -> "EotSample":
        return EotSample(0.0, 0.0, 0.0, 0.0, 1.0, 0)


@dataclass
class IndexMap:
    """Pixel provenance of one EoT paste.

    Row i says image[out_y[i], out_x[i]] came from patch[pat_y[i], pat_x[i]]
    with per-channel linear factor weight[i] (the contrast scale, zeroed on
    channels where a clamp froze the value). Gradients at the image route
    back to the patch by scatter-adding weight * grad over these rows.
    """

    out_y: np.ndarray = field(default_factory=lambda: np.zeros(0, dtype=np.int64))
    out_x: np.ndarray = field(default_factory=lambda: np.zeros(0, dtype=np.int64))
    pat_y: np.ndarray = field(default_factory=lambda: np.zeros(0, dtype=np.int64))
    pat_x: np.ndarray = field(default_factory=lambda: np.zeros(0, dtype=np.int64))
    weight: np.ndarray = field(default_factory=lambda: np.zeros((0, 3), dtype=np.float64))


def apply_patch(x: np.ndarray, patch: PatchSpec) -> np.ndarray:
    """Paste the patch block; out-of-bounds placement is clamped and reported."""
    x = check_image(x)
    h, w, _ = x.shape
    px, py = patch.x, patch.y
    cx = min(max(px, 0), w - patch.dw)
    cy = min(max(py, 0), h - patch.dh)
    if cx < 0 or cy < 0:
        raise ValueError("patch larger than image")
    if (cx, cy) != (px, py):
        log.warning("patch placement (%d, %d) clamped to (%d, %d)", px, py, cx, cy)
    out = x.copy()
    out[cy : cy + patch.dh, cx : cx + patch.dw, :] = patch.pixels
    return out


def apply_soft_mask(x: np.ndarray, p: np.ndarray, mask: np.ndarray) -> np.ndarray:
    """Per-pixel convex combination x*(1-M) + p*M, M broadcast over channels."""
    x = check_image(x)
    p = check_image(p)
    mask = np.asarray(mask, dtype=np.float64)
    if p.shape != x.shape or mask.shape != x.shape[:2]:
        raise ValueError("shape mismatch between image, perturbation and mask")
    m = mask[:, :, None]
    return x * (1.0 - m) + p * m


def sample_eot(params: EotParams, iteration: int) -> list[EotSample]:
    """S independent uniform draws, a pure function of (seed, iteration)."""
    rng = np.random.default_rng([params.seed, int(iteration)])
    out = []
    for _ in range(params.samples):
        dx = rng.uniform(-params.translation, params.translation)
        dy = rng.uniform(-params.translation, params.translation)
        angle = rng.uniform(-params.rotation, params.rotation)
        brightness = rng.uniform(-params.brightness, params.brightness)
        contrast = rng.uniform(params.contrast[0], params.contrast[1])
        noise_seed = int(rng.integers(0, 2**31))
        out.append(EotSample(dx, dy, angle, brightness, contrast, noise_seed))
    return out


def apply_eot(
    x: np.ndarray, patch: PatchSpec, t: EotSample, noise_std: float = 0.0
) -> tuple[np.ndarray, IndexMap]:
    """Color-adjust, rotate (nearest neighbor), translate and paste the patch.

    Returns the composited image plus the index map that routes image-space
    gradients back to patch pixels. Pixels pushed outside the frame are
    clipped and absent from the map.
    """
    x = check_image(x)
    h, w, _ = x.shape
    dh, dw = patch.dh, patch.dw

    raw = t.contrast * patch.pixels + t.brightness
    colored = np.clip(raw, 0.0, 1.0)
    color_w = np.where(raw == colored, t.contrast, 0.0)

    # patch center in image coordinates, after translation
    pcx = patch.x + (dw - 1) / 2.0 + t.dx
    pcy = patch.y + (dh - 1) / 2.0 + t.dy
    reach = math.hypot(dh, dw) / 2.0 + 1.0
    y_lo = max(0, math.floor(pcy - reach))
    y_hi = min(h - 1, math.ceil(pcy + reach))
    x_lo = max(0, math.floor(pcx - reach))
    x_hi = min(w - 1, math.ceil(pcx + reach))
    if y_lo > y_hi or x_lo > x_hi:
        return x.copy(), IndexMap()

    oy, ox = np.meshgrid(np.arange(y_lo, y_hi + 1), np.arange(x_lo, x_hi + 1), indexing="ij")
    u = ox - pcx
    v = oy - pcy
    th = math.radians(-t.angle)
    su = math.cos(th) * u - math.sin(th) * v
    sv = math.sin(th) * u + math.cos(th) * v
    pj = np.round(su + (dw - 1) / 2.0).astype(np.int64)
    pi = np.round(sv + (dh - 1) / 2.0).astype(np.int64)
    hit = (pi >= 0) & (pi < dh) & (pj >= 0) & (pj < dw)

    out_y = oy[hit].astype(np.int64)
    out_x = ox[hit].astype(np.int64)
    pat_y = pi[hit]
    pat_x = pj[hit]

    out = x.copy()
    pasted = colored[pat_y, pat_x, :]
    if noise_std > 0:
        noise = np.random.default_rng(t.noise_seed).normal(0.0, noise_std, pasted.shape)
        pasted = pasted + noise
    final = np.clip(pasted, 0.0, 1.0)
    out[out_y, out_x, :] = final
    weight = color_w[pat_y, pat_x, :] * np.where(pasted == final, 1.0, 0.0)
    return out, IndexMap(out_y, out_x, pat_y, pat_x, weight)


def route_gradient(grad_image: np.ndarray, imap: IndexMap, patch_shape: tuple[int, int, int]) -> np.ndarray:
    """Scatter-add an image-space gradient back to patch pixels via the map."""
    out = np.zeros(patch_shape, dtype=np.float64)
    if imap.out_y.size:
        np.add.at(out, (imap.pat_y, imap.pat_x), grad_image[imap.out_y, imap.out_x, :] * imap.weight)
    return out


# -- input-transformation defenses -------------------------------------------


def bit_depth(x: np.ndarray, b: int) -> np.ndarray:
    if b < 1:
        raise ValueError("bit depth must be >= 1")
    levels = float(2**b - 1)
    return np.round(check_image(x) * levels) / levels


def gaussian_noise(x: np.ndarray, std: float, seed: int = 0) -> np.ndarray:
    if std < 0:
        raise ValueError("std must be >= 0")
    x = check_image(x)
    if std == 0:
        return x.copy()
    noise = np.random.default_rng(seed).normal(0.0, std, x.shape)
    return np.clip(x + noise, 0.0, 1.0)


def median_blur(x: np.ndarray, k: int) -> np.ndarray:
    if k < 3 or k % 2 == 0:
        raise ValueError("kernel must be odd and >= 3")
    # per-channel k x k median with edge-replicate padding
    return median_filter(check_image(x), size=(k, k, 1), mode="nearest")


def defense_transform(x: np.ndarray, kind: str, strength: float = 0.0, seed: int = 0) -> np.ndarray:
    if kind == "none":
        return check_image(x).copy()
    if kind == "bitdepth":
        return bit_depth(x, int(strength))
    if kind == "gauss":
        return gaussian_noise(x, float(strength), seed)
    if kind == "median":
        return median_blur(x, int(strength))
    raise ValueError(f"unknown defense kind: {kind!r}")


# -- file I/O -----------------------------------------------------------------

_CLIM_MAGIC = b"CLIM"


def write_image(path, x: np.ndarray) -> None:
    x = check_image(x)
    path = str(path)
    if path.endswith(".ppm"):
        h, w, _ = x.shape
        data = np.round(x * 255.0).astype(np.uint8).tobytes()
        with open(path, "wb") as f:
            f.write(b"P6\n%d %d\n255\n" % (w, h))
            f.write(data)
    elif path.endswith(".clim"):
        h, w, c = x.shape
        with open(path, "wb") as f:
            f.write(_CLIM_MAGIC)
            f.write(struct.pack("<III", h, w, c))
            f.write(np.ascontiguousarray(x.transpose(2, 0, 1), dtype="<f4").tobytes())
    else:
        raise ValueError(f"unsupported image extension: {path}")


def _ppm_tokens(buf: bytes, n: int) -> tuple[list[int], int]:
    """First n whitespace-separated integer tokens after the magic, skipping
    '#' comments; returns tokens and the offset where binary data starts."""
    toks: list[int] = []
    i = 0
    while len(toks) < n:
        if i >= len(buf):
            raise ValueError("truncated PPM header")
        ch = buf[i : i + 1]
        if ch == b"#":
            while i < len(buf) and buf[i : i + 1] != b"\n":
                i += 1
        elif ch.isspace():
            i += 1
        else:
            j = i
            while j < len(buf) and not buf[j : j + 1].isspace():
                j += 1
            tok = buf[i:j]
            if not tok.isdigit():
                raise ValueError(f"bad PPM header token: {tok!r}")
            toks.append(int(tok))
            i = j
    return toks, i + 1  # single whitespace after maxval


def read_image(path) -> np.ndarray:
    path = str(path)
    with open(path, "rb") as f:
        buf = f.read()
    if path.endswith(".ppm"):
        if buf[:2] != b"P6":
            raise ValueError("not a binary PPM (P6) file")
        (w, h, maxval), off = _ppm_tokens(buf[2:], 3)
        off += 2
        if maxval != 255:
            raise ValueError(f"unsupported PPM maxval {maxval}")
        need = w * h * 3
        raw = buf[off : off + need]
        if len(raw) != need:
            raise ValueError("truncated PPM pixel data")
        return np.frombuffer(raw, dtype=np.uint8).reshape(h, w, 3).astype(np.float64) / 255.0
    if path.endswith(".clim"):
        if buf[:4] != _CLIM_MAGIC:
            raise ValueError("bad CLIM magic")
        if len(buf) < 16:
            raise ValueError("truncated CLIM header")
        h, w, c = struct.unpack("<III", buf[4:16])
        need = h * w * c * 4
        raw = buf[16 : 16 + need]
        if len(raw) != need:
            raise ValueError("truncated CLIM pixel data")
        arr = np.frombuffer(raw, dtype="<f4").reshape(c, h, w).transpose(1, 2, 0)
        return arr.astype(np.float64)
    raise ValueError(f"unsupported image extension: {path}")
