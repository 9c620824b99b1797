"""Raw 8-bit YUV 4:2:0 sequences and the luma-plane resampling used around the network."""
from __future__ import annotations

import os
from dataclasses import dataclass
from typing import List, Sequence

import numpy as np

from ._io import atomic_write_bytes
from .errors import GeometryError, VideoFormatError

CATMULL_ROM = -0.5


@dataclass
class YuvFrame:
    y: np.ndarray
    u: np.ndarray
    v: np.ndarray

    def __post_init__(self):
        h, w = self.y.shape
        if h % 2 or w % 2:
            raise VideoFormatError(f"YUV420 frames need even extents, got {w}x{h}")
        for name in ("u", "v"):
            if getattr(self, name).shape != (h // 2, w // 2):
                raise VideoFormatError(
                    f"{name} plane is {getattr(self, name).shape}, expected {(h // 2, w // 2)}")

    @property
    def w(self) -> int:
        return self.y.shape[1]

    @property
    def h(self) -> int:
        return self.y.shape[0]

    def tobytes(self) -> bytes:
        return self.y.tobytes() + self.u.tobytes() + self.v.tobytes()


def frame_size(w: int, h: int) -> int:
    return w * h * 3 // 2


def decode_yuv420(data: bytes, w: int, h: int) -> List[YuvFrame]:
    if w <= 0 or h <= 0 or w % 2 or h % 2:
        raise VideoFormatError(f"YUV420 extents must be positive and even, got {w}x{h}")
    fs = frame_size(w, h)
    if len(data) % fs:
        raise VideoFormatError(
            f"{len(data)} bytes is not a multiple of the {w}x{h} frame size ({fs} bytes)")
    buf = np.frombuffer(data, dtype=np.uint8)
    frames = []
    ysz, csz = w * h, (w // 2) * (h // 2)
    for off in range(0, len(data), fs):
        y = buf[off:off + ysz].reshape(h, w).copy()
        u = buf[off + ysz:off + ysz + csz].reshape(h // 2, w // 2).copy()
        v = buf[off + ysz + csz:off + fs].reshape(h // 2, w // 2).copy()
        frames.append(YuvFrame(y, u, v))
    return frames


def read_yuv420(path, w: int, h: int) -> List[YuvFrame]:
    with open(path, "rb") as fh:
        data = fh.read()
    return decode_yuv420(data, w, h)


def write_yuv420(path, frames: Sequence[YuvFrame]) -> None:
    atomic_write_bytes(path, b"".join(f.tobytes() for f in frames))


def y_normalize(frame) -> np.ndarray:
    """8-bit luma (a ``YuvFrame`` or a uint8 array) -> float32 plane in [0, 1]."""
    y = frame.y if isinstance(frame, YuvFrame) else np.asarray(frame)
    return (y.astype(np.float32) / np.float32(255.0))


def y_denormalize(plane) -> np.ndarray:
    """Clamp to [0, 1], scale to 255 and round half away from zero."""
    s = np.clip(np.asarray(plane, dtype=np.float64), 0.0, 1.0) * 255.0
    return np.floor(s + 0.5).astype(np.uint8)


# --------------------------------------------------------------------------
# resampling

def cubic_kernel(x, a: float = CATMULL_ROM):
    x = np.abs(np.asarray(x, dtype=np.float64))
    near = ((a + 2) * x - (a + 3)) * x * x + 1
    far = ((a * x - 5 * a) * x + 8 * a) * x - 4 * a
    return np.where(x <= 1, near, np.where(x < 2, far, 0.0))


def resample_weights(n_in: int, n_out: int, a: float = CATMULL_ROM):
    """Tap indices (edge-clamped) and normalised weights for a 1-D bicubic resize.

    Sample centres sit at half-pixel positions; when shrinking, the kernel is
    stretched by the scale factor (anti-aliased resize).
    """
    scale = n_out / n_in
    stretch = min(scale, 1.0)
    support = 2.0 / stretch
    centres = (np.arange(n_out) + 0.5) / scale - 0.5
    first = np.floor(centres - support).astype(int) + 1
    ntaps = int(np.ceil(2 * support))
    idx = first[:, None] + np.arange(ntaps)[None, :]
    w = cubic_kernel((idx - centres[:, None]) * stretch, a)
    w /= w.sum(axis=1, keepdims=True)
    return np.clip(idx, 0, n_in - 1), w


def _resample_axis(x: np.ndarray, axis: int, n_out: int) -> np.ndarray:
    idx, w = resample_weights(x.shape[axis], n_out)
    taps = np.take(x, idx, axis=axis)  # axis -> (n_out, ntaps)
    shape = [1] * taps.ndim
    shape[axis], shape[axis + 1] = w.shape
    return (taps * w.reshape(shape)).sum(axis=axis + 1)


def bicubic_resize(plane, h_out: int, w_out: int) -> np.ndarray:
    p = np.asarray(plane, dtype=np.float64)
    return _resample_axis(_resample_axis(p, 0, h_out), 1, w_out)


def bicubic_down2(plane, clamp: bool = True) -> np.ndarray:
    """Half-size Catmull-Rom resize of a [0, 1] plane (float32 result)."""
    p = np.asarray(plane)
    h, w = p.shape
    if h % 2 or w % 2:
        raise GeometryError(f"bicubic_down2 needs even extents, got {w}x{h}")
    out = bicubic_resize(p, h // 2, w // 2)
    if clamp:
        out = np.clip(out, 0.0, 1.0)
    return out.astype(np.float32)


def bicubic_up2(plane, clamp: bool = True) -> np.ndarray:
    p = np.asarray(plane)
    out = bicubic_resize(p, 2 * p.shape[0], 2 * p.shape[1])
    if clamp:
        out = np.clip(out, 0.0, 1.0)
    return out.astype(np.float32)


def nn_up2(plane) -> np.ndarray:
    """Replicate every sample into a 2x2 block (dtype preserved)."""
    p = np.asarray(plane)
    return np.repeat(np.repeat(p, 2, axis=-2), 2, axis=-1)


def crop_multiple(frame, m: int = 16):
    """Drop bottom rows / right columns so both extents are multiples of ``m``.

    Accepts a ``YuvFrame`` (chroma cropped to match) or a 2-D array.
    """
    if m < 1:
        raise GeometryError("crop multiple must be >= 1")
    if isinstance(frame, YuvFrame):
        if m % 2:
            raise GeometryError("YUV420 frames must be cropped to an even multiple")
        h, w = (frame.h // m) * m, (frame.w // m) * m
        if h == 0 or w == 0:
            raise GeometryError(f"cropping {frame.w}x{frame.h} to multiples of {m} leaves nothing")
        return YuvFrame(frame.y[:h, :w].copy(), frame.u[:h // 2, :w // 2].copy(),
                        frame.v[:h // 2, :w // 2].copy())
    p = np.asarray(frame)
    h, w = (p.shape[0] // m) * m, (p.shape[1] // m) * m
    if h == 0 or w == 0:
        raise GeometryError(f"cropping {p.shape[1]}x{p.shape[0]} to multiples of {m} leaves nothing")
    return p[:h, :w].copy()


def read_plane(path, w: int, h: int) -> np.ndarray:
    """Headerless 8-bit single plane."""
    size = os.path.getsize(path)
    if size != w * h:
        raise VideoFormatError(f"{path}: {size} bytes, expected {w}x{h} = {w * h}")
    return np.fromfile(path, dtype=np.uint8).reshape(h, w)


def write_plane(path, plane: np.ndarray) -> None:
    atomic_write_bytes(path, np.ascontiguousarray(plane, dtype=np.uint8).tobytes())
