"""Small natural-image CIF corpus for desk-scale experiments.

Frames are built from the sample photographs bundled with scikit-image
(an optional dependency), resized to 352x288 and converted to YUV 4:2:0.
"""
from __future__ import annotations

from typing import List, Sequence

import numpy as np

from .video import YuvFrame, bicubic_resize, y_denormalize

CIF = (352, 288)

DEFAULT_IMAGES = ("astronaut", "coffee", "chelsea", "rocket", "immunohistochemistry",
                  "camera", "brick", "coins")


def rgb_to_yuv420(rgb: np.ndarray) -> YuvFrame:
    """Full-range BT.601 conversion with 2x2 averaged chroma."""
    rgb = rgb.astype(np.float64)
    r, g, b = rgb[..., 0], rgb[..., 1], rgb[..., 2]
    y = 0.299 * r + 0.587 * g + 0.114 * b
    u = 128.0 - 0.168736 * r - 0.331264 * g + 0.5 * b
    v = 128.0 + 0.5 * r - 0.418688 * g - 0.081312 * b

    def sub(c):
        return c.reshape(c.shape[0] // 2, 2, c.shape[1] // 2, 2).mean(axis=(1, 3))

    to8 = lambda c: y_denormalize(c / 255.0)  # noqa: E731
    return YuvFrame(to8(y), to8(sub(u)), to8(sub(v)))


def _fit(img: np.ndarray, w: int, h: int) -> np.ndarray:
    """Centre-crop to the target aspect ratio, then bicubic resize each channel."""
    ih, iw = img.shape[:2]
    if iw * h > ih * w:
        cw = ih * w // h
        x0 = (iw - cw) // 2
        img = img[:, x0:x0 + cw]
    else:
        ch = iw * h // w
        y0 = (ih - ch) // 2
        img = img[y0:y0 + ch]
    chans = img if img.ndim == 3 else img[..., None]
    out = np.stack([bicubic_resize(chans[..., c] / 255.0, h, w) for c in range(chans.shape[-1])],
                   axis=-1)
    return np.clip(out, 0.0, 1.0) * 255.0


def natural_frames(names: Sequence[str] = DEFAULT_IMAGES, size=CIF) -> List[YuvFrame]:
    import skimage.data

    w, h = size
    frames = []
    for name in names:
        img = getattr(skimage.data, name)()
        if img.ndim == 3:
            img = img[..., :3]
        else:
            img = np.repeat(img[..., None], 3, axis=-1)
        frames.append(rgb_to_yuv420(_fit(img.astype(np.float64), w, h)))
    return frames
