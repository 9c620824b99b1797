"""Fidelity metrics on 8-bit planes and Bjontegaard rate differences."""
from __future__ import annotations

import csv
import io
import warnings
from dataclasses import dataclass, field
from typing import Iterable, List, Optional, Sequence

import numpy as np
from scipy import ndimage

from ._io import atomic_write_text
from .errors import DimensionError

PSNR_CAP = 99.0


def _same_extents(a, b):
    a, b = np.asarray(a), np.asarray(b)
    if a.shape != b.shape:
        raise DimensionError(f"plane extents differ: {a.shape} vs {b.shape}")
    return a, b


def mse_int(a, b) -> float:
    """Mean squared difference of two 8-bit planes, computed on integers."""
    a, b = _same_extents(a, b)
    d = a.astype(np.int64) - b.astype(np.int64)
    return float(np.sum(d * d)) / d.size


def psnr(a, b, peak: float = 255.0) -> float:
    """PSNR in dB; identical planes report ``PSNR_CAP``."""
    err = mse_int(a, b)
    if err == 0:
        return PSNR_CAP
    return float(10.0 * np.log10(peak * peak / err))


def gaussian_window(size: int = 11, sigma: float = 1.5) -> np.ndarray:
    x = np.arange(size) - (size - 1) / 2
    g = np.exp(-(x * x) / (2 * sigma * sigma))
    return g / g.sum()


def ssim_map(a, b, size: int = 11, sigma: float = 1.5, k1: float = 0.01, k2: float = 0.03,
             data_range: float = 255.0) -> np.ndarray:
    a, b = _same_extents(a, b)
    if a.ndim != 2 or min(a.shape) < size:
        raise DimensionError(f"SSIM needs 2-D planes of at least {size}x{size}, got {a.shape}")
    a = a.astype(np.float64)
    b = b.astype(np.float64)
    g = gaussian_window(size, sigma)

    def blur(x):
        return ndimage.correlate1d(ndimage.correlate1d(x, g, axis=0, mode="nearest"),
                                   g, axis=1, mode="nearest")

    c1 = (k1 * data_range) ** 2
    c2 = (k2 * data_range) ** 2
    mu_a, mu_b = blur(a), blur(b)
    var_a = blur(a * a) - mu_a * mu_a
    var_b = blur(b * b) - mu_b * mu_b
    cov = blur(a * b) - mu_a * mu_b
    num = (2 * mu_a * mu_b + c1) * (2 * cov + c2)
    den = (mu_a * mu_a + mu_b * mu_b + c1) * (var_a + var_b + c2)
    return num / den


def ssim(a, b, **kw) -> float:
    """Mean SSIM, 11x11 Gaussian window (sigma 1.5), edge-clamped borders."""
    return float(np.mean(ssim_map(a, b, **kw)))


# --------------------------------------------------------------------------
# rate-distortion

@dataclass(frozen=True)
class RDPoint:
    bitrate: float
    psnr: float
    qp: Optional[int] = None

    def __post_init__(self):
        if not self.bitrate > 0:
            raise ValueError(f"bitrate must be positive, got {self.bitrate}")


@dataclass
class RDCurve:
    label: str
    points: List[RDPoint] = field(default_factory=list)

    def __post_init__(self):
        self.points = sorted(self.points, key=lambda p: p.bitrate)
        rates = [p.bitrate for p in self.points]
        if any(r1 >= r2 for r1, r2 in zip(rates, rates[1:])):
            raise ValueError(f"curve {self.label!r}: bitrates must be distinct")
        q = [p.psnr for p in self.points]
        if any(q1 > q2 for q1, q2 in zip(q, q[1:])):
            warnings.warn(f"curve {self.label!r}: PSNR decreases with bitrate", stacklevel=2)

    @classmethod
    def from_pairs(cls, label, rates, psnrs, qps=None) -> "RDCurve":
        qps = qps if qps is not None else [None] * len(rates)
        return cls(label, [RDPoint(float(r), float(p), q) for r, p, q in zip(rates, psnrs, qps)])

    @property
    def rates(self) -> np.ndarray:
        return np.array([p.bitrate for p in self.points])

    @property
    def psnrs(self) -> np.ndarray:
        return np.array([p.psnr for p in self.points])


def _fit_log_rate(curve: RDCurve) -> np.ndarray:
    if len(curve.points) < 4:
        raise ValueError(f"curve {curve.label!r} has {len(curve.points)} points; BD-rate needs >= 4")
    q = curve.psnrs
    if len(np.unique(q)) < len(q):
        raise ValueError(f"curve {curve.label!r} repeats a PSNR value; cubic fit is degenerate")
    return np.polyfit(q, np.log10(curve.rates), 3)


def bd_rate(anchor: RDCurve, test: RDCurve) -> float:
    """Average bitrate change (%) of ``test`` vs ``anchor`` at equal PSNR.

    Cubic fit of log10(rate) against PSNR, integrated over the shared PSNR
    range.  Negative values are savings.
    """
    pa = _fit_log_rate(anchor)
    pt = _fit_log_rate(test)
    lo = max(anchor.psnrs.min(), test.psnrs.min())
    hi = min(anchor.psnrs.max(), test.psnrs.max())
    if not hi > lo:
        raise ValueError("the two curves do not overlap in PSNR")
    ia, it = np.polyint(pa), np.polyint(pt)
    area_a = np.polyval(ia, hi) - np.polyval(ia, lo)
    area_t = np.polyval(it, hi) - np.polyval(it, lo)
    avg_diff = (area_t - area_a) / (hi - lo)
    return float((10.0 ** avg_diff - 1.0) * 100.0)


RD_HEADER = ["label", "qp", "bitrate_kbps", "psnr_db"]


def format_rd_csv(curves: Iterable[RDCurve]) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(RD_HEADER)
    for c in curves:
        for p in c.points:
            w.writerow([c.label, "" if p.qp is None else p.qp, repr(p.bitrate), repr(p.psnr)])
    return buf.getvalue()


def emit_rd_csv(curves: Sequence[RDCurve], path) -> None:
    atomic_write_text(path, format_rd_csv(curves))


def parse_rd_csv(text: str) -> List[RDCurve]:
    rows = list(csv.DictReader(io.StringIO(text)))
    if rows and set(RD_HEADER) - set(rows[0].keys()):
        raise ValueError(f"R-D CSV must have columns {RD_HEADER}")
    grouped = {}
    for r in rows:
        qp = int(r["qp"]) if r["qp"].strip() else None
        grouped.setdefault(r["label"], []).append(
            RDPoint(float(r["bitrate_kbps"]), float(r["psnr_db"]), qp))
    return [RDCurve(label, pts) for label, pts in grouped.items()]


def read_rd_csv(path) -> List[RDCurve]:
    with open(path, newline="") as fh:
        return parse_rd_csv(fh.read())
