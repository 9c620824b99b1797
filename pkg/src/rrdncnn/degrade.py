"""Training/evaluation triplets (HR, LR, DLR) and patch sampling.

DLR comes either from an external codec driven as a subprocess or from a
built-in 8x8 DCT quantiser that produces blocking and ringing artefacts.
"""
from __future__ import annotations

import logging
import os
import shlex
import subprocess
import threading
from dataclasses import dataclass, field
from pathlib import Path
from typing import Dict, List, Optional, Sequence, Tuple, Union

import numpy as np
from scipy.fft import dctn, idctn

from ._io import atomic_write_text
from .errors import CodecError, ConfigError, GeometryError, VideoFormatError
from .video import (YuvFrame, bicubic_down2, crop_multiple, read_plane, read_yuv420,
                    write_plane, write_yuv420, y_denormalize, y_normalize)

log = logging.getLogger(__name__)

BLOCK = 8
CONFIG_TAGS = ("RA", "LDP", "AI")
PLACEHOLDERS = ("{in}", "{out}", "{w}", "{h}", "{qp}", "{config}")


# --------------------------------------------------------------------------
# synthetic degrader

def round_half_away(x: np.ndarray) -> np.ndarray:
    return np.sign(x) * np.floor(np.abs(x) + 0.5)


def block_dct_quantize(samples: np.ndarray, qstep: float) -> np.ndarray:
    """Quantise 8x8 orthonormal DCT-II coefficients of a 2-D array (any scale).

    Extents are edge-padded to multiples of 8 and cropped back afterwards.
    """
    h, w = samples.shape
    ph, pw = -h % BLOCK, -w % BLOCK
    x = np.pad(samples.astype(np.float64), ((0, ph), (0, pw)), mode="edge")
    hb, wb = x.shape[0] // BLOCK, x.shape[1] // BLOCK
    blocks = x.reshape(hb, BLOCK, wb, BLOCK).transpose(0, 2, 1, 3)
    coeffs = dctn(blocks, axes=(-2, -1), norm="ortho")
    if qstep > 0:
        coeffs = round_half_away(coeffs / qstep) * qstep
    rec = idctn(coeffs, axes=(-2, -1), norm="ortho")
    return rec.transpose(0, 2, 1, 3).reshape(x.shape)[:h, :w]


def synthetic_degrade(plane, qstep: float) -> np.ndarray:
    """Block-DCT quantisation of a [0, 1] plane with a flat step (in 8-bit units)."""
    if qstep < 0:
        raise ValueError(f"qstep must be >= 0, got {qstep}")
    p = np.asarray(plane, dtype=np.float64)
    rec = block_dct_quantize(p * 255.0, qstep) / 255.0
    return np.clip(rec, 0.0, 1.0).astype(np.float32)


# --------------------------------------------------------------------------
# external codec

@dataclass(frozen=True)
class CodecCmd:
    """Encode/decode argument templates.

    Templates are split shell-style into an argument vector and then each
    of ``{in} {out} {w} {h} {qp} {config}`` is substituted; no shell runs.
    """

    encode: str
    decode: str
    qp: int = 37
    config_tag: str = "RA"
    config: str = ""

    def __post_init__(self):
        for label, tpl in (("encode", self.encode), ("decode", self.decode)):
            for ph in ("{in}", "{out}"):
                if ph not in tpl:
                    raise ConfigError(f"{label} template lacks the {ph} placeholder: {tpl!r}")
        if self.config_tag not in CONFIG_TAGS:
            raise ConfigError(f"config tag must be one of {CONFIG_TAGS}, got {self.config_tag!r}")

    def argv(self, template: str, src, dst, w: int, h: int) -> List[str]:
        values = {"{in}": os.fspath(src), "{out}": os.fspath(dst), "{w}": str(w),
                  "{h}": str(h), "{qp}": str(self.qp), "{config}": self.config}
        args = []
        for tok in shlex.split(template):
            for ph, val in values.items():
                tok = tok.replace(ph, val)
            args.append(tok)
        return args


_workdir_locks: Dict[str, threading.Lock] = {}
_locks_guard = threading.Lock()


def _workdir_lock(path) -> threading.Lock:
    key = os.path.abspath(path)
    with _locks_guard:
        return _workdir_locks.setdefault(key, threading.Lock())


def _run(args: List[str], what: str):
    try:
        proc = subprocess.run(args, capture_output=True, text=True)
    except OSError as exc:
        raise CodecError(f"{what} could not start {args[0]!r}: {exc}") from exc
    if proc.returncode != 0:
        tail = (proc.stderr or proc.stdout or "").strip().splitlines()[-5:]
        raise CodecError(f"{what} exited with status {proc.returncode}: {' | '.join(tail)}")


def external_codec_roundtrip(lr_frames: Sequence[YuvFrame], cmd: CodecCmd,
                             workdir) -> Tuple[List[YuvFrame], int]:
    """Encode and decode ``lr_frames``; returns (decoded frames, bitstream bytes)."""
    if not lr_frames:
        raise ValueError("nothing to encode")
    w, h = lr_frames[0].w, lr_frames[0].h
    if w % 8 or h % 8:
        raise GeometryError(f"codec input {w}x{h} is not CU-aligned (multiples of 8)")
    workdir = Path(workdir)
    workdir.mkdir(parents=True, exist_ok=True)
    src = workdir / f"lr_{w}x{h}.yuv"
    stream = workdir / "stream.bin"
    dec = workdir / f"dec_{w}x{h}.yuv"
    with _workdir_lock(workdir):
        for f in (stream, dec):
            if f.exists():
                f.unlink()
        write_yuv420(src, lr_frames)
        _run(cmd.argv(cmd.encode, src, stream, w, h), "encoder")
        if not stream.exists():
            raise CodecError(f"encoder produced no bitstream at {stream}")
        size = stream.stat().st_size
        _run(cmd.argv(cmd.decode, stream, dec, w, h), "decoder")
        try:
            decoded = read_yuv420(dec, w, h)
        except (OSError, VideoFormatError) as exc:
            raise CodecError(f"decoder output unusable: {exc}") from exc
    if len(decoded) != len(lr_frames):
        raise CodecError(f"decoded {len(decoded)} frames, encoded {len(lr_frames)}")
    return decoded, size


def bitrate_kbps(size_bytes: int, fps: float, frames: int) -> float:
    return size_bytes * 8.0 * fps / frames / 1000.0


# --------------------------------------------------------------------------
# triplets and manifests

@dataclass
class TripletSample:
    hr: np.ndarray
    lr: np.ndarray
    dlr: np.ndarray
    meta: dict = field(default_factory=dict)

    def __post_init__(self):
        if self.lr.shape != self.dlr.shape:
            raise GeometryError(f"lr {self.lr.shape} and dlr {self.dlr.shape} differ")
        if self.hr.shape != (2 * self.lr.shape[0], 2 * self.lr.shape[1]):
            raise GeometryError(f"hr {self.hr.shape} is not twice lr {self.lr.shape}")


@dataclass(frozen=True)
class SyntheticDegrader:
    qstep: float
    tag: str = "SYN"

    @property
    def qp(self):
        return self.qstep

    def describe(self) -> str:
        return f"synthetic block-DCT quantiser, qstep={self.qstep:g}"


@dataclass(frozen=True)
class CodecDegrader:
    cmd: CodecCmd
    fps: float = 30.0

    @property
    def tag(self):
        return self.cmd.config_tag

    @property
    def qp(self):
        return self.cmd.qp

    def describe(self) -> str:
        return (f"external codec qp={self.cmd.qp} config={self.cmd.config_tag} "
                f"encode={self.cmd.encode!r} decode={self.cmd.decode!r}")


@dataclass(frozen=True)
class ManifestRecord:
    hr_path: str
    lr_path: str
    dlr_path: str
    w: int
    h: int
    qp: Union[int, float]
    tag: str

    def line(self) -> str:
        return "\t".join([self.hr_path, self.lr_path, self.dlr_path, str(self.w), str(self.h),
                          f"{self.qp:g}", self.tag])


@dataclass
class DatasetManifest:
    records: List[ManifestRecord]
    seed: int = 0
    degrader: str = ""
    root: Optional[Path] = None
    rates: Dict[str, float] = field(default_factory=dict)

    def resolve(self, rel: str) -> Path:
        p = Path(rel)
        return p if p.is_absolute() or self.root is None else self.root / p

    def format(self) -> str:
        lines = [f"# seed={self.seed}", f"# degrader={self.degrader}"]
        lines += [f"# bitrate_kbps[{k}]={v!r}" for k, v in self.rates.items()]
        lines += [r.line() for r in self.records]
        return "\n".join(lines) + "\n"

    def save(self, path) -> None:
        atomic_write_text(path, self.format())

    @classmethod
    def load(cls, path) -> "DatasetManifest":
        path = Path(path)
        recs, seed, desc, rates = [], 0, "", {}
        for n, raw in enumerate(path.read_text().splitlines(), 1):
            line = raw.rstrip("\n")
            if not line.strip():
                continue
            if line.startswith("#"):
                body = line[1:].strip()
                if body.startswith("seed="):
                    seed = int(body[5:])
                elif body.startswith("degrader="):
                    desc = body[9:]
                elif body.startswith("bitrate_kbps["):
                    k, v = body[len("bitrate_kbps["):].split("]=", 1)
                    rates[k] = float(v)
                continue
            parts = line.split("\t")
            if len(parts) != 7:
                raise ValueError(f"{path}:{n}: expected 7 tab-separated fields, got {len(parts)}")
            qp = float(parts[5])
            recs.append(ManifestRecord(parts[0], parts[1], parts[2], int(parts[3]), int(parts[4]),
                                       int(qp) if qp.is_integer() else qp, parts[6]))
        return cls(recs, seed, desc, path.parent, rates)

    def load_triplets(self) -> List[TripletSample]:
        out = []
        for r in self.records:
            hr = read_plane(self.resolve(r.hr_path), r.w, r.h)
            lr = read_plane(self.resolve(r.lr_path), r.w // 2, r.h // 2)
            dlr = read_plane(self.resolve(r.dlr_path), r.w // 2, r.h // 2)
            out.append(TripletSample(y_normalize(hr), y_normalize(lr), y_normalize(dlr),
                                     {"source": r.hr_path, "qp": r.qp, "tag": r.tag}))
        return out


def make_triplet(hr_y: np.ndarray, degrade_lr) -> Tuple[np.ndarray, np.ndarray, np.ndarray]:
    """8-bit HR luma -> (hr, lr, dlr) 8-bit planes; ``degrade_lr`` maps a [0,1] LR plane."""
    lr8 = y_denormalize(bicubic_down2(y_normalize(hr_y)))
    dlr8 = y_denormalize(degrade_lr(y_normalize(lr8)))
    return hr_y, lr8, dlr8


def _lr_frame(hr: YuvFrame) -> YuvFrame:
    y = y_denormalize(bicubic_down2(y_normalize(hr.y)))
    u = y_denormalize(bicubic_down2(y_normalize(hr.u)))
    v = y_denormalize(bicubic_down2(y_normalize(hr.v)))
    return YuvFrame(y, u, v)


def build_triplets(hr_yuv_dir, degrader, out_dir, size: Tuple[int, int],
                   seed: int = 0, fps: float = 30.0) -> DatasetManifest:
    """Turn every ``*.yuv`` in ``hr_yuv_dir`` (all ``size`` = (W, H)) into triplets.

    Frames are cropped to multiples of 16, down-sampled by bicubic x2 and
    degraded.  Planes are written as headerless 8-bit luma files and a
    ``manifest.tsv`` is written into ``out_dir``.
    """
    w, h = size
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    sources = sorted(Path(hr_yuv_dir).glob("*.yuv"))
    if not sources:
        raise FileNotFoundError(f"no .yuv files in {hr_yuv_dir}")
    manifest = DatasetManifest([], seed, degrader.describe(), out_dir)
    for src in sources:
        frames = [crop_multiple(f, 16) for f in read_yuv420(src, w, h)]
        written: List[Path] = []
        try:
            recs, rate = _sequence_triplets(src, frames, degrader, out_dir, written)
        except Exception:
            for p in written:
                if p.exists():
                    p.unlink()
            raise
        manifest.records.extend(recs)
        if rate is not None:
            manifest.rates[src.stem] = rate
        log.info("%s: %d triplets", src.name, len(recs))
    manifest.save(out_dir / "manifest.tsv")
    return manifest


def _sequence_triplets(src: Path, frames, degrader, out_dir: Path, written: List[Path]):
    lr_frames = [_lr_frame(f) for f in frames]
    rate = None
    if isinstance(degrader, CodecDegrader):
        decoded, nbytes = external_codec_roundtrip(lr_frames, degrader.cmd,
                                                   out_dir / f".codec-{src.stem}")
        dlr_planes = [d.y for d in decoded]
        rate = bitrate_kbps(nbytes, degrader.fps, len(frames))
    elif isinstance(degrader, SyntheticDegrader):
        dlr_planes = [y_denormalize(synthetic_degrade(y_normalize(f.y), degrader.qstep))
                      for f in lr_frames]
    else:
        raise TypeError(f"unknown degrader {degrader!r}")
    recs = []
    hh, ww = frames[0].h, frames[0].w
    for i, (hr, lr, dlr) in enumerate(zip(frames, lr_frames, dlr_planes)):
        names = [f"{src.stem}_{i:04d}_{kind}.y" for kind in ("hr", "lr", "dlr")]
        for name, plane in zip(names, (hr.y, lr.y, dlr)):
            p = out_dir / name
            write_plane(p, plane)
            written.append(p)
        recs.append(ManifestRecord(*names, ww, hh, degrader.qp, degrader.tag))
    return recs, rate


# --------------------------------------------------------------------------
# patches

def augment(plane: np.ndarray, hflip: bool, vflip: bool, k: int) -> np.ndarray:
    if hflip:
        plane = plane[:, ::-1]
    if vflip:
        plane = plane[::-1, :]
    return np.ascontiguousarray(np.rot90(plane, k))


def sample_patch(triplet: TripletSample, crop_hr: int, rng: np.random.Generator,
                 augmentation: bool = True) -> TripletSample:
    """Random aligned crop, then shared flips and a k*90 degree rotation.

    The origin is drawn on the LR grid and doubled for HR.
    """
    if crop_hr < 2 or crop_hr % 2:
        raise GeometryError(f"crop_hr must be a positive even integer, got {crop_hr}")
    H, W = triplet.hr.shape
    if crop_hr > H or crop_hr > W:
        raise GeometryError(f"crop {crop_hr} exceeds the {W}x{H} frame")
    c = crop_hr // 2
    y = int(rng.integers(0, triplet.lr.shape[0] - c + 1))
    x = int(rng.integers(0, triplet.lr.shape[1] - c + 1))
    hflip = vflip = False
    k = 0
    if augmentation:
        hflip = bool(rng.integers(2))
        vflip = bool(rng.integers(2))
        k = int(rng.integers(4))
    hr = triplet.hr[2 * y:2 * y + crop_hr, 2 * x:2 * x + crop_hr]
    lr = triplet.lr[y:y + c, x:x + c]
    dlr = triplet.dlr[y:y + c, x:x + c]
    meta = dict(triplet.meta, origin_lr=(y, x), hflip=hflip, vflip=vflip, rot90=k)
    return TripletSample(augment(hr, hflip, vflip, k), augment(lr, hflip, vflip, k),
                         augment(dlr, hflip, vflip, k), meta)
