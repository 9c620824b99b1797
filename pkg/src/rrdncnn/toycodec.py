"""A tiny intra-only YUV420 codec: 8x8 DCT, flat quantiser, zlib entropy stage.

It exists so the external-codec harness can be exercised end to end without
an HEVC install.  The step follows the HEVC rule of doubling every 6 QP::

    python -m rrdncnn.toycodec encode --in lr.yuv --out s.bin --w 176 --h 144 --qp 37
    python -m rrdncnn.toycodec decode --in s.bin --out dec.yuv
"""
from __future__ import annotations

import argparse
import struct
import sys
import zlib

import numpy as np
from scipy.fft import dctn, idctn

from ._io import atomic_write_bytes
from .video import YuvFrame, decode_yuv420, write_yuv420

MAGIC = b"TOYC"
HEADER = "<4sIIIf"


def qstep_for(qp: int) -> float:
    return 2.0 ** ((qp - 4) / 6.0)


def _blocks(plane: np.ndarray) -> np.ndarray:
    plane = np.pad(plane, ((0, -plane.shape[0] % 8), (0, -plane.shape[1] % 8)), mode="edge")
    h, w = plane.shape
    return plane.reshape(h // 8, 8, w // 8, 8).transpose(0, 2, 1, 3)


def _unblocks(blocks: np.ndarray) -> np.ndarray:
    hb, wb = blocks.shape[:2]
    return blocks.transpose(0, 2, 1, 3).reshape(hb * 8, wb * 8)


def encode(raw: bytes, w: int, h: int, qp: int) -> bytes:
    frames = decode_yuv420(raw, w, h)
    q = qstep_for(qp)
    levels = []
    for f in frames:
        for plane in (f.y, f.u, f.v):
            c = dctn(_blocks(plane.astype(np.float64) - 128.0), axes=(-2, -1), norm="ortho")
            levels.append(np.round(c / q).astype(np.int16).ravel())
    payload = zlib.compress(np.concatenate(levels).tobytes(), 9)
    return struct.pack(HEADER, MAGIC, w, h, len(frames), q) + payload


def decode(stream: bytes):
    size = struct.calcsize(HEADER)
    magic, w, h, n, q = struct.unpack_from(HEADER, stream)
    if magic != MAGIC:
        raise ValueError("not a toy codec stream")
    levels = np.frombuffer(zlib.decompress(stream[size:]), dtype=np.int16).astype(np.float64)
    frames, pos = [], 0
    for _ in range(n):
        planes = []
        for ph, pw in ((h, w), (h // 2, w // 2), (h // 2, w // 2)):
            bh, bw = -(-ph // 8), -(-pw // 8)
            c = levels[pos:pos + bh * bw * 64].reshape(bh, bw, 8, 8) * q
            pos += bh * bw * 64
            rec = _unblocks(idctn(c, axes=(-2, -1), norm="ortho"))[:ph, :pw] + 128.0
            planes.append(np.clip(np.floor(rec + 0.5), 0, 255).astype(np.uint8))
        frames.append(YuvFrame(*planes))
    return frames


def main(argv=None) -> int:
    ap = argparse.ArgumentParser(prog="rrdncnn.toycodec", description=__doc__.splitlines()[0])
    sub = ap.add_subparsers(dest="cmd", required=True)
    enc = sub.add_parser("encode")
    enc.add_argument("--in", dest="src", required=True)
    enc.add_argument("--out", required=True)
    enc.add_argument("--w", type=int, required=True)
    enc.add_argument("--h", type=int, required=True)
    enc.add_argument("--qp", type=int, default=37)
    enc.add_argument("--config", default="", help="accepted and ignored")
    dec = sub.add_parser("decode")
    dec.add_argument("--in", dest="src", required=True)
    dec.add_argument("--out", required=True)
    args = ap.parse_args(argv)
    try:
        with open(args.src, "rb") as fh:
            data = fh.read()
        if args.cmd == "encode":
            atomic_write_bytes(args.out, encode(data, args.w, args.h, args.qp))
        else:
            write_yuv420(args.out, decode(data))
    except (OSError, ValueError, struct.error, zlib.error) as exc:
        print(f"toycodec: {exc}", file=sys.stderr)
        return 1
    return 0


if __name__ == "__main__":
    sys.exit(main())
