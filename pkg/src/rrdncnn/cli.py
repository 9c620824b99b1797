"""Command-line entry points: dataset, train, infer, eval, bdrate, count.

Every subcommand also accepts ``--config FILE`` with ``key=value`` lines
(``#`` starts a comment).  Keys are the long flag names with dashes or
underscores; explicit flags override the file.  Exit status is 0 on
success, 2 for usage or validation errors and 1 for runtime failures.
"""
from __future__ import annotations

import argparse
import csv
import io
import logging
import sys
from pathlib import Path
from typing import Dict, List, Tuple

import numpy as np

from . import network as N
from . import train as TR
from ._io import atomic_write_text
from .degrade import (CONFIG_TAGS, CodecCmd, CodecDegrader, DatasetManifest, SyntheticDegrader,
                      build_triplets)
from .errors import CodecError, TrainingDiverged
from .metrics import bd_rate, psnr, read_rd_csv, ssim
from .optim import OptimHyper
from .video import YuvFrame, nn_up2, read_yuv420, write_yuv420, y_denormalize, y_normalize

log = logging.getLogger("rrdncnn")


class UsageError(Exception):
    """Bad flags or config keys (exit status 2)."""


def parse_size(text: str) -> Tuple[int, int]:
    try:
        w, h = (int(v) for v in text.lower().split("x"))
    except ValueError:
        raise argparse.ArgumentTypeError(f"size must look like WxH, got {text!r}") from None
    if w <= 0 or h <= 0:
        raise argparse.ArgumentTypeError(f"size must be positive, got {text!r}")
    return w, h


def read_config_file(path) -> Dict[str, str]:
    values = {}
    for n, raw in enumerate(Path(path).read_text().splitlines(), 1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise UsageError(f"{path}:{n}: expected key=value, got {raw.strip()!r}")
        key, val = (s.strip() for s in line.split("=", 1))
        values[key.replace("-", "_")] = val
    return values


TRUE_WORDS = {"1", "true", "yes", "on"}
FALSE_WORDS = {"0", "false", "no", "off"}


# --------------------------------------------------------------------------
# parser

class _Parser(argparse.ArgumentParser):
    """Report usage problems as a single-line ``UsageError`` instead of exiting."""

    def error(self, message):
        raise UsageError(f"{self.prog}: {message}")


def _sub(subs, name, help_text, required: List[str]):
    p = subs.add_parser(name, help=help_text, description=help_text)
    p.add_argument("--config", help="key=value file merged under the flags")
    p.add_argument("-q", "--quiet", action="store_true", help="only log warnings")
    p.set_defaults(_required=required)
    return p


def build_parser() -> argparse.ArgumentParser:
    ap = _Parser(prog="rrdncnn", description=__doc__.splitlines()[0])
    subs = ap.add_subparsers(dest="command", required=True)

    p = _sub(subs, "dataset", "build (HR, LR, DLR) triplets and a manifest",
             ["hr_dir", "out", "size"])
    p.add_argument("--hr-dir", help="directory of HR *.yuv files")
    p.add_argument("--out", help="output directory")
    p.add_argument("--size", type=parse_size, help="HR extents WxH")
    p.add_argument("--fps", type=float, default=30.0)
    p.add_argument("--codec-encode", help="encoder template with {in} {out} {w} {h} {qp} {config}")
    p.add_argument("--codec-decode", help="decoder template with {in} {out}")
    p.add_argument("--codec-config", default="", help="value for the {config} placeholder")
    p.add_argument("--qp", type=int, default=37)
    p.add_argument("--tag", choices=CONFIG_TAGS, default="RA")
    p.add_argument("--synthetic", action="store_true", help="use the block-DCT degrader")
    p.add_argument("--qstep", type=float, default=16.0)
    p.add_argument("--seed", type=int, default=0)
    p.set_defaults(func=cmd_dataset)

    p = _sub(subs, "train", "train a network from a manifest", ["manifest", "out"])
    p.add_argument("--manifest")
    p.add_argument("--arch", choices=("v1", "v2"), default="v2")
    p.add_argument("--stage", type=int, choices=(1, 2), default=1)
    p.add_argument("--out", help="checkpoint path")
    p.add_argument("--iters", type=int, help="total iterations (default: one stage epoch)")
    p.add_argument("--epochs", type=int, default=1)
    p.add_argument("--seed", type=int, default=0, help="initialisation and sampling seed")
    p.add_argument("--optim", choices=("adam", "radam"), default="radam")
    p.add_argument("--lr", type=float, default=1e-4)
    p.add_argument("--channels", type=int, default=64)
    p.add_argument("--crop", type=int, help="HR crop size (stage default otherwise)")
    p.add_argument("--batch", type=int, help="batch size (stage default otherwise)")
    p.add_argument("--rec-target", choices=TR.REC_TARGETS, default="composed")
    p.add_argument("--no-augment", action="store_true")
    p.add_argument("--init", choices=N.INIT_SCHEMES, default="he",
                   help="initialisation of a fresh network")
    p.add_argument("--from-ckpt", help="start from this checkpoint instead of a fresh network")
    p.add_argument("--log", help="training log CSV (default: train_log.csv next to --out)")
    p.add_argument("--val-manifest", help="write a validation report for these triplets")
    p.set_defaults(func=cmd_train)

    p = _sub(subs, "infer", "restore and super-resolve a decoded LR YUV file",
             ["ckpt", "input", "size", "out"])
    p.add_argument("--ckpt")
    p.add_argument("--in", dest="input", help="decoded LR YUV420 file")
    p.add_argument("--size", type=parse_size, help="LR extents WxH")
    p.add_argument("--out", help="output HR YUV420 file")
    p.set_defaults(func=cmd_infer)

    p = _sub(subs, "eval", "per-frame Y PSNR/SSIM of two YUV files", ["ref", "test", "size"])
    p.add_argument("--ref")
    p.add_argument("--test")
    p.add_argument("--size", type=parse_size)
    p.add_argument("--csv", help="per-frame CSV output")
    p.set_defaults(func=cmd_eval)

    p = _sub(subs, "bdrate", "BD-rate (%) of a test R-D curve against an anchor",
             ["anchor", "test"])
    p.add_argument("--anchor", help="R-D CSV (label,qp,bitrate_kbps,psnr_db)")
    p.add_argument("--test")
    p.set_defaults(func=cmd_bdrate)

    p = _sub(subs, "count", "parameter and MAC census", [])
    p.add_argument("--arch", choices=("v1", "v2"), default="v2")
    p.add_argument("--channels", type=int, default=64)
    p.add_argument("--input-size", type=parse_size, default=(640, 360), help="LR extents WxH")
    p.set_defaults(func=cmd_count)
    return ap


def _subparser(ap: argparse.ArgumentParser, name: str) -> argparse.ArgumentParser:
    for action in ap._subparsers._group_actions:
        if name in action.choices:
            return action.choices[name]
    raise KeyError(name)


def _config_value(action: argparse.Action, key: str, raw: str):
    if isinstance(action, argparse._StoreTrueAction):
        word = raw.lower()
        if word not in TRUE_WORDS | FALSE_WORDS:
            raise UsageError(f"config key {key}: expected a boolean, got {raw!r}")
        return word in TRUE_WORDS
    try:
        value = action.type(raw) if action.type else raw
    except (argparse.ArgumentTypeError, ValueError) as exc:
        raise UsageError(f"config key {key}: {exc}") from None
    if action.choices is not None and value not in action.choices:
        raise UsageError(f"config key {key}: {value!r} not in {list(action.choices)}")
    return value


def parse_args(argv=None) -> argparse.Namespace:
    """Parse flags with the optional config file installed as defaults underneath."""
    ap = build_parser()
    args = ap.parse_args(argv)
    if args.config:
        sub = _subparser(ap, args.command)
        actions = {a.dest: a for a in sub._actions if a.dest not in ("help", "config", "quiet")}
        file_values = read_config_file(args.config)
        unknown = sorted(set(file_values) - set(actions))
        if unknown:
            raise UsageError(f"unknown config key(s) for {args.command}: {', '.join(unknown)}")
        sub.set_defaults(**{k: _config_value(actions[k], k, v) for k, v in file_values.items()})
        args = ap.parse_args(argv)
    missing = [k for k in args._required if getattr(args, k) is None]
    if missing:
        flags = ", ".join("--" + ("in" if k == "input" else k.replace("_", "-")) for k in missing)
        raise UsageError(f"{args.command}: missing required {flags}")
    return args


def resolved_config(args: argparse.Namespace) -> str:
    skip = {"func", "_required", "config", "quiet"}
    return " ".join(f"{k}={v}" for k, v in sorted(vars(args).items()) if k not in skip)


# --------------------------------------------------------------------------
# commands

def cmd_dataset(args) -> int:
    codec = args.codec_encode is not None or args.codec_decode is not None
    if codec == bool(args.synthetic):
        raise UsageError("choose exactly one degrader: --synthetic or --codec-encode/--codec-decode")
    if codec:
        if args.codec_encode is None or args.codec_decode is None:
            raise UsageError("--codec-encode and --codec-decode must be given together")
        degrader = CodecDegrader(CodecCmd(args.codec_encode, args.codec_decode, args.qp, args.tag,
                                          args.codec_config), fps=args.fps)
    else:
        degrader = SyntheticDegrader(args.qstep)
    m = build_triplets(args.hr_dir, degrader, args.out, args.size, seed=args.seed, fps=args.fps)
    log.info("wrote %d triplets to %s", len(m.records), Path(args.out) / "manifest.tsv")
    for name, rate in m.rates.items():
        print(f"{name}\t{rate:.3f} kbps")
    return 0


def cmd_train(args) -> int:
    manifest = DatasetManifest.load(args.manifest)
    data = manifest.load_triplets()
    if args.from_ckpt:
        params, net_cfg = N.load_checkpoint(args.from_ckpt)
    else:
        net_cfg = N.NetworkConfig(arch=args.arch, channels=args.channels)
        params = N.build_network(net_cfg, args.seed, init=args.init)
    defaults = TR.STAGE_DEFAULTS[args.stage]
    cfg = TR.TrainConfig(
        stage=args.stage,
        crop_hr=args.crop,
        batch=args.batch,
        epochs=1 if args.iters is not None else args.epochs,
        iters_per_epoch=args.iters if args.iters is not None else defaults["iters_per_epoch"],
        seed=args.seed,
        optim_hyper=OptimHyper(kind=args.optim, lr=args.lr),
        rec_target=args.rec_target,
        augmentation=not args.no_augment,
    )
    log.info("network %s: %d parameters; %d iterations", net_cfg, params.size, cfg.iterations)

    def report(row):
        if row.iter == 1 or row.iter % 100 == 0 or row.iter == cfg.iterations:
            log.info("iter %d  l_res %.6g  l_rec %.6g  total %.6g",
                     row.iter, row.l_res, row.l_rec, row.total)

    result = TR.train(params, net_cfg, cfg, data, callback=report)
    out = Path(args.out)
    N.save_checkpoint(result.params, net_cfg, out)
    log_path = Path(args.log) if args.log else out.parent / "train_log.csv"
    TR.write_train_log(result.log, log_path)
    log.info("checkpoint %s, log %s", out, log_path)
    if args.val_manifest:
        report_ = TR.validate(result.params, net_cfg,
                              DatasetManifest.load(args.val_manifest).load_triplets())
        report_.to_csv(out.parent / "validation.csv")
        print(f"validation psnr_lr={report_.psnr_lr:.4f} psnr_hr={report_.psnr_hr:.4f} "
              f"mse_res={report_.mse_res:.6g} mse_hr={report_.mse_hr:.6g}")
    return 0


def infer_frames(params, net_cfg, frames: List[YuvFrame]) -> List[YuvFrame]:
    out = []
    for f in frames:
        hr = TR.infer_frame(params, net_cfg, y_normalize(f)).hr_hat[0, 0]
        out.append(YuvFrame(y_denormalize(hr), nn_up2(f.u), nn_up2(f.v)))
    return out


def cmd_infer(args) -> int:
    params, net_cfg = N.load_checkpoint(args.ckpt)
    w, h = args.size
    frames = read_yuv420(args.input, w, h)
    write_yuv420(args.out, infer_frames(params, net_cfg, frames))
    log.info("%d frames %dx%d -> %dx%d written to %s", len(frames), w, h, 2 * w, 2 * h, args.out)
    return 0


def eval_rows(ref: List[YuvFrame], test: List[YuvFrame]):
    if len(ref) != len(test):
        raise ValueError(f"frame counts differ: ref has {len(ref)}, test has {len(test)}")
    return [(i, psnr(a.y, b.y), ssim(a.y, b.y)) for i, (a, b) in enumerate(zip(ref, test))]


def cmd_eval(args) -> int:
    w, h = args.size
    rows = eval_rows(read_yuv420(args.ref, w, h), read_yuv420(args.test, w, h))
    mean_psnr = float(np.mean([r[1] for r in rows]))
    mean_ssim = float(np.mean([r[2] for r in rows]))
    if args.csv:
        buf = io.StringIO()
        wr = csv.writer(buf, lineterminator="\n")
        wr.writerow(["frame", "psnr", "ssim"])
        for i, p, s in rows:
            wr.writerow([i, repr(p), repr(s)])
        wr.writerow(["mean", repr(mean_psnr), repr(mean_ssim)])
        atomic_write_text(args.csv, buf.getvalue())
    print(f"frames={len(rows)} psnr={mean_psnr:.4f} ssim={mean_ssim:.6f}")
    return 0


def _single_curve(path):
    curves = read_rd_csv(path)
    if not curves:
        raise ValueError(f"{path}: no R-D points")
    if len(curves) > 1:
        log.warning("%s holds %d curves; using %r", path, len(curves), curves[0].label)
    return curves[0]


def cmd_bdrate(args) -> int:
    print(f"{bd_rate(_single_curve(args.anchor), _single_curve(args.test)):.2f}")
    return 0


def cmd_count(args) -> int:
    cfg = N.NetworkConfig(arch=args.arch, channels=args.channels)
    w, h = args.input_size
    params = N.count_params(cfg)
    macs = N.count_macs(cfg, h, w)
    print(f"arch={args.arch} params={params} ({params / 1e6:.3f}M)")
    print(f"input={w}x{h} macs={macs} ({macs / 1e9:.2f}G)")
    print(f"convention: {N.MAC_CONVENTION}")
    return 0


# --------------------------------------------------------------------------

def main(argv=None) -> int:
    logging.basicConfig(level=logging.INFO, format="%(levelname)s %(message)s", stream=sys.stderr)
    try:
        args = parse_args(argv)
    except SystemExit as exc:  # --help
        return int(exc.code or 0)
    except (UsageError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    log.setLevel(logging.INFO)
    log.info("%s %s", args.command, resolved_config(args))
    if args.quiet:
        log.setLevel(logging.WARNING)
    try:
        return args.func(args)
    except UsageError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    except (CodecError, TrainingDiverged, OSError) as exc:
        print(f"error: {' '.join(str(exc).split())}", file=sys.stderr)
        return 1
    except ValueError as exc:
        print(f"error: {' '.join(str(exc).split())}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
