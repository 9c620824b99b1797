"""Degradation-aware objective, training loop and validation."""
from __future__ import annotations

import csv
import io
import logging
import math
from dataclasses import dataclass, field
from typing import Callable, List, Optional, Sequence

import numpy as np

from . import network as N
from . import tensor as T
from ._io import atomic_write_text
from .degrade import TripletSample, sample_patch
from .errors import ConfigError, DimensionError, TrainingDiverged
from .metrics import psnr
from .optim import OptimHyper, OptimState, optimizer_step
from .video import y_denormalize

log = logging.getLogger(__name__)

REC_TARGETS = ("composed", "ground_truth_lr")


@dataclass(frozen=True)
class LossWeights:
    alpha: float = 0.5
    beta: float = 0.05

    def __post_init__(self):
        if self.alpha <= 0 or self.beta <= 0:
            raise ConfigError("loss weights must be positive")


STAGE_DEFAULTS = {1: dict(crop_hr=120, batch=16, iters_per_epoch=1275),
                  2: dict(crop_hr=512, batch=2, iters_per_epoch=1477)}


@dataclass(frozen=True)
class TrainConfig:
    """Training schedule.  ``None`` fields take the stage defaults.

    An epoch is a fixed number of iterations over freshly sampled patches.
    ``rec_target="ground_truth_lr"`` scores the reconstruction residual
    against ``HR - upsample(LR)`` instead of the network's own ``lr_hat``.
    """

    stage: int = 1
    crop_hr: Optional[int] = None
    batch: Optional[int] = None
    epochs: int = 1
    iters_per_epoch: Optional[int] = None
    seed: int = 0
    loss_weights: LossWeights = LossWeights()
    optim_hyper: OptimHyper = OptimHyper()
    rec_target: str = "composed"
    augmentation: bool = True

    def __post_init__(self):
        if self.stage not in STAGE_DEFAULTS:
            raise ConfigError(f"stage must be 1 or 2, got {self.stage}")
        for k, v in STAGE_DEFAULTS[self.stage].items():
            if getattr(self, k) is None:
                object.__setattr__(self, k, v)
        if self.crop_hr < 2 or self.crop_hr % 2:
            raise ConfigError(f"crop_hr must be a positive even integer, got {self.crop_hr}")
        if self.batch < 1 or self.epochs < 0 or self.iters_per_epoch < 0:
            raise ConfigError("batch must be >= 1; epochs and iters_per_epoch >= 0")
        if self.rec_target not in REC_TARGETS:
            raise ConfigError(f"rec_target must be one of {REC_TARGETS}")

    @property
    def iterations(self) -> int:
        return self.epochs * self.iters_per_epoch


# --------------------------------------------------------------------------
# objective

def degradation_aware_loss(outputs: N.ForwardOutputs, lr_gt: np.ndarray, hr_gt: np.ndarray,
                           weights: LossWeights = LossWeights(), hr_pred=None):
    """``(total, l_res, l_rec)`` with ``total = alpha * l_res + beta * l_rec``.

    ``l_res`` scores ``lr_hat`` against LR and ``l_rec`` scores ``hr_hat``
    (or ``hr_pred`` when given) against HR, both as MSE on [0, 1] planes.
    """
    if outputs.lr_hat.shape != np.shape(lr_gt):
        raise DimensionError(f"lr_hat {outputs.lr_hat.shape} vs target {np.shape(lr_gt)}")
    hr_pred = outputs.hr_hat if hr_pred is None else hr_pred
    if hr_pred.shape != np.shape(hr_gt):
        raise DimensionError(f"hr_hat {hr_pred.shape} vs target {np.shape(hr_gt)}")
    l_res = T.mse(outputs.lr_hat, lr_gt)
    l_rec = T.mse(hr_pred, hr_gt)
    return weights.alpha * l_res + weights.beta * l_rec, l_res, l_rec


def loss_and_grads(params: N.NetworkParams, config: N.NetworkConfig, dlr, lr_gt, hr_gt,
                   weights: LossWeights = LossWeights(), rec_target: str = "composed"):
    """Forward, loss and parameter gradients for one batch."""
    out = N.forward(params, config, dlr, keep_cache=True, check=False)
    d_lr = weights.alpha * T.mse_backward(out.lr_hat, lr_gt)
    if rec_target == "composed":
        total, l_res, l_rec = degradation_aware_loss(out, lr_gt, hr_gt, weights)
        d_hr = weights.beta * T.mse_backward(out.hr_hat, hr_gt)
        grads = N.backward(params, config, out, d_lr, d_hr)
    else:
        hr_alt = N.image_upsample(params, lr_gt).astype(np.float64) + out.r_rec
        total, l_res, l_rec = degradation_aware_loss(out, lr_gt, hr_gt, weights, hr_alt)
        d_hr = weights.beta * T.mse_backward(hr_alt, hr_gt)
        grads = N.backward(params, config, out, d_lr, d_hr, upsample_input=lr_gt)
    return (total, l_res, l_rec), grads, out


# --------------------------------------------------------------------------
# training loop

@dataclass
class LogRow:
    iter: int
    l_res: float
    l_rec: float
    total: float


@dataclass
class TrainResult:
    params: N.NetworkParams
    state: OptimState
    log: List[LogRow] = field(default_factory=list)


def format_train_log(rows: Sequence[LogRow]) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["iter", "l_res", "l_rec", "total"])
    for r in rows:
        w.writerow([r.iter, repr(r.l_res), repr(r.l_rec), repr(r.total)])
    return buf.getvalue()


def write_train_log(rows: Sequence[LogRow], path) -> None:
    atomic_write_text(path, format_train_log(rows))


def sample_batch(dataset: Sequence[TripletSample], crop_hr: int, batch: int,
                 rng: np.random.Generator, augmentation: bool = True):
    """Draw ``batch`` aligned patches; returns (dlr, lr, hr) NCHW float32 arrays."""
    patches = [sample_patch(dataset[int(rng.integers(len(dataset)))], crop_hr, rng, augmentation)
               for _ in range(batch)]
    stack = lambda attr: np.stack([getattr(p, attr) for p in patches])[:, None]  # noqa: E731
    return stack("dlr"), stack("lr"), stack("hr")


def train(params: N.NetworkParams, net_config: N.NetworkConfig, config: TrainConfig,
          dataset: Sequence[TripletSample], state: Optional[OptimState] = None,
          callback: Optional[Callable[[LogRow], None]] = None) -> TrainResult:
    """Sample -> forward -> loss -> backward -> optimizer step, ``config.iterations`` times.

    Deterministic for a given seed.  ``params`` is not modified.
    """
    if not dataset:
        raise ValueError("training dataset is empty")
    smallest = min(min(t.hr.shape) for t in dataset)
    if config.crop_hr > smallest:
        raise ConfigError(f"crop_hr {config.crop_hr} exceeds the smallest HR extent {smallest}")
    N._check_params(params, net_config)
    rng = np.random.default_rng(config.seed)
    flat = {k: a.copy() for k, a in params.arrays().items()}
    state = state or OptimState()
    rows: List[LogRow] = []
    for it in range(1, config.iterations + 1):
        dlr, lr, hr = sample_batch(dataset, config.crop_hr, config.batch, rng, config.augmentation)
        current = N.NetworkParams.from_arrays(flat)
        (total, l_res, l_rec), grads, _ = loss_and_grads(
            current, net_config, dlr, lr, hr, config.loss_weights, config.rec_target)
        if not math.isfinite(total):
            raise TrainingDiverged(
                f"non-finite loss at iteration {it}: l_res={l_res!r} l_rec={l_rec!r} "
                f"(lr={config.optim_hyper.lr}, seed={config.seed})")
        flat, state = optimizer_step(flat, grads, state, config.optim_hyper)
        row = LogRow(it, l_res, l_rec, total)
        rows.append(row)
        if callback is not None:
            callback(row)
    return TrainResult(N.NetworkParams.from_arrays(flat), state, rows)


# --------------------------------------------------------------------------
# validation

@dataclass
class FrameScore:
    frame: int
    psnr_lr: float
    psnr_hr: float
    mse_res: float
    mse_hr: float


@dataclass
class ValidationReport:
    frames: List[FrameScore]

    def mean(self, attr: str) -> float:
        return float(np.mean([getattr(f, attr) for f in self.frames]))

    @property
    def psnr_lr(self) -> float:
        return self.mean("psnr_lr")

    @property
    def psnr_hr(self) -> float:
        return self.mean("psnr_hr")

    @property
    def mse_res(self) -> float:
        return self.mean("mse_res")

    @property
    def mse_hr(self) -> float:
        return self.mean("mse_hr")

    def format_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["frame", "psnr_lr", "psnr_hr", "mse_res"])
        for f in self.frames:
            w.writerow([f.frame, repr(f.psnr_lr), repr(f.psnr_hr), repr(f.mse_res)])
        return buf.getvalue()

    def to_csv(self, path) -> None:
        atomic_write_text(path, self.format_csv())


def infer_frame(params: N.NetworkParams, config: N.NetworkConfig, dlr_plane: np.ndarray):
    """Full-frame forward of one [0, 1] plane; returns ``ForwardOutputs``."""
    return N.forward(params, config, np.asarray(dlr_plane, np.float32)[None, None])


def validate(params: N.NetworkParams, config: N.NetworkConfig,
             dataset: Sequence[TripletSample]) -> ValidationReport:
    """Per-frame restoration/reconstruction PSNR (8-bit) and MSE ([0, 1]), no augmentation."""
    if not dataset:
        raise ValueError("validation dataset is empty")
    scores = []
    for i, t in enumerate(dataset):
        out = infer_frame(params, config, t.dlr)
        lr_hat, hr_hat = out.lr_hat[0, 0], out.hr_hat[0, 0]
        scores.append(FrameScore(
            frame=i,
            psnr_lr=psnr(y_denormalize(lr_hat), y_denormalize(t.lr)),
            psnr_hr=psnr(y_denormalize(hr_hat), y_denormalize(t.hr)),
            mse_res=T.mse(lr_hat, t.lr),
            mse_hr=T.mse(hr_hat, t.hr),
        ))
    return ValidationReport(scores)
