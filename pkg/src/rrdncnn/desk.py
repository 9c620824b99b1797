"""Desk-scale training experiment on a handful of natural CIF frames.

Eight bundled photographs are turned into synthetic (HR, LR, DLR) triplets;
seven train the network and the last one is held out.  ``run`` reports the
held-out restoration and reconstruction gains over the DLR and bicubic
baselines, which is how small-budget training efficacy is judged here.
"""
from __future__ import annotations

import logging
import time
from dataclasses import dataclass
from typing import List, Optional, Sequence

from . import network as N
from . import train as TR
from .datasets import CIF, DEFAULT_IMAGES, natural_frames
from .degrade import TripletSample, make_triplet, synthetic_degrade
from .metrics import psnr
from .optim import OptimHyper
from .video import bicubic_up2, y_denormalize, y_normalize

log = logging.getLogger(__name__)


@dataclass(frozen=True)
class DeskSettings:
    qstep: float = 16.0
    channels: int = 16
    crop_hr: int = 32
    batch: int = 4
    iterations: int = 2000
    lr: float = 1e-3
    init: str = "residual"
    images: Sequence[str] = DEFAULT_IMAGES
    held_out: int = 1


@dataclass
class DeskResult:
    arch: str
    seed: int
    restore_psnr: float
    restore_base: float
    recon_psnr: float
    recon_base: float
    val_mse_hr: float
    seconds: float
    log: List[TR.LogRow]

    @property
    def restore_gain(self) -> float:
        return self.restore_psnr - self.restore_base

    @property
    def recon_gain(self) -> float:
        return self.recon_psnr - self.recon_base

    def summary(self) -> str:
        return (f"{self.arch} seed={self.seed} restore {self.restore_psnr:.3f} dB "
                f"({self.restore_gain:+.3f} vs DLR) recon {self.recon_psnr:.3f} dB "
                f"({self.recon_gain:+.3f} vs bicubic) val_mse_hr={self.val_mse_hr:.6g} "
                f"[{self.seconds:.0f}s]")


def synthetic_triplets(qstep: float = 16.0, images: Sequence[str] = DEFAULT_IMAGES,
                       size=CIF) -> List[TripletSample]:
    out = []
    for name, frame in zip(images, natural_frames(images, size)):
        hr, lr, dlr = make_triplet(frame.y, lambda p: synthetic_degrade(p, qstep))
        out.append(TripletSample(y_normalize(hr), y_normalize(lr), y_normalize(dlr),
                                 {"source": name, "qp": qstep, "tag": "SYN"}))
    return out


def baselines(held: Sequence[TripletSample]):
    """Mean PSNR of DLR vs LR and of bicubic-up(DLR) vs HR."""
    lr_base = sum(psnr(y_denormalize(t.dlr), y_denormalize(t.lr)) for t in held) / len(held)
    hr_base = sum(psnr(y_denormalize(bicubic_up2(t.dlr)), y_denormalize(t.hr)) for t in held)
    return lr_base, hr_base / len(held)


def run(arch: str, seed: int, settings: DeskSettings = DeskSettings(),
        triplets: Optional[List[TripletSample]] = None, callback=None) -> DeskResult:
    triplets = triplets if triplets is not None else synthetic_triplets(settings.qstep,
                                                                        settings.images)
    train_set, held = triplets[:-settings.held_out], triplets[-settings.held_out:]
    net_cfg = N.NetworkConfig(arch=arch, channels=settings.channels)
    params = N.build_network(net_cfg, seed, init=settings.init)
    cfg = TR.TrainConfig(crop_hr=settings.crop_hr, batch=settings.batch, epochs=1,
                         iters_per_epoch=settings.iterations, seed=seed,
                         optim_hyper=OptimHyper(lr=settings.lr))
    start = time.perf_counter()
    result = TR.train(params, net_cfg, cfg, train_set, callback=callback)
    seconds = time.perf_counter() - start
    report = TR.validate(result.params, net_cfg, held)
    lr_base, hr_base = baselines(held)
    out = DeskResult(arch, seed, report.psnr_lr, lr_base, report.psnr_hr, hr_base,
                     report.mse_hr, seconds, result.log)
    log.info("%s", out.summary())
    return out
