"""End-to-end run through an external codec: QP sweep, training, R-D comparison.

The bundled toy block-DCT codec stands in for an HEVC encoder; swap the two
command templates for real encoder/decoder invocations to use one.

    python3 demos/codec_pipeline.py --work /tmp/pipeline --iters 500
"""
import argparse
import logging
import shlex
import sys
from pathlib import Path

from rrdncnn import network as N
from rrdncnn import train as TR
from rrdncnn.datasets import natural_frames
from rrdncnn.degrade import CodecCmd, CodecDegrader, build_triplets
from rrdncnn.metrics import RDCurve, bd_rate, psnr
from rrdncnn.optim import OptimHyper
from rrdncnn.video import bicubic_up2, y_denormalize, write_yuv420

PY = shlex.quote(sys.executable)
ENCODE = f"{PY} -m rrdncnn.toycodec encode --in {{in}} --out {{out}} --w {{w}} --h {{h}} --qp {{qp}}"
DECODE = f"{PY} -m rrdncnn.toycodec decode --in {{in}} --out {{out}}"


def held_out_psnr(params, cfg, samples):
    net, bic = [], []
    for t in samples:
        hr = y_denormalize(t.hr)
        out = N.forward(params, cfg, t.dlr[None, None])
        net.append(psnr(hr, y_denormalize(out.hr_hat[0, 0])))
        bic.append(psnr(hr, y_denormalize(bicubic_up2(t.dlr))))
    return sum(net) / len(net), sum(bic) / len(bic)


def main():
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--work", default="pipeline_work")
    ap.add_argument("--qps", nargs="+", type=int, default=[32, 37, 42, 47])
    ap.add_argument("--train-qp", type=int, default=37)
    ap.add_argument("--iters", type=int, default=500)
    ap.add_argument("--encode", default=ENCODE)
    ap.add_argument("--decode", default=DECODE)
    args = ap.parse_args()
    logging.basicConfig(level=logging.INFO, format="%(message)s")

    work = Path(args.work)
    (work / "hr").mkdir(parents=True, exist_ok=True)
    for i, frame in enumerate(natural_frames()):
        write_yuv420(work / "hr" / f"img{i}.yuv", [frame])

    manifests = {}
    for qp in args.qps:
        degrader = CodecDegrader(CodecCmd(args.encode, args.decode, qp=qp))
        manifests[qp] = build_triplets(work / "hr", degrader, work / f"qp{qp}", (352, 288))

    train_set = manifests[args.train_qp].load_triplets()[:-1]
    cfg = N.NetworkConfig(arch="v2", channels=16)
    params = N.build_network(cfg, 0, init="residual")
    tcfg = TR.TrainConfig(crop_hr=32, batch=4, epochs=1, iters_per_epoch=args.iters,
                          optim_hyper=OptimHyper(lr=1e-3))
    params = TR.train(params, cfg, tcfg, train_set).params

    anchor, test = [], []
    for qp, m in manifests.items():
        held = m.load_triplets()[-1:]
        rate = m.rates[sorted(m.rates)[-1]]
        net, bic = held_out_psnr(params, cfg, held)
        print(f"qp {qp}: {rate:8.2f} kbps  bicubic {bic:.3f} dB  network {net:.3f} dB")
        anchor.append((rate, bic))
        test.append((rate, net))
    a = RDCurve.from_pairs("bicubic", *zip(*anchor))
    t = RDCurve.from_pairs("network", *zip(*test))
    print(f"BD-rate of the network against bicubic: {bd_rate(a, t):.2f}%")


if __name__ == "__main__":
    main()
