"""Train v2 (and optionally v1) at desk scale and report held-out gains.

    python3 demos/desk_training.py --seeds 0 1 2 --arch v2 v1

Needs the ``desk`` extra (scikit-image) for the bundled photographs.
"""
import argparse
import logging
import statistics

from rrdncnn import desk


def main():
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--arch", nargs="+", default=["v2"], choices=["v1", "v2"])
    ap.add_argument("--seeds", nargs="+", type=int, default=[0])
    ap.add_argument("--iters", type=int, default=desk.DeskSettings.iterations)
    ap.add_argument("--lr", type=float, default=desk.DeskSettings.lr)
    ap.add_argument("--init", default=desk.DeskSettings.init, choices=["he", "residual"])
    ap.add_argument("--channels", type=int, default=desk.DeskSettings.channels)
    args = ap.parse_args()
    logging.basicConfig(level=logging.INFO, format="%(message)s")

    settings = desk.DeskSettings(iterations=args.iters, lr=args.lr, init=args.init,
                                 channels=args.channels)
    triplets = desk.synthetic_triplets(settings.qstep, settings.images)
    base_lr, base_hr = desk.baselines(triplets[-settings.held_out:])
    print(f"baselines: DLR vs LR {base_lr:.3f} dB, bicubic vs HR {base_hr:.3f} dB")

    def progress(row):
        if row.iter % 250 == 0:
            print(f"  iter {row.iter:5d}  l_res {row.l_res:.3e}  l_rec {row.l_rec:.3e}")

    for arch in args.arch:
        runs = [desk.run(arch, s, settings, triplets, callback=progress) for s in args.seeds]
        for r in runs:
            print(r.summary())
        print(f"{arch} median: restore {statistics.median(r.restore_gain for r in runs):+.3f} dB, "
              f"recon {statistics.median(r.recon_gain for r in runs):+.3f} dB, "
              f"val mse_hr {statistics.median(r.val_mse_hr for r in runs):.6g}")


if __name__ == "__main__":
    main()
