"""Band-count sweep at desk scale: one model per n, scored on held-out synthetic images.

Only the table layout is meaningful here.  Which n wins depends on data and
training length, and short synthetic runs say little about it.

    python scripts/sweep_n.py --n-list 2..5 --steps 100
"""
import argparse
import dataclasses
import logging

from threadpoolctl import threadpool_limits

from wdrtone.cli import _n_list
from wdrtone.experiments import sweep_n
from wdrtone.training import TrainConfig


def main():
    ap = argparse.ArgumentParser(description=__doc__, formatter_class=argparse.RawDescriptionHelpFormatter)
    ap.add_argument("--n-list", type=_n_list, default=_n_list("2..6"))
    ap.add_argument("--steps", type=int, default=100)
    ap.add_argument("--seed", type=int, default=0)
    ap.add_argument("--train-images", type=int, default=16)
    ap.add_argument("--test-images", type=int, default=8)
    ap.add_argument("--out", help="CSV table")
    args = ap.parse_args()
    logging.basicConfig(level=logging.INFO, format="%(message)s")

    cfg = dataclasses.replace(TrainConfig(), seed=args.seed, steps_global=args.steps,
                              steps_local=args.steps, steps_joint=args.steps)
    # 64-pixel patches need 2**(n-1) <= 32
    if max(args.n_list) > 6:
        cfg = dataclasses.replace(cfg, patch_out=2 ** max(args.n_list))
    with threadpool_limits(limits=1):
        rows = sweep_n(cfg, args.n_list, n_train=args.train_images, n_test=args.test_images,
                       size=max(64, cfg.patch_out * 2))
    lines = ["n,psnr_db,ssim"] + [f"{n},{p!r},{s!r}" for n, p, s in rows]
    if args.out:
        with open(args.out, "w") as fh:
            fh.write("\n".join(lines) + "\n")
    print(f"{'n':>3} {'PSNR':>8} {'SSIM':>7}")
    for n, p, s in rows:
        print(f"{n:>3} {p:8.3f} {s:7.4f}")


if __name__ == "__main__":
    main()
