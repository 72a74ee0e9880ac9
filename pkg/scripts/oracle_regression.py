"""Train on synthetic WDR images against the analytic operator and report the gain.

    python scripts/oracle_regression.py                     # 300/300/300 steps, n=4
    python scripts/oracle_regression.py --steps 50 --out run/
"""
import argparse
import dataclasses
import json
import logging
from pathlib import Path

from threadpoolctl import threadpool_limits

from wdrtone.experiments import oracle_regression
from wdrtone.networks import save_weights
from wdrtone.training import TrainConfig, write_history


def main():
    ap = argparse.ArgumentParser(description=__doc__, formatter_class=argparse.RawDescriptionHelpFormatter)
    ap.add_argument("--n", type=int, default=4)
    ap.add_argument("--seed", type=int, default=0)
    ap.add_argument("--steps", type=int, default=300, help="steps for each of the three stages")
    ap.add_argument("--train-images", type=int, default=32)
    ap.add_argument("--test-images", type=int, default=8)
    ap.add_argument("--size", type=int, default=64)
    ap.add_argument("--dyn-range", type=float, default=1e4)
    ap.add_argument("--out", help="directory for weights, loss history and summary")
    args = ap.parse_args()
    logging.basicConfig(level=logging.INFO, format="%(message)s")

    cfg = dataclasses.replace(TrainConfig(), n=args.n, seed=args.seed, steps_global=args.steps,
                              steps_local=args.steps, steps_joint=args.steps)
    with threadpool_limits(limits=1):
        r = oracle_regression(cfg, args.train_images, args.test_images, args.size, args.dyn_range)

    summary = {
        "joint_loss_before": r.joint_before,
        "joint_loss_after": r.joint_after,
        "joint_loss_ratio": r.joint_after / r.joint_before,
        "psnr_model": r.psnr_model,
        "psnr_identity": r.psnr_identity,
        "ssim_model": r.ssim_model,
        "ssim_identity": r.ssim_identity,
        "seconds": r.seconds,
    }
    print(json.dumps(summary, indent=2))
    if args.out:
        out = Path(args.out)
        out.mkdir(parents=True, exist_ok=True)
        save_weights(out / "model.wdrt", r.model.to_weights())
        write_history(out / "losses.csv", r.history)
        (out / "summary.json").write_text(json.dumps(summary, indent=2) + "\n")


if __name__ == "__main__":
    main()
