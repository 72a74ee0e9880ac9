"""Command-line entry point: ``wdrtone <command> ...``."""
from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path

import numpy as np
from threadpoolctl import threadpool_limits

from . import image_io, metrics, pyramid
from .config import RunConfig, dump_config, load_config, with_n
from .experiments import evaluate, synth_set
from .losses import FeatureExtractor
from .networks import load_weights, save_weights, tonemap
from .training import make_dataset, oracle_tmo, synth_wdr, train, write_history

log = logging.getLogger("wdrtone")


def _band_count(text: str) -> int:
    n = int(text)
    if n < 2:
        raise argparse.ArgumentTypeError(f"band count must be >= 2, got {n}")
    return n


def _n_list(text: str) -> list[int]:
    if ".." in text:
        lo, hi = text.split("..")
        values = list(range(int(lo), int(hi) + 1))
    else:
        values = [int(v) for v in text.split(",") if v.strip()]
    if not values or min(values) < 2:
        raise argparse.ArgumentTypeError(f"bad band-count list {text!r}")
    return values


def _luminance_input(path) -> tuple[np.ndarray, np.ndarray]:
    rgb = image_io.read_image(path).astype(np.float64)
    return rgb, image_io.luminance(rgb)


# ---------------------------------------------------------------------------
# commands


def cmd_decompose(args) -> int:
    _, lum = _luminance_input(args.input)
    x, _ = image_io.normalize_luminance(lum, args.norm)
    x = x.astype(np.float32)
    pair = pyramid.reformulate(x, args.n)
    out = Path(args.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    image_io.write_pfm(out / "x_l.pfm", pair.x_l)
    image_io.write_pfm(out / "x_g.pfm", pair.x_g)
    # reconstruct from what was written, in single precision
    x_l = image_io.read_pfm(out / "x_l.pfm")[..., 0]
    x_g = image_io.read_pfm(out / "x_g.pfm")[..., 0]
    rec = pyramid.reconstruct_pair(pyramid.ReformulatedPair(x_l, x_g, args.n, pair.pad))
    err = float(np.abs(rec - x).max())
    print(f"n={args.n} x_l={x_l.shape[1]}x{x_l.shape[0]} x_g={x_g.shape[1]}x{x_g.shape[0]} "
          f"max_abs_error={err:.3e}")
    return 0


def cmd_synth(args) -> int:
    rng = np.random.default_rng(args.seed)
    out = Path(args.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    manifest = {"seed": args.seed, "size": args.size, "dyn_range": args.dyn_range, "images": []}
    for i in range(args.count):
        wdr = synth_wdr(rng, args.size, args.size, args.dyn_range)
        ldr = oracle_tmo(wdr)
        stem = f"{i:04d}"
        image_io.write_pfm(out / f"wdr_{stem}.pfm", wdr.astype(np.float32))
        image_io.write_pfm(out / f"ldr_{stem}.pfm", ldr.astype(np.float32))
        image_io.write_png8(out / f"ldr_{stem}.png", ldr)
        manifest["images"].append({"id": stem, "measured_dyn_range": float(wdr.max() / wdr.min())})
    (out / "manifest.json").write_text(json.dumps(manifest, indent=2) + "\n")
    print(f"wrote {args.count} image pairs to {out}")
    return 0


def load_pairs(data_dir):
    d = Path(data_dir)
    wdr = sorted(d.glob("wdr_*.pfm"))
    if not wdr:
        raise FileNotFoundError(f"no wdr_*.pfm files in {d}")
    images, targets = [], []
    for p in wdr:
        q = d / p.name.replace("wdr_", "ldr_")
        if not q.exists():
            raise FileNotFoundError(f"missing target {q.name} for {p.name}")
        images.append(image_io.read_pfm(p)[..., 0].astype(np.float64))
        targets.append(image_io.read_pfm(q)[..., 0].astype(np.float64))
    return images, targets


def prepare_data(run: RunConfig):
    """Training and held-out images with their targets (targets None means oracle)."""
    rng = np.random.default_rng(run.train.seed)
    if run.data_dir is None:
        train_imgs = synth_set(rng, run.synth_count, run.synth_size, run.dyn_range)
        test_imgs = synth_set(rng, run.eval_count, run.synth_size, run.dyn_range)
        return rng, train_imgs, None, test_imgs, None
    images, targets = load_pairs(run.data_dir)
    k = min(run.eval_count, len(images) - 1)
    split = len(images) - k
    return rng, images[:split], targets[:split], images[split:], targets[split:]


def run_training(run: RunConfig):
    rng, train_imgs, train_tgts, test_imgs, test_tgts = prepare_data(run)
    data = make_dataset(train_imgs, run.train, rng, train_tgts)
    res = train(data, run.train, FeatureExtractor.seeded(run.train.feature_seed))
    return res, test_imgs, test_tgts


def cmd_train(args) -> int:
    run = load_config(args.config)
    print(f"# config: {dump_config(run)}")
    res, _, _ = run_training(run)
    weights = res.model.to_weights()
    weights.extra["seed"] = run.train.seed
    save_weights(args.out, weights)
    csv_path = Path(args.losses) if args.losses else Path(args.out).with_suffix(".losses.csv")
    write_history(csv_path, res.history)
    print(f"joint probe loss {res.probe_before:.6f} -> {res.probe_after:.6f}")
    print(f"wrote {args.out} and {csv_path} ({len(res.history)} steps)")
    return 0


def cmd_tonemap(args) -> int:
    weights = load_weights(args.weights)
    rgb, lum = _luminance_input(args.input)
    x, _ = image_io.normalize_luminance(lum, weights.norm_mode)
    l = tonemap(x, weights, args.n)
    out = image_io.recover_color(rgb, lum, l, image_io.ColorRecoveryParams(args.s))
    image_io.write_png8(args.out, np.clip(out, 0.0, 1.0))
    print(f"wrote {args.out} ({out.shape[1]}x{out.shape[0]})")
    return 0


def cmd_eval(args) -> int:
    report = metrics.eval_dataset(args.pred, args.ref)
    report.write_csv(args.out)
    print(f"{len(report.rows)} images: mean PSNR {report.mean_psnr:.3f} dB, mean SSIM {report.mean_ssim:.4f}")
    return 0


def cmd_sweep_n(args) -> int:
    run = load_config(args.config)
    print(f"# config: {dump_config(run)}")
    # fail before any training if a band count does not fit the patch size
    too_big = [n for n in args.n_list if run.train.patch_out < 2 ** n]
    if too_big:
        raise ValueError(f"patch_out={run.train.patch_out} is too small for n={too_big}; "
                         f"n needs patch_out >= 2**n")
    rows = []
    for n in args.n_list:
        res, test_imgs, test_tgts = run_training(with_n(run, n))
        p_model, _, s_model, _ = evaluate(res.model, test_imgs, run.train.norm_mode, test_tgts)
        rows.append((n, p_model, s_model))
        log.info("n=%d PSNR %.3f SSIM %.4f", n, p_model, s_model)
    lines = ["n,psnr_db,ssim"] + [f"{n},{p!r},{s!r}" for n, p, s in rows]
    if args.out:
        Path(args.out).write_text("\n".join(lines) + "\n")
    print(f"{'n':>3} {'PSNR':>8} {'SSIM':>7}")
    for n, p, s in rows:
        print(f"{n:>3} {p:8.3f} {s:7.4f}")
    return 0


# ---------------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="wdrtone", description="Laplacian-pyramid CNN tone mapping")
    ap.add_argument("-v", "--verbose", action="store_true")
    sub = ap.add_subparsers(dest="command", required=True)

    p = sub.add_parser("decompose", help="split an image into high/low frequency bands")
    p.add_argument("input")
    p.add_argument("--n", type=_band_count, default=6)
    p.add_argument("--out-dir", required=True)
    p.add_argument("--norm", choices=("log", "linear"), default="log")
    p.set_defaults(func=cmd_decompose)

    p = sub.add_parser("synth", help="write synthetic WDR images and oracle targets")
    p.add_argument("--count", type=int, default=40)
    p.add_argument("--size", type=int, default=64)
    p.add_argument("--dyn-range", type=float, default=1e4)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out-dir", required=True)
    p.set_defaults(func=cmd_synth)

    p = sub.add_parser("train", help="stage-one then joint training")
    p.add_argument("--config", required=True)
    p.add_argument("--out", required=True, help="weight file (.wdrt)")
    p.add_argument("--losses", help="loss CSV (default: <out>.losses.csv)")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("tonemap", help="tone-map an HDR image to PNG")
    p.add_argument("input")
    p.add_argument("--weights", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--s", type=float, default=0.6, help="colour saturation exponent")
    p.add_argument("--n", type=_band_count, default=None, help="expected band count")
    p.set_defaults(func=cmd_tonemap)

    p = sub.add_parser("eval", help="PSNR/SSIM of predictions against references")
    p.add_argument("--pred", required=True)
    p.add_argument("--ref", required=True)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("sweep-n", help="train and score one model per band count")
    p.add_argument("--config", required=True)
    p.add_argument("--n-list", type=_n_list, default=_n_list("2..7"))
    p.add_argument("--out", help="CSV table")
    p.set_defaults(func=cmd_sweep_n)
    return ap


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        stream=sys.stderr, format="%(levelname)s %(name)s: %(message)s")
    threads = 1
    if getattr(args, "config", None):
        try:
            threads = load_config(args.config).threads
        except Exception:
            pass
    try:
        with threadpool_limits(limits=threads):
            return args.func(args)
    except Exception as exc:  # noqa: BLE001 - report any failure as a diagnostic
        if args.verbose:
            raise
        print(f"wdrtone {args.command}: error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
