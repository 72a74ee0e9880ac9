"""PSNR / SSIM evaluation of tone-mapped outputs against references."""
from __future__ import annotations

import csv
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .image_io import luminance, read_image
from .losses import ssim

INF = float("inf")
IMAGE_SUFFIXES = (".pfm", ".hdr", ".png")


def psnr(pred, ref, peak: float = 1.0) -> float:
    """``10 log10(peak^2 / MSE)``; identical inputs give ``inf``."""
    pred = np.asarray(pred, dtype=np.float64)
    ref = np.asarray(ref, dtype=np.float64)
    if pred.shape != ref.shape:
        raise ValueError(f"shape mismatch: {pred.shape} vs {ref.shape}")
    mse = float(np.mean((pred - ref) ** 2))
    if mse == 0:
        return INF
    return 10.0 * math.log10(peak * peak / mse)


@dataclass
class EvalRow:
    id: str
    psnr_db: float
    ssim: float


@dataclass
class EvalReport:
    rows: list = field(default_factory=list)

    @property
    def mean_psnr(self) -> float:
        return float(np.mean([r.psnr_db for r in self.rows])) if self.rows else float("nan")

    @property
    def mean_ssim(self) -> float:
        return float(np.mean([r.ssim for r in self.rows])) if self.rows else float("nan")

    def write_csv(self, path) -> None:
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["id", "psnr_db", "ssim"])
            for r in self.rows:
                w.writerow([r.id, _fmt(r.psnr_db), repr(r.ssim)])


def _fmt(v: float) -> str:
    return "inf" if math.isinf(v) else repr(v)


def read_report(path) -> EvalReport:
    with open(path, newline="") as fh:
        rows = [EvalRow(r["id"], float(r["psnr_db"]), float(r["ssim"])) for r in csv.DictReader(fh)]
    return EvalReport(rows)


def _load_gray(path: Path) -> np.ndarray:
    if path.suffix.lower() == ".png":
        from PIL import Image
        arr = np.asarray(Image.open(path), dtype=np.float64) / 255.0
    else:
        arr = read_image(path).astype(np.float64)
    if arr.ndim == 3:
        # replicated grey stays exact; colour is reduced to luminance
        arr = arr[..., 0] if np.array_equal(arr[..., 0], arr[..., 1]) and np.array_equal(arr[..., 1], arr[..., 2]) \
            else luminance(arr)
    return arr


def evaluate_pairs(pairs) -> EvalReport:
    """``pairs`` yields ``(id, pred, ref)`` luminance arrays."""
    return EvalReport([EvalRow(i, psnr(p, r), ssim(p, r)) for i, p, r in pairs])


def eval_dataset(pred_dir, ref_dir) -> EvalReport:
    """Pair files by stem across two directories and score each pair."""
    pred_dir, ref_dir = Path(pred_dir), Path(ref_dir)

    def index(d):
        return {p.stem: p for p in sorted(d.iterdir()) if p.suffix.lower() in IMAGE_SUFFIXES}

    preds, refs = index(pred_dir), index(ref_dir)
    missing = sorted(set(preds) ^ set(refs))
    if missing:
        raise FileNotFoundError(f"no counterpart for: {', '.join(missing)}")
    return evaluate_pairs((k, _load_gray(preds[k]), _load_gray(refs[k])) for k in sorted(preds))
