"""Desk-scale experiments: oracle regression and the band-count sweep."""
from __future__ import annotations

import dataclasses
import logging
import time
from dataclasses import dataclass

import numpy as np

from .image_io import normalize_luminance
from .losses import FeatureExtractor, ssim
from .metrics import psnr
from .networks import tonemap
from .training import TrainConfig, make_dataset, oracle_tmo, synth_wdr, train

log = logging.getLogger(__name__)


@dataclass
class RegressionResult:
    joint_before: float
    joint_after: float
    psnr_model: float
    psnr_identity: float
    ssim_model: float
    ssim_identity: float
    seconds: float
    history: list
    model: object = None


def synth_set(rng, count: int, size: int, dyn_range: float):
    return [synth_wdr(rng, size, size, dyn_range) for _ in range(count)]


def evaluate(model, images, norm_mode: str = "log", targets=None):
    """Mean (PSNR, SSIM) of the model and of the identity map against the references.

    References default to the oracle operator applied to each image.
    """
    scores = []
    for i, img in enumerate(images):
        x, _ = normalize_luminance(img, norm_mode)
        ref = oracle_tmo(img) if targets is None else targets[i]
        out = tonemap(x, model)
        scores.append((psnr(out, ref), psnr(x, ref), ssim(out, ref), ssim(x, ref)))
    return tuple(float(v) for v in np.mean(scores, axis=0))


def oracle_regression(cfg: TrainConfig, n_train: int = 32, n_test: int = 8, size: int = 64,
                      dyn_range: float = 1e4, fx: FeatureExtractor | None = None) -> RegressionResult:
    start = time.perf_counter()
    rng = np.random.default_rng(cfg.seed)
    train_imgs = synth_set(rng, n_train, size, dyn_range)
    test_imgs = synth_set(rng, n_test, size, dyn_range)
    data = make_dataset(train_imgs, cfg, rng)
    res = train(data, cfg, fx)
    p_model, p_id, s_model, s_id = evaluate(res.model, test_imgs, cfg.norm_mode)
    out = RegressionResult(res.probe_before, res.probe_after, p_model, p_id, s_model, s_id,
                           time.perf_counter() - start, res.history, res.model)
    log.info("oracle regression: joint %.4f -> %.4f, PSNR %.2f dB (identity %.2f dB)",
             out.joint_before, out.joint_after, p_model, p_id)
    return out


def sweep_n(cfg: TrainConfig, n_values=(2, 3, 4, 5, 6, 7), **kw):
    """Train one model per band count; rows are ``(n, psnr, ssim)``."""
    rows = []
    for n in n_values:
        res = oracle_regression(dataclasses.replace(cfg, n=n), **kw)
        rows.append((n, res.psnr_model, res.ssim_model))
    return rows
