"""Synthetic data, patch sampling, ADAM, and the staged training schedule.

Human-tuned ground truth is replaced by an analytic global operator
(:func:`oracle_tmo`), which turns training into a regression problem whose
answer is known.
"""
from __future__ import annotations

import csv
import logging
from dataclasses import dataclass, field, fields
from pathlib import Path

import numpy as np
from scipy import ndimage

from . import nn_core as nn
from . import pyramid
from .image_io import normalize_luminance
from .losses import (FeatureExtractor, FineTuneLossWeights, LossWeights, composite_finetune,
                     composite_global)
from .networks import TonemapModel, conv_kernels

log = logging.getLogger(__name__)


@dataclass
class TrainConfig:
    lr: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    eps_adam: float = 1e-8
    batch_local: int = 8
    batch_global: int = 64
    batch_finetune: int = 4
    patch_out: int = 64  # 512 at full scale
    patches_per_image: int = 20
    patch_frac_range: tuple = (0.20, 0.60)
    n: int = 4  # 6 at full scale
    seed: int = 0
    steps_global: int = 300
    steps_local: int = 300
    steps_joint: int = 300
    freeze_bands: bool = False  # joint stage trains f_t only
    init_std: float = 0.1
    norm_mode: str = "log"
    feature_seed: int = 0
    dtype: str = "float32"
    loss: LossWeights = field(default_factory=LossWeights)
    finetune_loss: FineTuneLossWeights = field(default_factory=FineTuneLossWeights)

    def __post_init__(self):
        if not self.lr > 0:
            raise ValueError("lr must be positive")
        if not (0 <= self.beta1 < 1 and 0 <= self.beta2 < 1):
            raise ValueError("ADAM betas must lie in [0, 1)")
        lo, hi = self.patch_frac_range
        if not 0 < lo <= hi <= 1:
            raise ValueError(f"patch_frac_range {self.patch_frac_range} must lie in (0, 1]")
        self.patch_frac_range = (float(lo), float(hi))
        if isinstance(self.loss, dict):
            self.loss = LossWeights(**self.loss)
        if isinstance(self.finetune_loss, dict):
            self.finetune_loss = FineTuneLossWeights(**self.finetune_loss)

    @classmethod
    def field_names(cls):
        return [f.name for f in fields(cls)]


# ---------------------------------------------------------------------------
# optimiser


@dataclass
class AdamState:
    m: dict = field(default_factory=dict)
    v: dict = field(default_factory=dict)
    t: int = 0


def adam_step(params: dict, grads: dict, state: AdamState, cfg: TrainConfig) -> AdamState:
    """One bias-corrected ADAM update, applied to ``params`` in place."""
    state.t += 1
    b1, b2 = cfg.beta1, cfg.beta2
    c1 = 1 - b1 ** state.t
    c2 = 1 - b2 ** state.t
    for name, p in params.items():
        g = grads[name]
        if g.shape != p.shape:
            raise ValueError(f"gradient for {name} has shape {g.shape}, parameter {p.shape}")
        if name not in state.m:
            state.m[name] = np.zeros_like(p)
            state.v[name] = np.zeros_like(p)
        m, v = state.m[name], state.v[name]
        m *= b1
        m += (1 - b1) * g
        v *= b2
        v += (1 - b2) * g * g
        p -= cfg.lr * (m / c1) / (np.sqrt(v / c2) + cfg.eps_adam)
    return state


def truncated_normal_init(shape, rng, std: float = 0.1) -> np.ndarray:
    return nn.truncated_normal(shape, rng, std)


# ---------------------------------------------------------------------------
# data


def synth_wdr(rng, w: int, h: int, dyn_range: float = 1e4, blobs: int = 12) -> np.ndarray:
    """Random smooth wide-range luminance: Gaussian light sources over a dim floor.

    Blob peaks are log-uniform over ``dyn_range``; a faint multiplicative
    texture adds high frequencies.  The log range is finally stretched so that
    ``max / min == dyn_range``.
    """
    if dyn_range < 10:
        raise ValueError("dyn_range must be >= 10")
    yy, xx = np.mgrid[0:h, 0:w].astype(np.float64)
    img = np.full((h, w), 1.0)
    for _ in range(blobs):
        cy, cx = rng.uniform(0, h), rng.uniform(0, w)
        sigma = rng.uniform(0.04, 0.3) * min(w, h)
        peak = dyn_range ** rng.uniform(0.0, 1.0)
        img += peak * np.exp(-((yy - cy) ** 2 + (xx - cx) ** 2) / (2 * sigma ** 2))
    texture = ndimage.gaussian_filter(rng.standard_normal((h, w)), 0.7)
    img *= np.exp(0.15 * texture / (texture.std() + 1e-12))
    logs = np.log(img)
    lo, hi = logs.min(), logs.max()
    logs = (logs - lo) / (hi - lo) * np.log(dyn_range)
    return np.exp(logs)


def oracle_tmo(x: np.ndarray, key: float = 0.18) -> np.ndarray:
    """Global photographic operator ``Ls / (1 + Ls)`` with ``Ls = key * x / geomean(x)``."""
    x = np.asarray(x, dtype=np.float64)
    if np.any(x <= 0):
        raise ValueError("oracle operator needs strictly positive luminance")
    scaled = key / np.exp(np.log(x).mean()) * x
    return scaled / (1 + scaled)


def _sample_boxes(h: int, w: int, cfg: TrainConfig, rng, count: int):
    m = min(h, w)
    lo, hi = cfg.patch_frac_range
    smin, smax = int(np.ceil(lo * m)), int(np.floor(hi * m))
    if smin < 2 or smax < smin:
        raise ValueError(f"{w}x{h} image is too small for patch fractions {cfg.patch_frac_range}")
    boxes = []
    for _ in range(count):
        side = int(np.clip(round(rng.uniform(lo, hi) * m), smin, smax))
        top = int(rng.integers(0, h - side + 1))
        left = int(rng.integers(0, w - side + 1))
        boxes.append((top, left, side))
    return boxes


def _resample(crop: np.ndarray, out: int) -> np.ndarray:
    side = crop.shape[0]
    c = (np.arange(out) + 0.5) * side / out - 0.5
    yy, xx = np.meshgrid(c, c, indexing="ij")
    return ndimage.map_coordinates(crop, [yy, xx], order=1, mode="nearest")


def sample_patches(img: np.ndarray, cfg: TrainConfig, rng, count: int | None = None):
    """Square crops with sides uniform in ``patch_frac_range * min(H, W)``,
    bilinearly resampled to ``patch_out``.

    ``img`` may be ``(H, W)`` or ``(H, W, C)``; channels share each crop, which
    keeps input/target pairs aligned.  Returns ``(patches, boxes)``.
    """
    img = np.asarray(img)
    count = cfg.patches_per_image if count is None else count
    h, w = img.shape[:2]
    boxes = _sample_boxes(h, w, cfg, rng, count)
    patches = []
    for top, left, side in boxes:
        crop = img[top:top + side, left:left + side]
        if crop.ndim == 2:
            patches.append(_resample(crop, cfg.patch_out))
        else:
            patches.append(np.stack([_resample(crop[..., c], cfg.patch_out)
                                     for c in range(crop.shape[2])], axis=-1))
    return patches, boxes


@dataclass
class Dataset:
    """Aligned ``(P, 1, S, S)`` stacks of inputs, targets and their two-band splits."""

    x: np.ndarray
    y: np.ndarray
    n: int
    x_g: np.ndarray = None
    x_l: np.ndarray = None
    y_g: np.ndarray = None
    y_l: np.ndarray = None

    def __post_init__(self):
        if len(self.x) == 0:
            raise ValueError("empty dataset")
        if self.x.shape != self.y.shape:
            raise ValueError(f"input {self.x.shape} and target {self.y.shape} differ")
        px = pyramid.reformulate(self.x, self.n)
        py = pyramid.reformulate(self.y, self.n)
        if px.pad != (0, 0):
            raise ValueError(f"patch size {self.x.shape[-1]} is not divisible by 2**(n-1)")
        self.x_g, self.x_l, self.y_g, self.y_l = px.x_g, px.x_l, py.x_g, py.x_l

    def __len__(self):
        return len(self.x)


def make_dataset(images, cfg: TrainConfig, rng, targets=None) -> Dataset:
    """Patchify WDR luminance images against their oracle (or supplied) targets."""
    dtype = np.dtype(cfg.dtype)
    xs, ys = [], []
    for i, img in enumerate(images):
        norm, _ = normalize_luminance(img, cfg.norm_mode)
        tgt = oracle_tmo(img) if targets is None else targets[i]
        patches, _ = sample_patches(np.stack([norm, tgt], axis=-1), cfg, rng)
        xs.extend(p[..., 0] for p in patches)
        ys.extend(p[..., 1] for p in patches)
    x = np.asarray(xs, dtype=dtype)[:, None]
    y = np.asarray(ys, dtype=dtype)[:, None]
    return Dataset(x, y, cfg.n)


# ---------------------------------------------------------------------------
# training


@dataclass
class TrainResult:
    model: TonemapModel
    history: list  # (step, stage, loss)
    probe_before: float = float("nan")
    probe_after: float = float("nan")


def _batch(rng, size: int, batch: int):
    return np.sort(rng.choice(size, size=min(batch, size), replace=False))


def _params_of(net, prefix=""):
    return dict(nn.named_params(net, prefix))


def _grads_of(net, prefix=""):
    return dict(nn.named_grads(net, prefix))


def make_model(cfg: TrainConfig, rng) -> TonemapModel:
    model = TonemapModel(cfg.n, cfg.norm_mode, np.dtype(cfg.dtype))
    model.init_params(rng, cfg.init_std)
    return model


def _train_band(net, xs, ys, steps, batch, stage, cfg, fx, rng, history, step0):
    adam = AdamState()
    params = _params_of(net)
    kernels = conv_kernels(net)
    for step in range(steps):
        idx = _batch(rng, len(xs), batch)
        nn.zero_grad(net)
        pred = net.forward(xs[idx], train=True)
        loss, grad, grad_w, _ = composite_global(pred, ys[idx], kernels, cfg.loss, fx)
        net.backward(grad.astype(pred.dtype, copy=False))
        grads = _grads_of(net)
        for k, g in grad_w.items():
            grads[k] = grads[k] + g
        adam_step(params, grads, adam, cfg)
        history.append((step0 + step, stage, loss))
    return step0 + steps


def train_stage1(data: Dataset, cfg: TrainConfig, model: TonemapModel | None = None,
                 fx: FeatureExtractor | None = None, rng=None, history=None) -> TrainResult:
    """Train ``f_g`` on the low bands, then ``f_l`` on the high bands."""
    if len(data) == 0:
        raise ValueError("empty dataset")
    rng = rng if rng is not None else np.random.default_rng(cfg.seed)
    model = model if model is not None else make_model(cfg, rng)
    fx = fx if fx is not None else FeatureExtractor.seeded(cfg.feature_seed)
    history = [] if history is None else history
    step = history[-1][0] + 1 if history else 0
    step = _train_band(model.f_g, data.x_g, data.y_g, cfg.steps_global, cfg.batch_global,
                       "global", cfg, fx, rng, history, step)
    log.info("global stage done, last loss %.5f", history[-1][2] if history else float("nan"))
    _train_band(model.f_l, data.x_l, data.y_l, cfg.steps_local, cfg.batch_local,
                "local", cfg, fx, rng, history, step)
    log.info("local stage done, last loss %.5f", history[-1][2] if history else float("nan"))
    return TrainResult(model, history)


def joint_loss(model: TonemapModel, x, y, cfg: TrainConfig, fx) -> float:
    """Eval-mode fine-tune loss over ``x``, evaluated in chunks of ``batch_finetune``.

    Every term is a per-element mean over equally sized samples, so the
    count-weighted average of chunk losses equals the full-batch loss.
    """
    total = 0.0
    step = cfg.batch_finetune
    with nn.no_grad():
        for i in range(0, len(x), step):
            out, *_ = model.forward(x[i:i + step], train=False)
            total += composite_finetune(out, y[i:i + step], cfg.finetune_loss, fx)[0] * len(out)
    return total / len(x)


def probe_indices(data: Dataset, cfg: TrainConfig, size: int = 16):
    return np.random.default_rng(cfg.seed + 1).choice(len(data), size=min(size, len(data)), replace=False)


def train_joint(data: Dataset, cfg: TrainConfig, model: TonemapModel, fx: FeatureExtractor | None = None,
                rng=None, history=None) -> TrainResult:
    """End-to-end training of the fine-tune objective through the whole pipeline.

    The probe loss (eval-mode joint loss on a fixed subset) is recorded before
    and after.
    """
    if len(data) == 0:
        raise ValueError("empty dataset")
    if model.n != data.n:
        raise ValueError(f"model has n={model.n}, dataset was split with n={data.n}")
    rng = rng if rng is not None else np.random.default_rng(cfg.seed)
    fx = fx if fx is not None else FeatureExtractor.seeded(cfg.feature_seed)
    history = [] if history is None else history
    step0 = history[-1][0] + 1 if history else 0
    probe = probe_indices(data, cfg)
    before = joint_loss(model, data.x[probe], data.y[probe], cfg, fx)
    nets = {"f_t": model.f_t} if cfg.freeze_bands else model.subnets()
    params = {}
    for name, net in nets.items():
        params.update(nn.named_params(net, name + "."))
    adam = AdamState()
    for step in range(cfg.steps_joint):
        idx = _batch(rng, len(data), cfg.batch_finetune)
        model.zero_grad()
        # frozen band networks still run in training mode so batch statistics stay consistent
        out, *_ = model.forward(data.x[idx], train=True)
        loss, grad, _ = composite_finetune(out, data.y[idx], cfg.finetune_loss, fx)
        model.backward(grad.astype(out.dtype, copy=False))
        grads = dict(model.named_grads())
        adam_step(params, {k: grads[k] for k in params}, adam, cfg)
        history.append((step0 + step, "joint", loss))
    after = joint_loss(model, data.x[probe], data.y[probe], cfg, fx)
    log.info("joint stage: probe loss %.5f -> %.5f", before, after)
    return TrainResult(model, history, before, after)


def train(data: Dataset, cfg: TrainConfig, fx: FeatureExtractor | None = None) -> TrainResult:
    """Full schedule: stage one (``f_g`` then ``f_l``) followed by joint training."""
    rng = np.random.default_rng(cfg.seed)
    fx = fx if fx is not None else FeatureExtractor.seeded(cfg.feature_seed)
    model = make_model(cfg, rng)
    res = train_stage1(data, cfg, model, fx, rng)
    return train_joint(data, cfg, model, fx, rng, res.history)


def write_history(path, history) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["step", "stage", "loss"])
        for step, stage, loss in history:
            w.writerow([step, stage, repr(float(loss))])


def read_history(path):
    with open(path, newline="") as fh:
        return [(int(r["step"]), r["stage"], float(r["loss"])) for r in csv.DictReader(fh)]
