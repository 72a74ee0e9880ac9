"""Finite-difference checks of every layer, loss and the full pipeline.

``run_suite`` returns one :class:`CheckResult` per case.  Everything runs in
double precision on 16x16 inputs (8x8 for the sub-networks).
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import nn_core as nn
from .losses import (FeatureExtractor, FineTuneLossWeights, LossWeights, composite_finetune,
                     composite_global, dssim, feature_loss, l1_loss, l2_loss, weight_reg)
from .networks import CompressionNet, FineTuneNet, TonemapModel

LAYER_TOL = 1e-4
PIPELINE_TOL = 1e-3


@dataclass
class CheckResult:
    name: str
    report: nn.GradCheckReport
    tolerance: float

    @property
    def passed(self) -> bool:
        return self.report.passed(self.tolerance)


def _randomize(layer, rng, std=0.2):
    for name, arr in nn.named_params(layer):
        if name.endswith("weight"):
            arr[...] = rng.standard_normal(arr.shape) * std
        elif name.endswith("gamma"):
            arr[...] = rng.uniform(0.5, 1.5, arr.shape)
        else:
            arr[...] = rng.standard_normal(arr.shape) * 0.1
    for name, arr in nn.named_buffers(layer):
        if name.endswith("running_var"):
            arr[...] = rng.uniform(0.5, 2.0, arr.shape)
        else:
            arr[...] = rng.standard_normal(arr.shape) * 0.1


def check_layer(layer, x, rng, train=True, max_coords=None, step=1e-6):
    """Check input and parameter gradients of ``sum(layer(x) * g)`` for a random ``g``."""
    gout = rng.standard_normal(layer.forward(x, train).shape)

    def f():
        return float(np.sum(layer.forward(x, train) * gout))

    f()
    nn.zero_grad(layer)
    gx = layer.backward(gout)
    arrays = {"x": x, **dict(nn.named_params(layer))}
    analytic = {"x": gx, **{k: v.copy() for k, v in nn.named_grads(layer)}}
    return nn.gradient_check(f, arrays, analytic, step=step, max_coords=max_coords, rng=rng)


def check_loss(fn, pred, rng, max_coords=None, step=1e-6):
    _, g = fn(pred)
    return nn.gradient_check(lambda: fn(pred)[0], {"pred": pred}, {"pred": g}, step=step,
                             max_coords=max_coords, rng=rng)


def _layer_cases(rng):
    out = []
    for train in (True, False):
        mode = "train" if train else "eval"
        conv = nn.Conv2d(3, 4, 3)
        _randomize(conv, rng)
        out.append((f"conv3x3[{mode}]", check_layer(conv, rng.standard_normal((2, 3, 6, 6)), rng, train)))
        conv1 = nn.Conv2d(4, 2, 1)
        _randomize(conv1, rng)
        out.append((f"conv1x1[{mode}]", check_layer(conv1, rng.standard_normal((2, 4, 5, 5)), rng, train)))
        bn = nn.BatchNorm2d(3)
        _randomize(bn, rng)
        out.append((f"batchnorm[{mode}]", check_layer(bn, rng.standard_normal((3, 3, 4, 4)), rng, train)))
        block = nn.ResidualBlock(32)
        _randomize(block, rng)
        out.append((f"residual_block[{mode}]",
                    check_layer(block, rng.standard_normal((2, 32, 4, 4)), rng, train, max_coords=25)))
        for cls in (CompressionNet, FineTuneNet):
            net = cls()
            _randomize(net, rng)
            out.append((f"{cls.__name__}[{mode}]",
                        check_layer(net, rng.random((1, 1, 8, 8)), rng, train, max_coords=12)))
    # keep inputs away from the kink so differences are smooth
    x = rng.standard_normal((2, 3, 5, 5))
    x[np.abs(x) < 1e-3] = 0.1
    out.append(("relu", check_layer(nn.ReLU(), x, rng)))
    xp = rng.standard_normal((2, 3, 6, 7))
    gp = rng.standard_normal(nn.avgpool2_forward(xp).shape)
    out.append(("avgpool2", nn.gradient_check(
        lambda: float(np.sum(nn.avgpool2_forward(xp) * gp)), {"x": xp},
        {"x": nn.avgpool2_backward(xp.shape, gp)}, step=1e-6)))
    return [(n, r, LAYER_TOL) for n, r in out]


def _loss_cases(rng, fx):
    h = w = 16
    y = rng.random((h, w))
    # offset keeps l1 away from its kink
    cases = [
        ("l1", check_loss(lambda p: l1_loss(p, y + 2.0), rng.random((h, w)), rng)),
        ("l2", check_loss(lambda p: l2_loss(p, y), rng.random((h, w)), rng)),
        ("dssim", check_loss(lambda p: dssim(p, y), rng.random((h, w)), rng)),
        ("feature_loss", check_loss(lambda p: feature_loss(p, y, fx), rng.random((h, w)), rng, max_coords=48)),
    ]
    wts = {"a": rng.standard_normal((4, 3, 3, 3)), "b": rng.standard_normal((2, 4, 1, 1))}
    _, g = weight_reg(wts)
    cases.append(("weight_reg", nn.gradient_check(lambda: weight_reg(wts)[0], wts, g, step=1e-6)))
    pred = rng.random((h, w))
    k = {"k": rng.standard_normal((3, 1, 3, 3))}
    lw = LossWeights()
    _, gp, gk, _ = composite_global(pred, y + 2.0, k, lw, fx)
    cases.append(("composite_global", nn.gradient_check(
        lambda: composite_global(pred, y + 2.0, k, lw, fx)[0], {"pred": pred, "k": k["k"]},
        {"pred": gp, "k": gk["k"]}, step=1e-6, max_coords=48, rng=rng)))
    ft = FineTuneLossWeights()
    cases.append(("composite_finetune",
                  check_loss(lambda p: composite_finetune(p, y, ft, fx)[:2], rng.random((h, w)), rng, max_coords=48)))
    return [(n, r, LAYER_TOL) for n, r in cases]


def pipeline_case(rng, fx, n=3, size=16, max_coords=6):
    """Joint fine-tune loss through ``f_t``, recombination, ``f_g`` and ``f_l``."""
    model = TonemapModel(n)
    for net in model.subnets().values():
        _randomize(net, rng, std=0.15)
    x = rng.random((1, 1, size, size))
    y = rng.random((1, 1, size, size))
    w = FineTuneLossWeights()

    def f():
        out, *_ = model.forward(x, train=True)
        return composite_finetune(out, y, w, fx)[0]

    out, *_ = model.forward(x, train=True)
    _, grad, _ = composite_finetune(out, y, w, fx)
    model.zero_grad()
    model.backward(grad)
    analytic = {k: v.copy() for k, v in model.named_grads()}
    return nn.gradient_check(f, dict(model.named_params()), analytic, step=1e-6,
                             max_coords=max_coords, rng=rng)


def run_suite(seed: int = 0) -> list[CheckResult]:
    rng = np.random.default_rng(seed)
    fx = FeatureExtractor.seeded(seed)
    cases = _layer_cases(rng) + _loss_cases(rng, fx)
    cases.append(("full_pipeline", pipeline_case(rng, fx), PIPELINE_TOL))
    return [CheckResult(n, r, t) for n, r, t in cases]
