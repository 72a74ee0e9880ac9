"""Training objectives and their gradients.

Every loss returns ``(value, grad_pred)``.  Norms are means over elements so
the fixed mixing weights behave the same at any patch size.
"""
from __future__ import annotations

from dataclasses import dataclass
from functools import lru_cache

import numpy as np

from . import nn_core as nn


@dataclass(frozen=True)
class LossWeights:
    alpha: float = 0.5  # pixel l1
    beta: float = 0.5  # feature loss
    gamma: float = 0.2  # l2 weight regularisation


@dataclass(frozen=True)
class FineTuneLossWeights:
    alpha_t: float = 0.6  # pixel l2
    beta_t: float = 0.4  # feature loss


def _check_shapes(pred, target):
    if pred.shape != target.shape:
        raise ValueError(f"shape mismatch: {pred.shape} vs {target.shape}")


def l1_loss(pred, target):
    _check_shapes(pred, target)
    d = pred - target
    return float(np.abs(d).mean()), np.sign(d) / d.size


def l2_loss(pred, target):
    _check_shapes(pred, target)
    d = pred - target
    return float((d * d).mean()), 2.0 * d / d.size


def weight_reg(weights: dict):
    """Sum of squares of the given convolution kernels; gradient ``2w`` per tensor."""
    total = sum(float(np.sum(w * w)) for w in weights.values())
    return total, {k: 2.0 * w for k, w in weights.items()}


# ---------------------------------------------------------------------------
# SSIM


@lru_cache(maxsize=None)
def _gauss_valid(n: int, window: int, sigma: float) -> np.ndarray:
    r = np.arange(window) - (window - 1) / 2
    g = np.exp(-(r ** 2) / (2 * sigma ** 2))
    g /= g.sum()
    m = np.zeros((n - window + 1, n))
    for i in range(n - window + 1):
        m[i, i:i + window] = g
    m.setflags(write=False)
    return m


def _ssim_terms(x, y, window, sigma, k1, k2, data_range):
    h, w = x.shape[-2:]
    if h < window or w < window:
        raise ValueError(f"{w}x{h} image is smaller than the {window}x{window} SSIM window")
    gh, gw = _gauss_valid(h, window, sigma), _gauss_valid(w, window, sigma)

    def filt(a):
        return gh @ a @ gw.T

    c1 = (k1 * data_range) ** 2
    c2 = (k2 * data_range) ** 2
    mx, my = filt(x), filt(y)
    sxx = filt(x * x) - mx * mx
    syy = filt(y * y) - my * my
    sxy = filt(x * y) - mx * my
    n1 = 2 * mx * my + c1
    n2 = 2 * sxy + c2
    d1 = mx * mx + my * my + c1
    d2 = sxx + syy + c2
    smap = n1 * n2 / (d1 * d2)
    return smap, (gh, gw, mx, my, n1, n2, d1, d2)


def ssim(x, y, window: int = 11, sigma: float = 1.5, k1: float = 0.01, k2: float = 0.03,
         data_range: float = 1.0) -> float:
    """Mean SSIM over all valid Gaussian windows of ``(..., H, W)`` inputs."""
    x = np.asarray(x, dtype=np.float64)
    y = np.asarray(y, dtype=np.float64)
    _check_shapes(x, y)
    if np.array_equal(x, y):
        return 1.0
    smap, _ = _ssim_terms(x, y, window, sigma, k1, k2, data_range)
    return float(smap.mean())


def dssim(x, y, window: int = 11, sigma: float = 1.5, k1: float = 0.01, k2: float = 0.03,
          data_range: float = 1.0):
    """``1 - ssim(x, y)`` and its gradient with respect to ``x``."""
    x = np.asarray(x, dtype=np.float64)
    y = np.asarray(y, dtype=np.float64)
    _check_shapes(x, y)
    smap, (gh, gw, mx, my, n1, n2, d1, d2) = _ssim_terms(x, y, window, sigma, k1, k2, data_range)
    # dL/dS for L = 1 - mean(S)
    ds = -1.0 / smap.size
    den = d1 * d2
    d_mx = ds * (2 * my * n2 / den - smap * 2 * mx / d1)
    d_sxx = ds * (-smap / d2)
    d_sxy = ds * (2 * n1 / den)
    # sxx = E[x^2] - mx^2 and sxy = E[xy] - mx my also depend on mx
    d_mx = d_mx - 2 * mx * d_sxx - my * d_sxy

    def filt_t(a):
        return gh.T @ a @ gw

    grad = filt_t(d_mx) + 2 * x * filt_t(d_sxx) + y * filt_t(d_sxy)
    return 1.0 - float(smap.mean()), grad


# ---------------------------------------------------------------------------
# feature loss


FEATURE_WIDTHS = (64, 64, 128, 128, 256)
POOL_AFTER = (1, 3)  # average-pool after the 2nd and 4th stage


class FeatureExtractor:
    """Frozen five-stage convolutional feature network.

    Luminance input is replicated to three channels.  Stage outputs are the
    post-ReLU activations.  Weights are either drawn from a seeded, He-scaled
    truncated normal or loaded from a weight container.
    """

    def __init__(self, weights: list[tuple[np.ndarray, np.ndarray]]):
        if len(weights) != 5:
            raise ValueError(f"feature extractor needs 5 stages, got {len(weights)}")
        self._weights = []
        for w, b in weights:
            w = np.array(w)
            b = np.array(b)
            w.setflags(write=False)
            b.setflags(write=False)
            self._weights.append((w, b))
        self._cast = {}

    @classmethod
    def seeded(cls, seed: int = 0, widths=FEATURE_WIDTHS, dtype=np.float64):
        rng = np.random.default_rng(seed)
        weights = []
        cin = 3
        for cout in widths:
            std = np.sqrt(2.0 / (cin * 9))
            w = nn.truncated_normal((cout, cin, 3, 3), rng, std).astype(dtype)
            weights.append((w, np.zeros(cout, dtype=dtype)))
            cin = cout
        return cls(weights)

    @classmethod
    def from_tensors(cls, tensors: dict, prefix: str = "fx."):
        try:
            return cls([(tensors[f"{prefix}conv{i}.weight"], tensors[f"{prefix}conv{i}.bias"])
                        for i in range(1, 6)])
        except KeyError as exc:
            raise ValueError(f"feature extractor weights missing tensor {exc}") from None

    def tensors(self, prefix: str = "fx.") -> dict:
        out = {}
        for i, (w, b) in enumerate(self._weights, 1):
            out[f"{prefix}conv{i}.weight"] = w
            out[f"{prefix}conv{i}.bias"] = b
        return out

    @property
    def weights(self):
        return list(self._weights)

    def _params(self, dtype):
        key = np.dtype(dtype)
        if key not in self._cast:
            self._cast[key] = [(w.astype(key), b.astype(key)) for w, b in self._weights]
        return self._cast[key]

    def forward(self, x: np.ndarray, keep_cache: bool = False):
        """Return the five stage activations for ``(N, 1, H, W)`` input."""
        if x.ndim != 4 or x.shape[1] != 1:
            raise ValueError(f"feature extractor takes (N, 1, H, W), got {x.shape}")
        params = self._params(x.dtype)
        h = np.repeat(x, 3, axis=1)
        feats = []
        cache = []
        conv = nn.conv2d_forward if keep_cache or nn.grad_enabled() else nn.conv2d_inference
        for i, (w, b) in enumerate(params):
            pre = conv(h, w, b)
            act = nn.relu_forward(pre)
            feats.append(act)
            if keep_cache:
                cache.append((h, pre))
            h = act
            if i in POOL_AFTER:
                h = nn.avgpool2_forward(h)
        return (feats, cache) if keep_cache else feats

    def backward(self, cache, grads: list) -> np.ndarray:
        """Backpropagate per-stage activation gradients (None for unused stages) to the input."""
        params = self._params(cache[0][0].dtype)
        g = None
        for i in reversed(range(5)):
            h_in, pre = cache[i]
            if i in POOL_AFTER and g is not None:
                g = nn.avgpool2_backward(pre.shape, g)
            if grads[i] is not None:
                g = grads[i] if g is None else g + grads[i]
            if g is None:
                continue
            g = nn.relu_backward(pre, g)
            g, _, _ = nn.conv2d_backward(h_in, params[i][0], g, need_params=False)
        if g is None:
            return np.zeros(cache[0][0].shape[:1] + (1,) + cache[0][0].shape[2:], dtype=cache[0][0].dtype)
        return g.sum(axis=1, keepdims=True)


def _as_nchw(a):
    a = np.asarray(a)
    if a.ndim == 2:
        return a[None, None], 2
    if a.ndim == 3:
        return a[:, None], 3
    return a, 4


def feature_loss(pred, target, fx: FeatureExtractor, stages=range(5), target_feats=None):
    """Sum over stages of the mean absolute activation difference.

    Stages that pooling has shrunk to zero size are skipped.

    Inputs are ``(H, W)``, ``(N, H, W)`` or ``(N, 1, H, W)``; the gradient has
    the shape of ``pred``.
    """
    _check_shapes(pred, target)
    p, ndim = _as_nchw(pred)
    feats, cache = fx.forward(p, keep_cache=True)
    if target_feats is None:
        target_feats = fx.forward(_as_nchw(target)[0])
    total = 0.0
    grads = [None] * 5
    for i in stages:
        d = feats[i] - target_feats[i]
        if d.size == 0:
            # pooled away on very small inputs (e.g. a 2x2 low band); nothing to compare
            continue
        total += float(np.abs(d).mean())
        grads[i] = np.sign(d) / d.size
    g = fx.backward(cache, grads)
    return total, g.reshape(np.shape(pred))


# ---------------------------------------------------------------------------
# composite objectives


def composite_global(pred, target, conv_weights: dict, w: LossWeights, fx: FeatureExtractor):
    """``alpha*l1 + beta*feat + gamma*R(theta)``.

    Returns ``(loss, grad_pred, grad_weights, parts)`` where ``grad_weights``
    holds the regulariser's gradient for each kernel in ``conv_weights``.
    """
    v1, g1 = l1_loss(pred, target)
    if w.beta:
        vf, gf = feature_loss(pred, target, fx)
    else:
        vf, gf = 0.0, 0.0
    vr, gr = weight_reg(conv_weights)
    loss = w.alpha * v1 + w.beta * vf + w.gamma * vr
    grad = w.alpha * g1 + w.beta * gf
    grad_w = {k: w.gamma * g for k, g in gr.items()}
    return loss, grad, grad_w, {"l1": v1, "feat": vf, "reg": vr}


composite_local = composite_global


def composite_finetune(pred, target, w: FineTuneLossWeights, fx: FeatureExtractor):
    """``alpha_t*l2 + beta_t*feat``; returns ``(loss, grad_pred, parts)``."""
    v2, g2 = l2_loss(pred, target)
    if w.beta_t:
        vf, gf = feature_loss(pred, target, fx)
    else:
        vf, gf = 0.0, 0.0
    return w.alpha_t * v2 + w.beta_t * vf, w.alpha_t * g2 + w.beta_t * gf, {"l2": v2, "feat": vf}
