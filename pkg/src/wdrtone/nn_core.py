"""A small NCHW layer library with hand-written backward passes.

Only what the tone-mapping networks need: stride-1 "same" convolutions with
1x1 or 3x3 kernels, batch normalisation, ReLU, 2x2 average pooling and the
two-convolution residual block.  Layers cache what their backward pass needs
during ``forward`` and accumulate parameter gradients into ``grads``.
"""
from __future__ import annotations

from contextlib import contextmanager
from contextvars import ContextVar
from dataclasses import dataclass, field

import numpy as np

BN_EPS = 1e-5
BN_MOMENTUM = 0.99

_grad_enabled: ContextVar[bool] = ContextVar("grad_enabled", default=True)


@contextmanager
def no_grad():
    """Inference mode: layers keep no backward caches and convolutions avoid im2col."""
    token = _grad_enabled.set(False)
    try:
        yield
    finally:
        _grad_enabled.reset(token)


def grad_enabled() -> bool:
    return _grad_enabled.get()


# ---------------------------------------------------------------------------
# functional kernels


def _im2col(x: np.ndarray, k: int) -> np.ndarray:
    """``(N*H*W, k*k*C)`` patch matrix, tap-major with channels innermost."""
    n, c, h, w = x.shape
    if k == 1:
        return x.transpose(0, 2, 3, 1).reshape(n * h * w, c)
    p = k // 2
    xp = np.zeros((n, h + 2 * p, w + 2 * p, c), dtype=x.dtype)
    xp[:, p:p + h, p:p + w] = x.transpose(0, 2, 3, 1)
    cols = np.empty((n, h, w, k * k, c), dtype=x.dtype)
    for dy in range(k):
        for dx in range(k):
            cols[:, :, :, dy * k + dx] = xp[:, dy:dy + h, dx:dx + w]
    return cols.reshape(n * h * w, k * k * c)


def _kernel_matrix(weight: np.ndarray) -> np.ndarray:
    # (O, C, k, k) -> (k*k*C, O), matching the _im2col column order
    o = weight.shape[0]
    return weight.transpose(2, 3, 1, 0).reshape(-1, o)


def conv2d_forward(x: np.ndarray, weight: np.ndarray, bias: np.ndarray | None = None,
                   return_cols: bool = False):
    """Stride-1 cross-correlation with zero "same" padding.

    ``x`` is ``(N, C, H, W)``, ``weight`` is ``(O, C, k, k)`` with odd ``k``.
    """
    n, c, h, w = x.shape
    o, ci, k, k2 = weight.shape
    if ci != c:
        raise ValueError(f"input has {c} channels, kernel expects {ci}")
    if k != k2 or k % 2 == 0:
        raise ValueError(f"kernel must be square with odd size, got {k}x{k2}")
    cols = _im2col(x, k)
    out = cols @ _kernel_matrix(weight)
    if bias is not None:
        out += bias
    out = np.ascontiguousarray(out.reshape(n, h, w, o).transpose(0, 3, 1, 2))
    return (out, cols) if return_cols else out


def conv2d_inference(x: np.ndarray, weight: np.ndarray, bias: np.ndarray | None = None):
    """Same result as :func:`conv2d_forward`, accumulated one kernel tap at a time.

    Peak memory is a few activation-sized buffers instead of the ``k*k``-times
    larger patch matrix, which matters for full-size images.
    """
    n, c, h, w = x.shape
    o, ci, k, k2 = weight.shape
    if ci != c:
        raise ValueError(f"input has {c} channels, kernel expects {ci}")
    if k != k2 or k % 2 == 0:
        raise ValueError(f"kernel must be square with odd size, got {k}x{k2}")
    p = k // 2
    xp = np.zeros((n, h + 2 * p, w + 2 * p, c), dtype=x.dtype)
    xp[:, p:p + h, p:p + w] = x.transpose(0, 2, 3, 1)
    out = np.zeros((n * h * w, o), dtype=np.result_type(x, weight))
    for dy in range(k):
        for dx in range(k):
            # contiguous operands keep the product on the fast BLAS path
            out += xp[:, dy:dy + h, dx:dx + w].reshape(-1, c) @ np.ascontiguousarray(weight[:, :, dy, dx].T)
    if bias is not None:
        out += bias
    return np.ascontiguousarray(out.reshape(n, h, w, o).transpose(0, 3, 1, 2))


def conv2d_backward(x: np.ndarray, weight: np.ndarray, grad_out: np.ndarray,
                    cols: np.ndarray | None = None, need_params: bool = True):
    """Return ``(grad_x, grad_weight, grad_bias)``; parameter grads are None if not needed."""
    if grad_out.shape[0] != x.shape[0] or grad_out.shape[2:] != x.shape[2:] \
            or grad_out.shape[1] != weight.shape[0]:
        raise ValueError(f"grad_out {grad_out.shape} does not match input {x.shape} / kernel {weight.shape}")
    o, c, k, _ = weight.shape
    # stride 1 same padding: the input gradient is a correlation with the flipped, transposed kernel
    flipped = weight[:, :, ::-1, ::-1].transpose(1, 0, 2, 3)
    grad_x = conv2d_forward(grad_out, flipped)
    if not need_params:
        return grad_x, None, None
    if cols is None:
        cols = _im2col(x, k)
    g = grad_out.transpose(0, 2, 3, 1).reshape(-1, o)
    grad_w = (cols.T @ g).reshape(k, k, c, o).transpose(3, 2, 0, 1)
    grad_b = grad_out.sum(axis=(0, 2, 3))
    return grad_x, np.ascontiguousarray(grad_w), grad_b


def batchnorm_forward(x, gamma, beta, running_mean, running_var, train: bool,
                      eps: float = BN_EPS, momentum: float = BN_MOMENTUM):
    """Per-channel batch normalisation.

    In training mode the running statistics are updated in place as
    ``running = momentum * running + (1 - momentum) * batch``.  Returns
    ``(out, cache)``.
    """
    shape = (1, -1, 1, 1)
    if train:
        count = x.shape[0] * x.shape[2] * x.shape[3]
        if count < 2:
            raise ValueError("batch norm in training mode needs at least two values per channel")
        mean = x.mean(axis=(0, 2, 3))
        var = x.var(axis=(0, 2, 3))
        running_mean *= momentum
        running_mean += (1 - momentum) * mean
        running_var *= momentum
        running_var += (1 - momentum) * var
    else:
        mean, var = running_mean, running_var
    inv_std = 1.0 / np.sqrt(var + eps)
    xhat = (x - mean.reshape(shape)) * inv_std.reshape(shape)
    out = xhat * gamma.reshape(shape) + beta.reshape(shape)
    return out, (xhat, inv_std, train)


def batchnorm_backward(grad_out, gamma, cache):
    """Return ``(grad_x, grad_gamma, grad_beta)``."""
    xhat, inv_std, train = cache
    shape = (1, -1, 1, 1)
    grad_gamma = (grad_out * xhat).sum(axis=(0, 2, 3))
    grad_beta = grad_out.sum(axis=(0, 2, 3))
    dxhat = grad_out * gamma.reshape(shape)
    if not train:
        return dxhat * inv_std.reshape(shape), grad_gamma, grad_beta
    m = xhat.shape[0] * xhat.shape[2] * xhat.shape[3]
    mean_d = dxhat.sum(axis=(0, 2, 3)).reshape(shape) / m
    mean_dx = (dxhat * xhat).sum(axis=(0, 2, 3)).reshape(shape) / m
    grad_x = (dxhat - mean_d - xhat * mean_dx) * inv_std.reshape(shape)
    return grad_x, grad_gamma, grad_beta


def relu_forward(x):
    return np.maximum(x, 0)


def relu_backward(x, grad_out):
    return np.where(x > 0, grad_out, 0)


def avgpool2_forward(x):
    n, c, h, w = x.shape
    x = x[:, :, :h - h % 2, :w - w % 2]
    return x.reshape(n, c, h // 2, 2, w // 2, 2).mean(axis=(3, 5))


def avgpool2_backward(x_shape, grad_out):
    g = np.repeat(np.repeat(grad_out, 2, axis=2), 2, axis=3) * 0.25
    n, c, h, w = x_shape
    if g.shape[2:] == (h, w):
        return g
    out = np.zeros(x_shape, dtype=grad_out.dtype)
    out[:, :, :g.shape[2], :g.shape[3]] = g
    return out


def truncated_normal(shape, rng, std: float = 0.1) -> np.ndarray:
    """Normal(0, std) samples, redrawing anything outside two standard deviations."""
    out = rng.normal(0.0, std, size=shape)
    bad = np.abs(out) > 2 * std
    while bad.any():
        out[bad] = rng.normal(0.0, std, size=int(bad.sum()))
        bad = np.abs(out) > 2 * std
    return out


# ---------------------------------------------------------------------------
# layer objects


class Layer:
    """Base class: ``params`` are trainable, ``buffers`` are saved but not trained."""

    def __init__(self):
        self.params: dict[str, np.ndarray] = {}
        self.grads: dict[str, np.ndarray] = {}
        self.buffers: dict[str, np.ndarray] = {}

    def zero_grad(self):
        for k, v in self.params.items():
            self.grads[k] = np.zeros_like(v)

    def named_params(self, prefix=""):
        for k, v in self.params.items():
            yield prefix + k, v

    def named_buffers(self, prefix=""):
        for k, v in self.buffers.items():
            yield prefix + k, v

    def named_grads(self, prefix=""):
        for k in self.params:
            yield prefix + k, self.grads[k]

    def children(self):
        return ()


class Conv2d(Layer):
    def __init__(self, in_ch: int, out_ch: int, k: int, dtype=np.float64):
        super().__init__()
        self.params["weight"] = np.zeros((out_ch, in_ch, k, k), dtype=dtype)
        self.params["bias"] = np.zeros(out_ch, dtype=dtype)
        self.zero_grad()
        self._cache = None

    def forward(self, x, train=False):
        if not grad_enabled():
            self._cache = None
            return conv2d_inference(x, self.params["weight"], self.params["bias"])
        out, cols = conv2d_forward(x, self.params["weight"], self.params["bias"], return_cols=True)
        self._cache = (x, cols)
        return out

    def backward(self, grad_out):
        if self._cache is None:
            raise RuntimeError("backward called without a forward pass recorded for gradients")
        x, cols = self._cache
        gx, gw, gb = conv2d_backward(x, self.params["weight"], grad_out, cols)
        self.grads["weight"] += gw
        self.grads["bias"] += gb
        return gx


class BatchNorm2d(Layer):
    def __init__(self, ch: int, eps: float = BN_EPS, momentum: float = BN_MOMENTUM, dtype=np.float64):
        super().__init__()
        self.eps = eps
        self.momentum = momentum
        self.params["gamma"] = np.ones(ch, dtype=dtype)
        self.params["beta"] = np.zeros(ch, dtype=dtype)
        self.buffers["running_mean"] = np.zeros(ch, dtype=dtype)
        self.buffers["running_var"] = np.ones(ch, dtype=dtype)
        self.zero_grad()
        self._cache = None

    def forward(self, x, train=False):
        out, cache = batchnorm_forward(
            x, self.params["gamma"], self.params["beta"],
            self.buffers["running_mean"], self.buffers["running_var"],
            train, self.eps, self.momentum)
        self._cache = cache if grad_enabled() else None
        return out

    def backward(self, grad_out):
        if self._cache is None:
            raise RuntimeError("backward called without a forward pass recorded for gradients")
        gx, gg, gb = batchnorm_backward(grad_out, self.params["gamma"], self._cache)
        self.grads["gamma"] += gg
        self.grads["beta"] += gb
        return gx


class ReLU(Layer):
    def forward(self, x, train=False):
        self._x = x if grad_enabled() else None
        return relu_forward(x)

    def backward(self, grad_out):
        return relu_backward(self._x, grad_out)


class Sequential(Layer):
    def __init__(self, layers: dict[str, Layer]):
        super().__init__()
        self.layers = layers

    def children(self):
        return self.layers.items()

    def forward(self, x, train=False):
        for layer in self.layers.values():
            x = layer.forward(x, train)
        return x

    def backward(self, grad_out):
        for layer in reversed(list(self.layers.values())):
            grad_out = layer.backward(grad_out)
        return grad_out


class ResidualBlock(Sequential):
    """``x + BN(conv(ReLU(BN(conv(x)))))`` with 3x3 convolutions of constant width."""

    def __init__(self, ch: int = 32, dtype=np.float64):
        super().__init__({
            "conv1": Conv2d(ch, ch, 3, dtype), "bn1": BatchNorm2d(ch, dtype=dtype), "relu": ReLU(),
            "conv2": Conv2d(ch, ch, 3, dtype), "bn2": BatchNorm2d(ch, dtype=dtype),
        })
        self.ch = ch

    def forward(self, x, train=False):
        if x.shape[1] != self.ch:
            raise ValueError(f"residual block expects {self.ch} channels, got {x.shape[1]}")
        return x + super().forward(x, train)

    def backward(self, grad_out):
        return grad_out + super().backward(grad_out)


def walk(layer: Layer, prefix=""):
    """Yield ``(dotted_prefix, layer)`` for a layer tree, leaves included."""
    yield prefix, layer
    for name, child in layer.children():
        yield from walk(child, f"{prefix}{name}.")


def named_params(layer: Layer, prefix=""):
    for p, l in walk(layer, prefix):
        yield from l.named_params(p)


def named_grads(layer: Layer, prefix=""):
    for p, l in walk(layer, prefix):
        yield from l.named_grads(p)


def named_buffers(layer: Layer, prefix=""):
    for p, l in walk(layer, prefix):
        yield from l.named_buffers(p)


def zero_grad(layer: Layer):
    for _, l in walk(layer):
        l.zero_grad()


# ---------------------------------------------------------------------------
# finite differences


@dataclass
class GradCheckReport:
    max_rel_error: float
    checked: int
    worst: tuple = ()
    per_tensor: dict = field(default_factory=dict)

    def passed(self, tolerance: float) -> bool:
        return self.max_rel_error < tolerance


def relative_error(analytic, numeric, floor: float = 1e-6):
    """``|a - n| / max(|a|, |n|, floor)``; below ``floor`` the comparison is absolute."""
    return abs(analytic - numeric) / max(abs(analytic), abs(numeric), floor)


def gradient_check(fn, arrays: dict, analytic: dict, step: float = 1e-5,
                   max_coords: int | None = None, rng=None, floor: float | None = None) -> GradCheckReport:
    """Compare analytic gradients with central differences of ``fn()``.

    ``fn`` takes no arguments and must read the arrays in ``arrays``, which are
    perturbed in place and restored.  With ``max_coords`` set, that many
    coordinates are sampled per tensor (all of them if the tensor is smaller).

    ``floor`` defaults to 1e-3 times the RMS of all analytic gradients, so
    coordinates whose true gradient is (near) zero, such as a bias feeding a
    batch norm, are judged against the overall gradient scale rather than
    against finite-difference round-off.
    """
    rng = rng if rng is not None else np.random.default_rng(0)
    if floor is None:
        sq = sum(float(np.sum(np.square(g, dtype=np.float64))) for g in analytic.values())
        cnt = sum(g.size for g in analytic.values())
        floor = max(1e-3 * np.sqrt(sq / max(cnt, 1)), 1e-12)
    worst = 0.0
    where = ()
    total = 0
    per_tensor = {}
    for name, arr in arrays.items():
        grad = analytic[name]
        if grad.shape != arr.shape:
            raise ValueError(f"gradient shape {grad.shape} != parameter shape {arr.shape} for {name}")
        flat = arr.reshape(-1)
        if not np.shares_memory(flat, arr):
            raise ValueError(f"{name} must be contiguous to be perturbed in place")
        idx = np.arange(flat.size)
        if max_coords is not None and flat.size > max_coords:
            idx = rng.choice(flat.size, size=max_coords, replace=False)
        tensor_worst = 0.0
        for i in idx:
            orig = flat[i]
            flat[i] = orig + step
            up = fn()
            flat[i] = orig - step
            down = fn()
            flat[i] = orig
            numeric = (up - down) / (2 * step)
            err = float(relative_error(float(grad.reshape(-1)[i]), numeric, floor))
            tensor_worst = max(tensor_worst, err)
            if err > worst:
                worst, where = err, (name, int(i), float(grad.reshape(-1)[i]), float(numeric))
        per_tensor[name] = tensor_worst
        total += len(idx)
    return GradCheckReport(worst, total, where, per_tensor)
