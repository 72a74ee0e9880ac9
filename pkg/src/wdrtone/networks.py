"""The three tone-mapping sub-networks, the full pipeline and weight storage."""
from __future__ import annotations

import json
import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import nn_core as nn
from . import pyramid

WIDTH = 32
MAGIC = b"WDRT"
FORMAT_VERSION = 1


class CompressionNet(nn.Sequential):
    """Four 3x3 conv/BN/ReLU layers, a 1x1 head, and an input skip.

    Used for both the global (low band) and local (high band) networks.
    """

    def __init__(self, dtype=np.float64):
        layers = {}
        cin = 1
        for i in range(1, 5):
            layers[f"conv{i}"] = nn.Conv2d(cin, WIDTH, 3, dtype)
            layers[f"bn{i}"] = nn.BatchNorm2d(WIDTH, dtype=dtype)
            layers[f"relu{i}"] = nn.ReLU()
            cin = WIDTH
        layers["head"] = nn.Conv2d(WIDTH, 1, 1, dtype)
        super().__init__(layers)

    def forward(self, x, train=False):
        if x.ndim != 4 or x.shape[1] != 1:
            raise ValueError(f"expected (N, 1, H, W) input, got {x.shape}")
        return x + super().forward(x, train)

    def backward(self, grad_out):
        return grad_out + super().backward(grad_out)


class FineTuneNet(nn.Sequential):
    """3x3 stem (1 -> 32), four residual blocks, 1x1 head, input skip."""

    def __init__(self, blocks: int = 4, dtype=np.float64):
        layers = {"stem": nn.Conv2d(1, WIDTH, 3, dtype)}
        for i in range(1, blocks + 1):
            layers[f"block{i}"] = nn.ResidualBlock(WIDTH, dtype)
        layers["head"] = nn.Conv2d(WIDTH, 1, 1, dtype)
        super().__init__(layers)

    def forward(self, x, train=False):
        if x.ndim != 4 or x.shape[1] != 1:
            raise ValueError(f"expected (N, 1, H, W) input, got {x.shape}")
        return x + super().forward(x, train)

    def backward(self, grad_out):
        return grad_out + super().backward(grad_out)


def forward_global(x_g, net: CompressionNet, train: bool = False):
    return net.forward(x_g, train)


def forward_local(x_l, net: CompressionNet, train: bool = False):
    return net.forward(x_l, train)


def forward_finetune(x_t, net: FineTuneNet, train: bool = False):
    return net.forward(x_t, train)


def conv_kernels(layer: nn.Layer, prefix: str = "") -> dict:
    """The convolution weight tensors of a network (what the regulariser penalises)."""
    return {name: arr for name, arr in nn.named_params(layer, prefix)
            if name.endswith(".weight")}


def param_count(layer: nn.Layer) -> int:
    return sum(a.size for _, a in nn.named_params(layer))


SUBNETS = ("f_g", "f_l", "f_t")


class TonemapModel:
    """``f_g`` on the low band, ``f_l`` on the high band, recombination, then ``f_t``."""

    def __init__(self, n: int = 6, norm_mode: str = "log", dtype=np.float64):
        if n < 2:
            raise ValueError(f"band count must be >= 2, got {n}")
        self.n = n
        self.norm_mode = norm_mode
        self.dtype = np.dtype(dtype)
        self.f_g = CompressionNet(dtype)
        self.f_l = CompressionNet(dtype)
        self.f_t = FineTuneNet(dtype=dtype)
        self._cache = None

    def subnets(self):
        return {"f_g": self.f_g, "f_l": self.f_l, "f_t": self.f_t}

    # -- parameters ---------------------------------------------------------

    def named_params(self):
        for name, net in self.subnets().items():
            yield from nn.named_params(net, name + ".")

    def named_grads(self):
        for name, net in self.subnets().items():
            yield from nn.named_grads(net, name + ".")

    def named_buffers(self):
        for name, net in self.subnets().items():
            yield from nn.named_buffers(net, name + ".")

    def zero_grad(self):
        for net in self.subnets().values():
            nn.zero_grad(net)

    def init_params(self, rng, std: float = 0.1):
        """Truncated-normal convolution kernels; biases zero, BN at identity."""
        for name, arr in self.named_params():
            if name.endswith(".weight"):
                arr[...] = nn.truncated_normal(arr.shape, rng, std)

    def to_weights(self) -> "ModelWeights":
        tensors = {k: np.array(v, dtype=np.float32) for k, v in self.named_params()}
        tensors.update({k: np.array(v, dtype=np.float32) for k, v in self.named_buffers()})
        return ModelWeights(tensors, self.n, self.norm_mode)

    @classmethod
    def from_weights(cls, weights: "ModelWeights", dtype=np.float64) -> "TonemapModel":
        model = cls(weights.n, weights.norm_mode, dtype)
        expected = dict(model.named_params())
        expected.update(model.named_buffers())
        for name, arr in expected.items():
            if name not in weights.tensors:
                raise WeightFormatError(f"weights are missing tensor {name!r}")
            src = weights.tensors[name]
            if src.shape != arr.shape:
                raise WeightFormatError(f"tensor {name!r} has shape {src.shape}, architecture needs {arr.shape}")
            arr[...] = src
        extra = sorted(set(weights.tensors) - set(expected) - {k for k in weights.tensors if k.startswith("fx.")})
        if extra:
            raise WeightFormatError(f"unexpected tensors in weight file: {extra}")
        return model

    # -- forward / backward ---------------------------------------------------

    def forward(self, x, train: bool = False):
        """Run the pipeline on ``(N, 1, H, W)`` input whose sides divide by ``2**(n-1)``.

        Returns ``(out, x_hat_g, x_hat_l, x_hat_t)``; ``out`` is unclamped.
        """
        pair = pyramid.reformulate(x, self.n)
        if pair.pad != (0, 0):
            raise ValueError(f"input {x.shape} is not divisible by 2**(n-1); pad first")
        xg_hat = self.f_g.forward(pair.x_g, train)
        xl_hat = self.f_l.forward(pair.x_l, train)
        xt_hat = xl_hat + pyramid.upsample_times(xg_hat, self.n - 1)
        out = self.f_t.forward(xt_hat, train)
        return out, xg_hat, xl_hat, xt_hat

    def backward(self, grad_out=None, grad_g=None, grad_l=None):
        """Accumulate parameter gradients.

        ``grad_out`` flows from the final output through ``f_t`` and the
        recombination into both band networks; ``grad_g``/``grad_l`` are extra
        gradients applied directly at the band-network outputs.
        """
        if grad_out is not None:
            g_t = self.f_t.backward(grad_out)
            up = pyramid.upsample_times_adjoint(g_t, self.n - 1)
            grad_g = up if grad_g is None else grad_g + up
            grad_l = g_t if grad_l is None else grad_l + g_t
        if grad_g is not None:
            self.f_g.backward(grad_g)
        if grad_l is not None:
            self.f_l.backward(grad_l)


@dataclass
class ModelWeights:
    tensors: dict
    n: int
    norm_mode: str = "log"
    version: int = FORMAT_VERSION
    extra: dict = field(default_factory=dict)

    @classmethod
    def zeros(cls, n: int = 6, norm_mode: str = "log") -> "ModelWeights":
        return TonemapModel(n, norm_mode).to_weights()


class WeightFormatError(ValueError):
    pass


def save_weights(path, weights: ModelWeights) -> None:
    """Write the ``WDRT`` container.

    Layout (little-endian): magic, u32 version, u32 metadata length, UTF-8
    JSON metadata ``{"n", "norm_mode", ...}``, u32 tensor count, then per tensor
    u32 name length, name, u32 rank, u32 dims, float32 data.
    """
    meta = dict(weights.extra)
    meta.update(n=weights.n, norm_mode=weights.norm_mode)
    meta_b = json.dumps(meta, sort_keys=True).encode()
    parts = [MAGIC, struct.pack("<II", FORMAT_VERSION, len(meta_b)), meta_b,
             struct.pack("<I", len(weights.tensors))]
    for name in sorted(weights.tensors):
        arr = np.asarray(weights.tensors[name])
        name_b = name.encode()
        parts.append(struct.pack("<I", len(name_b)) + name_b)
        parts.append(struct.pack(f"<I{arr.ndim}I", arr.ndim, *arr.shape))
        parts.append(np.ascontiguousarray(arr, dtype="<f4").tobytes())
    Path(path).write_bytes(b"".join(parts))


class _Reader:
    def __init__(self, buf: bytes):
        self.buf = buf
        self.pos = 0

    def take(self, n: int, what: str) -> bytes:
        if self.pos + n > len(self.buf):
            raise WeightFormatError(f"file truncated while reading {what}")
        out = self.buf[self.pos:self.pos + n]
        self.pos += n
        return out

    def u32(self, what: str) -> int:
        return struct.unpack("<I", self.take(4, what))[0]


def load_weights(path) -> ModelWeights:
    r = _Reader(Path(path).read_bytes())
    if r.take(4, "magic") != MAGIC:
        raise WeightFormatError("not a WDRT weight file (bad magic)")
    version = r.u32("version")
    if version != FORMAT_VERSION:
        raise WeightFormatError(f"unsupported format version {version}")
    meta = json.loads(r.take(r.u32("metadata length"), "metadata").decode())
    count = r.u32("tensor count")
    tensors = {}
    for i in range(count):
        name = r.take(r.u32(f"name of tensor #{i}"), f"name of tensor #{i}").decode()
        rank = r.u32(f"rank of tensor {name!r}")
        dims = struct.unpack(f"<{rank}I", r.take(4 * rank, f"dims of tensor {name!r}"))
        size = int(np.prod(dims, dtype=np.int64))
        data = np.frombuffer(r.take(4 * size, f"data of tensor {name!r}"), dtype="<f4")
        tensors[name] = data.reshape(dims).astype(np.float32)
    if r.pos != len(r.buf):
        raise WeightFormatError(f"{len(r.buf) - r.pos} trailing bytes after {count} tensors")
    n = meta.pop("n")
    norm_mode = meta.pop("norm_mode")
    return ModelWeights(tensors, n, norm_mode, version, meta)


def tonemap(x: np.ndarray, weights, n: int | None = None) -> np.ndarray:
    """Tone-map a normalised ``(H, W)`` luminance image to ``[0, 1]``.

    ``weights`` is a :class:`ModelWeights` or a :class:`TonemapModel`.  The
    network runs in float64 with eval-mode batch norm; the result has the dtype
    of ``x``.  Any image size is accepted: the input is reflect-padded to a
    multiple of ``2**(n-1)`` (and to at least twice that) and cropped back.
    """
    model = weights if isinstance(weights, TonemapModel) else None
    if model is None:
        if weights is None:
            raise ValueError("tonemap needs weights")
        if n is not None and n != weights.n:
            raise WeightFormatError(f"weights were trained with n={weights.n}, pipeline asked for n={n}")
        model = TonemapModel.from_weights(weights)
    elif n is not None and n != model.n:
        raise WeightFormatError(f"model has n={model.n}, pipeline asked for n={n}")
    x = np.asarray(x)
    if x.ndim != 2:
        raise ValueError(f"tonemap takes a 2-D luminance image, got shape {x.shape}")
    # the low band must be at least 2x2
    m = 2 ** (model.n - 1)
    padded, pad = pyramid.pad_to_multiple(x.astype(model.dtype), m, min_size=2 * m)
    with nn.no_grad():
        out, *_ = model.forward(padded[None, None], train=False)
    out = np.clip(out[0, 0], 0.0, 1.0)
    out = pyramid.crop_pad(out, pad)
    return out.astype(x.dtype if x.dtype.kind == "f" else np.float64)
