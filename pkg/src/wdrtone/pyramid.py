"""Laplacian pyramid and its two-band (high/low frequency) reformulation.

Blur and resampling are expressed as small dense per-axis operators so that an
image ``X`` (or a stack ``(..., H, W)``) is filtered as ``A @ X @ B.T``.  This
makes every step linear with an explicit adjoint, which the training code
needs to backpropagate through the upsampling of the low band.
"""
from __future__ import annotations

from dataclasses import dataclass
from functools import lru_cache

import numpy as np

KERNEL = np.array([1.0, 4.0, 6.0, 4.0, 1.0]) / 16.0


def _reflect(i: int, n: int) -> int:
    # mirror without repeating the edge sample, iterated for short axes
    if n == 1:
        return 0
    period = 2 * (n - 1)
    i %= period
    return i if i < n else period - i


@lru_cache(maxsize=None)
def blur_matrix(n: int) -> np.ndarray:
    """``(n, n)`` operator for the 5-tap blur with reflect boundary."""
    m = np.zeros((n, n))
    for i in range(n):
        for t, w in enumerate(KERNEL):
            m[i, _reflect(i + t - 2, n)] += w
    m.setflags(write=False)
    return m


@lru_cache(maxsize=None)
def down_matrix(n: int) -> np.ndarray:
    m = np.ascontiguousarray(blur_matrix(n)[::2])
    m.setflags(write=False)
    return m


@lru_cache(maxsize=None)
def up_matrix(n: int) -> np.ndarray:
    """``(2n, n)`` operator: zero insertion at even indices, then blur with gain 2."""
    m = np.ascontiguousarray(2.0 * blur_matrix(2 * n)[:, ::2])
    m.setflags(write=False)
    return m


def _apply(a: np.ndarray, x: np.ndarray, b: np.ndarray) -> np.ndarray:
    dt = x.dtype if x.dtype.kind == "f" else np.float64
    return a.astype(dt, copy=False) @ x @ b.T.astype(dt, copy=False)


def pyr_down(img: np.ndarray) -> np.ndarray:
    img = np.asarray(img)
    h, w = img.shape[-2:]
    if h < 2 or w < 2:
        raise ValueError(f"cannot downsample a {h}x{w} image")
    if h % 2 or w % 2:
        # odd sizes keep ceil(n/2) samples
        return _apply(blur_matrix(h)[::2], img, blur_matrix(w)[::2])
    return _apply(down_matrix(h), img, down_matrix(w))


def pyr_up(img: np.ndarray, target_w: int | None = None, target_h: int | None = None) -> np.ndarray:
    img = np.asarray(img)
    h, w = img.shape[-2:]
    if target_w is None:
        target_w, target_h = 2 * w, 2 * h
    if (target_h, target_w) != (2 * h, 2 * w):
        raise ValueError(f"target {target_w}x{target_h} is not twice {w}x{h}")
    return _apply(up_matrix(h), img, up_matrix(w))


def pyr_up_adjoint(grad: np.ndarray) -> np.ndarray:
    """Transpose of :func:`pyr_up`, mapping ``(..., 2H, 2W)`` to ``(..., H, W)``."""
    h, w = grad.shape[-2:]
    return _apply(up_matrix(h // 2).T, grad, up_matrix(w // 2).T)


def upsample_times(img: np.ndarray, times: int) -> np.ndarray:
    for _ in range(times):
        img = pyr_up(img)
    return img


def upsample_times_adjoint(grad: np.ndarray, times: int) -> np.ndarray:
    for _ in range(times):
        grad = pyr_up_adjoint(grad)
    return grad


def receptive_field_pixels(k: int, n: int) -> int:
    """Input pixels covered by a ``k x k`` kernel applied to the low band of an ``n``-band pyramid."""
    return (2 ** (n - 1) * k) ** 2


@dataclass
class LaplacianPyramid:
    bands: list  # index 0 is the finest band, the last is the Gaussian residual

    @property
    def n(self) -> int:
        return len(self.bands)


def _check_levels(shape, n: int) -> None:
    if n < 2:
        raise ValueError(f"band count must be >= 2, got {n}")
    h, w = shape[-2:]
    m = 2 ** (n - 1)
    if h % m or w % m:
        raise ValueError(f"{w}x{h} image is not divisible by 2**(n-1) = {m}; pad it first")
    if h // m < 2 or w // m < 2:
        raise ValueError(f"n={n} is too large for a {w}x{h} image")


def build_laplacian(img: np.ndarray, n: int) -> LaplacianPyramid:
    img = np.asarray(img)
    _check_levels(img.shape, n)
    g = img
    bands = []
    for _ in range(n - 1):
        nxt = pyr_down(g)
        bands.append(g - pyr_up(nxt))
        g = nxt
    bands.append(g)
    return LaplacianPyramid(bands)


def collapse(pyr: LaplacianPyramid) -> np.ndarray:
    g = pyr.bands[-1]
    for band in reversed(pyr.bands[:-1]):
        g = band + pyr_up(g)
    return g


def pad_to_multiple(img: np.ndarray, m: int, min_size: int = 0) -> tuple[np.ndarray, tuple[int, int]]:
    """Reflect-pad the bottom and right edges up to the next multiple of ``m``.

    With ``min_size`` each side is also grown to at least that many pixels
    (still a multiple of ``m``).
    """
    img = np.asarray(img)
    h, w = img.shape[-2:]
    ph, pw = -h % m, -w % m
    floor = -(-min_size // m) * m
    ph, pw = max(ph, floor - h), max(pw, floor - w)
    if ph == 0 and pw == 0:
        return img, (0, 0)
    widths = [(0, 0)] * (img.ndim - 2) + [(0, ph), (0, pw)]
    return np.pad(img, widths, mode="reflect"), (ph, pw)


def crop_pad(img: np.ndarray, pad: tuple[int, int]) -> np.ndarray:
    ph, pw = pad
    h, w = img.shape[-2:]
    return img[..., :h - ph, :w - pw]


@dataclass
class ReformulatedPair:
    x_l: np.ndarray  # full (padded) resolution, all high-frequency bands
    x_g: np.ndarray  # lowest band, 2**(n-1) times smaller per axis
    n: int
    pad: tuple[int, int] = (0, 0)


def reformulate(img: np.ndarray, n: int = 6) -> ReformulatedPair:
    img = np.asarray(img)
    if n < 2:
        raise ValueError(f"band count must be >= 2, got {n}")
    padded, pad = pad_to_multiple(img, 2 ** (n - 1))
    _check_levels(padded.shape, n)
    x_g = padded
    for _ in range(n - 1):
        x_g = pyr_down(x_g)
    x_l = padded - upsample_times(x_g, n - 1)
    return ReformulatedPair(x_l, x_g, n, pad)


def reconstruct_pair(pair: ReformulatedPair, crop: bool = True) -> np.ndarray:
    m = 2 ** (pair.n - 1)
    if pair.x_l.shape[-2:] != tuple(m * s for s in pair.x_g.shape[-2:]):
        raise ValueError(f"x_l {pair.x_l.shape} and x_g {pair.x_g.shape} are inconsistent for n={pair.n}")
    out = pair.x_l + upsample_times(pair.x_g, pair.n - 1)
    return crop_pad(out, pair.pad) if crop else out
