import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from wdrtone import pyramid as P

K1 = np.array([1, 4, 6, 4, 1]) / 16.0


def dense_blur(img, gain=1.0):
    """Direct 2-D 5x5 correlation with a reflect-padded border (independent of the matrix path)."""
    k2 = np.outer(K1, K1) * gain
    pad = np.pad(img, 2, mode="reflect")
    out = np.zeros_like(img, dtype=np.float64)
    h, w = img.shape
    for i in range(h):
        for j in range(w):
            out[i, j] = np.sum(pad[i:i + 5, j:j + 5] * k2)
    return out


def dense_down(img):
    return dense_blur(img)[::2, ::2]


def dense_up(img):
    z = np.zeros((2 * img.shape[0], 2 * img.shape[1]))
    z[::2, ::2] = img
    return dense_blur(z, gain=4.0)


def test_down_constant_and_shape():
    out = P.pyr_down(np.full((256, 256), 3.5))
    assert out.shape == (128, 128)
    np.testing.assert_allclose(out, 3.5, rtol=1e-14)


def test_down_impulse_matches_kernel_taps():
    img = np.zeros((8, 8))
    img[4, 4] = 1.0
    out = P.pyr_down(img)
    want = np.zeros((4, 4))
    want[1:4, 1:4] = np.outer([1, 6, 1], [1, 6, 1]) / 256.0
    np.testing.assert_allclose(out, want, atol=1e-16)
    np.testing.assert_allclose(out, dense_down(img), atol=1e-16)


def test_down_matches_dense_oracle(rng):
    img = rng.random((12, 10))
    np.testing.assert_allclose(P.pyr_down(img), dense_down(img), atol=1e-14)


def test_down_rejects_degenerate():
    with pytest.raises(ValueError):
        P.pyr_down(np.ones((1, 8)))


def test_up_constant_shape_and_oracle(rng):
    out = P.pyr_up(np.full((4, 4), 2.0), 8, 8)
    assert out.shape == (8, 8)
    np.testing.assert_allclose(out, 2.0, rtol=1e-14)
    img = rng.random((5, 6))
    np.testing.assert_allclose(P.pyr_up(img), dense_up(img), atol=1e-14)
    with pytest.raises(ValueError):
        P.pyr_up(img, 11, 10)


def test_up_down_smooth_residual_small():
    yy, xx = np.mgrid[0:64, 0:64] / 64.0
    img = np.sin(2 * np.pi * xx) * np.cos(2 * np.pi * yy)
    res = P.pyr_up(P.pyr_down(img)) - img
    dense_res = dense_up(dense_down(img)) - img
    np.testing.assert_allclose(res, dense_res, atol=1e-13)
    # interior residual of a low-frequency image is small relative to its amplitude
    assert np.abs(res[8:-8, 8:-8]).max() < 0.05


def test_up_adjoint(rng):
    a = rng.random((3, 6, 5))
    b = rng.random((3, 12, 10))
    lhs = np.sum(P.pyr_up(a) * b)
    rhs = np.sum(a * P.pyr_up_adjoint(b))
    assert lhs == pytest.approx(rhs, rel=1e-12)


def test_laplacian_constant_image():
    pyr = P.build_laplacian(np.full((32, 32), 0.7), 4)
    assert pyr.n == 4
    for band in pyr.bands[:-1]:
        np.testing.assert_allclose(band, 0, atol=1e-14)
    np.testing.assert_allclose(pyr.bands[-1], 0.7, rtol=1e-14)
    assert [b.shape for b in pyr.bands] == [(32, 32), (16, 16), (8, 8), (4, 4)]


def test_laplacian_n2_formula(rng):
    img = rng.random((4, 4))
    pyr = P.build_laplacian(img, 2)
    np.testing.assert_allclose(pyr.bands[0], img - dense_up(dense_down(img)), atol=1e-14)


def test_collapse_reconstructs_256(rng):
    img = rng.random((256, 256))
    for n in range(2, 8):
        assert np.abs(P.collapse(P.build_laplacian(img, n)) - img).max() < 1e-6


def test_collapse_linearity_cases():
    zero = P.LaplacianPyramid([np.zeros((8, 8)), np.zeros((4, 4))])
    np.testing.assert_array_equal(P.collapse(zero), 0)
    low = np.arange(16.0).reshape(4, 4)
    one = P.LaplacianPyramid([np.zeros((8, 8)), low])
    np.testing.assert_allclose(P.collapse(one), P.pyr_up(low))


def test_build_errors():
    with pytest.raises(ValueError):
        P.build_laplacian(np.ones((8, 8)), 1)
    with pytest.raises(ValueError, match="too large"):
        P.build_laplacian(np.ones((8, 8)), 4)
    with pytest.raises(ValueError, match="divisible"):
        P.build_laplacian(np.ones((10, 8)), 3)


def test_reformulate_n2_two_paths(rng):
    img = rng.random((16, 16))
    pair = P.reformulate(img, 2)
    np.testing.assert_allclose(pair.x_g, dense_down(img), atol=1e-14)
    np.testing.assert_allclose(pair.x_l, img - dense_up(dense_down(img)), atol=1e-14)


@pytest.mark.parametrize("n", [2, 3, 4, 5])
def test_reformulate_matches_collapse_without_lowest_band(rng, n):
    img = rng.random((64, 48))
    pair = P.reformulate(img, n)
    pyr = P.build_laplacian(img, n)
    np.testing.assert_allclose(pair.x_g, pyr.bands[-1], atol=1e-14)
    zeroed = P.LaplacianPyramid(pyr.bands[:-1] + [np.zeros_like(pyr.bands[-1])])
    np.testing.assert_allclose(pair.x_l, P.collapse(zeroed), atol=1e-12)


def test_reformulate_constant_and_default():
    pair = P.reformulate(np.full((64, 64), 0.25))
    assert pair.n == 6
    np.testing.assert_allclose(pair.x_l, 0, atol=1e-14)
    np.testing.assert_allclose(pair.x_g, 0.25, rtol=1e-14)
    assert pair.x_g.shape == (2, 2)


@pytest.mark.parametrize("n", range(2, 8))
def test_reconstruct_pair_exact(rng, n):
    img = rng.random((100, 130))
    pair = P.reformulate(img, n)
    m = 2 ** (n - 1)
    assert pair.x_l.shape == tuple(m * s for s in pair.x_g.shape)
    assert np.abs(P.reconstruct_pair(pair) - img).max() < 1e-6
    img32 = img.astype(np.float32)
    assert np.abs(P.reconstruct_pair(P.reformulate(img32, n)) - img32).max() < 1e-3


def test_reconstruct_pair_parts(rng):
    pair = P.reformulate(rng.random((32, 32)), 3)
    low = P.ReformulatedPair(np.zeros_like(pair.x_l), pair.x_g, 3)
    np.testing.assert_allclose(P.reconstruct_pair(low), P.pyr_up(P.pyr_up(pair.x_g)))
    high = P.ReformulatedPair(pair.x_l, np.zeros_like(pair.x_g), 3)
    np.testing.assert_array_equal(P.reconstruct_pair(high), pair.x_l)
    with pytest.raises(ValueError):
        P.reconstruct_pair(P.ReformulatedPair(pair.x_l, pair.x_g, 4))


@settings(max_examples=25, deadline=None)
@given(st.integers(2, 6), st.floats(-3, 3), st.floats(-3, 3), st.integers(0, 2**32 - 1))
def test_reformulate_linearity(n, a, b, seed):
    r = np.random.default_rng(seed)
    x, y = r.random((64, 64)), r.random((64, 64))
    pz = P.reformulate(a * x + b * y, n)
    px, py = P.reformulate(x, n), P.reformulate(y, n)
    np.testing.assert_allclose(pz.x_l, a * px.x_l + b * py.x_l, atol=1e-12)
    np.testing.assert_allclose(pz.x_g, a * px.x_g + b * py.x_g, atol=1e-12)


@given(st.integers(8, 300), st.integers(8, 300), st.integers(2, 7))
def test_shape_law(h, w, n):
    m = 2 ** (n - 1)
    img = np.zeros((h, w))
    padded, pad = P.pad_to_multiple(img, m)
    if min(padded.shape) // m < 2:
        return
    pair = P.reformulate(img, n)
    assert pair.x_g.shape == (padded.shape[0] // m, padded.shape[1] // m)


def test_pad_and_crop(rng):
    img = rng.random((100, 100))
    padded, pad = P.pad_to_multiple(img, 32)
    assert padded.shape == (128, 128)
    np.testing.assert_array_equal(P.crop_pad(padded, pad), img)
    same, pad0 = P.pad_to_multiple(rng.random((64, 32)), 32)
    assert pad0 == (0, 0) and same.shape == (64, 32)


@pytest.mark.parametrize("k,n,want", [(3, 1, 9), (3, 2, 36), (3, 6, 96 * 96), (1, 4, 64)])
def test_receptive_field(k, n, want):
    assert P.receptive_field_pixels(k, n) == want


def test_pad_min_size(rng):
    img = rng.random((5, 70))
    padded, pad = P.pad_to_multiple(img, 8, min_size=16)
    assert padded.shape == (16, 72) and pad == (11, 2)
    np.testing.assert_array_equal(P.crop_pad(padded, pad), img)
