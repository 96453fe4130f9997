import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from nrk.resample import affine_grid, bicubic_resize, bilinear_resize, grid_sample, resize_array
from nrk.tensor import DimensionError, Tensor, backward, parameter, precision, sum

from oracles import affine_sample_loop, bicubic_loop, bilinear_loop, numeric_grad

sides = st.integers(1, 16)


def test_bilinear_identity_and_constant():
    x = np.random.default_rng(0).random((2, 3, 7, 5)).astype(np.float32)
    assert np.array_equal(bilinear_resize(Tensor(x), 7, 5).data, x)
    c = np.full((1, 1, 6, 6), 0.37, np.float32)
    np.testing.assert_allclose(bilinear_resize(Tensor(c), 11, 3).data, 0.37, rtol=1e-6)


def test_bilinear_ramp_4_to_2():
    ramp = np.arange(16, dtype=np.float64).reshape(4, 4)
    got = bilinear_resize(Tensor(ramp[None, None]), 2, 2).data[0, 0]
    np.testing.assert_allclose(got, bilinear_loop(ramp, 2, 2), atol=1e-6)
    # half-pixel centres fall midway between source pixels 0/1 and 2/3
    np.testing.assert_allclose(got, [[2.5, 4.5], [10.5, 12.5]], atol=1e-6)


@settings(max_examples=60, deadline=None)
@given(sides, sides, sides, sides, st.integers(0, 2**31 - 1))
def test_bilinear_matches_oracle(h, w, oh, ow, seed):
    img = np.random.default_rng(seed).random((h, w))
    got = bilinear_resize(Tensor(img[None, None]), oh, ow).data[0, 0]
    np.testing.assert_allclose(got, bilinear_loop(img, oh, ow), atol=1e-6)


@settings(max_examples=60, deadline=None)
@given(sides, sides, sides, sides, st.integers(0, 2**31 - 1))
def test_bicubic_matches_oracle(h, w, oh, ow, seed):
    img = np.random.default_rng(seed).random((h, w))
    got = bicubic_resize(Tensor(img[None, None]), oh, ow).data[0, 0]
    np.testing.assert_allclose(got, bicubic_loop(img, oh, ow), atol=1e-5)


def test_bicubic_checkerboard_x2():
    board = (np.indices((4, 4)).sum(axis=0) % 2).astype(np.float64)
    got = bicubic_resize(Tensor(board[None, None]), 8, 8).data[0, 0]
    np.testing.assert_allclose(got, bicubic_loop(board, 8, 8), atol=1e-5)


def test_bicubic_constant():
    c = np.full((1, 1, 5, 5), 0.6, np.float32)
    np.testing.assert_allclose(bicubic_resize(Tensor(c), 13, 9).data, 0.6, rtol=1e-6)


def test_resize_rejects_empty_target():
    with pytest.raises(DimensionError):
        bilinear_resize(Tensor(np.ones((1, 1, 4, 4))), 0, 3)


def test_resize_array_matches_tensor_path():
    x = np.random.default_rng(1).random((2, 1, 9, 9)).astype(np.float32)
    np.testing.assert_allclose(resize_array(x, 4, 4, "bilinear"), bilinear_resize(Tensor(x), 4, 4).data, atol=1e-6)


@pytest.mark.parametrize("resize", [bilinear_resize, bicubic_resize])
def test_resize_backward_is_transpose(resize):
    rng = np.random.default_rng(2)
    with precision(np.float64):
        x = parameter(rng.random((1, 2, 5, 6)))
        r = rng.normal(size=(1, 2, 8, 3))
        backward(sum(resize(x, 8, 3) * Tensor(r)))
        num = numeric_grad(lambda: float((resize(Tensor(x.data), 8, 3).data * r).sum()), x.data)
    np.testing.assert_allclose(x.grad, num, atol=1e-7)


def _sample(img, theta, oh=None, ow=None):
    H, W = img.shape
    th = Tensor(np.asarray(theta, np.float64).reshape(1, 2, 3))
    grid = affine_grid(th, oh or H, ow or W)
    return grid_sample(Tensor(img[None, None]), grid).data[0, 0]


def test_grid_sample_identity():
    img = np.random.default_rng(3).random((6, 9))
    np.testing.assert_allclose(_sample(img, [1, 0, 0, 0, 1, 0]), img, atol=1e-6)


def test_grid_sample_translation_on_ramp():
    ramp = np.tile(np.linspace(0, 1, 8), (8, 1))
    theta = [[1, 0, 0.5], [0, 1, 0]]
    got = _sample(ramp, theta)
    np.testing.assert_allclose(got, affine_sample_loop(ramp, theta, 8, 8), atol=1e-5)
    # a 0.5 shift in normalized units is two pixels on an 8-wide image; the right edge reads zeros
    np.testing.assert_allclose(got[:, :6], ramp[:, 2:], atol=1e-6)
    assert np.all(got[:, 6:] == 0)


@settings(max_examples=50, deadline=None)
@given(st.integers(2, 9), st.integers(2, 9), st.integers(1, 9), st.integers(1, 9), st.integers(0, 2**31 - 1))
def test_grid_sample_matches_oracle(h, w, oh, ow, seed):
    rng = np.random.default_rng(seed)
    img = rng.random((h, w))
    theta = np.array([[1, 0, 0], [0, 1, 0]]) + rng.normal(0, 0.4, (2, 3))
    np.testing.assert_allclose(_sample(img, theta, oh, ow), affine_sample_loop(img, theta, oh, ow), atol=1e-5)


def test_grid_sample_gradients():
    rng = np.random.default_rng(4)
    with precision(np.float64):
        x = parameter(rng.random((2, 2, 5, 5)))
        theta = parameter(np.array([[[0.9, 0.1, 0.13], [-0.05, 1.1, -0.07]]] * 2) + rng.normal(0, 0.02, (2, 2, 3)))
        r = rng.normal(size=(2, 2, 4, 4))

        def f():
            return float((grid_sample(Tensor(x.data), affine_grid(Tensor(theta.data), 4, 4)).data * r).sum())

        backward(sum(grid_sample(x, affine_grid(theta, 4, 4)) * Tensor(r)))
        np.testing.assert_allclose(x.grad, numeric_grad(f, x.data), atol=1e-6)
        np.testing.assert_allclose(theta.grad, numeric_grad(f, theta.data, 1e-7), rtol=1e-3, atol=1e-5)
