from fractions import Fraction

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from nrk import checkpoint
from nrk.optim import Adam
from nrk.resample import bicubic_resize, bilinear_resize
from nrk.resizer import (
    ConfigError,
    ResizerConfig,
    SrStandin,
    check_params,
    difference_map,
    init_resizer,
    init_sr_weights,
    neural_resize,
    sr_forward,
    stn_align,
    stn_theta,
)
from nrk.tensor import ContractError, Tensor, backward, mean, no_grad, precision, sum

from oracles import bicubic_loop, numeric_grad


def _rng(seed=0):
    return np.random.default_rng(seed)


def _frozen(zero_last=False, seed=0):
    w = init_sr_weights(_rng(seed))
    if zero_last:
        w["conv3.weight"][:] = 0
    return SrStandin("frozen_cnn", Fraction(2), w)


def test_config_rejects_fractional_sides():
    cfg = ResizerConfig(h=Fraction(2), t=Fraction(2, 3))
    assert cfg.hr_side(48) == 96 and cfg.target_side(48) == 32
    with pytest.raises(ConfigError):
        cfg.target_side(47)


@pytest.mark.parametrize("sr", [SrStandin(), _frozen(zero_last=True)], ids=["bicubic", "frozen_cnn"])
def test_sr_constant_preserved(sr):
    out = sr_forward(Tensor(np.full((1, 1, 6, 6), 0.4)), sr).data
    assert out.shape == (1, 1, 12, 12)
    np.testing.assert_allclose(out, 0.4, rtol=1e-6)


def test_sr_48_to_384():
    out = sr_forward(Tensor(np.zeros((1, 1, 48, 48))), SrStandin(h=Fraction(8)))
    assert out.shape == (1, 1, 384, 384)


def test_sr_bicubic_checkerboard_oracle():
    board = (np.indices((4, 4)).sum(axis=0) % 2).astype(np.float64)
    got = sr_forward(Tensor(board[None, None]), SrStandin()).data[0, 0]
    np.testing.assert_allclose(got, np.clip(bicubic_loop(board, 8, 8), 0, 1), atol=1e-5)


def test_frozen_cnn_needs_weights(tmp_path):
    with pytest.raises(ConfigError):
        SrStandin("frozen_cnn")
    with pytest.raises(ConfigError):
        SrStandin.from_checkpoint(None)
    sr = _frozen()
    checkpoint.save(tmp_path / "sr.nrkp", sr.state())
    assert SrStandin.from_checkpoint(tmp_path / "sr.nrkp").digest() == sr.digest()


def test_zero_residual_identity():
    cfg = ResizerConfig()
    params = init_resizer(cfg, _rng())
    img = Tensor(_rng(1).random((4, 1, 48, 48)))
    for sr in (SrStandin(), _frozen()):
        out = neural_resize(img, params, cfg, sr).data
        assert np.array_equal(out, bilinear_resize(sr_forward(img, sr), 32, 32).data)


def test_hand_micro_network():
    # 1 channel, 1x1 kernels, no residual blocks, h=1, t=1/2 on a 2x2 image
    cfg = ResizerConfig(h=Fraction(1), t=Fraction(1, 2), base_channels=1, num_residual_blocks=0, kernel_size=1)
    p = init_resizer(cfg, _rng())
    vals = {
        "g_phi.conv1.weight": 2.0, "g_phi.conv1.bias": -1.0,
        "g_phi.conv2.weight": -1.5, "g_phi.conv2.bias": 0.1,
        "g_theta.out.weight": 3.0, "g_theta.out.bias": 0.05,
    }
    for k, v in vals.items():
        p[k].data[...] = v
    img = np.array([[[[0.2, 0.4], [0.6, 0.8]]]])
    # conv1 -> [-0.6, -0.2, 0.2, 0.6], leaky -> [-0.12, -0.04, 0.2, 0.6]
    # conv2 -> [0.28, 0.16, -0.2, -0.8], leaky -> [0.28, 0.16, -0.04, -0.16], mean 0.06
    # out = 3 * 0.06 + 0.05 + mean(img) = 0.23 + 0.5
    out = neural_resize(Tensor(img), p, cfg, SrStandin(h=Fraction(1))).data
    np.testing.assert_allclose(out, [[[[0.73]]]], atol=1e-5)


def test_channel_contract_checked_at_construction():
    cfg = ResizerConfig(channels=1)
    p = init_resizer(ResizerConfig(channels=3), _rng())
    with pytest.raises(ContractError):
        check_params(p, cfg)


@settings(max_examples=15, deadline=None)
@given(st.sampled_from([(12, Fraction(2), Fraction(2, 3)), (8, Fraction(3, 2), Fraction(1, 2)),
                        (6, Fraction(1), Fraction(2)), (10, Fraction(3), Fraction(3, 5))]),
       st.integers(1, 2), st.integers(1, 3))
def test_output_shape(case, B, C):
    side, h, t = case
    cfg = ResizerConfig(h=h, t=t, base_channels=2, num_residual_blocks=1, channels=C)
    out = neural_resize(Tensor(np.zeros((B, C, side, side))), init_resizer(cfg, _rng()), cfg, SrStandin(h=h))
    assert out.shape == (B, C, int(t * side), int(t * side))


def test_gradients_reach_heads_not_sr():
    rng = _rng(2)
    cfg = ResizerConfig(base_channels=3, num_residual_blocks=1)
    with precision(np.float64):
        params = init_resizer(cfg, rng)
        for v in params.values():
            v.data += rng.normal(0, 0.1, v.shape)
        sr = SrStandin("frozen_cnn", Fraction(2), {k: v.astype(np.float64) for k, v in init_sr_weights(rng).items()})
        coarse = rng.random((1, 1, 3, 3))
        img = Tensor(0.2 + 0.6 * bicubic_resize(Tensor(coarse), 6, 6).data)
        backward(sum(neural_resize(img, params, cfg, sr)))

        def f():
            with no_grad():
                return float(neural_resize(img, params, cfg, sr).data.sum())

        for name, p in params.items():
            num = numeric_grad(f, p.data, 1e-6)
            mask = np.maximum(np.abs(num), np.abs(p.grad)) > 1e-6
            rel = np.abs(num - p.grad)[mask] / np.maximum(np.abs(num), np.abs(p.grad))[mask]
            assert (rel < 1e-2).all(), name
    assert all(not w.requires_grad and w.grad is None for w in sr.weights.values())


def test_sr_weights_unchanged_by_optimizer_steps():
    cfg = ResizerConfig(base_channels=4, num_residual_blocks=1)
    params = init_resizer(cfg, _rng())
    sr = _frozen()
    before = sr.digest()
    opt = Adam(params, lr=1e-2)
    img = Tensor(_rng(3).random((2, 1, 12, 12)))
    for _ in range(3):
        out = neural_resize(img, params, cfg, sr)
        backward(mean(out * out))
        opt.step()
        opt.zero_grad()
    assert sr.digest() == before


def test_stn_identity_init():
    p = init_resizer(ResizerConfig(), _rng(), stn=True)
    img = _rng(4).random((3, 1, 20, 20))
    np.testing.assert_allclose(stn_align(Tensor(img), p).data, img, atol=1e-5)
    np.testing.assert_allclose(stn_theta(Tensor(img), p).data, np.tile([[1, 0, 0], [0, 1, 0]], (3, 1, 1)))


def test_stn_gradients_reach_localizer():
    rng = _rng(5)
    with precision(np.float64):
        p = init_resizer(ResizerConfig(), rng, stn=True)
        stn = {k: v for k, v in p.items() if k.startswith("stn.")}
        for v in stn.values():
            v.data += rng.normal(0, 0.05, v.shape)
        img = Tensor(0.2 + 0.6 * bicubic_resize(Tensor(rng.random((1, 1, 3, 3))), 8, 8).data)
        r = rng.normal(size=(1, 1, 8, 8))
        backward(sum(stn_align(img, stn) * Tensor(r)))

        def f():
            return float((stn_align(img, stn).data * r).sum())

        for name in ("stn.fc.weight", "stn.conv1.weight"):
            num = numeric_grad(f, stn[name].data, 1e-7)
            assert np.abs(stn[name].grad).max() > 0
            np.testing.assert_allclose(stn[name].grad, num, rtol=1e-2, atol=1e-5)


def test_difference_map_degenerate_is_near_zero():
    cfg = ResizerConfig(h=Fraction(1), t=Fraction(1, 2))
    img = _rng(6).random((1, 16, 16))
    p = init_resizer(cfg, _rng())
    with no_grad():
        diff = np.abs(neural_resize(Tensor(img[None]), p, cfg, SrStandin(h=Fraction(1))).data
                      - bilinear_resize(Tensor(img[None]), 8, 8).data)
    assert diff.max() < 1e-6
    m = difference_map(img, p, cfg, SrStandin(h=Fraction(1)))
    assert m.shape == (1, 8, 8)
    assert m.min() >= 0 and m.max() <= 1


def test_difference_map_normalized():
    cfg = ResizerConfig()
    p = init_resizer(cfg, _rng())
    p["g_theta.out.weight"].data[...] = _rng(7).normal(0, 0.1, p["g_theta.out.weight"].shape)
    maps = difference_map(_rng(8).random((3, 1, 24, 24)), p, cfg, SrStandin())
    assert maps.shape == (3, 1, 16, 16)
    assert maps.min() >= 0
    np.testing.assert_allclose(maps.reshape(3, -1).max(axis=1), 1.0)


def _edge_images(n, rng, side=24, out=16):
    """Step edges along a random row or column, with an edge mask at the resized resolution."""
    imgs, masks = [], []
    centres = (np.arange(out) + 0.5) * side / out
    for _ in range(n):
        a = int(rng.integers(6, side - 6))
        lo, hi = rng.uniform(0.1, 0.3), rng.uniform(0.7, 0.9)
        img = np.where(np.arange(side)[:, None] < a, hi, lo) * np.ones((1, side))
        near = np.abs(centres - a) < 2.0
        m = np.repeat(near[:, None], out, axis=1)
        if rng.random() < 0.5:
            img, m = img.T, m.T
        imgs.append(img)
        masks.append(m)
    return np.stack(imgs)[:, None], np.stack(masks)


def test_trained_resizer_concentrates_on_edges():
    rng = _rng(9)
    cfg = ResizerConfig(base_channels=8, num_residual_blocks=1)
    p = init_resizer(cfg, rng)
    sr = SrStandin()
    opt = Adam(p, lr=3e-3)
    x = Tensor(_edge_images(16, rng)[0])
    with no_grad():
        hr = sr_forward(x, sr)
        sharp = bilinear_resize(hr, 16, 16).data
        blur = bilinear_resize(bilinear_resize(hr, 8, 8), 16, 16).data
    # unsharp-masked target differs from plain bilinear only around edges
    target = Tensor(sharp + 1.5 * (sharp - blur))
    for _ in range(150):
        d = neural_resize(x, p, cfg, sr) - target
        backward(mean(d * d))
        opt.step()
        opt.zero_grad()
    test_imgs, masks = _edge_images(8, _rng(10))
    maps = difference_map(test_imgs, p, cfg, sr)[:, 0]
    assert maps[masks].mean() > maps[~masks].mean()
