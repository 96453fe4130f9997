import warnings

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from nrk.loss import (
    LossConfig,
    LossConfigError,
    PriorMatrix,
    build_prior_matrix,
    cross_entropy,
    fpdls,
    majority_label,
    normalize_votes,
    pdls_per_class,
)
from nrk.tensor import Tensor, backward, parameter, precision

from oracles import numeric_grad, pdls_ref

# log-probabilities by hand: ln 0.665241 = -0.407606, ln 0.244728 = -1.407606, ln 0.090031 = -2.407606
Z3 = np.array([[1.0, 0.0, -1.0]])
D3 = PriorMatrix([[0.6, 0.3, 0.1], [0.2, 0.6, 0.2], [0.1, 0.3, 0.6]])
HAND_L = [0.8 * -0.407606, 0.15 * -1.407606, 0.05 * -2.407606]
HAND_FPDLS = (0.334759 ** 2 * 0.326085) + (0.755272 ** 2 * 0.211141) + (0.909969 ** 2 * 0.120380)


def _rand_prior(rng, n):
    d = rng.random((n, n)) + np.eye(n) * rng.random() * 3
    return PriorMatrix(d / d.sum(axis=1, keepdims=True))


@st.composite
def instances(draw):
    n = draw(st.sampled_from([2, 3, 8]))
    seed = draw(st.integers(0, 2**31 - 1))
    rng = np.random.default_rng(seed)
    B = draw(st.integers(1, 6))
    z = rng.normal(0, draw(st.sampled_from([0.5, 3.0, 10.0])), (B, n))
    return z, rng.integers(0, n, B), _rand_prior(rng, n), draw(st.floats(0, 1)), draw(st.floats(0, 5))


def _val(kind, z, k, prior, alpha=0.5, gamma=2.0):
    with precision(np.float64):
        return fpdls(Tensor(z), k, prior, LossConfig(kind, alpha, gamma)).item()


def test_prior_two_sample_example():
    d = build_prior_matrix([[8, 2, 0, 0], [6, 4, 0, 0], [0, 10, 0, 0], [0, 0, 10, 0], [0, 0, 0, 10]])
    np.testing.assert_allclose(d.d[0], [0.7, 0.3, 0, 0])


def test_unanimous_votes_give_identity():
    votes = [np.eye(5, dtype=int)[i % 5] * 10 for i in range(20)]
    np.testing.assert_array_equal(build_prior_matrix(votes).d, np.eye(5))


def test_missing_class_falls_back_to_one_hot():
    with pytest.warns(UserWarning, match="2"):
        d = build_prior_matrix([[7, 3, 0], [2, 8, 0]], 3)
    np.testing.assert_array_equal(d.d[2], [0, 0, 1])


@given(st.lists(st.lists(st.integers(0, 10), min_size=4, max_size=4).filter(lambda v: sum(v) > 0), min_size=1,
                max_size=30))
def test_prior_rows_stochastic(votes):
    with warnings.catch_warnings():
        warnings.simplefilter("ignore")
        d = build_prior_matrix(votes, 4).d
    assert (d >= 0).all()
    np.testing.assert_allclose(d.sum(axis=1), 1.0, atol=1e-6)
    assert not d.flags.writeable


def test_majority_tie_breaks_low():
    assert majority_label([3, 5, 5, 1]) == 1
    assert majority_label([0, 0, 0, 2]) == 3
    with pytest.raises(ValueError):
        majority_label([0, 0])
    np.testing.assert_allclose(normalize_votes([2, 3, 5]).sum(), 1.0)


def test_prior_text_round_trip(tmp_path):
    D3.save(tmp_path / "prior.txt")
    lines = (tmp_path / "prior.txt").read_text().splitlines()
    assert len(lines) == 3 and len(lines[0].split()) == 3
    assert np.array_equal(PriorMatrix.load(tmp_path / "prior.txt").d, D3.d)


def test_prior_validation():
    with pytest.raises(ValueError):
        PriorMatrix([[0.5, 0.6], [0.5, 0.5]])
    with pytest.raises(ValueError):
        PriorMatrix([[1.0, 0.0]])


def test_pdls_hand_values():
    with precision(np.float64):
        got = pdls_per_class(Tensor(Z3), [0], D3, 0.5).data[0]
    np.testing.assert_allclose(got, HAND_L, atol=1e-4)
    assert (got <= 0).all()
    np.testing.assert_allclose(_val("pdls", Z3, [0], D3), -np.sum(HAND_L), atol=1e-4)


def test_fpdls_hand_value():
    np.testing.assert_allclose(_val("fpdls", Z3, [0], D3, 0.5, 2.0), HAND_FPDLS, atol=1e-4)
    np.testing.assert_allclose(_val("fpdls", Z3, [0], D3, 0.5, 2.0), pdls_ref(Z3[0], 0, D3.d, 0.5, 2.0), atol=1e-9)


def test_config_validation():
    for bad in (dict(kind="mse"), dict(alpha=1.5), dict(alpha=-0.1), dict(gamma=-1.0)):
        with pytest.raises(LossConfigError):
            LossConfig(**bad)
    with pytest.raises(LossConfigError):
        pdls_per_class(Tensor(Z3), [0], D3, 2.0)
    assert LossConfig(gamma=0.0).gamma == 0.0


@settings(max_examples=200, deadline=None)
@given(instances())
def test_reduction_chain(inst):
    z, k, prior, alpha, gamma = inst
    n = z.shape[1]
    pd = _val("pdls", z, k, prior, alpha)
    assert abs(_val("fpdls", z, k, prior, alpha, 0.0) - pd) <= 1e-6
    ce = _val("ce", z, k, prior)
    assert abs(_val("pdls", z, k, prior, 1.0) - ce) <= 1e-6
    assert abs(_val("pdls", z, k, PriorMatrix.identity(n), alpha) - ce) <= 1e-6


@settings(max_examples=100, deadline=None)
@given(instances())
def test_matches_class_loop_oracle(inst):
    z, k, prior, alpha, gamma = inst
    for kind, g in (("pdls", None), ("fpdls", gamma)):
        ref = np.mean([pdls_ref(z[i], k[i], prior.d, alpha, g) for i in range(len(k))])
        np.testing.assert_allclose(_val(kind, z, k, prior, alpha, gamma), ref, rtol=1e-9, atol=1e-9)


@settings(max_examples=100, deadline=None)
@given(instances())
def test_non_negative(inst):
    z, k, prior, alpha, gamma = inst
    for kind in ("ce", "pdls", "fpdls"):
        assert _val(kind, z, k, prior, alpha, gamma) >= 0


@settings(max_examples=100, deadline=None)
@given(instances(), st.floats(0, 4), st.floats(0, 4))
def test_monotonic_in_gamma(inst, g1, g2):
    z, k, prior, alpha, _ = inst
    lo, hi = sorted((g1, g2))
    assert _val("fpdls", z, k, prior, alpha, hi) <= _val("fpdls", z, k, prior, alpha, lo) + 1e-12


@settings(max_examples=100, deadline=None)
@given(instances(), st.integers(0, 2**31 - 1))
def test_permutation_equivariance(inst, seed):
    z, k, prior, alpha, gamma = inst
    n = z.shape[1]
    perm = np.random.default_rng(seed).permutation(n)
    inv = np.argsort(perm)
    pz, pk, pd = z[:, perm], inv[k], PriorMatrix(prior.d[np.ix_(perm, perm)])
    for kind in ("ce", "pdls", "fpdls"):
        assert abs(_val(kind, pz, pk, pd, alpha, gamma) - _val(kind, z, k, prior, alpha, gamma)) <= 1e-6


def test_focal_suppresses_confident_correct():
    z = np.array([[12.0, 0.0, 0.0]])
    f, p = _val("fpdls", z, [0], D3, 0.5, 2.0), _val("pdls", z, [0], D3, 0.5)
    assert f < p


@pytest.mark.parametrize("kind", ["ce", "pdls", "fpdls"])
def test_logit_gradients(kind):
    rng = np.random.default_rng(0)
    prior = _rand_prior(rng, 5)
    cfg = LossConfig(kind, 0.3, 2.0)
    with precision(np.float64):
        z = parameter(rng.normal(0, 2, (4, 5)))
        k = rng.integers(0, 5, 4)
        backward(fpdls(z, k, prior, cfg))
        num = numeric_grad(lambda: fpdls(Tensor(z.data), k, prior, cfg).item(), z.data)
    np.testing.assert_allclose(z.grad, num, rtol=1e-5, atol=1e-9)


def test_focal_factor_not_detached():
    # with gamma > 0 the gradient differs from a detached-factor version
    rng = np.random.default_rng(1)
    with precision(np.float64):
        z = parameter(rng.normal(size=(1, 3)))
        backward(fpdls(z, [1], D3, LossConfig("fpdls", 0.5, 2.0)))
        p = np.exp(z.data - z.data.max())
        p /= p.sum()
        fw = (0.5 * np.eye(3)[1] + 0.5 * D3.d[1]) * (1 - p) ** 2
        detached = -(fw - p * fw.sum())
    assert np.abs(z.grad).max() > 1e-3
    assert not np.allclose(z.grad[0], detached, atol=1e-6)


def test_cross_entropy_value():
    np.testing.assert_allclose(cross_entropy(Tensor(Z3), [0]).item(), 0.407606, atol=1e-5)
