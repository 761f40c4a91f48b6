import itertools
import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from sqvae import autodiff as ad
from sqvae.autodiff import ShapeError, Tensor
from sqvae.codebook import Codebook
from sqvae.quantizer import (
    TemperatureSchedule,
    analytic_entropy,
    deterministic_quantize,
    expected_regularizer,
    gumbel_softmax_sample,
    quantize_probs,
    regularizer,
    scores,
    stochastic_quantize,
    temperature,
)
from sqvae.variance import VarianceParam

B3 = np.array([[1.0, 0.0], [-1.0, 0.0], [0.0, 2.0]])


def test_probs_example():
    p = quantize_probs(np.zeros((1, 2)), Codebook(Tensor(B3)), VarianceParam.from_values("I", 0.5))
    e = math.exp(-3.0)
    want = [1 / (2 + e), 1 / (2 + e), e / (2 + e)]
    assert np.allclose(p.data, [want], rtol=0, atol=1e-14)
    # the commonly quoted 0.02430 is off from the exact 0.0242889 by 1.1e-5
    assert np.allclose(p.data, [[0.48785, 0.48785, 0.02430]], atol=2e-5)


def test_small_variance_gives_one_hot_at_nearest():
    p = quantize_probs(np.array([[0.9, 0.1]]), Codebook(Tensor(B3)),
                       VarianceParam.from_values("I", 1e-4)).data
    assert np.allclose(p, [[1.0, 0.0, 0.0]], atol=1e-12)


def test_vmf_zero_concentration_is_uniform():
    cb = Codebook(Tensor(np.eye(3)), unit_norm=True)
    var = VarianceParam("vmf", Tensor(-800.0))  # exp underflows to kappa_phi = 0
    z = np.array([[0.6, 0.8, 0.0]])
    assert np.allclose(softmax_rows(ad.mul(ad.matmul(Tensor(z), Tensor(np.eye(3))), 0.0).data),
                       1 / 3)
    with pytest.raises(ShapeError, match="underflowed"):
        quantize_probs(z, cb, var)
    p = quantize_probs(z, cb, VarianceParam.from_values("vmf", 1e-300)).data
    assert np.allclose(p, 1 / 3, atol=1e-12)


def softmax_rows(a):
    e = np.exp(a - a.max(axis=-1, keepdims=True))
    return e / e.sum(axis=-1, keepdims=True)


@settings(max_examples=50, deadline=None)
@given(arrays(np.float64, st.tuples(st.integers(1, 3), st.just(2)), elements=st.floats(-3, 3)),
       st.floats(0.05, 5.0))
def test_probs_rows_are_distributions_and_shift_invariant(Z, v):
    cb = Codebook(Tensor(B3))
    var = VarianceParam.from_values("I", v)
    s = scores(Z, cb, var).data
    p = quantize_probs(Z, cb, var).data
    assert np.all(p >= 0) and np.allclose(p.sum(-1), 1.0, atol=1e-10)
    assert np.allclose(softmax_rows(s + 7.5), p, atol=1e-12)


@settings(max_examples=50, deadline=None)
@given(arrays(np.float64, st.tuples(st.integers(1, 3), st.integers(1, 3), st.just(2)),
              elements=st.floats(-3, 3)))
def test_type_one_argmax_matches_deterministic_selection(Z):
    cb = Codebook(Tensor(B3))
    q = stochastic_quantize(Z, cb, VarianceParam.from_values("I", 0.8), tau=1.0, hard=True)
    assert np.array_equal(q.hard_indices, deterministic_quantize(Z, cb).hard_indices)


# -- gumbel ------------------------------------------------------------------


def test_gumbel_rows_sum_to_one_for_any_temperature():
    rng = np.random.default_rng(0)
    p = softmax_rows(rng.normal(size=(4, 5)))
    for tau in (1e-3, 0.1, 1.0, 10.0):
        y = gumbel_softmax_sample(p, tau, rng).data
        assert np.allclose(y.sum(-1), 1.0, atol=1e-10)


def test_gumbel_zero_temperature_limit_is_argmax_of_perturbed_logits():
    rng = np.random.default_rng(1)
    p = softmax_rows(rng.normal(size=(6, 4)))
    g = rng.gumbel(size=p.shape)
    y = gumbel_softmax_sample(p, 1e-4, gumbel=g).data
    hard = np.argmax(np.log(p) + g, axis=-1)
    assert np.allclose(y, np.eye(4)[hard], atol=1e-8)


def test_gumbel_hard_argmax_frequencies_match_probs():
    p = np.array([0.5, 0.3, 0.15, 0.05])
    n = 100_000
    rng = np.random.default_rng(2)
    g = rng.gumbel(size=(n, 4))
    counts = np.bincount(np.argmax(np.log(p) + g, axis=-1), minlength=4)
    # the relaxed sample at tiny tau selects the same argmax
    y = gumbel_softmax_sample(np.tile(p, (1000, 1)), 1e-6, gumbel=g[:1000]).data
    assert np.array_equal(np.argmax(y, -1), np.argmax(np.log(p) + g[:1000], -1))
    se = np.sqrt(p * (1 - p) / n)
    assert np.all(np.abs(counts / n - p) <= 3 * se)


def test_gumbel_seeded_sample_is_bit_deterministic():
    p = softmax_rows(np.random.default_rng(3).normal(size=(3, 5)))
    a = gumbel_softmax_sample(p, 0.5, np.random.default_rng(9)).data
    b = gumbel_softmax_sample(p, 0.5, np.random.default_rng(9)).data
    assert a.tobytes() == b.tobytes()


def test_gumbel_zero_probability_is_floored():
    y = gumbel_softmax_sample(np.array([[1.0, 0.0]]), 1.0, gumbel=np.zeros((1, 2))).data
    assert np.all(np.isfinite(y)) and y[0, 1] == pytest.approx(1e-12 / (1 + 1e-12))


def test_gumbel_needs_rng_or_noise_and_positive_tau():
    with pytest.raises(ShapeError):
        gumbel_softmax_sample(np.array([[0.5, 0.5]]), 1.0)
    with pytest.raises(ShapeError):
        gumbel_softmax_sample(np.array([[0.5, 0.5]]), 0.0, np.random.default_rng(0))


# -- temperature -----------------------------------------------------------------


def test_temperature_examples():
    assert temperature(0) == 1.0
    assert temperature(100_000, TemperatureSchedule(floor=0.1)) == pytest.approx(math.exp(-1.0), abs=1e-15)
    assert temperature(10**9, TemperatureSchedule(floor=0.1)) == 0.1
    with pytest.raises(ShapeError):
        temperature(-1)


def test_literal_positive_sign_is_available():
    assert temperature(1000, TemperatureSchedule(sign=1.0)) == pytest.approx(math.exp(0.01))


@settings(max_examples=100, deadline=None)
@given(st.integers(0, 10**7), st.integers(0, 10**7), st.floats(1e-3, 1.0))
def test_temperature_monotone_and_bounded(t1, t2, floor):
    sched = TemperatureSchedule(floor=floor)
    a, b = temperature(min(t1, t2), sched), temperature(max(t1, t2), sched)
    assert 0 < b <= a <= 1.0


# -- deterministic quantization ---------------------------------------------------


def test_deterministic_quantize_examples():
    cb = Codebook(Tensor(B3))
    q = deterministic_quantize(np.array([[[0.0, 2.0], [0.0, 0.0]]]), cb)
    assert q.hard_indices.tolist() == [[2, 0]]  # exact hit; tie -> lowest index
    assert np.array_equal(q.soft_code.data, B3[[2, 0]][None])
    assert np.array_equal(q.probs.data, np.eye(3)[[2, 0]][None])


def test_straight_through_gradient_equals_code_gradient():
    rng = np.random.default_rng(4)
    Z = Tensor(rng.normal(size=(2, 3, 2)), requires_grad=True)
    q = deterministic_quantize(Z, Codebook(Tensor(B3)))
    W = rng.normal(size=q.soft_code.shape)
    ad.backward(ad.tsum(ad.mul(q.soft_code, Tensor(W))))
    assert np.array_equal(Z.grad, W)


# -- entropy and regularizer -----------------------------------------------------------


def test_entropy_examples():
    assert analytic_entropy(np.full((2, 4), 0.25)).data == pytest.approx([math.log(4)] * 2, abs=1e-15)
    assert analytic_entropy(np.array([[0.0, 1.0, 0.0]])).data[0] == 0.0
    assert analytic_entropy(np.array([[0.5, 0.5, 0.0, 0.0]])).data[0] == pytest.approx(math.log(2))


@settings(max_examples=60, deadline=None)
@given(arrays(np.float64, st.tuples(st.integers(1, 3), st.integers(2, 6)), elements=st.floats(-8, 8)))
def test_entropy_between_zero_and_log_K(logits):
    h = analytic_entropy(softmax_rows(logits)).data
    assert np.all(h >= -1e-12) and np.all(h <= math.log(logits.shape[-1]) + 1e-12)


def test_regularizer_examples():
    rng = np.random.default_rng(5)
    Z = rng.normal(size=(1, 2, 3))
    for kind, v in (("I", 0.4), ("II", [0.7]), ("III", [[0.3, 2.0]]), ("IV", np.ones((1, 2, 3)))):
        assert regularizer(Z, Z, VarianceParam.from_values(kind, v)).data == pytest.approx(0.0)
    Zq = Z.copy()
    Zq[0, 0, 0] += 1.0
    Zq[0, 1, 2] -= 1.0  # squared Frobenius distance 2
    assert regularizer(Z, Zq, VarianceParam.from_values("I", 0.5)).data == pytest.approx(2.0)
    u = np.array([[[0.6, 0.8], [1.0, 0.0]]])
    r = regularizer(u, np.array([[[0.6, 0.8], [0.0, 1.0]]]), VarianceParam.from_values("vmf", 3.0))
    assert r.data == pytest.approx(3.0)  # first position contributes 0


# -- exact expectation oracle (small sizes; the full grid is in the acceptance suite)


def _enumerate(Z, B, var):
    """Brute force over all K^d_z joint assignments of one sample."""
    cb = Codebook(Tensor(B), unit_norm=(var.kind == "vmf"))
    p = quantize_probs(Z, cb, var).data
    d_z, K = p.shape
    H = R = total = 0.0
    for ks in itertools.product(range(K), repeat=d_z):
        prob = float(np.prod([p[i, k] for i, k in enumerate(ks)]))
        total += prob
        H -= prob * math.log(prob)
        R += prob * float(regularizer(Z, B[list(ks)], var).data)
    return p, H, R, total


@pytest.mark.parametrize("kind", ["I", "IV", "vmf"])
def test_enumeration_matches_analytic_entropy_and_regularizer(kind):
    rng = np.random.default_rng(6)
    d_z, K, d_b = 2, 3, 2
    Z = rng.normal(size=(d_z, d_b))
    B = rng.normal(size=(K, d_b))
    if kind == "vmf":
        Z /= np.linalg.norm(Z, axis=-1, keepdims=True)
        B /= np.linalg.norm(B, axis=-1, keepdims=True)
        var = VarianceParam.from_values("vmf", 2.5)
    elif kind == "IV":
        var = VarianceParam.from_values("IV", rng.uniform(0.5, 2, size=(d_z, d_b)))
    else:
        var = VarianceParam.from_values("I", 0.7)
    cb = Codebook(Tensor(B), unit_norm=(kind == "vmf"))
    p, H, R, total = _enumerate(Z, B, var)
    assert total == pytest.approx(1.0, abs=1e-12)
    assert float(np.sum(analytic_entropy(p).data)) == pytest.approx(H, abs=1e-10)
    s = scores(Z, cb, var)
    assert float(expected_regularizer(s, p, var).data) == pytest.approx(R, abs=1e-10)


def test_stochastic_quantize_output_invariants():
    rng = np.random.default_rng(7)
    Z = rng.normal(size=(3, 4, 2))
    q = stochastic_quantize(Z, Codebook(Tensor(B3)), VarianceParam.from_values("I", 0.6), 0.5, rng)
    assert np.allclose(q.probs.data.sum(-1), 1.0, atol=1e-10)
    assert np.array_equal(q.hard_indices, np.argmax(q.probs.data, -1))
    assert q.soft_code.shape == Z.shape
    assert np.all(q.entropy_per_position.data <= math.log(3) + 1e-12)


def test_near_tie_selection_agrees_with_nearest_code():
    # equidistant from codes 0 and 1 up to rounding
    Z = np.array([[[-8.97317e-17, -1.73235262]]])
    cb = Codebook(Tensor(B3))
    q = stochastic_quantize(Z, cb, VarianceParam.from_values("I", 0.8), tau=1.0, hard=True)
    assert q.hard_indices.tolist() == deterministic_quantize(Z, cb).hard_indices.tolist()
