import math

import mpmath
import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from sqvae import autodiff as ad
from sqvae.autodiff import ShapeError, Tensor
from sqvae.codebook import Codebook
from sqvae.objectives import (
    bessel_ratio,
    categorical_cross_entropy,
    dlog_bessel_iv,
    gaussian_kl,
    gaussian_sq_loss,
    kappa_mle,
    log_bessel_iv,
    log_cf,
    nc_sq_loss,
    vae_loss,
    vmf_sq_loss,
    vq_loss,
)
from sqvae.quantizer import deterministic_quantize, stochastic_quantize
from sqvae.variance import VarianceParam

from gradcases import LOSS_CASES, worst_error


def _unit(a):
    return a / np.linalg.norm(a, axis=-1, keepdims=True)


def _mp_log_iv(nu, x):
    return float(mpmath.log(mpmath.besseli(nu, x)))


# -- Bessel and the vMF normalizer ---------------------------------------------


def test_log_bessel_small_argument_order_zero():
    assert abs(log_bessel_iv(0.0, 1e-8)) < 1e-15


def test_log_bessel_half_order_closed_form():
    want = math.log(math.sqrt(2 / (math.pi * 2.0)) * math.sinh(2.0))
    assert log_bessel_iv(0.5, 2.0) == pytest.approx(want, rel=1e-12)


def test_log_bessel_large_argument_matches_asymptote():
    approx = 100.0 - 0.5 * math.log(2 * math.pi * 100.0)
    assert abs(math.exp(log_bessel_iv(0.0, 100.0) - approx) - 1) < 0.01


@pytest.mark.parametrize("nu", [0.0, 0.5, 1.0, 3.5, 15.0, 127.0, 255.0])
@pytest.mark.parametrize("x", [1e-6, 0.3, 7.0, 29.0, 31.0, 200.0, 5000.0])
def test_log_bessel_matches_mpmath(nu, x):
    assert log_bessel_iv(nu, x) == pytest.approx(_mp_log_iv(nu, x), rel=1e-10, abs=1e-10)


def test_log_bessel_sweep_over_supported_orders_and_arguments():
    worst = 0.0
    for F in (2, 3, 5, 8, 17, 32, 33, 64, 81, 128, 257, 512):
        for x in np.geomspace(1e-8, 1e4, 25):
            want = _mp_log_iv(F / 2 - 1, x)
            worst = max(worst, abs(log_bessel_iv(F / 2 - 1, x) - want) / max(1.0, abs(want)))
    assert worst <= 1e-12


def test_log_bessel_domain_errors():
    with pytest.raises(ShapeError):
        log_bessel_iv(0.0, 2e4)
    with pytest.raises(ShapeError):
        log_bessel_iv(0.3, 1.0)
    with pytest.raises(ShapeError):
        log_bessel_iv(-0.5, 1.0)


def test_log_c3_matches_closed_form_on_log_grid():
    for k in np.geomspace(1e-3, 50, 200):
        want = math.log(k / (4 * math.pi * math.sinh(k)))
        assert abs(log_cf(float(k), 3) - want) <= 1e-8 * abs(want)


def test_log_cf_small_kappa_limit_is_uniform_density():
    for F in (2, 3, 8, 64):
        want = math.lgamma(F / 2) - math.log(2) - (F / 2) * math.log(math.pi)
        assert log_cf(1e-8, F) == pytest.approx(want, abs=1e-9)


def test_log_c2_is_inverse_of_two_pi_i0():
    for k in (0.1, 2.0, 40.0):
        assert log_cf(k, 2) == pytest.approx(-math.log(2 * math.pi) - _mp_log_iv(0, k), rel=1e-12)


def test_log_cf_decreases_in_kappa():
    for F in (2, 3, 10):
        vals = [log_cf(float(k), F) for k in np.geomspace(1e-3, 1e3, 60)]
        assert np.all(np.diff(vals) < 0)


def test_log_cf_tensor_matches_scalar():
    k = np.array([[0.5, 3.0], [40.0, 900.0]])
    t = log_cf(Tensor(k), 5).data
    assert np.allclose(t, [[log_cf(float(v), 5) for v in row] for row in k], rtol=0, atol=0)


@pytest.mark.parametrize("nu", [0.0, 0.5, 3.0, 30.0])
def test_dlog_bessel_matches_finite_differences(nu):
    for x in np.geomspace(1e-2, 300, 25):
        h = 1e-5 * x
        fd = (log_bessel_iv(nu, x + h) - log_bessel_iv(nu, x - h)) / (2 * h)
        assert abs(dlog_bessel_iv(nu, x) - fd) <= 1e-6 * max(1.0, abs(fd))


def test_kappa_mle_inverts_the_mean_resultant():
    for F in (2, 3, 9):
        for k in (0.05, 1.0, 3.2, 60.0):
            r = bessel_ratio(F / 2 - 1, k)
            assert kappa_mle(r, F) == pytest.approx(k, rel=1e-9)
    with pytest.raises(ShapeError):
        kappa_mle(1.0, 3)


# -- Gaussian SQ-VAE -------------------------------------------------------------


def _gaussian_setup(rng, n=2, d_z=2, K=3, d_b=2, D=4, s2phi=0.7):
    Z = Tensor(rng.normal(size=(n, d_z, d_b)))
    cb = Codebook(Tensor(rng.normal(size=(K, d_b))))
    var = VarianceParam.from_values("I", s2phi)
    q = stochastic_quantize(Z, cb, var, tau=0.5, gumbel=rng.gumbel(size=(n, d_z, K)))
    return Z, cb, q


def test_gaussian_perfect_reconstruction_unit_variance():
    rng = np.random.default_rng(0)
    Z, _, q = _gaussian_setup(rng)
    x = rng.uniform(size=(2, 4))
    out = gaussian_sq_loss(x, Z, q, Tensor(x), Tensor(0.0))
    assert out.values()["reconstruction"] == 0.0
    assert out.values()["decoder_variance_term"] == 0.0


def test_gaussian_regularizer_vanishes_when_latent_equals_sample():
    B = np.array([[1.0, 0.0], [0.0, 1.0], [-1.0, 0.5]])
    Z = Tensor(B[None, [2, 0]])
    q = stochastic_quantize(Z, Codebook(Tensor(B)), VarianceParam.from_values("I", 0.7),
                            tau=1e-3, gumbel=np.array([[[0, 0, 50.0], [50.0, 0, 0]]]))
    out = gaussian_sq_loss(np.zeros((1, 4)), Z, q, Tensor(np.zeros((1, 4))), 0.0)
    assert out.values()["regularization"] == pytest.approx(0.0, abs=1e-12)


def test_gaussian_loss_matches_scalar_oracle():
    rng = np.random.default_rng(2)
    n, d_z, K, d_b, D = 1, 2, 3, 2, 3
    s2, s2phi = 0.4, 0.7
    Z = rng.normal(size=(n, d_z, d_b))
    B = rng.normal(size=(K, d_b))
    g = rng.gumbel(size=(n, d_z, K))
    W = rng.normal(size=(d_z * d_b, D))
    x = rng.uniform(size=(n, D))
    tau = 0.5
    q = stochastic_quantize(Tensor(Z), Codebook(Tensor(B)), VarianceParam.from_values("I", s2phi),
                            tau=tau, gumbel=g)
    xhat = ad.matmul(ad.reshape(q.soft_code, (n, d_z * d_b)), Tensor(W))
    got = gaussian_sq_loss(x, Tensor(Z), q, xhat, math.log(s2)).values()

    # independent scalar arithmetic, one position at a time
    zq, ent, reg = [], 0.0, 0.0
    for i in range(d_z):
        s = [-sum((Z[0, i, j] - B[k, j]) ** 2 for j in range(d_b)) / (2 * s2phi) for k in range(K)]
        m = max(s)
        p = [math.exp(v - m) for v in s]
        p = [v / sum(p) for v in p]
        ent -= sum(v * math.log(v) for v in p)
        a = [(math.log(p[k]) + g[0, i, k]) / tau for k in range(K)]
        ma = max(a)
        y = [math.exp(v - ma) for v in a]
        y = [v / sum(y) for v in y]
        code = [sum(y[k] * B[k, j] for k in range(K)) for j in range(d_b)]
        zq.extend(code)
        reg += sum((Z[0, i, j] - code[j]) ** 2 for j in range(d_b)) / (2 * s2phi)
    rec = sum((x[0, c] - sum(zq[r] * W[r, c] for r in range(d_z * d_b))) ** 2
              for c in range(D)) / (2 * s2)
    want = {
        "reconstruction": rec,
        "regularization": reg,
        "neg_entropy": -ent,
        "decoder_variance_term": D / 2 * math.log(s2),
        "constant": D / 2 * math.log(2 * math.pi) - d_z * d_b / 2 + d_z * math.log(K),
    }
    for k, v in want.items():
        assert got[k] == pytest.approx(v, abs=1e-10), k


def test_gaussian_loss_is_monotone_in_reconstruction_error():
    rng = np.random.default_rng(3)
    Z, _, q = _gaussian_setup(rng)
    x = rng.uniform(size=(2, 4))
    prev = -np.inf
    for eps in (0.0, 0.1, 0.3, 1.0):
        v = gaussian_sq_loss(x, Z, q, Tensor(x + eps), 0.2).total
        assert v > prev
        prev = v


def test_gaussian_loss_has_no_log_variance_phi_term():
    # only the regularizer and the entropy see sigma_phi; no explicit ln term
    rng = np.random.default_rng(4)
    Z, cb, _ = _gaussian_setup(rng)
    for s2phi in (0.1, 10.0):
        q = stochastic_quantize(Z, cb, VarianceParam.from_values("I", s2phi), tau=0.5,
                                gumbel=np.zeros((2, 2, 3)))
        v = gaussian_sq_loss(np.zeros((2, 4)), Z, q, Tensor(np.zeros((2, 4))), 0.0).values()
        rest = v["total"] - v["regularization"] - v["neg_entropy"] - v["constant"]
        assert rest == pytest.approx(0.0, abs=1e-12)


def test_gaussian_loss_shape_errors():
    rng = np.random.default_rng(5)
    Z, _, q = _gaussian_setup(rng)
    with pytest.raises(ShapeError):
        gaussian_sq_loss(np.zeros((2, 4)), Z, q, Tensor(np.zeros((2, 5))), 0.0)


# -- vMF SQ-VAE ------------------------------------------------------------------


def _vmf_setup(rng, n=1, d_z=2, K=3, d_b=3):
    Z = Tensor(_unit(rng.normal(size=(n, d_z, d_b))))
    cb = Codebook(Tensor(_unit(rng.normal(size=(K, d_b)))), unit_norm=True)
    q = stochastic_quantize(Z, cb, VarianceParam.from_values("vmf", 2.0), tau=0.5,
                            gumbel=rng.gumbel(size=(n, d_z, K)))
    return Z, q


def test_vmf_reconstruction_is_minus_kappa_d_when_directions_match():
    rng = np.random.default_rng(6)
    Z, q = _vmf_setup(rng)
    V = _unit(rng.normal(size=(1, 5, 3)))
    out = vmf_sq_loss(V, Z, q, Tensor(V), math.log(4.0)).values()
    assert out["reconstruction"] == pytest.approx(-4.0 * 5, abs=1e-12)


def test_vmf_single_pixel_example():
    rng = np.random.default_rng(7)
    Z, q = _vmf_setup(rng)
    V = np.array([[[0.0, 0.0, 1.0]]])
    out = vmf_sq_loss(V, Z, q, Tensor(V), math.log(2.0)).values()
    want = -2.0 - math.log(2.0 / (4 * math.pi * math.sinh(2.0)))
    assert out["reconstruction"] + out["decoder_variance_term"] == pytest.approx(want, abs=1e-12)


def test_vmf_regularizer_vanishes_at_the_code():
    rng = np.random.default_rng(8)
    B = _unit(rng.normal(size=(3, 3)))
    Z = Tensor(B[None, [0, 2]])
    cb = Codebook(Tensor(B), unit_norm=True)
    q = stochastic_quantize(Z, cb, VarianceParam.from_values("vmf", 2.0), tau=1e-3,
                            gumbel=np.array([[[50.0, 0, 0], [0, 0, 50.0]]]))
    V = _unit(np.ones((1, 2, 3)))
    assert vmf_sq_loss(V, Z, q, Tensor(V), 0.0).values()["regularization"] == pytest.approx(
        0.0, abs=1e-12)


def test_vmf_per_pixel_normalizer_switch():
    rng = np.random.default_rng(9)
    Z, q = _vmf_setup(rng)
    V = _unit(rng.normal(size=(1, 4, 3)))
    a = vmf_sq_loss(V, Z, q, Tensor(V), 1.0).values()["decoder_variance_term"]
    b = vmf_sq_loss(V, Z, q, Tensor(V), 1.0, per_pixel_normalizer=False).values()[
        "decoder_variance_term"]
    assert a == pytest.approx(4 * b, rel=1e-14)


def test_vmf_rejects_non_unit_directions():
    rng = np.random.default_rng(10)
    Z, q = _vmf_setup(rng)
    V = _unit(rng.normal(size=(1, 4, 3)))
    with pytest.raises(ShapeError, match="unit-norm"):
        vmf_sq_loss(V, Z, q, Tensor(2 * V), 1.0)


# -- naive categorical -------------------------------------------------------------


def _nc_quant(rng, n=1):
    Z = Tensor(rng.normal(size=(n, 2, 2)))
    cb = Codebook(Tensor(rng.normal(size=(3, 2))))
    return Z, stochastic_quantize(Z, cb, VarianceParam.from_values("I", 0.5), tau=0.5,
                                  gumbel=rng.gumbel(size=(n, 2, 3)))


def test_nc_uniform_logits_give_d_ln_c():
    rng = np.random.default_rng(11)
    Z, q = _nc_quant(rng)
    cls = np.array([[0, 3, 1, 2, 2]])
    out = nc_sq_loss(cls, Z, q, Tensor(np.zeros((1, 5, 4)))).values()
    assert out["reconstruction"] == pytest.approx(5 * math.log(4), abs=1e-12)


def test_nc_margin_bound():
    rng = np.random.default_rng(12)
    Z, q = _nc_quant(rng)
    D, C, m = 6, 5, 3.0
    cls = rng.integers(0, C, size=(1, D))
    logits = rng.normal(size=(1, D, C))
    for p in range(D):
        others = np.delete(logits[0, p], cls[0, p])
        logits[0, p, cls[0, p]] = others.max() + m
    ce = nc_sq_loss(cls, Z, q, Tensor(logits)).values()["reconstruction"]
    assert ce <= D * math.log(1 + (C - 1) * math.exp(-m)) + 1e-12


def test_nc_has_no_decoder_scale_and_checks_classes():
    rng = np.random.default_rng(13)
    Z, q = _nc_quant(rng)
    out = nc_sq_loss(np.array([[1, 0]]), Z, q, Tensor(np.zeros((1, 2, 2)))).values()
    assert out["decoder_variance_term"] == 0.0
    with pytest.raises(ShapeError):
        nc_sq_loss(np.array([[2, 0]]), Z, q, Tensor(np.zeros((1, 2, 2))))


def test_cross_entropy_matches_log_softmax():
    rng = np.random.default_rng(14)
    logits = rng.normal(size=(3, 4, 5))
    cls = rng.integers(0, 5, size=(3, 4))
    lse = np.log(np.exp(logits).sum(-1))
    want = (lse - np.take_along_axis(logits, cls[..., None], -1)[..., 0]).sum(-1)
    assert np.allclose(categorical_cross_entropy(logits, cls).data, want, atol=1e-12)


# -- VQ-VAE ------------------------------------------------------------------------


def _vq_instance(rng, beta=0.25):
    B = rng.normal(size=(4, 2))
    Z = Tensor(rng.normal(size=(2, 3, 2)), requires_grad=True)
    cb = Codebook(Tensor(B, requires_grad=True))
    q = deterministic_quantize(Z, cb)
    W = rng.normal(size=(6, 5))
    xhat = ad.matmul(ad.reshape(q.soft_code, (2, 6)), Tensor(W))
    x = rng.uniform(size=(2, 5))
    return Z, cb, q, vq_loss(x, Z, q, xhat, beta=beta)


def test_vq_latent_terms_vanish_at_the_codes():
    B = np.array([[1.0, 0.0], [0.0, 1.0]])
    Z = Tensor(B[None, [1, 0, 1]])
    q = deterministic_quantize(Z, Codebook(Tensor(B)))
    out = vq_loss(np.zeros((1, 2)), Z, q, Tensor(np.zeros((1, 2))))
    assert out.values()["dictionary"] == 0.0 and out.values()["commitment"] == 0.0


def test_vq_doubling_beta_doubles_only_commitment():
    a = _vq_instance(np.random.default_rng(15), 0.25)[3].values()
    b = _vq_instance(np.random.default_rng(15), 0.5)[3].values()
    assert b["commitment"] == pytest.approx(2 * a["commitment"], rel=1e-14)
    assert b["dictionary"] == a["dictionary"]
    assert b["reconstruction"] == a["reconstruction"]


def test_vq_gradient_routes_are_separated():
    for beta in (0.25, 0.5):
        rng = np.random.default_rng(16)
        Z, cb, q, out = _vq_instance(rng, beta)
        ad.backward(out.dictionary)
        assert Z.grad is None or not np.any(Z.grad)
        g_dict = cb.entries.grad.copy()
        if beta == 0.25:
            first = g_dict
        else:
            # the codebook gradient carries no beta
            assert np.array_equal(g_dict, first)
        Z2, cb2, q2, out2 = _vq_instance(np.random.default_rng(16), beta)
        ad.backward(out2.commitment + out2.reconstruction)
        assert cb2.entries.grad is None or not np.any(cb2.entries.grad)


def test_vq_without_dictionary_term():
    rng = np.random.default_rng(17)
    B = rng.normal(size=(4, 2))
    Z = Tensor(rng.normal(size=(1, 3, 2)))
    q = deterministic_quantize(Z, Codebook(Tensor(B)))
    out = vq_loss(np.zeros((1, 6)), Z, q, ad.reshape(q.soft_code, (1, 6)), dictionary_term=False)
    v = out.values()
    assert v["objective"] == pytest.approx(v["reconstruction"] + v["commitment"], rel=1e-14)


# -- Gaussian VAE ------------------------------------------------------------------


def test_kl_examples():
    assert gaussian_kl(np.zeros((1, 3)), np.ones((1, 3))).data.tolist() == [0.0]
    assert gaussian_kl(np.array([[1.0]]), np.ones((1, 1))).data.tolist() == [0.5]


def test_vae_perfect_reconstruction_leaves_only_kl():
    x = np.random.default_rng(18).uniform(size=(2, 4))
    mu = np.array([[1.0, 0.0], [0.0, 0.0]])
    out = vae_loss(x, mu, np.ones((2, 2)), Tensor(x), 0.0).values()
    assert out["total"] - out["constant"] == pytest.approx(0.25, abs=1e-15)


@settings(max_examples=60, deadline=None)
@given(st.floats(-3, 3), st.floats(0.05, 5))
def test_kl_is_nonnegative(m, v):
    assert gaussian_kl(np.array([[m]]), np.array([[v]])).data[0] >= -1e-15


# -- gradient checks ---------------------------------------------------------------


@pytest.mark.parametrize("name", sorted(LOSS_CASES))
def test_loss_gradient_matches_finite_differences(name):
    assert worst_error(LOSS_CASES[name], seed=23, trials=20) <= 1e-4
