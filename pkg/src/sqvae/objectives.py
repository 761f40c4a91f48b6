"""Training objectives (negative ELBOs and the VQ-VAE loss) and the vMF
normalizing constant.

Every loss works on a batch: per-sample terms are computed first and then
averaged over the leading axis.  Additive constants that carry no gradient
are collected into ``ElboBreakdown.constant``.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .autodiff import (
    ShapeError,
    Tensor,
    apply_primitive,
    as_tensor,
    div,
    exp,
    gather_rows,
    log,
    log_softmax,
    mean,
    mul,
    primitive,
    scale,
    square,
    sub,
    tsum,
)
from .quantizer import QuantizationOutput

LOG_2PI = math.log(2.0 * math.pi)

# ---------------------------------------------------------------------------
# modified Bessel function of the first kind, in log space

KAPPA_RANGE = (1e-8, 1e4)
SERIES_KAPPA = 30.0
DEBYE_MIN_ORDER = 40.0


def _log_iv_series(nu: float, x: float) -> tuple[float, float]:
    """Ascending series.  Returns (nu*ln(x/2) - lnGamma(nu+1), ln of the sum)."""
    q = 0.25 * x * x
    term = 1.0
    tail = 0.0  # sum of terms m >= 1, relative to the current scale
    log_scale = 0.0
    m = 0
    while True:
        m += 1
        term *= q / (m * (m + nu))
        tail += term
        if tail > 1e250:
            tail *= 1e-250
            term *= 1e-250
            log_scale += 250.0 * math.log(10.0)
        if m * (m + nu) > q and term <= 1e-17 * tail:
            break
    if log_scale == 0.0:
        log_sum = math.log1p(tail)
    else:
        log_sum = math.log(tail) + log_scale
    return nu * math.log(0.5 * x) - math.lgamma(nu + 1.0), log_sum


def _log_iv_hankel(nu: float, x: float) -> float:
    """Large-argument expansion, used when nu^2 is small relative to x."""
    mu = 4.0 * nu * nu
    total, term, k = 1.0, 1.0, 0
    while k < 200:
        k += 1
        nxt = -term * (mu - (2 * k - 1) ** 2) / (k * 8.0 * x)
        if nxt == 0.0:
            break
        if abs(nxt) >= abs(term):
            break
        term = nxt
        total += term
        if abs(term) < 1e-17 * abs(total):
            break
    return x - 0.5 * math.log(2.0 * math.pi * x) + math.log(total)


_DEBYE = (
    (1.0,),
    (0.0, 3.0 / 24, 0.0, -5.0 / 24),
    (0.0, 0.0, 81.0 / 1152, 0.0, -462.0 / 1152, 0.0, 385.0 / 1152),
    (0.0, 0.0, 0.0, 30375.0 / 414720, 0.0, -369603.0 / 414720, 0.0,
     765765.0 / 414720, 0.0, -425425.0 / 414720),
    (0.0, 0.0, 0.0, 0.0, 4465125.0 / 39813120, 0.0, -94121676.0 / 39813120, 0.0,
     349922430.0 / 39813120, 0.0, -446185740.0 / 39813120, 0.0,
     185910725.0 / 39813120),
)


def _log_iv_debye(nu: float, x: float) -> float:
    """Uniform asymptotic expansion in the order (needs nu of moderate size)."""
    z = x / nu
    root = math.sqrt(1.0 + z * z)
    t = 1.0 / root
    eta = root + math.log(z / (1.0 + root))
    total = 0.0
    for k, coeffs in enumerate(_DEBYE):
        uk = sum(c * t ** j for j, c in enumerate(coeffs) if c)
        total += uk / nu ** k
    return nu * eta - 0.5 * math.log(2.0 * math.pi * nu) - 0.5 * math.log(root) + math.log(total)


def _log_iv(nu: float, x: float) -> float:
    if x <= max(SERIES_KAPPA, 2.0 * nu):
        prefix, log_sum = _log_iv_series(nu, x)
        return prefix + log_sum
    if nu * nu <= x:
        return _log_iv_hankel(nu, x)
    if nu < DEBYE_MIN_ORDER:
        # four Debye terms leave ~1e-9 error at small orders; the series is exact
        prefix, log_sum = _log_iv_series(nu, x)
        return prefix + log_sum
    return _log_iv_debye(nu, x)


def _check_domain(nu: float, kappa: float) -> None:
    if not KAPPA_RANGE[0] <= kappa <= KAPPA_RANGE[1]:
        raise ShapeError(f"kappa={kappa} outside [{KAPPA_RANGE[0]}, {KAPPA_RANGE[1]}]")
    two_nu = 2.0 * nu
    if nu < 0 or two_nu != round(two_nu) or nu > 255:
        raise ShapeError(f"order nu={nu} must be F/2 - 1 with F in [2, 512]")


def log_bessel_iv(nu: float, kappa: float) -> float:
    """ln I_nu(kappa) for nu = F/2 - 1 (F in [2, 512]) and kappa in [1e-8, 1e4]."""
    _check_domain(nu, kappa)
    return _log_iv(float(nu), float(kappa))


def bessel_ratio(nu: float, kappa: float) -> float:
    """I_{nu+1}(kappa) / I_nu(kappa)."""
    return math.exp(_log_iv(nu + 1.0, kappa) - _log_iv(nu, kappa))


def dlog_bessel_iv(nu: float, kappa: float) -> float:
    """d/dkappa ln I_nu(kappa) = I_{nu+1}/I_nu + nu/kappa."""
    _check_domain(nu, kappa)
    return bessel_ratio(float(nu), float(kappa)) + nu / kappa


def kappa_mle(mean_resultant: float, F: int) -> float:
    """Concentration whose vMF mean resultant length I_{F/2}/I_{F/2-1} equals
    ``mean_resultant``; bisection on ln(kappa) over the supported range."""
    if not 0.0 < mean_resultant < 1.0:
        raise ShapeError("mean resultant length must lie in (0, 1)")
    nu = F / 2.0 - 1.0
    lo, hi = math.log(1e-8), math.log(1e4)
    if bessel_ratio(nu, math.exp(hi)) <= mean_resultant:
        return 1e4
    for _ in range(200):
        mid = 0.5 * (lo + hi)
        if bessel_ratio(nu, math.exp(mid)) < mean_resultant:
            lo = mid
        else:
            hi = mid
    return math.exp(0.5 * (lo + hi))


def _log_cf_scalar(kappa: float, F: int) -> float:
    nu = F / 2.0 - 1.0
    _check_domain(nu, kappa)
    if kappa <= max(SERIES_KAPPA, 2.0 * nu):
        # nu*ln(kappa) cancels against the series prefix analytically
        _, log_sum = _log_iv_series(nu, kappa)
        return nu * math.log(2.0) + math.lgamma(nu + 1.0) - log_sum - (F / 2.0) * LOG_2PI
    return nu * math.log(kappa) - _log_iv(nu, kappa) - (F / 2.0) * LOG_2PI


@primitive("log_cf")
class _LogCF:
    @staticmethod
    def forward(kappa, F=3):
        flat = kappa.reshape(-1)
        out = np.array([_log_cf_scalar(float(k), F) for k in flat]).reshape(kappa.shape)
        return out, {"kappa": kappa, "F": F}

    @staticmethod
    def backward(ctx, g):
        nu = ctx["F"] / 2.0 - 1.0
        flat = ctx["kappa"].reshape(-1)
        d = np.array([-bessel_ratio(nu, float(k)) for k in flat]).reshape(ctx["kappa"].shape)
        return (g * d,)


def log_cf(kappa, F: int):
    """ln C_F(kappa) = (F/2-1) ln kappa - ln I_{F/2-1}(kappa) - (F/2) ln 2pi.

    Plain floats give a float; tensors give a differentiable tensor.
    """
    if isinstance(kappa, Tensor):
        return apply_primitive("log_cf", (kappa,), {"F": int(F)})
    return _log_cf_scalar(float(kappa), int(F))


# ---------------------------------------------------------------------------
# loss containers


@dataclass
class DecoderNoise:
    """Trainable decoder scale: log sigma^2 (Gaussian) or log kappa (vMF)."""

    log_value: Tensor

    def value(self) -> Tensor:
        return exp(self.log_value)


@dataclass
class ElboBreakdown:
    reconstruction: Tensor
    regularization: Tensor
    neg_entropy: Tensor
    decoder_variance_term: Tensor
    constant: float
    objective: Tensor  # differentiable sum of the four tensor terms

    @property
    def total(self) -> float:
        return float(self.objective.data) + self.constant

    def values(self) -> dict[str, float]:
        return {
            "reconstruction": float(self.reconstruction.data),
            "regularization": float(self.regularization.data),
            "neg_entropy": float(self.neg_entropy.data),
            "decoder_variance_term": float(self.decoder_variance_term.data),
            "constant": self.constant,
            "total": self.total,
        }


def _batch_mean(t: Tensor) -> Tensor:
    return mean(t) if t.ndim else t


def _assemble(recon, reg, neg_ent, var_term, constant) -> ElboBreakdown:
    recon, reg, neg_ent = _batch_mean(recon), _batch_mean(reg), _batch_mean(neg_ent)
    var_term = as_tensor(var_term)
    objective = recon + reg + neg_ent + var_term
    return ElboBreakdown(recon, reg, neg_ent, var_term, float(constant), objective)


def _noise_tensor(noise) -> Tensor:
    if isinstance(noise, DecoderNoise):
        return noise.log_value
    return as_tensor(noise)


def gaussian_sq_loss(x, Zhat, quant: QuantizationOutput, xhat, noise) -> ElboBreakdown:
    """Gaussian SQ-VAE negative ELBO with Z := Zhat.

    ``noise`` is a DecoderNoise (or a log sigma^2 tensor).  The regularizer is
    read from ``quant.regularizer_value``.
    """
    x, xhat = as_tensor(x), as_tensor(xhat)
    if x.shape != xhat.shape:
        raise ShapeError(f"data {x.shape} and reconstruction {xhat.shape} differ")
    if quant.regularizer_value is None:
        raise ShapeError("quantization output carries no regularizer")
    log_s2 = _noise_tensor(noise)
    D = x.shape[-1]
    d_z, K = quant.probs.shape[-2], quant.probs.shape[-1]
    d_b = quant.soft_code.shape[-1]
    sq = tsum(square(sub(x, xhat)), axis=-1)
    recon = div(sq, scale(exp(log_s2), 2.0))
    neg_ent = scale(tsum(quant.entropy_per_position, axis=-1), -1.0)
    var_term = scale(log_s2, D / 2.0)
    constant = 0.5 * D * LOG_2PI - 0.5 * d_z * d_b + d_z * math.log(K)
    return _assemble(recon, quant.regularizer_value, neg_ent, var_term, constant)


def vmf_sq_loss(V, Zhat, quant: QuantizationOutput, f_dirs, noise, kappa_phi=None,
                per_pixel_normalizer: bool = True) -> ElboBreakdown:
    """vMF SQ-VAE negative ELBO.

    ``V`` and ``f_dirs`` are (..., D, F) with unit rows.  The decoder term is
    -D ln C_F(kappa); ``per_pixel_normalizer=False`` uses a single -ln C_F.
    ``kappa_phi`` is accepted for signature symmetry; the regularizer already
    lives in ``quant.regularizer_value``.
    """
    V, f_dirs = as_tensor(V), as_tensor(f_dirs)
    if V.shape != f_dirs.shape:
        raise ShapeError(f"projections {V.shape} and decoder directions {f_dirs.shape} differ")
    for name, arr in (("V", V.data), ("decoder directions", f_dirs.data)):
        if np.max(np.abs(np.linalg.norm(arr, axis=-1) - 1.0)) > 1e-8:
            raise ShapeError(f"{name} rows must be unit-norm")
    if quant.regularizer_value is None:
        raise ShapeError("quantization output carries no regularizer")
    log_kappa = _noise_tensor(noise)
    D, F = V.shape[-2], V.shape[-1]
    d_z, K = quant.probs.shape[-2], quant.probs.shape[-1]
    kappa = exp(log_kappa)
    cos = tsum(mul(V, f_dirs), axis=(-2, -1))
    recon = scale(mul(cos, kappa), -1.0)
    neg_ent = scale(tsum(quant.entropy_per_position, axis=-1), -1.0)
    factor = float(D) if per_pixel_normalizer else 1.0
    var_term = scale(log_cf(kappa, F), -factor)
    return _assemble(recon, quant.regularizer_value, neg_ent, var_term, d_z * math.log(K))


def nc_sq_loss(x_classes, Zhat, quant: QuantizationOutput, logits) -> ElboBreakdown:
    """Naive-categorical SQ-VAE: softmax cross-entropy decoder, type I regularizer."""
    logits = as_tensor(logits)
    cls = np.asarray(x_classes, dtype=np.int64)
    C = logits.shape[-1]
    if logits.shape[:-1] != cls.shape:
        raise ShapeError(f"logits {logits.shape} do not match classes {cls.shape}")
    if cls.size and (cls.min() < 0 or cls.max() >= C):
        raise ShapeError(f"class index outside [0, {C})")
    if quant.regularizer_value is None:
        raise ShapeError("quantization output carries no regularizer")
    d_z, K = quant.probs.shape[-2], quant.probs.shape[-1]
    d_b = quant.soft_code.shape[-1]
    ce = categorical_cross_entropy(logits, cls)
    neg_ent = scale(tsum(quant.entropy_per_position, axis=-1), -1.0)
    constant = d_z * math.log(K) - 0.5 * d_z * d_b
    return _assemble(ce, quant.regularizer_value, neg_ent, Tensor(0.0), constant)


@dataclass
class VQBreakdown:
    reconstruction: Tensor
    dictionary: Tensor
    commitment: Tensor  # already multiplied by beta
    objective: Tensor

    def values(self) -> dict[str, float]:
        return {k: float(getattr(self, k).data)
                for k in ("reconstruction", "dictionary", "commitment", "objective")}


def vq_loss(x, Zhat, quant: QuantizationOutput, xhat, beta: float = 0.25,
            sigma2: float = 1.0, dictionary_term: bool = True) -> VQBreakdown:
    """||x - f(Z_q)||^2 / 2 sigma^2 + ||sg[Zhat] - Z_q||^2 + beta ||Zhat - sg[Z_q]||^2.

    ``xhat`` must be decoded from ``quant.soft_code`` (straight-through), so the
    reconstruction gradient reaches the encoder and never the codebook.  The
    dictionary term only reaches the codebook; the commitment term only the
    encoder.  ``dictionary_term=False`` drops it (EMA-maintained codebooks).
    """
    if not beta > 0 or not sigma2 > 0:
        raise ShapeError("beta and sigma2 must be > 0")
    if quant.codes is None:
        raise ShapeError("vq_loss needs a deterministic quantization output")
    x, xhat, Zhat = as_tensor(x), as_tensor(xhat), as_tensor(Zhat)
    recon = scale(tsum(square(sub(x, xhat)), axis=-1), 1.0 / (2.0 * sigma2))
    sg_z = Zhat.detach()
    dictionary = tsum(square(sub(sg_z, quant.codes)), axis=(-2, -1))
    commit = scale(tsum(square(sub(Zhat, quant.codes.detach())), axis=(-2, -1)), beta)
    recon, dictionary, commit = _batch_mean(recon), _batch_mean(dictionary), _batch_mean(commit)
    objective = recon + commit
    if dictionary_term:
        objective = objective + dictionary
    return VQBreakdown(recon, dictionary, commit, objective)


def gaussian_kl(mu, var_post) -> Tensor:
    """KL(N(mu, diag(s^2)) || N(0, I)) summed over the last axis."""
    mu, var_post = as_tensor(mu), as_tensor(var_post)
    if np.any(var_post.data <= 0):
        raise ShapeError("posterior variances must be > 0")
    inner = square(mu) + var_post - 1.0 - log(var_post)
    return scale(tsum(inner, axis=-1), 0.5)


def vae_loss(x, mu, var_post, xhat, noise) -> ElboBreakdown:
    """Gaussian VAE: ||x - f(z)||^2 / 2 sigma^2 + (D/2) ln sigma^2 + KL."""
    x, xhat = as_tensor(x), as_tensor(xhat)
    log_s2 = _noise_tensor(noise)
    D = x.shape[-1]
    recon = div(tsum(square(sub(x, xhat)), axis=-1), scale(exp(log_s2), 2.0))
    kl = gaussian_kl(mu, var_post)
    zero = Tensor(np.zeros(kl.shape))
    return _assemble(recon, kl, zero, scale(log_s2, D / 2.0), 0.5 * D * LOG_2PI)


def categorical_cross_entropy(logits, classes) -> Tensor:
    """Per-sample summed cross-entropy; helper shared with evaluation."""
    logits = as_tensor(logits)
    cls = np.asarray(classes, dtype=np.int64)
    onehot = np.zeros(logits.shape)
    np.put_along_axis(onehot, cls[..., None], 1.0, axis=-1)
    return scale(tsum(mul(log_softmax(logits, axis=-1), onehot), axis=(-2, -1)), -1.0)
