"""Stochastic quantization P(z_q,i = b_k | Z), its Gumbel-softmax relaxation,
the deterministic nearest-code quantizer and the analytic entropy /
regularization terms."""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .autodiff import (
    ShapeError,
    Tensor,
    as_tensor,
    div,
    gather_rows,
    log,
    matmul,
    mul,
    scale,
    softmax,
    square,
    straight_through,
    sub,
    tsum,
)
from .codebook import Codebook, gaussian_scores, nearest_codes, vmf_scores
from .variance import VarianceParam

PROB_FLOOR = 1e-12


@dataclass
class TemperatureSchedule:
    rate: float = 1e-5
    floor: float = 0.1
    sign: float = -1.0  # +1 reproduces the literal exp(+rate * t) display


def temperature(t: int, sched: TemperatureSchedule | None = None) -> float:
    sched = sched or TemperatureSchedule()
    if t < 0:
        raise ShapeError("global step must be >= 0")
    return max(sched.floor, math.exp(sched.sign * sched.rate * t))


@dataclass
class QuantizationOutput:
    probs: Tensor
    soft_code: Tensor
    hard_indices: np.ndarray
    entropy_per_position: Tensor
    regularizer_value: Tensor | None = None
    codes: Tensor | None = None  # selected codebook rows with gradient to B (VQ only)
    scores: Tensor | None = None


def scores(Z, cb: Codebook, var: VarianceParam) -> Tensor:
    if var.kind == "vmf":
        return vmf_scores(Z, cb, var)
    return gaussian_scores(Z, cb, var)


def quantize_probs(Z, cb: Codebook, var: VarianceParam) -> Tensor:
    return softmax(scores(Z, cb, var), axis=-1)


def gumbel_softmax_sample(probs, tau: float, rng: np.random.Generator | None = None,
                          gumbel: np.ndarray | None = None) -> Tensor:
    """Relaxed one-hot sample softmax((ln p + g) / tau).

    ``gumbel`` overrides the noise draw (for gradient checks); otherwise
    standard Gumbel noise comes from ``rng``.  ln p is floored at ln 1e-12.
    """
    probs = as_tensor(probs)
    if not tau > 0:
        raise ShapeError("temperature must be > 0")
    if gumbel is None:
        if rng is None:
            raise ShapeError("need an rng or explicit gumbel noise")
        gumbel = rng.gumbel(size=probs.shape)
    return softmax(scale(log(probs, floor=PROB_FLOOR) + gumbel, 1.0 / tau), axis=-1)


def analytic_entropy(probs) -> Tensor:
    """Exact -sum_k p ln p over the last axis (0 ln 0 := 0)."""
    probs = as_tensor(probs)
    return scale(tsum(mul(probs, log(probs, floor=PROB_FLOOR)), axis=-1), -1.0)


def regularizer(Z, Zq, var: VarianceParam) -> Tensor:
    """Per-sample latent penalty; sums over positions (and code dims).

    Gaussian kinds: sum (z - z_q)^2 / (2 sigma^2) with the kind's broadcasting.
    vMF: sum_i kappa_phi (1 - z_q,i^T z_i).
    """
    Z, Zq = as_tensor(Z), as_tensor(Zq)
    if Z.shape != Zq.shape:
        raise ShapeError(f"regularizer shapes {Z.shape} != {Zq.shape}")
    if var.kind == "vmf":
        cos = tsum(mul(Z, Zq), axis=-1)
        return tsum(mul(1.0 - cos, var.value()), axis=-1)
    if not var.is_gaussian:
        raise ShapeError(f"no regularizer for variance kind {var.kind}")
    quad = div(square(sub(Z, Zq)), var.for_latents())
    return scale(tsum(quad, axis=(-2, -1)), 0.5)


def expected_regularizer(score_matrix, probs, var: VarianceParam) -> Tensor:
    """E over the categorical of the regularizer, exactly from probs.

    Every Gaussian kind's penalty for assignment k is -score_k, and the vMF
    penalty is kappa_phi - score_k, so the expectation is linear in probs.
    """
    neg = scale(tsum(mul(as_tensor(probs), score_matrix), axis=(-2, -1)), -1.0)
    if var.kind == "vmf":
        d_z = score_matrix.shape[-2]
        return neg + mul(var.value(), float(d_z))
    return neg


def stochastic_quantize(Z, cb: Codebook, var: VarianceParam, tau: float,
                        rng: np.random.Generator | None = None,
                        gumbel: np.ndarray | None = None,
                        hard: bool = False) -> QuantizationOutput:
    """Quantize with one relaxed categorical sample per position.

    ``hard=True`` decodes the argmax assignment instead (evaluation).
    """
    Z = as_tensor(Z)
    s = scores(Z, cb, var)
    probs = softmax(s, axis=-1)
    ent = analytic_entropy(probs)
    if var.kind in ("I", "II", "III", "fixed"):
        # isotropic: the argmax is the nearest code; reuse its distance arithmetic
        # so near-ties resolve exactly as in deterministic_quantize
        idx = nearest_codes(Z.data, cb.entries.data)
    else:
        idx = np.argmax(s.data, axis=-1)
    if hard:
        soft = gather_rows(cb.entries, idx)
    else:
        y = gumbel_softmax_sample(probs, tau, rng, gumbel)
        soft = matmul(y, cb.entries)
    reg = regularizer(Z, soft, var)
    return QuantizationOutput(probs, soft, idx, ent, reg, scores=s)


def deterministic_quantize(Z, cb: Codebook) -> QuantizationOutput:
    """Nearest-code assignment with a straight-through decoder input.

    ``soft_code`` carries the selected codes forward and passes its gradient
    to ``Z`` unchanged; ``codes`` is the same selection with gradient to the
    codebook (for the dictionary term).
    """
    Z = as_tensor(Z)
    if Z.shape[-1] != cb.d_b:
        raise ShapeError(f"latents {Z.shape} do not match code dim {cb.d_b}")
    idx = nearest_codes(Z.data, cb.entries.data)
    codes = gather_rows(cb.entries, idx)
    soft = straight_through(Z, codes.detach())
    onehot = np.zeros(idx.shape + (cb.K,))
    np.put_along_axis(onehot, idx[..., None], 1.0, axis=-1)
    probs = Tensor(onehot)
    return QuantizationOutput(probs, soft, idx, Tensor(np.zeros(idx.shape)), None, codes)
