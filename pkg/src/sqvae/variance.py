"""Dequantization spread parameters: Gaussian variance types I-IV, vMF
concentration, fixed variance and the deterministic (nearest-code) limit."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .autodiff import ShapeError, Tensor, as_tensor, exp, reshape

GAUSSIAN_KINDS = ("I", "II", "III", "IV")
KINDS = GAUSSIAN_KINDS + ("vmf", "fixed", "deterministic")


@dataclass
class VarianceParam:
    """Spread of the dequantization density.

    ``log_value`` shapes (with ``batch`` the leading sample axes):

    ====  ==========================  =================================
    kind  log_value shape             meaning
    ====  ==========================  =================================
    I     ()                          one shared variance
    II    batch                       one variance per sample
    III   batch + (d_z,)              one variance per latent position
    IV    batch + (d_z, d_b)          diagonal covariance per position
    vmf   ()                          shared concentration kappa_phi
    ====  ==========================  =================================

    ``fixed`` carries a constant ``fixed_value`` (sigma_q^2) and no gradient.
    """

    kind: str
    log_value: Tensor | None = None
    fixed_value: float | None = None

    def __post_init__(self):
        if self.kind not in KINDS:
            raise ShapeError(f"unknown variance kind {self.kind!r}")
        if self.kind == "fixed":
            if self.fixed_value is None or not self.fixed_value > 0:
                raise ShapeError("fixed variance must be > 0")
        elif self.kind != "deterministic":
            if self.log_value is None:
                raise ShapeError(f"kind {self.kind} needs log_value")
            self.log_value = as_tensor(self.log_value)
            want = {"I": 0, "vmf": 0}.get(self.kind)
            if want is not None and self.log_value.ndim != 0:
                raise ShapeError(f"kind {self.kind} takes a scalar log_value")

    @classmethod
    def from_values(cls, kind: str, values) -> "VarianceParam":
        """Build from plain (already exponentiated) variances; used by tests
        and by callers that hold raw numbers."""
        if kind == "fixed":
            return cls("fixed", fixed_value=float(values))
        arr = np.asarray(values, dtype=np.float64)
        if np.any(arr <= 0):
            raise ShapeError("variance / concentration must be > 0")
        return cls(kind, Tensor(np.log(arr)))

    @property
    def is_gaussian(self) -> bool:
        return self.kind in GAUSSIAN_KINDS or self.kind == "fixed"

    def value(self) -> Tensor:
        """Realized variance (or concentration) as a tensor."""
        if self.kind == "fixed":
            return Tensor(self.fixed_value)
        if self.kind == "deterministic":
            raise ShapeError("deterministic quantization has no variance")
        v = exp(self.log_value)
        if np.any(v.data <= 0):
            raise ShapeError("realized variance underflowed to 0")
        return v

    def for_latents(self) -> Tensor:
        """Variance reshaped to broadcast against latents (..., d_z, d_b)."""
        v = self.value()
        if self.kind in ("I", "fixed", "vmf"):
            return v
        if self.kind == "II":
            return reshape(v, v.shape + (1, 1))
        if self.kind == "III":
            return reshape(v, v.shape + (1,))
        return v

    def for_scores(self) -> Tensor:
        """Variance reshaped to broadcast against (..., d_z, K, d_b)."""
        v = self.value()
        if self.kind in ("I", "fixed", "vmf"):
            return v
        if self.kind == "II":
            return reshape(v, v.shape + (1, 1, 1))
        if self.kind == "III":
            return reshape(v, v.shape + (1, 1))
        return reshape(v, v.shape[:-1] + (1, v.shape[-1]))

    def summary(self) -> float:
        """Scalar for logging: the value itself for scalar kinds, the mean otherwise."""
        if self.kind == "fixed":
            return float(self.fixed_value)
        if self.kind == "deterministic":
            return float("nan")
        return float(np.mean(np.exp(self.log_value.data)))
