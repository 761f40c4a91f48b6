"""Fully-connected encoders/decoders, variance heads and category projections."""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .autodiff import (
    ShapeError,
    Tensor,
    as_tensor,
    l2_normalize,
    matmul,
    mul,
    relu,
    reshape,
    sigmoid,
    softmax,
    swapaxes,
)

OUTPUT_ACTIVATIONS = ("identity", "sigmoid", "l2_normalize")


class Mlp:
    """Dense layers with relu hidden units.

    Weights ~ Normal(0, 2/fan_in) on relu layers and Normal(0, 1/fan_in) on the
    output layer; biases start at 0.
    """

    def __init__(self, dims, rng: np.random.Generator, out_activation: str = "identity",
                 name: str = "mlp"):
        dims = [int(d) for d in dims]
        if len(dims) < 2 or min(dims) < 1:
            raise ShapeError(f"bad layer dims {dims}")
        if out_activation not in OUTPUT_ACTIVATIONS:
            raise ShapeError(f"unknown output activation {out_activation!r}")
        self.dims = dims
        self.out_activation = out_activation
        self.name = name
        self.weights: list[Tensor] = []
        self.biases: list[Tensor] = []
        last = len(dims) - 2
        for i, (fan_in, fan_out) in enumerate(zip(dims[:-1], dims[1:])):
            std = math.sqrt((1.0 if i == last else 2.0) / fan_in)
            self.weights.append(Tensor(rng.normal(0.0, std, size=(fan_in, fan_out)),
                                       requires_grad=True, name=f"{name}.{i}.W"))
            self.biases.append(Tensor(np.zeros(fan_out), requires_grad=True,
                                      name=f"{name}.{i}.b"))

    def parameters(self) -> dict[str, Tensor]:
        out = {}
        for w, b in zip(self.weights, self.biases):
            out[w.name] = w
            out[b.name] = b
        return out

    def hidden(self, x) -> Tensor:
        """Activations of the last hidden layer (input to the output layer)."""
        h = as_tensor(x)
        if h.shape[-1] != self.dims[0]:
            raise ShapeError(f"{self.name}: input width {h.shape[-1]} != {self.dims[0]}")
        for w, b in zip(self.weights[:-1], self.biases[:-1]):
            h = relu(matmul(h, w) + b)
        return h

    def output(self, h) -> Tensor:
        out = matmul(h, self.weights[-1]) + self.biases[-1]
        if self.out_activation == "sigmoid":
            return sigmoid(out)
        if self.out_activation == "l2_normalize":
            return l2_normalize(out, axis=-1)
        return out

    def __call__(self, x) -> Tensor:
        return self.output(self.hidden(x))


def _as_matrix(x: Tensor) -> Tensor:
    return x if x.ndim >= 2 else reshape(x, (1,) + x.shape)


class Encoder:
    """x -> Zhat of shape (N, d_z, d_b), plus an optional log-variance head.

    The head (types II-IV) reads the trunk's last hidden layer and emits a
    log-variance per sample (II), per position (III) or per position and
    dimension (IV).  ``unit_rows`` L2-normalizes each latent row (vMF).
    """

    HEAD_WIDTH = {"II": lambda d_z, d_b: 1, "III": lambda d_z, d_b: d_z,
                  "IV": lambda d_z, d_b: d_z * d_b}

    def __init__(self, D_in: int, d_z: int, d_b: int, rng, hidden=(256, 128),
                 head: str | None = None, unit_rows: bool = False):
        self.d_z, self.d_b = d_z, d_b
        self.unit_rows = unit_rows
        self.trunk = Mlp([D_in, *hidden, d_z * d_b], rng, "identity", "enc")
        self.head_kind = head
        self.head = None
        if head is not None:
            if head not in self.HEAD_WIDTH:
                raise ShapeError(f"no variance head for kind {head!r}")
            self.head = Mlp([hidden[-1], self.HEAD_WIDTH[head](d_z, d_b)], rng,
                            "identity", "head")
            # zero head: every variance starts at exactly 1 and still gets gradient
            self.head.weights[0].data[...] = 0.0

    def parameters(self) -> dict[str, Tensor]:
        out = self.trunk.parameters()
        if self.head is not None:
            out.update(self.head.parameters())
        return out

    def __call__(self, x) -> tuple[Tensor, Tensor | None]:
        x = _as_matrix(as_tensor(x))
        n = x.shape[0]
        h = self.trunk.hidden(x)
        z = reshape(self.trunk.output(h), (n, self.d_z, self.d_b))
        if self.unit_rows:
            z = l2_normalize(z, axis=-1)
        log_var = None
        if self.head is not None:
            raw = self.head.output(h)
            shape = {"II": (n,), "III": (n, self.d_z), "IV": (n, self.d_z, self.d_b)}
            log_var = reshape(raw, shape[self.head_kind])
        return z, log_var


class GaussianDecoder:
    """Z_q (N, d_z, d_b) -> pixel means in (0, 1), shape (N, D)."""

    def __init__(self, d_in: int, D: int, rng, hidden=(128, 256)):
        self.d_in = d_in
        self.net = Mlp([d_in, *hidden, D], rng, "sigmoid", "dec")

    def parameters(self):
        return self.net.parameters()

    def __call__(self, Zq) -> Tensor:
        Zq = as_tensor(Zq)
        n = Zq.shape[0] if Zq.ndim == 3 else 1
        return self.net(reshape(Zq, (n, self.d_in)))


class CategoricalDecoder:
    """Z_q -> class logits of shape (N, D, C)."""

    def __init__(self, d_in: int, D: int, C: int, rng, hidden=(128, 256)):
        self.d_in, self.D, self.C = d_in, D, C
        self.net = Mlp([d_in, *hidden, D * C], rng, "identity", "dec")

    def parameters(self):
        return self.net.parameters()

    def __call__(self, Zq) -> Tensor:
        Zq = as_tensor(Zq)
        n = Zq.shape[0] if Zq.ndim == 3 else 1
        return reshape(self.net(reshape(Zq, (n, self.d_in))), (n, self.D, self.C))


class VmfDecoder:
    """Z_q -> unit mean directions of shape (N, D, F)."""

    def __init__(self, d_in: int, D: int, F: int, rng, hidden=(128, 256)):
        self.d_in, self.D, self.F = d_in, D, F
        self.net = Mlp([d_in, *hidden, D * F], rng, "identity", "dec")

    def parameters(self):
        return self.net.parameters()

    def __call__(self, Zq) -> Tensor:
        Zq = as_tensor(Zq)
        n = Zq.shape[0] if Zq.ndim == 3 else 1
        raw = reshape(self.net(reshape(Zq, (n, self.d_in))), (n, self.D, self.F))
        return l2_normalize(raw, axis=-1)


def vmf_class_probs(f_dirs, kappa, proj: "CategoryProjection") -> Tensor:
    """softmax_c(kappa * w_c^T f_d) over the categories."""
    w = Tensor(proj.w)
    logits = mul(matmul(as_tensor(f_dirs), swapaxes(w, 0, 1)), as_tensor(kappa))
    return softmax(logits, axis=-1)


@dataclass
class CategoryProjection:
    """Fixed unit vectors w_c placing the data categories on a sphere.

    ``one_hot``: w_c = e_c (F = L).  ``circle``: w_c = [cos(pi c / L), sin(pi c / L)]
    for c in [0, L), i.e. the half circle, keeping neighbouring levels adjacent.
    """

    w: np.ndarray
    mode: str

    @classmethod
    def build(cls, L: int, mode: str = "one_hot") -> "CategoryProjection":
        if L < 2:
            raise ShapeError("need at least two categories")
        if mode == "one_hot":
            return cls(np.eye(L), mode)
        if mode == "circle":
            alpha = np.pi / L * np.arange(L)
            return cls(np.stack([np.cos(alpha), np.sin(alpha)], axis=1), mode)
        raise ShapeError(f"unknown projection mode {mode!r}")

    @property
    def L(self) -> int:
        return self.w.shape[0]

    @property
    def F(self) -> int:
        return self.w.shape[1]

    def classify(self, V: np.ndarray) -> np.ndarray:
        """Nearest projection (largest cosine) per row."""
        return np.argmax(np.asarray(V) @ self.w.T, axis=-1)


def project_data(x, proj: CategoryProjection) -> np.ndarray:
    cls = np.asarray(x, dtype=np.int64)
    if cls.size and (cls.min() < 0 or cls.max() >= proj.L):
        raise ShapeError(f"class index outside [0, {proj.L})")
    return proj.w[cls]


def one_hot(x, L: int) -> np.ndarray:
    cls = np.asarray(x, dtype=np.int64)
    if cls.size and (cls.min() < 0 or cls.max() >= L):
        raise ShapeError(f"class index outside [0, {L})")
    return np.eye(L)[cls]
