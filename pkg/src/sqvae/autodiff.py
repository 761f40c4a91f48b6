"""Small define-by-run reverse-mode autodiff over float64 numpy arrays.

Every differentiable operation goes through :func:`apply_primitive`, which
looks the operation up in ``PRIMITIVES``, runs its forward rule, checks the
result for NaN/Inf and, when any input requires a gradient, links a
:class:`Node` to the output.  :func:`backward` rebuilds the topologically
ordered :class:`Tape` from the root and replays the backward rules once each.
"""

from __future__ import annotations

import contextlib
import math
from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np


class ShapeError(ValueError):
    """Input shapes or attributes violate a primitive's contract."""


class NumericError(ArithmeticError):
    """A primitive produced a non-finite value."""


_GRAD_ENABLED = [True]


@contextlib.contextmanager
def no_grad():
    """Disable node recording inside the block (evaluation passes)."""
    _GRAD_ENABLED.append(False)
    try:
        yield
    finally:
        _GRAD_ENABLED.pop()


def grad_enabled() -> bool:
    return _GRAD_ENABLED[-1]


class Tensor:
    __slots__ = ("data", "requires_grad", "grad", "node", "name", "__weakref__")

    def __init__(self, data, requires_grad: bool = False, name: str | None = None):
        arr = np.asarray(data, dtype=np.float64)
        if arr.base is not None or not arr.flags.writeable:
            arr = arr.copy()
        self.data = arr
        self.requires_grad = bool(requires_grad)
        self.grad: np.ndarray | None = None
        self.node: Node | None = None
        self.name = name

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def size(self) -> int:
        return self.data.size

    def item(self) -> float:
        return float(self.data.reshape(-1)[0]) if self.data.size == 1 else float("nan")

    def numpy(self) -> np.ndarray:
        return self.data

    def detach(self) -> "Tensor":
        """Stop-gradient: same values, no history."""
        return Tensor(self.data)

    def zero_grad(self) -> None:
        self.grad = None

    def __repr__(self) -> str:
        rg = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.shape}{rg})"

    # arithmetic sugar -------------------------------------------------
    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(other, self)

    def __mul__(self, other):
        return mul(self, other)

    __rmul__ = __mul__

    def __truediv__(self, other):
        return div(self, other)

    def __rtruediv__(self, other):
        return div(other, self)

    def __neg__(self):
        return scale(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)

    def sum(self, axis=None, keepdims=False):
        return tsum(self, axis=axis, keepdims=keepdims)

    def mean(self, axis=None, keepdims=False):
        return mean(self, axis=axis, keepdims=keepdims)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    def backward(self) -> dict["Tensor", np.ndarray]:
        return backward(self)


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


@dataclass(eq=False)
class Node:
    """One recorded primitive application."""

    primitive: str
    inputs: tuple[Tensor, ...]
    ctx: dict = field(default_factory=dict)


@dataclass
class Primitive:
    name: str
    forward: Callable[..., tuple[np.ndarray, dict]]
    backward: Callable[[dict, np.ndarray], Sequence[np.ndarray | None]]


PRIMITIVES: dict[str, Primitive] = {}


def primitive(name: str):
    """Register a (forward, backward) pair.  Used as a decorator on a class
    holding two staticmethods."""

    def register(cls):
        PRIMITIVES[name] = Primitive(name, cls.forward, cls.backward)
        return cls

    return register


def apply_primitive(name: str, inputs: Sequence, attrs: dict | None = None) -> Tensor:
    try:
        prim = PRIMITIVES[name]
    except KeyError:
        raise ShapeError(f"unknown primitive {name!r}") from None
    tensors = tuple(as_tensor(x) for x in inputs)
    attrs = attrs or {}
    with np.errstate(all="ignore"):
        out, ctx = prim.forward(*(t.data for t in tensors), **attrs)
    out = np.asarray(out, dtype=np.float64)
    if not np.all(np.isfinite(out)):
        raise NumericError(f"non-finite output from primitive {name!r}")
    result = Tensor(out)
    if grad_enabled() and any(t.requires_grad for t in tensors):
        result.requires_grad = True
        result.node = Node(name, tensors, ctx)
    return result


# ---------------------------------------------------------------------------
# tape and backward


class Tape:
    """Recorded primitive applications in topological order."""

    def __init__(self, nodes: list[Node], outputs: list[Tensor]):
        self.nodes = nodes
        self.outputs = outputs

    def __len__(self) -> int:
        return len(self.nodes)

    @classmethod
    def from_root(cls, root: Tensor) -> "Tape":
        order: list[Tensor] = []
        seen: set[int] = set()
        stack: list[tuple[Tensor, bool]] = [(root, False)]
        while stack:
            t, expanded = stack.pop()
            if expanded:
                order.append(t)
                continue
            if id(t) in seen or t.node is None:
                continue
            seen.add(id(t))
            stack.append((t, True))
            for inp in reversed(t.node.inputs):
                if inp.node is not None and id(inp) not in seen:
                    stack.append((inp, False))
        return cls([t.node for t in order], order)

    def backward(self, root: Tensor) -> dict[Tensor, np.ndarray]:
        if root.size != 1:
            raise ShapeError(f"backward needs a scalar root, got shape {root.shape}")
        grads: dict[int, np.ndarray] = {id(root): np.ones_like(root.data)}
        leaves: dict[int, Tensor] = {}
        for out, node in zip(reversed(self.outputs), reversed(self.nodes)):
            g = grads.pop(id(out), None)
            if g is None:
                continue
            in_grads = PRIMITIVES[node.primitive].backward(node.ctx, g)
            for inp, gi in zip(node.inputs, in_grads):
                if gi is None or not inp.requires_grad:
                    continue
                key = id(inp)
                if inp.node is None:
                    leaves[key] = inp
                if key in grads:
                    grads[key] = grads[key] + gi
                else:
                    grads[key] = np.array(gi, dtype=np.float64)
        result: dict[Tensor, np.ndarray] = {}
        if root.node is None and root.requires_grad:
            leaves[id(root)] = root
        for key, leaf in leaves.items():
            g = grads.get(key)
            if g is None:
                continue
            leaf.grad = g.copy() if leaf.grad is None else leaf.grad + g
            result[leaf] = g
        return result


def backward(root: Tensor) -> dict[Tensor, np.ndarray]:
    """Accumulate d(root)/d(leaf) into ``leaf.grad`` for every reachable leaf.

    Returns the gradient contributed by this call, keyed by leaf tensor.
    """
    if root.size != 1:
        raise ShapeError(f"backward needs a scalar root, got shape {root.shape}")
    return Tape.from_root(root).backward(root)


def _unbroadcast(g: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    if g.shape == shape:
        return g
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    axes = tuple(i for i, n in enumerate(shape) if n == 1 and g.shape[i] != 1)
    if axes:
        g = g.sum(axis=axes, keepdims=True)
    return g.reshape(shape)


def _check_broadcast(*shapes) -> None:
    try:
        np.broadcast_shapes(*shapes)
    except ValueError:
        raise ShapeError(f"shapes {shapes} do not broadcast") from None


# ---------------------------------------------------------------------------
# elementwise


@primitive("add")
class _Add:
    @staticmethod
    def forward(a, b):
        _check_broadcast(a.shape, b.shape)
        return a + b, {"sa": a.shape, "sb": b.shape}

    @staticmethod
    def backward(ctx, g):
        return _unbroadcast(g, ctx["sa"]), _unbroadcast(g, ctx["sb"])


@primitive("subtract")
class _Sub:
    @staticmethod
    def forward(a, b):
        _check_broadcast(a.shape, b.shape)
        return a - b, {"sa": a.shape, "sb": b.shape}

    @staticmethod
    def backward(ctx, g):
        return _unbroadcast(g, ctx["sa"]), _unbroadcast(-g, ctx["sb"])


@primitive("multiply")
class _Mul:
    @staticmethod
    def forward(a, b):
        _check_broadcast(a.shape, b.shape)
        return a * b, {"a": a, "b": b}

    @staticmethod
    def backward(ctx, g):
        a, b = ctx["a"], ctx["b"]
        return _unbroadcast(g * b, a.shape), _unbroadcast(g * a, b.shape)


@primitive("divide")
class _Div:
    @staticmethod
    def forward(a, b):
        _check_broadcast(a.shape, b.shape)
        return a / b, {"a": a, "b": b}

    @staticmethod
    def backward(ctx, g):
        a, b = ctx["a"], ctx["b"]
        return _unbroadcast(g / b, a.shape), _unbroadcast(-g * a / (b * b), b.shape)


@primitive("scale")
class _Scale:
    @staticmethod
    def forward(a, c=1.0):
        return a * c, {"c": c}

    @staticmethod
    def backward(ctx, g):
        return (g * ctx["c"],)


@primitive("square")
class _Square:
    @staticmethod
    def forward(a):
        return a * a, {"a": a}

    @staticmethod
    def backward(ctx, g):
        return (2.0 * ctx["a"] * g,)


@primitive("exp")
class _Exp:
    @staticmethod
    def forward(a):
        out = np.exp(a)
        return out, {"out": out}

    @staticmethod
    def backward(ctx, g):
        return (g * ctx["out"],)


@primitive("log")
class _Log:
    # floor > 0 clamps the argument; the clamped region gets zero gradient
    @staticmethod
    def forward(a, floor=0.0):
        if floor > 0:
            mask = a > floor
            return np.log(np.where(mask, a, floor)), {"a": a, "mask": mask}
        return np.log(a), {"a": a, "mask": None}

    @staticmethod
    def backward(ctx, g):
        a, mask = ctx["a"], ctx["mask"]
        if mask is None:
            return (g / a,)
        return (np.where(mask, g / np.where(mask, a, 1.0), 0.0),)


@primitive("relu")
class _Relu:
    # subgradient at exactly 0 is 0
    @staticmethod
    def forward(a):
        mask = a > 0
        return np.where(mask, a, 0.0), {"mask": mask}

    @staticmethod
    def backward(ctx, g):
        return (np.where(ctx["mask"], g, 0.0),)


@primitive("sigmoid")
class _Sigmoid:
    @staticmethod
    def forward(a):
        out = np.empty_like(a)
        pos = a >= 0
        out[pos] = 1.0 / (1.0 + np.exp(-a[pos]))
        ea = np.exp(a[~pos])
        out[~pos] = ea / (1.0 + ea)
        return out, {"out": out}

    @staticmethod
    def backward(ctx, g):
        s = ctx["out"]
        return (g * s * (1.0 - s),)


# ---------------------------------------------------------------------------
# reductions and normalizations


def _norm_axis(axis, ndim):
    if axis is None:
        return None
    axes = (axis,) if isinstance(axis, int) else tuple(axis)
    out = []
    for ax in axes:
        if not -ndim <= ax < ndim:
            raise ShapeError(f"axis {ax} out of range for ndim {ndim}")
        out.append(ax % ndim)
    return tuple(sorted(out))


@primitive("sum")
class _Sum:
    @staticmethod
    def forward(a, axis=None, keepdims=False):
        axes = _norm_axis(axis, a.ndim)
        return np.sum(a, axis=axes, keepdims=keepdims), {
            "shape": a.shape, "axes": axes, "keepdims": keepdims}

    @staticmethod
    def backward(ctx, g):
        shape, axes = ctx["shape"], ctx["axes"]
        if axes is None:
            return (np.broadcast_to(g.reshape(()) if g.size == 1 else g, shape).copy(),)
        if not ctx["keepdims"]:
            g = np.expand_dims(g, axes)
        return (np.broadcast_to(g, shape).copy(),)


@primitive("mean")
class _Mean:
    @staticmethod
    def forward(a, axis=None, keepdims=False):
        axes = _norm_axis(axis, a.ndim)
        n = a.size if axes is None else math.prod(a.shape[i] for i in axes)
        if n == 0:
            raise ShapeError("mean over an empty axis")
        return np.mean(a, axis=axes, keepdims=keepdims), {
            "shape": a.shape, "axes": axes, "keepdims": keepdims, "n": n}

    @staticmethod
    def backward(ctx, g):
        (gs,) = _Sum.backward(ctx, g)
        return (gs / ctx["n"],)


@primitive("squared_norm")
class _SquaredNorm:
    @staticmethod
    def forward(a, axis=None):
        axes = _norm_axis(axis, a.ndim)
        return np.sum(a * a, axis=axes), {"a": a, "axes": axes}

    @staticmethod
    def backward(ctx, g):
        a, axes = ctx["a"], ctx["axes"]
        if axes is not None:
            g = np.expand_dims(g, axes)
        return (2.0 * a * g,)


@primitive("softmax")
class _Softmax:
    @staticmethod
    def forward(a, axis=-1):
        _norm_axis(axis, a.ndim)
        e = np.exp(a - np.max(a, axis=axis, keepdims=True))
        out = e / np.sum(e, axis=axis, keepdims=True)
        return out, {"out": out, "axis": axis}

    @staticmethod
    def backward(ctx, g):
        s, axis = ctx["out"], ctx["axis"]
        return (s * (g - np.sum(g * s, axis=axis, keepdims=True)),)


@primitive("log_softmax")
class _LogSoftmax:
    @staticmethod
    def forward(a, axis=-1):
        _norm_axis(axis, a.ndim)
        shifted = a - np.max(a, axis=axis, keepdims=True)
        out = shifted - np.log(np.sum(np.exp(shifted), axis=axis, keepdims=True))
        return out, {"out": out, "axis": axis}

    @staticmethod
    def backward(ctx, g):
        out, axis = ctx["out"], ctx["axis"]
        return (g - np.exp(out) * np.sum(g, axis=axis, keepdims=True),)


@primitive("l2_normalize")
class _L2Normalize:
    @staticmethod
    def forward(a, axis=-1, eps=0.0):
        _norm_axis(axis, a.ndim)
        norm = np.sqrt(np.sum(a * a, axis=axis, keepdims=True))
        if np.any(norm <= eps):
            raise NumericError("l2_normalize of a zero-norm row")
        out = a / norm
        return out, {"out": out, "norm": norm, "axis": axis}

    @staticmethod
    def backward(ctx, g):
        y, n, axis = ctx["out"], ctx["norm"], ctx["axis"]
        return ((g - y * np.sum(g * y, axis=axis, keepdims=True)) / n,)


# ---------------------------------------------------------------------------
# linear algebra and shape


@primitive("matmul")
class _Matmul:
    @staticmethod
    def forward(a, b):
        if a.ndim < 2 or b.ndim < 2:
            raise ShapeError("matmul needs operands with ndim >= 2")
        if a.shape[-1] != b.shape[-2]:
            raise ShapeError(f"matmul shapes {a.shape} and {b.shape} do not conform")
        _check_broadcast(a.shape[:-2], b.shape[:-2])
        return a @ b, {"a": a, "b": b}

    @staticmethod
    def backward(ctx, g):
        a, b = ctx["a"], ctx["b"]
        ga = g @ np.swapaxes(b, -1, -2)
        gb = np.swapaxes(a, -1, -2) @ g
        return _unbroadcast(ga, a.shape), _unbroadcast(gb, b.shape)


@primitive("reshape")
class _Reshape:
    @staticmethod
    def forward(a, shape=()):
        try:
            out = a.reshape(shape)
        except ValueError:
            raise ShapeError(f"cannot reshape {a.shape} to {shape}") from None
        return out, {"shape": a.shape}

    @staticmethod
    def backward(ctx, g):
        return (g.reshape(ctx["shape"]),)


@primitive("swapaxes")
class _Swapaxes:
    @staticmethod
    def forward(a, axis1=-1, axis2=-2):
        return np.swapaxes(a, axis1, axis2), {"ax": (axis1, axis2)}

    @staticmethod
    def backward(ctx, g):
        return (np.swapaxes(g, *ctx["ax"]),)


@primitive("broadcast")
class _Broadcast:
    @staticmethod
    def forward(a, shape=()):
        _check_broadcast(a.shape, shape)
        if np.broadcast_shapes(a.shape, shape) != tuple(shape):
            raise ShapeError(f"cannot broadcast {a.shape} to {shape}")
        return np.broadcast_to(a, shape).copy(), {"shape": a.shape}

    @staticmethod
    def backward(ctx, g):
        return (_unbroadcast(g, ctx["shape"]),)


@primitive("gather_rows")
class _GatherRows:
    @staticmethod
    def forward(table, indices=None):
        idx = np.asarray(indices)
        if table.ndim != 2:
            raise ShapeError("gather_rows needs a 2-D table")
        if idx.size and (idx.min() < 0 or idx.max() >= table.shape[0]):
            raise ShapeError("gather_rows index out of range")
        return table[idx], {"idx": idx, "shape": table.shape}

    @staticmethod
    def backward(ctx, g):
        out = np.zeros(ctx["shape"])
        np.add.at(out, ctx["idx"].reshape(-1), g.reshape(-1, ctx["shape"][1]))
        return (out,)


@primitive("concatenate")
class _Concatenate:
    @staticmethod
    def forward(*arrays, axis=0):
        try:
            out = np.concatenate(arrays, axis=axis)
        except ValueError as exc:
            raise ShapeError(str(exc)) from None
        sizes = [a.shape[axis] for a in arrays]
        return out, {"splits": np.cumsum(sizes)[:-1], "axis": axis}

    @staticmethod
    def backward(ctx, g):
        return tuple(np.split(g, ctx["splits"], axis=ctx["axis"]))


@primitive("straight_through")
class _StraightThrough:
    """Forward returns the second operand, backward routes everything to the first."""

    @staticmethod
    def forward(z, zq):
        if z.shape != zq.shape:
            raise ShapeError(f"straight_through shapes {z.shape} != {zq.shape}")
        return zq.copy(), {}

    @staticmethod
    def backward(ctx, g):
        return g, None


# ---------------------------------------------------------------------------
# functional front-ends


def add(a, b):
    return apply_primitive("add", (a, b))


def sub(a, b):
    return apply_primitive("subtract", (a, b))


def mul(a, b):
    return apply_primitive("multiply", (a, b))


def div(a, b):
    return apply_primitive("divide", (a, b))


def scale(a, c: float):
    return apply_primitive("scale", (a,), {"c": float(c)})


def square(a):
    return apply_primitive("square", (a,))


def exp(a):
    return apply_primitive("exp", (a,))


def log(a, floor: float = 0.0):
    return apply_primitive("log", (a,), {"floor": floor})


def relu(a):
    return apply_primitive("relu", (a,))


def sigmoid(a):
    return apply_primitive("sigmoid", (a,))


def tsum(a, axis=None, keepdims=False):
    return apply_primitive("sum", (a,), {"axis": axis, "keepdims": keepdims})


def mean(a, axis=None, keepdims=False):
    return apply_primitive("mean", (a,), {"axis": axis, "keepdims": keepdims})


def squared_norm(a, axis=None):
    return apply_primitive("squared_norm", (a,), {"axis": axis})


def softmax(a, axis=-1):
    return apply_primitive("softmax", (a,), {"axis": axis})


def log_softmax(a, axis=-1):
    return apply_primitive("log_softmax", (a,), {"axis": axis})


def l2_normalize(a, axis=-1):
    return apply_primitive("l2_normalize", (a,), {"axis": axis})


def matmul(a, b):
    return apply_primitive("matmul", (a, b))


def reshape(a, shape):
    return apply_primitive("reshape", (a,), {"shape": tuple(shape)})


def swapaxes(a, axis1=-1, axis2=-2):
    return apply_primitive("swapaxes", (a,), {"axis1": axis1, "axis2": axis2})


def broadcast(a, shape):
    return apply_primitive("broadcast", (a,), {"shape": tuple(shape)})


def gather_rows(table, indices):
    return apply_primitive("gather_rows", (table,), {"indices": np.asarray(indices)})


def concatenate(tensors, axis=0):
    return apply_primitive("concatenate", tuple(tensors), {"axis": axis})


def straight_through(z, zq):
    return apply_primitive("straight_through", (z, zq))


# ---------------------------------------------------------------------------


def finite_difference_check(f: Callable[[Tensor], Tensor], x, h: float = 1e-6) -> float:
    """Max over coordinates of |analytic - central difference| / max(1, |analytic|)."""
    x0 = np.array(as_tensor(x).data, dtype=np.float64)
    leaf = Tensor(x0, requires_grad=True)
    out = f(leaf)
    backward(out)
    analytic = np.zeros_like(x0) if leaf.grad is None else leaf.grad
    worst = 0.0
    with no_grad():
        for i in np.ndindex(x0.shape):
            xp, xm = x0.copy(), x0.copy()
            xp[i] += h
            xm[i] -= h
            fp = float(f(Tensor(xp)).data.reshape(-1)[0])
            fm = float(f(Tensor(xm)).data.reshape(-1)[0])
            if not (math.isfinite(fp) and math.isfinite(fm)):
                raise NumericError(f"non-finite function value at probe {i}")
            numeric = (fp - fm) / (2.0 * h)
            err = abs(analytic[i] - numeric) / max(1.0, abs(analytic[i]))
            worst = max(worst, err)
    return worst
