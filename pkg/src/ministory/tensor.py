"""Reverse-mode autodiff over float32 numpy arrays.

Every differentiable operation records its inputs and a backward closure on
the result node; `backward` walks the recorded graph in reverse topological
order. Storage is float32 throughout, while reductions (matmul inner
products, means, normalization statistics) accumulate in float64 before
rounding back, which keeps results reproducible without giving up float32
storage semantics.

Shape discipline is strict: elementwise ops demand exactly equal shapes, and
the only broadcasting in the package goes through `add_broadcast`, whose
operand must already be expanded to the same rank with explicit size-1 axes.
"""

from __future__ import annotations

import contextlib
import math
from typing import Callable, Iterable, Sequence

import numpy as np


class DimensionError(ValueError):
    """Operand shapes do not satisfy an operation's contract."""


class ContractError(ValueError):
    """A non-shape precondition was violated."""


_grad_enabled = True
_check_finite = False


@contextlib.contextmanager
def no_grad():
    """Disable graph recording inside the block (pure forward compute)."""
    global _grad_enabled
    prev = _grad_enabled
    _grad_enabled = False
    try:
        yield
    finally:
        _grad_enabled = prev


def set_debug_finite(flag: bool) -> None:
    """When on, every op asserts its output is free of NaN/Inf."""
    global _check_finite
    _check_finite = bool(flag)


def _as_f32(data) -> np.ndarray:
    arr = np.asarray(data, dtype=np.float32)
    return arr


class Tensor:
    """A float32 array plus the bookkeeping reverse mode needs."""

    __slots__ = ("data", "grad", "requires_grad", "_backward", "_parents")

    def __init__(self, data, requires_grad: bool = False) -> None:
        self.data = _as_f32(data)
        self.grad: np.ndarray | None = None
        self.requires_grad = bool(requires_grad)
        self._backward: Callable[[], None] | None = None
        self._parents: tuple[Tensor, ...] = ()

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    def numpy(self) -> np.ndarray:
        return self.data

    def detach(self) -> "Tensor":
        return Tensor(self.data.copy())

    def _accumulate(self, g: np.ndarray) -> None:
        if self.grad is None:
            self.grad = np.zeros_like(self.data)
        self.grad += g.astype(np.float32)

    def zero_grad(self) -> None:
        self.grad = None

    def __repr__(self) -> str:
        return f"Tensor(shape={self.shape}, requires_grad={self.requires_grad})"

    # Operator sugar; the module-level functions carry the contracts.
    def __add__(self, other: "Tensor") -> "Tensor":
        return add(self, other)

    def __sub__(self, other: "Tensor") -> "Tensor":
        return sub(self, other)

    def __mul__(self, other: "Tensor") -> "Tensor":
        return mul(self, other)

    def __matmul__(self, other: "Tensor") -> "Tensor":
        return matmul(self, other)

    def __neg__(self) -> "Tensor":
        return scale(self, -1.0)

    def reshape(self, shape: Sequence[int]) -> "Tensor":
        return reshape(self, shape)

    def transpose(self, axes: Sequence[int]) -> "Tensor":
        return transpose(self, axes)


def _node(
    out_data: np.ndarray,
    parents: tuple[Tensor, ...],
    backward: Callable[[Tensor], Callable[[], None]] | None,
) -> Tensor:
    """Wrap op output; record graph edges only while grads are enabled."""
    if _check_finite and not np.all(np.isfinite(out_data)):
        raise FloatingPointError("non-finite values produced by an operation")
    out = Tensor(out_data)
    if _grad_enabled and any(p.requires_grad for p in parents):
        out.requires_grad = True
        out._parents = parents
        out._backward = backward(out)
    return out


def _require_same_shape(a: Tensor, b: Tensor, op: str) -> None:
    if a.shape != b.shape:
        raise DimensionError(
            f"{op} requires equal shapes, got {a.shape} and {b.shape}"
        )


def add(a: Tensor, b: Tensor) -> Tensor:
    _require_same_shape(a, b, "add")

    def bw(out: Tensor):
        def run():
            g = out.grad
            if a.requires_grad:
                a._accumulate(g)
            if b.requires_grad:
                b._accumulate(g)

        return run

    return _node(a.data + b.data, (a, b), bw)


def sub(a: Tensor, b: Tensor) -> Tensor:
    _require_same_shape(a, b, "sub")

    def bw(out: Tensor):
        def run():
            g = out.grad
            if a.requires_grad:
                a._accumulate(g)
            if b.requires_grad:
                b._accumulate(-g)

        return run

    return _node(a.data - b.data, (a, b), bw)


def mul(a: Tensor, b: Tensor) -> Tensor:
    _require_same_shape(a, b, "mul")

    def bw(out: Tensor):
        def run():
            g = out.grad
            if a.requires_grad:
                a._accumulate(g * b.data)
            if b.requires_grad:
                b._accumulate(g * a.data)

        return run

    return _node(a.data * b.data, (a, b), bw)


def scale(a: Tensor, s: float) -> Tensor:
    s = float(s)

    def bw(out: Tensor):
        def run():
            if a.requires_grad:
                a._accumulate(out.grad * np.float32(s))

        return run

    return _node(a.data * np.float32(s), (a,), bw)


def add_broadcast(x: Tensor, v: Tensor) -> Tensor:
    """x + v where v has the same rank and each axis is equal or 1.

    The deliberate escape hatch from strict shape equality: positional
    embeddings ([1, N, C] onto [B, N, C]) and per-example conditioning
    vectors ([B, 1, C]) are added through here, with the summed-out axes
    explicit in v's shape.
    """
    if x.ndim != v.ndim:
        raise DimensionError(
            f"add_broadcast requires equal rank, got {x.shape} and {v.shape}"
        )
    reduce_axes = []
    for i, (xd, vd) in enumerate(zip(x.shape, v.shape)):
        if vd == xd:
            continue
        if vd == 1:
            reduce_axes.append(i)
        else:
            raise DimensionError(
                f"add_broadcast axis {i} must match or be 1, "
                f"got {x.shape} and {v.shape}"
            )
    axes = tuple(reduce_axes)

    def bw(out: Tensor):
        def run():
            g = out.grad
            if x.requires_grad:
                x._accumulate(g)
            if v.requires_grad:
                gv = g.astype(np.float64).sum(axis=axes, keepdims=True) if axes else g
                v._accumulate(np.asarray(gv, dtype=np.float32))

        return run

    return _node(x.data + v.data, (x, v), bw)


def matmul(a: Tensor, b: Tensor) -> Tensor:
    """Matrix product on the trailing two axes, float64 accumulation.

    Allowed operand ranks: equal-rank stacks with identical leading axes, or
    a 2D right operand applied to every row block of a higher-rank left
    operand (the weight-application case). No other broadcasting.
    """
    if a.ndim < 2 or b.ndim < 2:
        raise DimensionError(
            f"matmul requires rank >= 2 operands, got {a.shape} and {b.shape}"
        )
    if a.shape[-1] != b.shape[-2]:
        raise DimensionError(
            f"matmul inner dims differ: {a.shape} and {b.shape}"
        )
    if a.ndim == b.ndim:
        if a.shape[:-2] != b.shape[:-2]:
            raise DimensionError(
                f"matmul stack dims differ: {a.shape} and {b.shape}"
            )
    elif b.ndim != 2:
        raise DimensionError(
            f"matmul rank mix not supported: {a.shape} and {b.shape}"
        )

    a64 = a.data.astype(np.float64)
    b64 = b.data.astype(np.float64)
    out_data = np.matmul(a64, b64).astype(np.float32)

    def bw(out: Tensor):
        def run():
            g = out.grad.astype(np.float64)
            if a.requires_grad:
                da = np.matmul(g, b64.swapaxes(-1, -2) if b.ndim > 2 else b64.T)
                a._accumulate(da.astype(np.float32))
            if b.requires_grad:
                if b.ndim == 2 and a.ndim > 2:
                    k, m = a.shape[-1], out.shape[-1]
                    db = a64.reshape(-1, k).T @ g.reshape(-1, m)
                else:
                    db = np.matmul(a64.swapaxes(-1, -2), g)
                b._accumulate(db.astype(np.float32))

        return run

    return _node(out_data, (a, b), bw)


def reshape(x: Tensor, shape: Sequence[int]) -> Tensor:
    shape = tuple(int(s) for s in shape)
    try:
        out_data = x.data.reshape(shape)
    except ValueError as exc:
        raise DimensionError(f"cannot reshape {x.shape} to {shape}") from exc

    def bw(out: Tensor):
        def run():
            if x.requires_grad:
                x._accumulate(out.grad.reshape(x.shape))

        return run

    return _node(out_data, (x,), bw)


def transpose(x: Tensor, axes: Sequence[int]) -> Tensor:
    axes = tuple(int(a) for a in axes)
    if sorted(axes) != list(range(x.ndim)):
        raise DimensionError(f"axes {axes} is not a permutation for {x.shape}")
    inv = tuple(int(i) for i in np.argsort(axes))

    def bw(out: Tensor):
        def run():
            if x.requires_grad:
                x._accumulate(out.grad.transpose(inv))

        return run

    return _node(np.ascontiguousarray(x.data.transpose(axes)), (x,), bw)


def concat(tensors: Sequence[Tensor], axis: int = 0) -> Tensor:
    if not tensors:
        raise ContractError("concat requires at least one tensor")
    ndim = tensors[0].ndim
    if axis < 0:
        axis += ndim
    if not 0 <= axis < ndim:
        raise DimensionError(f"concat axis {axis} out of range for rank {ndim}")
    for t in tensors:
        if t.ndim != ndim:
            raise DimensionError(
                f"concat rank mismatch: {[t.shape for t in tensors]}"
            )
    ref = list(tensors[0].shape)
    for t in tensors[1:]:
        other = list(t.shape)
        ref_rest = ref[:axis] + ref[axis + 1 :]
        other_rest = other[:axis] + other[axis + 1 :]
        if ref_rest != other_rest:
            raise DimensionError(
                f"concat non-axis dims differ: {[t.shape for t in tensors]}"
            )
    sizes = [t.shape[axis] for t in tensors]
    offsets = np.cumsum([0] + sizes)

    def bw(out: Tensor):
        def run():
            g = out.grad
            for t, lo, hi in zip(tensors, offsets[:-1], offsets[1:]):
                if t.requires_grad:
                    idx = [slice(None)] * g.ndim
                    idx[axis] = slice(int(lo), int(hi))
                    t._accumulate(g[tuple(idx)])

        return run

    return _node(
        np.concatenate([t.data for t in tensors], axis=axis), tuple(tensors), bw
    )


def stack(tensors: Sequence[Tensor], axis: int = 0) -> Tensor:
    if not tensors:
        raise ContractError("stack requires at least one tensor")
    shape = tensors[0].shape
    for t in tensors:
        if t.shape != shape:
            raise DimensionError(
                f"stack shape mismatch: {[t.shape for t in tensors]}"
            )

    def bw(out: Tensor):
        def run():
            g = out.grad
            for i, t in enumerate(tensors):
                if t.requires_grad:
                    t._accumulate(np.take(g, i, axis=axis))

        return run

    return _node(
        np.stack([t.data for t in tensors], axis=axis), tuple(tensors), bw
    )


def gather(x: Tensor, indices) -> Tensor:
    """Select rows along axis 0; duplicate indices are allowed.

    Backward scatter-adds into the source, so repeated rows (a prompt token
    used twice, a token sampled into several windows) accumulate correctly.
    """
    idx = np.asarray(indices, dtype=np.int64)
    if idx.ndim != 1:
        raise DimensionError(f"gather indices must be 1-D, got {idx.shape}")
    if idx.size and (idx.min() < 0 or idx.max() >= x.shape[0]):
        raise ContractError(
            f"gather index out of range for axis 0 of size {x.shape[0]}"
        )

    def bw(out: Tensor):
        def run():
            if x.requires_grad:
                gx = np.zeros_like(x.data)
                np.add.at(gx, idx, out.grad)
                x._accumulate(gx)

        return run

    return _node(x.data[idx], (x,), bw)


def softmax(x: Tensor, axis: int = -1) -> Tensor:
    """Max-shifted exponent normalization along `axis`, float64 inside."""
    if not -x.ndim <= axis < x.ndim:
        raise DimensionError(f"softmax axis {axis} out of range for {x.shape}")
    x64 = x.data.astype(np.float64)
    shifted = x64 - x64.max(axis=axis, keepdims=True)
    e = np.exp(shifted)
    y64 = e / e.sum(axis=axis, keepdims=True)
    y = y64.astype(np.float32)

    def bw(out: Tensor):
        def run():
            if x.requires_grad:
                g = out.grad.astype(np.float64)
                dot = (g * y64).sum(axis=axis, keepdims=True)
                x._accumulate((y64 * (g - dot)).astype(np.float32))

        return run

    return _node(y, (x,), bw)


def layernorm(x: Tensor, gain: Tensor, bias: Tensor, eps: float = 1e-5) -> Tensor:
    """Normalize the last axis to zero mean, unit variance; trailing affine."""
    c = x.shape[-1]
    if gain.shape != (c,) or bias.shape != (c,):
        raise DimensionError(
            f"layernorm affine must be shape ({c},), got {gain.shape} "
            f"and {bias.shape}"
        )
    x64 = x.data.astype(np.float64)
    mu = x64.mean(axis=-1, keepdims=True)
    centered = x64 - mu
    var = (centered * centered).mean(axis=-1, keepdims=True)
    inv_std = 1.0 / np.sqrt(var + eps)
    xhat = centered * inv_std
    out_data = (xhat * gain.data + bias.data).astype(np.float32)

    def bw(out: Tensor):
        def run():
            g = out.grad.astype(np.float64)
            if gain.requires_grad:
                gg = (g * xhat).reshape(-1, c).sum(axis=0)
                gain._accumulate(gg.astype(np.float32))
            if bias.requires_grad:
                gb = g.reshape(-1, c).sum(axis=0)
                bias._accumulate(gb.astype(np.float32))
            if x.requires_grad:
                gh = g * gain.data.astype(np.float64)
                mean_gh = gh.mean(axis=-1, keepdims=True)
                mean_gh_xhat = (gh * xhat).mean(axis=-1, keepdims=True)
                dx = inv_std * (gh - mean_gh - xhat * mean_gh_xhat)
                x._accumulate(dx.astype(np.float32))

        return run

    return _node(out_data, (x, gain, bias), bw)


_GELU_C = math.sqrt(2.0 / math.pi)


def gelu(x: Tensor) -> Tensor:
    """Gaussian error linear unit (tanh form); smooth everywhere."""
    x64 = x.data.astype(np.float64)
    inner = _GELU_C * (x64 + 0.044715 * x64**3)
    t = np.tanh(inner)
    out_data = (0.5 * x64 * (1.0 + t)).astype(np.float32)

    def bw(out: Tensor):
        def run():
            if x.requires_grad:
                sech2 = 1.0 - t * t
                d_inner = _GELU_C * (1.0 + 3 * 0.044715 * x64 * x64)
                dx = 0.5 * (1.0 + t) + 0.5 * x64 * sech2 * d_inner
                x._accumulate((out.grad.astype(np.float64) * dx).astype(np.float32))

        return run

    return _node(out_data, (x,), bw)


def sum_all(x: Tensor) -> Tensor:
    total = x.data.astype(np.float64).sum()

    def bw(out: Tensor):
        def run():
            if x.requires_grad:
                x._accumulate(np.full_like(x.data, np.float32(out.grad)))

        return run

    return _node(np.float32(total), (x,), bw)


def mean_all(x: Tensor) -> Tensor:
    n = x.data.size
    if n == 0:
        raise ContractError("mean_all of an empty tensor")
    total = x.data.astype(np.float64).mean()

    def bw(out: Tensor):
        def run():
            if x.requires_grad:
                x._accumulate(
                    np.full_like(x.data, np.float32(float(out.grad) / n))
                )

        return run

    return _node(np.float32(total), (x,), bw)


def linear(x: Tensor, w: Tensor, b: Tensor | None = None) -> Tensor:
    """Affine map on the trailing axis: x @ w (+ b broadcast over rows)."""
    out = matmul(x, w)
    if b is not None:
        if b.ndim != 1:
            raise DimensionError(f"linear bias must be 1-D, got {b.shape}")
        out = add_broadcast(out, reshape(b, (1,) * (out.ndim - 1) + b.shape))
    return out


def backward(loss: Tensor) -> None:
    """Run reverse mode from a scalar loss; the graph is freed afterwards.

    A second backward through the same graph raises, since closures and
    parent links are dropped node by node once used.
    """
    if loss.shape != ():
        raise ContractError(f"backward requires a scalar, got shape {loss.shape}")
    if not loss.requires_grad:
        raise ContractError(
            "backward on a tensor with no recorded graph "
            "(already consumed, or built under no_grad)"
        )

    order: list[Tensor] = []
    visited: set[int] = set()
    stack: list[tuple[Tensor, bool]] = [(loss, False)]
    while stack:
        node, expanded = stack.pop()
        if expanded:
            order.append(node)
            continue
        if id(node) in visited:
            continue
        visited.add(id(node))
        stack.append((node, True))
        for p in node._parents:
            if id(p) not in visited and p._parents:
                stack.append((p, False))

    loss.grad = np.ones_like(loss.data)
    for node in reversed(order):
        if node._backward is not None and node.grad is not None:
            node._backward()
        node._backward = None
        node._parents = ()
    loss.requires_grad = False


class Parameter:
    """A named trainable tensor; freezing drops it from optimizer updates.

    Wraps an existing Tensor without copying, so a parameter list built over
    a model's weight tensors aliases the tensors the forward pass reads.
    """

    __slots__ = ("name", "tensor", "trainable")

    def __init__(self, name: str, data, trainable: bool = True) -> None:
        self.name = name
        self.tensor = data if isinstance(data, Tensor) else Tensor(data)
        self.tensor.requires_grad = bool(trainable)
        self.trainable = bool(trainable)

    @property
    def data(self) -> np.ndarray:
        return self.tensor.data

    def __repr__(self) -> str:
        return f"Parameter({self.name!r}, shape={self.tensor.shape})"


def zero_grads(params: Iterable[Parameter]) -> None:
    for p in params:
        p.tensor.zero_grad()


class Adam:
    """Adam with bias correction; state arrays are float32 like the params."""

    def __init__(
        self,
        params: Sequence[Parameter],
        lr: float = 1e-4,
        beta1: float = 0.9,
        beta2: float = 0.999,
        eps: float = 1e-8,
    ) -> None:
        self.params = [p for p in params if p.trainable]
        self.lr = float(lr)
        self.beta1 = float(beta1)
        self.beta2 = float(beta2)
        self.eps = float(eps)
        self.t = 0
        self.m = [np.zeros_like(p.data) for p in self.params]
        self.v = [np.zeros_like(p.data) for p in self.params]

    def step(self) -> None:
        """Apply one update from the grads currently on the parameters."""
        self.t += 1
        bc1 = 1.0 - self.beta1**self.t
        bc2 = 1.0 - self.beta2**self.t
        for p, m, v in zip(self.params, self.m, self.v):
            g = p.tensor.grad
            if g is None:
                continue
            m += (1.0 - self.beta1) * (g - m)
            v += (1.0 - self.beta2) * (g * g - v)
            mhat = m / np.float32(bc1)
            vhat = v / np.float32(bc2)
            p.tensor.data -= (
                np.float32(self.lr) * mhat / (np.sqrt(vhat) + np.float32(self.eps))
            )
