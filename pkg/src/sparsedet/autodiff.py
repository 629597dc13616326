"""Reverse-mode automatic differentiation on dense float64 arrays.

A Tensor wraps a numpy array together with an optional gradient buffer and
a record of the operation that produced it. Operations build a dynamic
graph as they run; ``Tensor.backward`` replays it once in reverse
topological order, summing gradients wherever a tensor is used more than
once. Every tensor with ``requires_grad`` receives a ``.grad`` buffer
(not just leaves), which lets tests inspect gradients at interior nodes.

All math is 64-bit. Numerical choices that matter elsewhere:
``sigmoid`` uses the branch form that never exponentiates a positive
argument, ``softmax`` subtracts the row max, and bilinear-style ops are
written in lerp form so constant inputs reproduce exactly.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np


class ShapeError(ValueError):
    """Operand shapes are incompatible for the requested operation."""


class ContractError(ValueError):
    """An operation was called outside its contract."""


class Tensor:
    """Dense n-dimensional float64 array participating in the autodiff graph.

    Attributes:
        data: contiguous float64 numpy array.
        requires_grad: whether backward should deliver a gradient here.
        grad: accumulated gradient (same shape as data) or None.
    """

    __slots__ = ("data", "requires_grad", "grad", "_parents", "_backward")

    def __init__(self, data, requires_grad: bool = False):
        self.data = np.ascontiguousarray(np.asarray(data, dtype=np.float64))
        self.requires_grad = bool(requires_grad)
        self.grad: np.ndarray | None = None
        self._parents: tuple[Tensor, ...] = ()
        self._backward = None

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
        if self.data.size != 1:
            raise ContractError(f"item() requires a scalar, got shape {self.shape}")
        return float(self.data.reshape(()))

    def numpy(self) -> np.ndarray:
        """Copy of the underlying values."""
        return self.data.copy()

    def detach(self) -> "Tensor":
        """Value-identical tensor that blocks gradient flow to this one."""
        return Tensor(self.data.copy(), requires_grad=False)

    def zero_grad(self) -> None:
        self.grad = None

    def _accumulate(self, g: np.ndarray) -> None:
        if self.grad is None:
            self.grad = np.zeros_like(self.data)
        self.grad += g

    def backward(self, grad: np.ndarray | None = None) -> None:
        """Run reverse-mode differentiation from this tensor.

        When ``grad`` is omitted the tensor must be scalar and is seeded
        with 1. Each node in the graph is visited exactly once, in reverse
        topological order, so reused tensors accumulate (sum) gradients.
        """
        if grad is None:
            if self.data.size != 1:
                raise ContractError(
                    f"backward() without a seed requires a scalar, got shape {self.shape}"
                )
            grad = np.ones_like(self.data)
        order = _toposort(self)
        self._accumulate(np.asarray(grad, dtype=np.float64).reshape(self.shape))
        for node in reversed(order):
            if node._backward is not None and node.grad is not None:
                node._backward(node.grad)

    # -- operator sugar -------------------------------------------------

    def __add__(self, other):
        return add(self, other)

    def __radd__(self, other):
        return add(other, self)

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(other, self)

    def __mul__(self, other):
        return mul(self, other)

    def __rmul__(self, other):
        return mul(other, self)

    def __truediv__(self, other):
        return div(self, other)

    def __rtruediv__(self, other):
        return div(other, self)

    def __neg__(self):
        return mul(self, -1.0)

    def __pow__(self, p):
        return power(self, p)

    def sum(self, axis=None, keepdims=False):
        return tsum(self, axis=axis, keepdims=keepdims)

    def mean(self, axis=None, keepdims=False):
        return tmean(self, axis=axis, keepdims=keepdims)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    def __repr__(self):
        return f"Tensor(shape={self.shape}, requires_grad={self.requires_grad})"


def _toposort(root: Tensor) -> list[Tensor]:
    """Parents-before-children ordering of the graph below ``root``."""
    order: list[Tensor] = []
    seen: set[int] = set()
    stack: list[tuple[Tensor, bool]] = [(root, False)]
    while stack:
        node, expanded = stack.pop()
        if expanded:
            order.append(node)
            continue
        if id(node) in seen:
            continue
        seen.add(id(node))
        stack.append((node, True))
        for p in node._parents:
            if id(p) not in seen:
                stack.append((p, False))
    return order


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


_grad_enabled = True


class no_grad:
    """Context manager that suspends graph recording (inference mode)."""

    def __enter__(self):
        global _grad_enabled
        self._saved = _grad_enabled
        _grad_enabled = False
        return self

    def __exit__(self, *exc):
        global _grad_enabled
        _grad_enabled = self._saved
        return False


def make_node(data: np.ndarray, parents: tuple[Tensor, ...], backward_fn) -> Tensor:
    """Create a graph node from precomputed forward data.

    ``backward_fn(grad)`` must accumulate into the parents via their
    ``_accumulate`` method. The node requires grad iff any parent does
    and recording is enabled; backward_fn is dropped entirely otherwise.
    """
    out = Tensor(data)
    out.requires_grad = _grad_enabled and any(p.requires_grad for p in parents)
    if out.requires_grad:
        out._parents = tuple(parents)
        out._backward = backward_fn
    return out


def _unbroadcast(g: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    """Sum ``g`` down to ``shape`` (inverse of numpy broadcasting)."""
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for ax, n in enumerate(shape):
        if n == 1 and g.shape[ax] != 1:
            g = g.sum(axis=ax, keepdims=True)
    return g


# -- elementwise arithmetic ----------------------------------------------


def add(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    out_data = a.data + b.data

    def backward(g):
        if a.requires_grad:
            a._accumulate(_unbroadcast(g, a.shape))
        if b.requires_grad:
            b._accumulate(_unbroadcast(g, b.shape))

    return make_node(out_data, (a, b), backward)


def sub(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    out_data = a.data - b.data

    def backward(g):
        if a.requires_grad:
            a._accumulate(_unbroadcast(g, a.shape))
        if b.requires_grad:
            b._accumulate(_unbroadcast(-g, b.shape))

    return make_node(out_data, (a, b), backward)


def mul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    out_data = a.data * b.data

    def backward(g):
        if a.requires_grad:
            a._accumulate(_unbroadcast(g * b.data, a.shape))
        if b.requires_grad:
            b._accumulate(_unbroadcast(g * a.data, b.shape))

    return make_node(out_data, (a, b), backward)


def div(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    out_data = a.data / b.data

    def backward(g):
        if a.requires_grad:
            a._accumulate(_unbroadcast(g / b.data, a.shape))
        if b.requires_grad:
            b._accumulate(_unbroadcast(-g * a.data / (b.data * b.data), b.shape))

    return make_node(out_data, (a, b), backward)


def power(a, p: float) -> Tensor:
    a = as_tensor(a)
    p = float(p)
    out_data = a.data**p

    def backward(g):
        a._accumulate(g * p * a.data ** (p - 1.0))

    return make_node(out_data, (a,), backward)


def exp(a) -> Tensor:
    a = as_tensor(a)
    out_data = np.exp(a.data)

    def backward(g):
        a._accumulate(g * out_data)

    return make_node(out_data, (a,), backward)


def log(a) -> Tensor:
    a = as_tensor(a)
    out_data = np.log(a.data)

    def backward(g):
        a._accumulate(g / a.data)

    return make_node(out_data, (a,), backward)


def absolute(a) -> Tensor:
    a = as_tensor(a)
    out_data = np.abs(a.data)
    sign = np.sign(a.data)

    def backward(g):
        a._accumulate(g * sign)

    return make_node(out_data, (a,), backward)


def clamp(a, lo: float | None = None, hi: float | None = None) -> Tensor:
    """Clip values to [lo, hi]; gradient passes through where the clip is inactive."""
    a = as_tensor(a)
    out_data = np.clip(a.data, lo, hi)
    mask = np.ones_like(a.data)
    if lo is not None:
        mask *= a.data >= lo
    if hi is not None:
        mask *= a.data <= hi

    def backward(g):
        a._accumulate(g * mask)

    return make_node(out_data, (a,), backward)


def maximum(a, b) -> Tensor:
    """Elementwise max; ties route the gradient to the first argument."""
    a, b = as_tensor(a), as_tensor(b)
    out_data = np.maximum(a.data, b.data)
    take_a = a.data >= b.data

    def backward(g):
        if a.requires_grad:
            a._accumulate(_unbroadcast(g * take_a, a.shape))
        if b.requires_grad:
            b._accumulate(_unbroadcast(g * ~take_a, b.shape))

    return make_node(out_data, (a, b), backward)


def minimum(a, b) -> Tensor:
    """Elementwise min; ties route the gradient to the first argument."""
    a, b = as_tensor(a), as_tensor(b)
    out_data = np.minimum(a.data, b.data)
    take_a = a.data <= b.data

    def backward(g):
        if a.requires_grad:
            a._accumulate(_unbroadcast(g * take_a, a.shape))
        if b.requires_grad:
            b._accumulate(_unbroadcast(g * ~take_a, b.shape))

    return make_node(out_data, (a, b), backward)


# -- reductions -----------------------------------------------------------


def tsum(a, axis=None, keepdims=False) -> Tensor:
    a = as_tensor(a)
    out_data = a.data.sum(axis=axis, keepdims=keepdims)

    def backward(g):
        if axis is None:
            a._accumulate(np.broadcast_to(g, a.shape).copy() if np.ndim(g) else np.full(a.shape, g))
        else:
            gg = g if keepdims else np.expand_dims(g, axis)
            a._accumulate(np.broadcast_to(gg, a.shape).copy())

    return make_node(np.asarray(out_data), (a,), backward)


def tmean(a, axis=None, keepdims=False) -> Tensor:
    a = as_tensor(a)
    if axis is None:
        n = a.data.size
    else:
        n = a.data.shape[axis] if isinstance(axis, int) else int(
            np.prod([a.data.shape[ax] for ax in axis])
        )
    return tsum(a, axis=axis, keepdims=keepdims) * (1.0 / n)


# -- shape manipulation ----------------------------------------------------


def reshape(a, shape) -> Tensor:
    a = as_tensor(a)
    out_data = a.data.reshape(shape)

    def backward(g):
        a._accumulate(g.reshape(a.shape))

    return make_node(out_data, (a,), backward)


def permute(a, axes) -> Tensor:
    a = as_tensor(a)
    axes = tuple(axes)
    inv = tuple(np.argsort(axes))
    out_data = np.ascontiguousarray(a.data.transpose(axes))

    def backward(g):
        a._accumulate(g.transpose(inv))

    return make_node(out_data, (a,), backward)


def transpose(a) -> Tensor:
    """2-D matrix transpose."""
    a = as_tensor(a)
    if a.ndim != 2:
        raise ShapeError(f"transpose expects a matrix, got shape {a.shape}")
    return permute(a, (1, 0))


def concat(tensors, axis: int = 0) -> Tensor:
    tensors = [as_tensor(t) for t in tensors]
    out_data = np.concatenate([t.data for t in tensors], axis=axis)
    sizes = [t.data.shape[axis] for t in tensors]
    offsets = np.cumsum([0] + sizes)

    def backward(g):
        for t, lo, hi in zip(tensors, offsets[:-1], offsets[1:]):
            if t.requires_grad:
                idx = [slice(None)] * g.ndim
                idx[axis] = slice(lo, hi)
                t._accumulate(g[tuple(idx)])

    return make_node(out_data, tuple(tensors), backward)


def narrow(a, axis: int, start: int, length: int) -> Tensor:
    """Contiguous slice ``[start, start+length)`` along ``axis``."""
    a = as_tensor(a)
    idx = [slice(None)] * a.ndim
    idx[axis] = slice(start, start + length)
    idx = tuple(idx)
    out_data = np.ascontiguousarray(a.data[idx])

    def backward(g):
        ga = np.zeros_like(a.data)
        ga[idx] = g
        a._accumulate(ga)

    return make_node(out_data, (a,), backward)


def gather_rows(a, index) -> Tensor:
    """Select rows of ``a`` (axis 0) by integer index; backward scatter-adds."""
    a = as_tensor(a)
    index = np.asarray(index, dtype=np.intp)
    out_data = a.data[index]

    def backward(g):
        ga = np.zeros_like(a.data)
        np.add.at(ga, index, g)
        a._accumulate(ga)

    return make_node(out_data, (a,), backward)


# -- linear algebra ---------------------------------------------------------


def matmul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    if a.ndim != 2 or b.ndim != 2 or a.shape[1] != b.shape[0]:
        raise ShapeError(f"matmul shapes incompatible: {a.shape} x {b.shape}")
    out_data = a.data @ b.data

    def backward(g):
        if a.requires_grad:
            a._accumulate(g @ b.data.T)
        if b.requires_grad:
            b._accumulate(a.data.T @ g)

    return make_node(out_data, (a, b), backward)


def bmm(a, b) -> Tensor:
    """Batch matrix multiplication of (n, p, q) with (n, q, r)."""
    a, b = as_tensor(a), as_tensor(b)
    if a.ndim != 3 or b.ndim != 3 or a.shape[0] != b.shape[0] or a.shape[2] != b.shape[1]:
        raise ShapeError(f"bmm shapes incompatible: {a.shape} x {b.shape}")
    out_data = a.data @ b.data

    def backward(g):
        if a.requires_grad:
            a._accumulate(g @ b.data.transpose(0, 2, 1))
        if b.requires_grad:
            b._accumulate(a.data.transpose(0, 2, 1) @ g)

    return make_node(out_data, (a, b), backward)


def linear(x, weight, bias=None) -> Tensor:
    """Affine map over the last axis: ``x @ weight + bias``.

    ``weight`` is (in_features, out_features); leading axes of ``x`` are
    flattened for the product and restored afterwards.
    """
    x, weight = as_tensor(x), as_tensor(weight)
    if x.shape[-1] != weight.shape[0]:
        raise ShapeError(f"linear shapes incompatible: {x.shape} x {weight.shape}")
    lead = x.shape[:-1]
    flat = reshape(x, (-1, x.shape[-1])) if x.ndim != 2 else x
    out = matmul(flat, weight)
    if bias is not None:
        out = add(out, bias)
    if x.ndim != 2:
        out = reshape(out, lead + (weight.shape[1],))
    return out


# -- activations and normalization -------------------------------------------


def relu(a) -> Tensor:
    a = as_tensor(a)
    mask = a.data > 0
    out_data = a.data * mask

    def backward(g):
        a._accumulate(g * mask)

    return make_node(out_data, (a,), backward)


def sigmoid(a) -> Tensor:
    """Logistic function in the overflow-free branch form."""
    a = as_tensor(a)
    pos = a.data >= 0
    z = np.exp(np.where(pos, -a.data, a.data))
    out_data = np.where(pos, 1.0 / (1.0 + z), z / (1.0 + z))

    def backward(g):
        a._accumulate(g * out_data * (1.0 - out_data))

    return make_node(out_data, (a,), backward)


def softmax(a) -> Tensor:
    """Softmax over the last axis, with the row max subtracted first."""
    a = as_tensor(a)
    shifted = a.data - a.data.max(axis=-1, keepdims=True)
    e = np.exp(shifted)
    out_data = e / e.sum(axis=-1, keepdims=True)

    def backward(g):
        dot = (g * out_data).sum(axis=-1, keepdims=True)
        a._accumulate(out_data * (g - dot))

    return make_node(out_data, (a,), backward)


def layer_norm(x, gamma, beta, eps: float = 1e-5) -> Tensor:
    """Normalize over the last axis, then scale and shift.

    ``gamma`` and ``beta`` are 1-D of size ``x.shape[-1]``.
    """
    x, gamma, beta = as_tensor(x), as_tensor(gamma), as_tensor(beta)
    d = x.shape[-1]
    if gamma.shape != (d,) or beta.shape != (d,):
        raise ShapeError(
            f"layer_norm scale/shift must have shape ({d},), got {gamma.shape}/{beta.shape}"
        )
    mu = x.data.mean(axis=-1, keepdims=True)
    centered = x.data - mu
    var = (centered * centered).mean(axis=-1, keepdims=True)
    inv_std = 1.0 / np.sqrt(var + eps)
    xhat = centered * inv_std
    out_data = gamma.data * xhat + beta.data

    def backward(g):
        if gamma.requires_grad:
            gamma._accumulate((g * xhat).reshape(-1, d).sum(axis=0))
        if beta.requires_grad:
            beta._accumulate(g.reshape(-1, d).sum(axis=0))
        if x.requires_grad:
            dxhat = g * gamma.data
            m1 = dxhat.mean(axis=-1, keepdims=True)
            m2 = (dxhat * xhat).mean(axis=-1, keepdims=True)
            x._accumulate(inv_std * (dxhat - m1 - xhat * m2))

    return make_node(out_data, (x, gamma, beta), backward)


# -- convolution -------------------------------------------------------------


def conv2d(x, weight, bias=None, stride: int = 1, padding: int = 0) -> Tensor:
    """2-D convolution on NCHW input with square kernel and zero padding.

    Supports stride 1 or 2 and kernels up to 7x7, which is all the small
    backbone needs. Implemented as im2col plus one matrix product.
    """
    x, weight = as_tensor(x), as_tensor(weight)
    if x.ndim != 4 or weight.ndim != 4:
        raise ShapeError(f"conv2d expects NCHW input and OIKK weight, got {x.shape}, {weight.shape}")
    bsz, cin, h, w = x.shape
    cout, cin_w, kh, kw = weight.shape
    if cin != cin_w or kh != kw:
        raise ShapeError(f"conv2d weight {weight.shape} does not match input {x.shape}")
    if stride not in (1, 2):
        raise ContractError(f"conv2d stride must be 1 or 2, got {stride}")
    if kh > 7:
        raise ContractError(f"conv2d kernel must be at most 7, got {kh}")
    hp, wp = h + 2 * padding, w + 2 * padding
    if kh > hp or kw > wp:
        raise ShapeError(
            f"conv2d kernel {kh}x{kw} larger than padded input {hp}x{wp}"
        )
    hout = (hp - kh) // stride + 1
    wout = (wp - kw) // stride + 1

    xp = np.pad(x.data, ((0, 0), (0, 0), (padding, padding), (padding, padding)))
    windows = np.lib.stride_tricks.sliding_window_view(xp, (kh, kw), axis=(2, 3))
    windows = windows[:, :, ::stride, ::stride]  # (B, Cin, Hout, Wout, kh, kw)
    cols = np.ascontiguousarray(windows.transpose(0, 2, 3, 1, 4, 5)).reshape(
        bsz * hout * wout, cin * kh * kw
    )
    wmat = weight.data.reshape(cout, -1).T
    out_flat = cols @ wmat
    if bias is not None:
        out_flat = out_flat + bias.data
    out_data = out_flat.reshape(bsz, hout, wout, cout).transpose(0, 3, 1, 2)

    def backward(g):
        g_flat = np.ascontiguousarray(g.transpose(0, 2, 3, 1)).reshape(-1, cout)
        if bias is not None and bias.requires_grad:
            bias._accumulate(g_flat.sum(axis=0))
        if weight.requires_grad:
            weight._accumulate((cols.T @ g_flat).T.reshape(weight.shape))
        if x.requires_grad:
            dcols = (g_flat @ wmat.T).reshape(bsz, hout, wout, cin, kh, kw)
            dxp = np.zeros_like(xp)
            for i in range(kh):
                for j in range(kw):
                    dxp[:, :, i : i + stride * hout : stride, j : j + stride * wout : stride] += (
                        dcols[:, :, :, :, i, j].transpose(0, 3, 1, 2)
                    )
            if padding:
                dxp = dxp[:, :, padding:-padding, padding:-padding]
            x._accumulate(dxp)

    parents = (x, weight) if bias is None else (x, weight, bias)
    return make_node(out_data, parents, backward)


# -- gradient verification ----------------------------------------------------


@dataclass
class GradCheckReport:
    """Outcome of comparing autodiff gradients against central differences."""

    per_input: list[float] = field(default_factory=list)
    tolerance: float = 1e-6

    @property
    def max_error(self) -> float:
        return max(self.per_input) if self.per_input else 0.0

    @property
    def passed(self) -> bool:
        return self.max_error < self.tolerance


def grad_check(f, inputs, step: float = 1e-5, tolerance: float = 1e-6) -> GradCheckReport:
    """Compare autodiff gradients of scalar ``f(*inputs)`` with finite differences.

    Central differences with the given step are evaluated for every element
    of every input; the reported figure per input is the max of
    ``|a - d| / max(1, |a|, |d|)``, which behaves like a relative error for
    large components and an absolute one near zero (where finite
    differences are dominated by cancellation noise).

    ``f`` must be deterministic and return a scalar Tensor.
    """
    inputs = list(inputs)
    out = f(*inputs)
    if not isinstance(out, Tensor) or out.data.size != 1:
        raise ContractError("grad_check requires f to return a scalar Tensor")
    for t in inputs:
        t.grad = None
    out.backward()
    analytic = [
        t.grad.copy() if t.grad is not None else np.zeros_like(t.data) for t in inputs
    ]

    report = GradCheckReport(tolerance=tolerance)
    for t, a in zip(inputs, analytic):
        fd = np.zeros_like(t.data)
        flat = t.data.reshape(-1)
        fd_flat = fd.reshape(-1)
        for i in range(flat.size):
            orig = flat[i]
            flat[i] = orig + step
            hi = f(*inputs).item()
            flat[i] = orig - step
            lo = f(*inputs).item()
            flat[i] = orig
            fd_flat[i] = (hi - lo) / (2.0 * step)
        denom = np.maximum(1.0, np.maximum(np.abs(a), np.abs(fd)))
        err = np.abs(a - fd) / denom
        report.per_input.append(float(err.max()) if err.size else 0.0)
    return report
