"""Dense float32 tensors with reverse-mode differentiation.

Small by design: only the primitives the rest of the package needs. Shapes
must match exactly for binary ops (scalars are the one exception), values
are stored as float32, and reductions accumulate in float64 so gradient
checks against finite differences stay tight.
"""

from __future__ import annotations

import numpy as np

from .errors import ShapeError

__all__ = [
    "Tensor",
    "astensor",
    "matmul",
    "conv2d",
    "relu",
    "leaky_relu",
    "clip",
    "log_softmax",
    "take_rows",
    "pick",
    "expand_vector",
    "count_backward",
    "CallCounter",
]


class Tensor:
    """A float32 array plus the bookkeeping needed to backpropagate through it.

    Tensors built from ops that saw a ``requires_grad`` input carry a VJP
    closure and parent links; ``backward`` on a scalar walks that record in
    reverse topological order. Tensors recorded on a tape must not be
    mutated until the tape is discarded.
    """

    __slots__ = ("data", "requires_grad", "grad", "_parents", "_vjp")

    def __init__(self, data, requires_grad=False):
        arr = np.asarray(data, dtype=np.float32)
        self.data = arr
        self.requires_grad = bool(requires_grad)
        self.grad = None
        self._parents = ()
        self._vjp = None

    @classmethod
    def _from_op(cls, data, parents, vjp):
        out = cls(data)
        if any(p.requires_grad for p in parents):
            out.requires_grad = True
            out._parents = tuple(parents)
            out._vjp = vjp
        return out

    @property
    def shape(self):
        return self.data.shape

    @property
    def size(self):
        return self.data.size

    def item(self):
        return float(self.data)

    def detach(self) -> "Tensor":
        return Tensor(self.data.copy())

    def zero_grad(self):
        self.grad = None

    def __repr__(self):
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.data.shape}{flag})"

    # -- elementwise arithmetic (exact-shape or scalar operands only) --

    def __add__(self, other):
        return _binary("add", self, other)

    __radd__ = __add__

    def __sub__(self, other):
        return _binary("sub", self, other)

    def __rsub__(self, other):
        return _binary("sub", _as_operand(other, self), self)

    def __mul__(self, other):
        return _binary("mul", self, other)

    __rmul__ = __mul__

    def __truediv__(self, other):
        if isinstance(other, Tensor) or not np.isscalar(other):
            raise ShapeError("division only supports scalar divisors")
        return _binary("mul", self, 1.0 / float(other))

    def __neg__(self):
        return Tensor._from_op(-self.data, (self,), lambda g: (-g,))

    def __matmul__(self, other):
        return matmul(self, other)

    def sum(self) -> "Tensor":
        val = np.float32(self.data.sum(dtype=np.float64))
        shape = self.data.shape
        return Tensor._from_op(val, (self,), lambda g: (np.full(shape, g, dtype=np.float32),))

    def mean(self) -> "Tensor":
        n = self.data.size
        val = np.float32(self.data.sum(dtype=np.float64) / n)
        shape = self.data.shape
        return Tensor._from_op(val, (self,), lambda g: (np.full(shape, g / n, dtype=np.float32),))

    def abs(self) -> "Tensor":
        sign = np.sign(self.data)
        return Tensor._from_op(np.abs(self.data), (self,), lambda g: ((g * sign).astype(np.float32),))

    def reshape(self, *shape) -> "Tensor":
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        old = self.data.shape
        return Tensor._from_op(
            self.data.reshape(shape), (self,), lambda g: (g.reshape(old),)
        )

    def backward(self):
        """Populate ``grad`` on every reachable requires_grad tensor.

        Only valid on scalar results; gradients accumulate additively across
        fan-out, so clear them first when re-running a tape.
        """
        if self.data.ndim != 0 and self.data.size != 1:
            raise ShapeError("backward requires a scalar loss")
        order = list(_toposort(self))
        # Non-leaf grads are scratch space for this walk; leaf grads accumulate
        # across calls until cleared by the caller.
        for node in order:
            if node._vjp is not None:
                node.grad = None
        self.grad = np.ones_like(self.data)
        for node in order:
            if node._vjp is None:
                continue
            grads = node._vjp(node.grad)
            for parent, g in zip(node._parents, grads):
                if g is None or not parent.requires_grad:
                    continue
                if parent.grad is None:
                    parent.grad = g.astype(np.float32, copy=True).reshape(parent.data.shape)
                else:
                    parent.grad = parent.grad + g.astype(np.float32).reshape(parent.data.shape)


def astensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _as_operand(other, like):
    if isinstance(other, Tensor):
        return other
    if np.isscalar(other):
        return Tensor(np.full(like.data.shape, other, dtype=np.float32))
    raise ShapeError(f"unsupported operand type {type(other)!r}")


def _toposort(root):
    # Iterative DFS; inner-chain tapes can be long enough to bother recursion.
    order, seen, stack = [], set(), [(root, False)]
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
    return reversed(order)


def _binary(kind, a, b):
    """Elementwise op over two tensors of identical shape, or tensor-scalar."""
    a = astensor(a)
    scalar_b = not isinstance(b, Tensor) and np.isscalar(b)
    if scalar_b:
        bval = float(b)
    else:
        b = astensor(b)
        if a.data.shape != b.data.shape:
            raise ShapeError(
                f"elementwise {kind} needs identical shapes or a scalar, "
                f"got {a.data.shape} and {b.data.shape}"
            )
        bval = None

    if kind == "add":
        data = a.data + (bval if scalar_b else b.data)
    elif kind == "sub":
        data = a.data - (bval if scalar_b else b.data)
    elif kind == "mul":
        data = a.data * (bval if scalar_b else b.data)
    else:  # pragma: no cover - internal dispatch
        raise ValueError(kind)

    if scalar_b:
        if kind == "add":
            vjp = lambda g: (g,)
        elif kind == "sub":
            vjp = lambda g: (g,)
        else:
            vjp = lambda g: ((g * bval).astype(np.float32),)
        return Tensor._from_op(data, (a,), vjp)

    if kind == "add":
        vjp = lambda g: (g, g)
    elif kind == "sub":
        vjp = lambda g: (g, -g)
    else:
        ad, bd = a.data, b.data
        vjp = lambda g: ((g * bd).astype(np.float32), (g * ad).astype(np.float32))
    return Tensor._from_op(data, (a, b), vjp)


def matmul(a: Tensor, b: Tensor) -> Tensor:
    """2-D matrix product with float64 accumulation internally."""
    a, b = astensor(a), astensor(b)
    if a.data.ndim != 2 or b.data.ndim != 2:
        raise ShapeError("matmul expects 2-D operands")
    if a.data.shape[1] != b.data.shape[0]:
        raise ShapeError(f"inner extents differ: {a.data.shape} @ {b.data.shape}")
    ad, bd = a.data, b.data
    data = ad @ bd

    def vjp(g):
        return g @ bd.T, ad.T @ g

    return Tensor._from_op(data, (a, b), vjp)


def relu(x: Tensor) -> Tensor:
    x = astensor(x)
    mask = x.data > 0
    return Tensor._from_op(
        np.where(mask, x.data, 0.0).astype(np.float32),
        (x,),
        lambda g: ((g * mask).astype(np.float32),),
    )


def clip(x: Tensor, lo: float, hi: float) -> Tensor:
    """Clamp values to [lo, hi]; gradient passes inside the range, zero outside."""
    x = astensor(x)
    inside = (x.data >= lo) & (x.data <= hi)
    return Tensor._from_op(
        np.clip(x.data, lo, hi),
        (x,),
        lambda g: ((g * inside).astype(np.float32),),
    )


def leaky_relu(x: Tensor, slope: float = 0.1) -> Tensor:
    """Leaky rectifier; regression nets here collapse to dead units without it."""
    x = astensor(x)
    factor = np.where(x.data > 0, np.float32(1.0), np.float32(slope))
    return Tensor._from_op(
        (x.data * factor).astype(np.float32),
        (x,),
        lambda g: ((g * factor).astype(np.float32),),
    )


def log_softmax(x: Tensor) -> Tensor:
    """Row-wise log-softmax over the last axis; stable and differentiable."""
    x = astensor(x)
    z = x.data.astype(np.float64)
    z = z - z.max(axis=-1, keepdims=True)
    logsumexp = np.log(np.exp(z).sum(axis=-1, keepdims=True))
    out = (z - logsumexp).astype(np.float32)
    soft = np.exp(z - logsumexp)

    def vjp(g):
        g64 = g.astype(np.float64)
        return ((g64 - soft * g64.sum(axis=-1, keepdims=True)).astype(np.float32),)

    return Tensor._from_op(out, (x,), vjp)


def take_rows(table: Tensor, idx) -> Tensor:
    """Select rows of a 2-D tensor; gradient scatter-adds into the table."""
    table = astensor(table)
    if table.data.ndim != 2:
        raise ShapeError("take_rows expects a 2-D table")
    idx = np.asarray(idx, dtype=np.int64)
    if np.any(idx < 0) or np.any(idx >= table.data.shape[0]):
        raise IndexError(f"row index out of range for table with {table.data.shape[0]} rows")
    shape = table.data.shape

    def vjp(g):
        dt = np.zeros(shape, dtype=np.float32)
        np.add.at(dt, idx, g)
        return (dt,)

    return Tensor._from_op(table.data[idx], (table,), vjp)


def pick(x: Tensor, index) -> Tensor:
    """Gather along the last axis: ``x[..., index]`` per row.

    ``x`` of shape (C,) with int index gives a scalar; (N, C) with an (N,)
    index array gives (N,).
    """
    x = astensor(x)
    if x.data.ndim == 1:
        i = int(index)
        if not 0 <= i < x.data.shape[0]:
            raise IndexError(f"index {i} out of range for length {x.data.shape[0]}")
        n = x.data.shape[0]

        def vjp(g):
            d = np.zeros(n, dtype=np.float32)
            d[i] = g
            return (d,)

        return Tensor._from_op(np.float32(x.data[i]), (x,), vjp)

    if x.data.ndim == 2:
        idx = np.asarray(index, dtype=np.int64)
        if idx.shape != (x.data.shape[0],):
            raise ShapeError("per-row index array must have one entry per row")
        if np.any(idx < 0) or np.any(idx >= x.data.shape[1]):
            raise IndexError("column index out of range")
        rows = np.arange(x.data.shape[0])
        shape = x.data.shape

        def vjp(g):
            d = np.zeros(shape, dtype=np.float32)
            d[rows, idx] = g
            return (d,)

        return Tensor._from_op(x.data[rows, idx], (x,), vjp)
    raise ShapeError("pick supports 1-D or 2-D inputs")


def expand_vector(v: Tensor, shape, axis: int) -> Tensor:
    """Broadcast a 1-D tensor along ``axis`` of ``shape``; gradient sums back.

    The one sanctioned broadcast beyond scalars: bias vectors and
    per-timestep embeddings expanding over batch/spatial axes.
    """
    v = astensor(v)
    shape = tuple(int(s) for s in shape)
    if v.data.ndim != 1:
        raise ShapeError("expand_vector expects a 1-D tensor")
    if axis < 0:
        axis += len(shape)
    if not 0 <= axis < len(shape) or shape[axis] != v.data.shape[0]:
        raise ShapeError(f"cannot place length-{v.data.shape[0]} vector at axis {axis} of {shape}")
    view = [1] * len(shape)
    view[axis] = v.data.shape[0]
    data = np.broadcast_to(v.data.reshape(view), shape).astype(np.float32)
    other_axes = tuple(i for i in range(len(shape)) if i != axis)

    def vjp(g):
        return (g.sum(axis=other_axes, dtype=np.float64).astype(np.float32),)

    return Tensor._from_op(data, (v,), vjp)


def expand_hw(v: Tensor, shape) -> Tensor:
    """Broadcast an (n, c) tensor over the spatial axes of an (n, c, h, w) shape."""
    v = astensor(v)
    shape = tuple(int(s) for s in shape)
    if v.data.ndim != 2 or len(shape) != 4 or shape[:2] != v.data.shape:
        raise ShapeError(f"cannot expand {v.data.shape} over {shape}")
    data = np.broadcast_to(v.data[:, :, None, None], shape).astype(np.float32)

    def vjp(g):
        return (g.sum(axis=(2, 3), dtype=np.float64).astype(np.float32),)

    return Tensor._from_op(data, (v,), vjp)


def _im2col(x, k, stride, padding):
    # x: (n, c, h, w) float; returns (n, out_h * out_w, c * k * k)
    n, c, h, w = x.shape
    if padding:
        x = np.pad(x, ((0, 0), (0, 0), (padding, padding), (padding, padding)))
    hp, wp = x.shape[2], x.shape[3]
    out_h = (hp - k) // stride + 1
    out_w = (wp - k) // stride + 1
    if out_h <= 0 or out_w <= 0:
        raise ShapeError(f"kernel {k} larger than padded input {hp}x{wp}")
    s0, s1, s2, s3 = x.strides
    windows = np.lib.stride_tricks.as_strided(
        x,
        shape=(n, c, out_h, out_w, k, k),
        strides=(s0, s1, s2 * stride, s3 * stride, s2, s3),
        writeable=False,
    )
    cols = windows.transpose(0, 2, 3, 1, 4, 5).reshape(n, out_h * out_w, c * k * k)
    return cols, out_h, out_w, (hp, wp)


def _col2im(cols, x_shape, k, stride, padding, padded_hw):
    n, c, h, w = x_shape
    hp, wp = padded_hw
    out = np.zeros((n, c, hp, wp), dtype=np.float32)
    out_h = (hp - k) // stride + 1
    out_w = (wp - k) // stride + 1
    cols = cols.reshape(n, out_h, out_w, c, k, k)
    for di in range(k):
        for dj in range(k):
            out[:, :, di : di + out_h * stride : stride, dj : dj + out_w * stride : stride] += (
                cols[:, :, :, :, di, dj].transpose(0, 3, 1, 2)
            )
    if padding:
        out = out[:, :, padding:-padding or None, padding:-padding or None]
    return out


def conv2d(x: Tensor, kernels: Tensor, stride: int = 1, padding: int = 0) -> Tensor:
    """Cross-correlation of (c_in, h, w) or (n, c_in, h, w) with (c_out, c_in, k, k).

    Odd kernels only; "same" spatial extent at stride 1 needs padding = k // 2.
    """
    x, kernels = astensor(x), astensor(kernels)
    batched = x.data.ndim == 4
    if x.data.ndim not in (3, 4) or kernels.data.ndim != 4:
        raise ShapeError("conv2d expects (c,h,w) or (n,c,h,w) input and (co,ci,k,k) kernels")
    co, ci, k, k2 = kernels.data.shape
    if k != k2 or k % 2 == 0:
        raise ShapeError("kernels must be square with odd width")
    xd = x.data if batched else x.data[None]
    if xd.shape[1] != ci:
        raise ShapeError(f"input has {xd.shape[1]} channels, kernels expect {ci}")

    cols, out_h, out_w, padded_hw = _im2col(np.ascontiguousarray(xd), k, stride, padding)
    cols = np.ascontiguousarray(cols)
    wmat = kernels.data.reshape(co, ci * k * k)
    out = (cols @ wmat.T).transpose(0, 2, 1).reshape(xd.shape[0], co, out_h, out_w)
    x_shape = xd.shape

    def vjp(g):
        n = x_shape[0]
        gmat = (g if batched else g[None]).reshape(n, co, out_h * out_w)
        dcols = gmat.transpose(0, 2, 1) @ wmat
        dx = _col2im(dcols, x_shape, k, stride, padding, padded_hw)
        l = out_h * out_w
        dw = (
            np.ascontiguousarray(gmat.transpose(1, 0, 2)).reshape(co, n * l)
            @ cols.reshape(n * l, ci * k * k)
        ).reshape(co, ci, k, k)
        if not batched:
            dx = dx[0]
        return dx, dw

    return Tensor._from_op(out if batched else out[0], (x, kernels), vjp)


class CallCounter:
    """Forward/backward denoiser-pass tally for one generation chain."""

    __slots__ = ("forward", "backward")

    def __init__(self):
        self.forward = 0
        self.backward = 0

    def merge(self, other: "CallCounter"):
        self.forward += other.forward
        self.backward += other.backward
        return self

    def __repr__(self):
        return f"CallCounter(forward={self.forward}, backward={self.backward})"


def count_backward(x: Tensor, counter: CallCounter | None) -> Tensor:
    """Identity whose reverse pass bumps ``counter.backward`` once."""
    if counter is None or not x.requires_grad:
        return x

    def vjp(g):
        counter.backward += 1
        return (g,)

    return Tensor._from_op(x.data, (x,), vjp)
