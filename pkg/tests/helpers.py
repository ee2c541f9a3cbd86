"""Shared independent oracles for the test suite."""

import numpy as np

from fastcf.autodiff import Tensor


def fd_gradient(f, x, step=1e-3):
    """Central finite differences of a scalar function, float64 accumulation."""
    x = np.asarray(x, np.float32)
    grad = np.zeros(x.shape, np.float64)
    it = np.nditer(x, flags=["multi_index"])
    while not it.finished:
        idx = it.multi_index
        xp, xm = x.copy(), x.copy()
        xp[idx] += step
        xm[idx] -= step
        grad[idx] = (float(f(xp)) - float(f(xm))) / (2.0 * step)
        it.iternext()
    return grad


def rel_err(a, b):
    a = np.asarray(a, np.float64).ravel()
    b = np.asarray(b, np.float64).ravel()
    denom = max(np.linalg.norm(a), np.linalg.norm(b), 1e-12)
    return np.linalg.norm(a - b) / denom


def check_grad(op, x, rng, step=1e-3):
    """Compare tape gradient of sum(op(x) * w) against finite differences."""
    w = rng.standard_normal(op(Tensor(x)).data.shape).astype(np.float32)

    def f(arr):
        out = op(Tensor(arr)).data.astype(np.float64)
        return float((out * w).sum())

    leaf = Tensor(x.copy(), requires_grad=True)
    loss = (op(leaf) * Tensor(w)).sum()
    loss.backward()
    return rel_err(leaf.grad, fd_gradient(f, x, step))


def naive_conv2d(x, kernels, stride=1, padding=0):
    """Quadruple-loop cross-correlation."""
    c_in, h, w = x.shape
    c_out, _, k, _ = kernels.shape
    if padding:
        x = np.pad(x, ((0, 0), (padding, padding), (padding, padding)))
    hp, wp = x.shape[1], x.shape[2]
    out_h = (hp - k) // stride + 1
    out_w = (wp - k) // stride + 1
    out = np.zeros((c_out, out_h, out_w), np.float64)
    for co in range(c_out):
        for i in range(out_h):
            for j in range(out_w):
                acc = 0.0
                for ci in range(c_in):
                    patch = x[ci, i * stride : i * stride + k, j * stride : j * stride + k]
                    acc += float((patch.astype(np.float64) * kernels[co, ci].astype(np.float64)).sum())
                out[co, i, j] = acc
    return out


def naive_dilate(mask, width):
    """Nested-loop binary dilation with a width x width square, clipped at borders."""
    mask = np.asarray(mask, bool)
    r = width // 2
    out = np.zeros_like(mask)
    h, w = mask.shape
    for i in range(h):
        for j in range(w):
            if mask[i, j]:
                out[max(0, i - r) : min(h, i + r + 1), max(0, j - r) : min(w, j + r + 1)] = True
    return out
