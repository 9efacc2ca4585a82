"""Core float64 tensor operations with hand-written backward passes.

Every forward function returns ``(value, backward)`` where ``backward`` is a
closure mapping the gradient of the loss w.r.t. the output onto gradients
w.r.t. every differentiable input, in input order.  There is no graph and no
tape; composition is explicit at the call site.

Contraction-heavy kernels (``matmul``, ``conv2d``) accumulate in the same
order as a naive scalar loop (innermost over the contracted index), so their
outputs are bit-identical to brute-force loop references.  BLAS contraction
reorders sums and fuses multiply-adds, which breaks that equality; the
batched training engine trades it away for throughput, this module does not.
"""

from __future__ import annotations

import numpy as np
from scipy.special import erf

Tensor = np.ndarray

_INV_SQRT2 = 1.0 / np.sqrt(2.0)
_INV_SQRT2PI = 1.0 / np.sqrt(2.0 * np.pi)


def _check_f64(name: str, x: np.ndarray) -> np.ndarray:
    if not isinstance(x, np.ndarray):
        raise TypeError(f"{name} must be an ndarray, got {type(x).__name__}")
    if x.dtype != np.float64:
        raise TypeError(f"{name} must be float64, got {x.dtype}")
    return x


def matmul(a: Tensor, b: Tensor):
    """2-D matrix product with scalar-loop accumulation order.

    Output element (i, j) is the sum over t of a[i, t] * b[t, j], added in
    increasing t, exactly as a triple loop would.  Vectorized over (i, j).
    """
    _check_f64("a", a)
    _check_f64("b", b)
    if a.ndim != 2 or b.ndim != 2:
        raise ValueError(f"matmul expects 2-D operands, got {a.shape} and {b.shape}")
    if a.shape[1] != b.shape[0]:
        raise ValueError(f"matmul inner dims disagree: {a.shape} @ {b.shape}")
    out = np.zeros((a.shape[0], b.shape[1]))
    for t in range(a.shape[1]):
        out += a[:, t, None] * b[None, t, :]

    def backward(d_out: Tensor):
        d_out = _check_f64("d_out", d_out)
        return d_out @ b.T, a.T @ d_out

    return out, backward


def softmax_rows(x: Tensor):
    """Row-wise softmax over the last axis, with max-subtraction stability."""
    _check_f64("x", x)
    if x.ndim < 1:
        raise ValueError("softmax_rows expects at least one axis")
    shifted = x - x.max(axis=-1, keepdims=True)
    e = np.exp(shifted)
    y = e / e.sum(axis=-1, keepdims=True)

    def backward(d_y: Tensor):
        d_y = _check_f64("d_y", d_y)
        return y * (d_y - (d_y * y).sum(axis=-1, keepdims=True))

    return y, backward


def layer_norm(x: Tensor, gamma: Tensor, beta: Tensor, eps: float = 1e-5):
    """Normalize the last axis to zero mean / unit variance, then scale+shift.

    Variance is the population variance of the slice; ``eps`` is added under
    the square root.
    """
    _check_f64("x", x)
    _check_f64("gamma", gamma)
    _check_f64("beta", beta)
    n = x.shape[-1]
    if gamma.shape != (n,) or beta.shape != (n,):
        raise ValueError(
            f"gamma/beta must have shape ({n},), got {gamma.shape} and {beta.shape}"
        )
    mu = x.mean(axis=-1, keepdims=True)
    centered = x - mu
    var = (centered * centered).mean(axis=-1, keepdims=True)
    inv_std = 1.0 / np.sqrt(var + eps)
    x_hat = centered * inv_std
    y = x_hat * gamma + beta

    def backward(d_y: Tensor):
        d_y = _check_f64("d_y", d_y)
        axes = tuple(range(d_y.ndim - 1))
        d_beta = d_y.sum(axis=axes)
        d_gamma = (d_y * x_hat).sum(axis=axes)
        d_xhat = d_y * gamma
        d_x = inv_std * (
            d_xhat
            - d_xhat.mean(axis=-1, keepdims=True)
            - x_hat * (d_xhat * x_hat).mean(axis=-1, keepdims=True)
        )
        return d_x, d_gamma, d_beta

    return y, backward


def conv2d(x: Tensor, kernels: Tensor, stride: int = 1, pad: int = 0):
    """2-D cross-correlation of one [Cin, H, W] image with [Cout, Cin, kh, kw]
    kernels, zero padding, no bias.

    Accumulates contributions in (cin, u, v) order so the result is
    bit-identical to a six-loop scalar reference.
    """
    _check_f64("x", x)
    _check_f64("kernels", kernels)
    if x.ndim != 3 or kernels.ndim != 4:
        raise ValueError(f"conv2d expects [Cin,H,W] and [Cout,Cin,kh,kw], got {x.shape}, {kernels.shape}")
    c_in, h, w = x.shape
    c_out, c_in_k, kh, kw = kernels.shape
    if c_in_k != c_in:
        raise ValueError(f"kernel Cin {c_in_k} != input Cin {c_in}")
    if stride < 1 or pad < 0:
        raise ValueError(f"bad stride/pad: {stride}, {pad}")
    hp, wp = h + 2 * pad, w + 2 * pad
    if hp < kh or wp < kw:
        raise ValueError("kernel larger than padded input")
    h_out = (hp - kh) // stride + 1
    w_out = (wp - kw) // stride + 1
    xp = np.pad(x, ((0, 0), (pad, pad), (pad, pad)))
    out = np.zeros((c_out, h_out, w_out))
    for ci in range(c_in):
        for u in range(kh):
            for v in range(kw):
                patch = xp[ci, u : u + h_out * stride : stride, v : v + w_out * stride : stride]
                out += kernels[:, ci, u, v, None, None] * patch[None, :, :]

    def backward(d_out: Tensor):
        d_out = _check_f64("d_out", d_out)
        d_k = np.empty_like(kernels)
        d_xp = np.zeros_like(xp)
        for u in range(kh):
            for v in range(kw):
                patch = xp[:, u : u + h_out * stride : stride, v : v + w_out * stride : stride]
                d_k[:, :, u, v] = np.tensordot(d_out, patch, axes=([1, 2], [1, 2]))
                d_xp[:, u : u + h_out * stride : stride, v : v + w_out * stride : stride] += np.tensordot(
                    kernels[:, :, u, v], d_out, axes=([0], [0])
                )
        d_x = d_xp[:, pad : pad + h, pad : pad + w] if pad else d_xp
        return d_x, d_k

    return out, backward


def max_pool2d(x: Tensor, size: int, stride: int):
    """Window max over [C, H, W]; ties resolve to the first position in
    row-major window order.  Gradient routes to that winner only.
    """
    _check_f64("x", x)
    if x.ndim != 3:
        raise ValueError(f"max_pool2d expects [C,H,W], got {x.shape}")
    if size < 1 or stride < 1:
        raise ValueError(f"bad size/stride: {size}, {stride}")
    c, h, w = x.shape
    if h < size or w < size:
        raise ValueError("pool window larger than input")
    h_out = (h - size) // stride + 1
    w_out = (w - size) // stride + 1
    best = np.full((c, h_out, w_out), -np.inf)
    arg_u = np.zeros((c, h_out, w_out), dtype=np.intp)
    arg_v = np.zeros((c, h_out, w_out), dtype=np.intp)
    for u in range(size):
        for v in range(size):
            patch = x[:, u : u + h_out * stride : stride, v : v + w_out * stride : stride]
            better = patch > best  # strict: earlier (u, v) wins ties
            best = np.where(better, patch, best)
            arg_u[better] = u
            arg_v[better] = v

    def backward(d_y: Tensor):
        d_y = _check_f64("d_y", d_y)
        d_x = np.zeros_like(x)
        ci, io, jo = np.indices(best.shape)
        np.add.at(d_x, (ci, io * stride + arg_u, jo * stride + arg_v), d_y)
        return d_x

    return best, backward


def gather_rows(x: Tensor, indices: np.ndarray):
    """Select rows of a [T, D] matrix.  Backward scatter-adds into zeros, so
    duplicate indices accumulate.
    """
    _check_f64("x", x)
    idx = np.asarray(indices)
    if not np.issubdtype(idx.dtype, np.integer):
        raise TypeError(f"indices must be integers, got {idx.dtype}")
    if idx.ndim != 1:
        raise ValueError(f"indices must be 1-D, got shape {idx.shape}")
    if x.ndim != 2:
        raise ValueError(f"gather_rows expects [T,D], got {x.shape}")
    if idx.size and (idx.min() < 0 or idx.max() >= x.shape[0]):
        raise IndexError(f"index out of range for {x.shape[0]} rows")
    y = x[idx]

    def backward(d_y: Tensor):
        d_y = _check_f64("d_y", d_y)
        d_x = np.zeros_like(x)
        np.add.at(d_x, idx, d_y)
        return d_x

    return y, backward


def relu(x: Tensor):
    """Elementwise max(x, 0); subgradient 0 at the kink."""
    _check_f64("x", x)
    y = np.maximum(x, 0.0)

    def backward(d_y: Tensor):
        return np.where(x > 0.0, d_y, 0.0)

    return y, backward


def sigmoid(x: Tensor):
    """Numerically stable logistic function."""
    _check_f64("x", x)
    y = np.empty_like(x)
    pos = x >= 0
    y[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    y[~pos] = ex / (1.0 + ex)

    def backward(d_y: Tensor):
        return d_y * y * (1.0 - y)

    return y, backward


def gelu(x: Tensor):
    """Exact (erf-based) Gaussian error linear unit."""
    _check_f64("x", x)
    phi = 0.5 * (1.0 + erf(x * _INV_SQRT2))
    y = x * phi

    def backward(d_y: Tensor):
        pdf = np.exp(-0.5 * x * x) * _INV_SQRT2PI
        return d_y * (phi + x * pdf)

    return y, backward
