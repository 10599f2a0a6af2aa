"""Dense differentiable primitives."""

from __future__ import annotations

from typing import Sequence

import numpy as np
import scipy.sparse as sp

from .tensor import Tensor, as_tensor, record


def _check(cond: bool, msg: str) -> None:
    if not cond:
        raise ValueError(msg)


def add(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _check(a.shape == b.shape, f"add: shape mismatch {a.shape} vs {b.shape}")
    return record(a.data + b.data, (a, b), lambda g: (g, g), "add")


def scale(x, alpha: float) -> Tensor:
    x = as_tensor(x)
    alpha = float(alpha)
    return record(x.data * alpha, (x,), lambda g: (g * alpha,), "scale")


def reshape(x, shape) -> Tensor:
    x = as_tensor(x)
    old = x.shape
    return record(x.data.reshape(shape), (x,), lambda g: (g.reshape(old),), "reshape")


def fully_connected(x, W, b=None) -> Tensor:
    """``x @ W + b`` for x of shape (N, Cin), W (Cin, Cout), b (Cout,)."""
    x, W = as_tensor(x), as_tensor(W)
    _check(x.ndim == 2 and W.ndim == 2 and x.shape[1] == W.shape[0],
           f"fully_connected: input {x.shape} incompatible with weight {W.shape}")
    y = x.data @ W.data
    parents = [x, W]
    if b is not None:
        b = as_tensor(b)
        _check(b.shape == (W.shape[1],), f"fully_connected: bias {b.shape} vs weight {W.shape}")
        y = y + b.data
        parents.append(b)

    def back(g):
        grads = [g @ W.data.T if x.requires_grad else None,
                 x.data.T @ g if W.requires_grad else None]
        if b is not None:
            grads.append(g.sum(axis=0))
        return grads

    return record(y, parents, back, "fully_connected")


def lrelu(x, slope: float = 0.01) -> Tensor:
    x = as_tensor(x)
    neg = x.data < 0
    y = x.data.copy()
    y[neg] *= slope

    def back(g):
        g = g.copy()
        g[neg] *= slope
        return (g,)

    return record(y, (x,), back, "lrelu")


def concat(xs: Sequence, axis: int = -1) -> Tensor:
    xs = [as_tensor(x) for x in xs]
    ax = axis % xs[0].ndim
    for x in xs[1:]:
        other = [s for i, s in enumerate(x.shape) if i != ax]
        first = [s for i, s in enumerate(xs[0].shape) if i != ax]
        _check(other == first, f"concat: shape mismatch {xs[0].shape} vs {x.shape} on axis {axis}")
    sizes = np.cumsum([x.shape[ax] for x in xs])[:-1]
    return record(np.concatenate([x.data for x in xs], axis=ax), xs,
                  lambda g: np.split(g, sizes, axis=ax), "concat")


def repeat_rows(v, n: int) -> Tensor:
    """Stack vector ``v`` (C,) into an (n, C) matrix."""
    v = as_tensor(v)
    _check(v.ndim == 1, f"repeat_rows: expected a vector, got {v.shape}")
    return record(np.broadcast_to(v.data, (n, v.shape[0])).copy(), (v,),
                  lambda g: (g.sum(axis=0),), "repeat_rows")


def conv1d(x, K, b=None, stride: int = 1) -> Tensor:
    """Zero-padded ('same' for stride 1) 1D convolution.

    x: (Cin, L); K: (Cout, Cin, k) with k odd; output (Cout, ceil(L / stride)).
    """
    x, K = as_tensor(x), as_tensor(K)
    _check(x.ndim == 2 and K.ndim == 3 and K.shape[1] == x.shape[0],
           f"conv1d: input {x.shape} incompatible with kernel {K.shape}")
    k = K.shape[2]
    _check(k % 2 == 1, f"conv1d: kernel width must be odd, got {K.shape}")
    cin, L = x.shape
    pad = k // 2
    xp = np.pad(x.data, ((0, 0), (pad, pad)))
    lout = (L - 1) // stride + 1
    taps = np.arange(k)[:, None] + stride * np.arange(lout)[None, :]
    cols = xp[:, taps]  # (Cin, k, Lout)
    y = np.einsum("oik,ikl->ol", K.data, cols, optimize=True)
    parents = [x, K]
    if b is not None:
        b = as_tensor(b)
        _check(b.shape == (K.shape[0],), f"conv1d: bias {b.shape} vs kernel {K.shape}")
        y = y + b.data[:, None]
        parents.append(b)

    def back(g):
        dK = np.einsum("ol,ikl->oik", g, cols, optimize=True)
        dcols = np.einsum("oik,ol->ikl", K.data, g, optimize=True)
        dxp = np.zeros_like(xp)
        for j in range(k):
            dxp[:, taps[j]] += dcols[:, j, :]
        grads = [dxp[:, pad:pad + L], dK]
        if b is not None:
            grads.append(g.sum(axis=1))
        return grads

    return record(y, parents, back, "conv1d")


def avg_pool1d(x, width: int) -> Tensor:
    x = as_tensor(x)
    c, L = x.shape
    _check(L % width == 0, f"avg_pool1d: length {L} not divisible by width {width}")
    y = x.data.reshape(c, L // width, width).mean(axis=2)
    return record(y, (x,), lambda g: (np.repeat(g, width, axis=1) / width,), "avg_pool1d")


def global_mean_pool(x) -> Tensor:
    """Average (C, L) over the length axis into (C,)."""
    x = as_tensor(x)
    L = x.shape[1]
    return record(x.data.mean(axis=1), (x,),
                  lambda g: (np.repeat(g[:, None], L, axis=1) / L,), "global_mean_pool")


def sparse_matmul(M: sp.spmatrix, x) -> Tensor:
    """Constant sparse matrix times a dense (n, C) tensor."""
    x = as_tensor(x)
    _check(M.shape[1] == x.shape[0], f"sparse_matmul: matrix {M.shape} vs input {x.shape}")
    Mt = None

    def back(g):
        nonlocal Mt
        Mt = M.T.tocsr() if Mt is None else Mt
        return (np.asarray(Mt @ g),)

    return record(np.asarray(M @ x.data), (x,), back, "sparse_matmul")


def operator_product(b, r, c) -> Tensor:
    """Branch/trunk contraction: out[t, n, i] = sum_k b[n, i, k] * r[t, k] + c[i]."""
    b, r, c = as_tensor(b), as_tensor(r), as_tensor(c)
    _check(b.ndim == 3 and r.ndim == 2 and b.shape[2] == r.shape[1] and c.shape == (b.shape[1],),
           f"operator_product: branch {b.shape}, trunk {r.shape}, bias {c.shape} do not match")
    n, m, d = b.shape
    y = (r.data @ b.data.reshape(n * m, d).T).reshape(r.shape[0], n, m) + c.data

    def back(g):
        g2 = g.reshape(r.shape[0], n * m)
        db = (g2.T @ r.data).reshape(n, m, d) if b.requires_grad else None
        dr = g2 @ b.data.reshape(n * m, d) if r.requires_grad else None
        return db, dr, g.sum(axis=(0, 1))

    return record(y, (b, r, c), back, "operator_product")


def mae_loss(pred, target) -> Tensor:
    """Mean absolute error over all components."""
    pred = as_tensor(pred)
    target = np.asarray(getattr(target, "data", target), dtype=np.float64)
    _check(pred.shape == target.shape, f"mae_loss: prediction {pred.shape} vs target {target.shape}")
    diff = pred.data - target
    n = diff.size
    return record(np.abs(diff).mean(), (pred,), lambda g: (g * np.sign(diff) / n,), "mae_loss")


def inner(x, w) -> Tensor:
    """Scalar sum(x * w) with a constant weight array ``w``."""
    x = as_tensor(x)
    w = np.asarray(getattr(w, "data", w), dtype=np.float64)
    _check(x.shape == w.shape, f"inner: input {x.shape} vs weights {w.shape}")
    return record(np.array(np.vdot(x.data, w)), (x,), lambda g: (g * w,), "inner")
