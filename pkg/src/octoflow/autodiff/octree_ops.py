"""Differentiable convolutions on octree levels.

Node features are (n_nodes, C) tensors in key order. Same-level convolutions
use 3x3x3 kernels stored as (27, Cin, Cout) in :data:`octoflow.octree.OFFSETS`
order; stride-2 convolutions between levels use one (Cin, Cout) tap per child
octant, stored as (8, Cin, Cout).
"""

from __future__ import annotations

import numpy as np

from ..octree import CENTER, EMPTY, Octree
from .ops import _check, sparse_matmul
from .tensor import Tensor, as_tensor, record


def neighbor_pairs(octree: Octree, level: int) -> list[tuple[np.ndarray, np.ndarray]]:
    """Per offset, (output node, input node) index pairs with an occupied neighbor."""
    cache = octree._tables.setdefault(("pairs", level), [])
    if not cache:
        table = octree.neighbor_table(level)
        for o in range(27):
            out = np.flatnonzero(table[:, o] != EMPTY)
            cache.append((out, table[out, o]))
    return cache


def padded_neighbors(octree: Octree, level: int) -> np.ndarray:
    """Neighbor table (n, 27) with missing neighbors pointing at row ``n``."""
    key = ("padded", level)
    if key not in octree._tables:
        table = octree.neighbor_table(level)
        octree._tables[key] = np.where(table == EMPTY, len(table), table)
    return octree._tables[key]


def offset_pairs(octree: Octree, level: int) -> list[tuple[int, np.ndarray, np.ndarray]]:
    """Per non-center offset o: rows ``dst`` whose o-neighbor exists and those neighbors ``src``."""
    key = ("pairs", level)
    if key not in octree._tables:
        idx = padded_neighbors(octree, level)
        n = len(idx)
        pairs = []
        for o in range(27):
            if o == CENTER:
                continue
            dst = np.flatnonzero(idx[:, o] != n)
            if len(dst):
                pairs.append((o, dst, idx[dst, o]))
        octree._tables[key] = pairs
    return octree._tables[key]


def octree_conv(x, W, b, octree: Octree, level: int) -> Tensor:
    """3x3x3 convolution over occupied nodes; unoccupied neighbors contribute zero.

    y = x W_center + sum over the other offsets o of S_o x W_o, where S_o moves
    each node's o-neighbor onto it. Only existing neighbor pairs are multiplied,
    so the cost follows the occupancy rather than 27 n. Each node has at most
    one neighbor per offset, which makes the indexed updates collision free.
    """
    x, W = as_tensor(x), as_tensor(W)
    n = octree.n_nodes(level)
    _check(x.ndim == 2 and x.shape[0] == n, f"octree_conv: input {x.shape} does not match {n} nodes at level {level}")
    _check(W.ndim == 3 and W.shape[0] in (1, 27) and W.shape[1] == x.shape[1],
           f"octree_conv: input {x.shape} incompatible with kernel {W.shape}")
    pointwise = W.shape[0] == 1
    xd, Wd = x.data, W.data
    pairs = [] if pointwise else offset_pairs(octree, level)
    center = Wd[0] if pointwise else Wd[CENTER]
    y = xd @ center
    for o, dst, src in pairs:
        y[dst] += xd[src] @ Wd[o]
    parents = [x, W]
    if b is not None:
        b = as_tensor(b)
        _check(b.shape == (W.shape[2],), f"octree_conv: bias {b.shape} vs kernel {W.shape}")
        y += b.data
        parents.append(b)

    def back(g):
        dW = np.zeros_like(Wd)
        dW[0 if pointwise else CENTER] = xd.T @ g
        dx = g @ center.T if x.requires_grad else None
        for o, dst, src in pairs:
            gd = g[dst]
            dW[o] = xd[src].T @ gd
            if dx is not None:
                dx[src] += gd @ Wd[o].T
        grads = [dx, dW]
        if b is not None:
            grads.append(g.sum(axis=0))
        return grads

    return record(y, parents, back, "octree_conv")


def octree_conv_strided(x, W, b, octree: Octree, level: int) -> Tensor:
    """Stride-2 convolution from ``level`` to ``level - 1``: each parent sums W[octant] x over its children."""
    x, W = as_tensor(x), as_tensor(W)
    if not 1 <= level <= octree.max_depth:
        raise ValueError(f"octree_conv_strided: level {level} out of range")
    m = octree.level_map(level)
    _check(x.ndim == 2 and x.shape[0] == len(m.parent),
           f"octree_conv_strided: input {x.shape} does not match {len(m.parent)} nodes at level {level}")
    _check(W.shape[:2] == (8, x.shape[1]) and W.ndim == 3,
           f"octree_conv_strided: input {x.shape} incompatible with kernel {W.shape}")
    groups = [np.flatnonzero(m.octant == o) for o in range(8)]
    n_par = octree.n_nodes(level - 1)
    y = np.zeros((n_par, W.shape[2]))
    for o, sel in enumerate(groups):
        if len(sel):
            y[m.parent[sel]] += x.data[sel] @ W.data[o]
    parents = [x, W]
    if b is not None:
        b = as_tensor(b)
        y += b.data
        parents.append(b)

    def back(g):
        dx = np.zeros_like(x.data)
        dW = np.zeros_like(W.data)
        for o, sel in enumerate(groups):
            if len(sel):
                gp = g[m.parent[sel]]
                dx[sel] = gp @ W.data[o].T
                dW[o] = x.data[sel].T @ gp
        grads = [dx, dW]
        if b is not None:
            grads.append(g.sum(axis=0))
        return grads

    return record(y, parents, back, "octree_conv_strided")


def octree_conv_transposed(x, W, b, octree: Octree, level: int) -> Tensor:
    """Stride-2 transposed convolution from ``level`` to ``level + 1``: child = x[parent] @ W[octant].

    With ``W_t[o] = W_s[o].T`` this is the exact adjoint of :func:`octree_conv_strided`.
    """
    x, W = as_tensor(x), as_tensor(W)
    if not 0 <= level < octree.max_depth:
        raise ValueError(f"octree_conv_transposed: level {level} out of range")
    m = octree.level_map(level + 1)
    _check(x.ndim == 2 and x.shape[0] == octree.n_nodes(level),
           f"octree_conv_transposed: input {x.shape} does not match {octree.n_nodes(level)} nodes at level {level}")
    _check(W.shape[:2] == (8, x.shape[1]) and W.ndim == 3,
           f"octree_conv_transposed: input {x.shape} incompatible with kernel {W.shape}")
    groups = [np.flatnonzero(m.octant == o) for o in range(8)]
    y = np.zeros((len(m.parent), W.shape[2]))
    for o, sel in enumerate(groups):
        if len(sel):
            y[sel] = x.data[m.parent[sel]] @ W.data[o]
    parents = [x, W]
    if b is not None:
        b = as_tensor(b)
        y += b.data
        parents.append(b)

    def back(g):
        dx = np.zeros_like(x.data)
        dW = np.zeros_like(W.data)
        for o, sel in enumerate(groups):
            if len(sel):
                xp = x.data[m.parent[sel]]
                dW[o] = xp.T @ g[sel]
                # parents are unique within one octant group
                dx[m.parent[sel]] += g[sel] @ W.data[o].T
        grads = [dx, dW]
        if b is not None:
            grads.append(g.sum(axis=0))
        return grads

    return record(y, parents, back, "octree_conv_transposed")


def interpolate_op(x, octree: Octree, points=None, matrix=None) -> Tensor:
    """Trilinear interpolation of finest-level node features at query points (N, 3)."""
    if matrix is None:
        matrix = octree.interpolation_matrix(points)
    return sparse_matmul(matrix, x)
