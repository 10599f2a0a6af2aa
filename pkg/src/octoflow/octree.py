"""Sparse octrees over point clouds.

Every level stores the sorted Morton keys of its occupied cells. A cell at level
``d`` has integer coordinates in ``[0, 2**d)``; its parent key is ``key >> 3``
and its octant inside the parent is ``key & 7``. The finest cell pitch is fixed
in millimetres, so the root side is ``finest_pitch * 2**max_depth``.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from itertools import product

import numpy as np
import scipy.sparse as sp

EMPTY = -1

# neighbor offset o = (dx+1)*9 + (dy+1)*3 + (dz+1); offset 26-o is its mirror
OFFSETS = np.array(list(product((-1, 0, 1), repeat=3)), dtype=np.int64)
CENTER = 13


def _spread(v: np.ndarray) -> np.ndarray:
    x = v.astype(np.uint64) & np.uint64(0x1FFFFF)
    x = (x | (x << np.uint64(32))) & np.uint64(0x1F00000000FFFF)
    x = (x | (x << np.uint64(16))) & np.uint64(0x1F0000FF0000FF)
    x = (x | (x << np.uint64(8))) & np.uint64(0x100F00F00F00F00F)
    x = (x | (x << np.uint64(4))) & np.uint64(0x10C30C30C30C30C3)
    x = (x | (x << np.uint64(2))) & np.uint64(0x1249249249249249)
    return x


def _compact(x: np.ndarray) -> np.ndarray:
    x = x & np.uint64(0x1249249249249249)
    x = (x ^ (x >> np.uint64(2))) & np.uint64(0x10C30C30C30C30C3)
    x = (x ^ (x >> np.uint64(4))) & np.uint64(0x100F00F00F00F00F)
    x = (x ^ (x >> np.uint64(8))) & np.uint64(0x1F0000FF0000FF)
    x = (x ^ (x >> np.uint64(16))) & np.uint64(0x1F00000000FFFF)
    x = (x ^ (x >> np.uint64(32))) & np.uint64(0x1FFFFF)
    return x


def encode(ijk: np.ndarray) -> np.ndarray:
    """Morton key of integer cell coordinates, x in the most significant bit of each triple."""
    ijk = np.asarray(ijk, dtype=np.int64)
    key = (_spread(ijk[..., 0]) << np.uint64(2)) | (_spread(ijk[..., 1]) << np.uint64(1)) | _spread(ijk[..., 2])
    return key.astype(np.int64)


def decode(key: np.ndarray) -> np.ndarray:
    k = np.asarray(key, dtype=np.int64).astype(np.uint64)
    return np.stack([_compact(k >> np.uint64(2)), _compact(k >> np.uint64(1)), _compact(k)], axis=-1).astype(np.int64)


@dataclass(frozen=True)
class OctreeConfig:
    max_depth: int = 10
    finest_pitch: float = 0.15

    def __post_init__(self):
        if not 1 <= self.max_depth <= 16:
            raise ValueError("max_depth must lie in [1, 16]")
        if self.finest_pitch <= 0:
            raise ValueError("finest_pitch must be positive")

    @property
    def root_side(self) -> float:
        return self.finest_pitch * 2 ** self.max_depth


@dataclass
class LevelMap:
    """Child-to-parent mapping between ``fine_level`` and ``fine_level - 1``.

    Children of a parent are contiguous in key order: ``ptr[p]:ptr[p+1]``.
    """
    fine_level: int
    parent: np.ndarray
    octant: np.ndarray
    ptr: np.ndarray

    def children(self, p: int) -> np.ndarray:
        return np.arange(self.ptr[p], self.ptr[p + 1])


@dataclass
class Octree:
    config: OctreeConfig
    root_origin: np.ndarray
    keys: list[np.ndarray]
    point_node: np.ndarray
    node_mean_position: np.ndarray
    neighbor_lookups: int = 0
    _tables: dict = field(default_factory=dict, repr=False)
    _coords: dict = field(default_factory=dict, repr=False)
    _maps: dict = field(default_factory=dict, repr=False)

    @property
    def max_depth(self) -> int:
        return self.config.max_depth

    @property
    def root_side(self) -> float:
        return self.config.root_side

    @property
    def pitch(self) -> float:
        return self.config.finest_pitch

    def n_nodes(self, level: int) -> int:
        return len(self.keys[level])

    def coords(self, level: int) -> np.ndarray:
        if level not in self._coords:
            self._coords[level] = decode(self.keys[level])
        return self._coords[level]

    def cell_centers(self, level: int) -> np.ndarray:
        side = self.root_side / 2 ** level
        return self.root_origin + (self.coords(level) + 0.5) * side

    def child_masks(self, level: int) -> np.ndarray:
        """8-bit occupancy mask of the children of each node at ``level``."""
        if level >= self.max_depth:
            return np.zeros(self.n_nodes(level), dtype=np.uint8)
        m = self.level_map(level + 1)
        mask = np.zeros(self.n_nodes(level), dtype=np.uint8)
        np.bitwise_or.at(mask, m.parent, (1 << m.octant).astype(np.uint8))
        return mask

    def find(self, level: int, keys: np.ndarray) -> np.ndarray:
        """Index of each key in the level's sorted key list, or EMPTY."""
        lv = self.keys[level]
        keys = np.asarray(keys, dtype=np.int64)
        idx = np.searchsorted(lv, keys)
        idx_c = np.minimum(idx, len(lv) - 1)
        return np.where((idx < len(lv)) & (lv[idx_c] == keys), idx_c, EMPTY)

    def neighbor(self, level: int, key: int, offset) -> int:
        """Key of the occupied cell displaced by ``offset``, or EMPTY."""
        c = decode(np.int64(key)) + np.asarray(offset, dtype=np.int64)
        self.neighbor_lookups += 1
        if np.any(c < 0) or np.any(c >= 2 ** level):
            return EMPTY
        k = int(encode(c))
        return k if self.find(level, np.array([k]))[0] != EMPTY else EMPTY

    def neighbor_table(self, level: int) -> np.ndarray:
        """(n_nodes, 27) node indices of the 3x3x3 neighborhood, EMPTY where unoccupied.

        Built once per level with exactly 27 lookups per occupied node, then cached.
        """
        if level not in self._tables:
            c = self.coords(level)
            n = len(c)
            table = np.full((n, 27), EMPTY, dtype=np.int64)
            for o, off in enumerate(OFFSETS):
                q = c + off
                ok = np.all((q >= 0) & (q < 2 ** level), axis=1)
                hit = np.full(n, EMPTY, dtype=np.int64)
                hit[ok] = self.find(level, encode(q[ok]))
                table[:, o] = hit
                self.neighbor_lookups += n
            self._tables[level] = table
        return self._tables[level]

    def level_map(self, fine_level: int) -> LevelMap:
        if not 1 <= fine_level <= self.max_depth:
            raise ValueError(f"no parent level for level {fine_level}")
        if fine_level not in self._maps:
            k = self.keys[fine_level]
            parent = np.searchsorted(self.keys[fine_level - 1], k >> 3)
            ptr = np.searchsorted(parent, np.arange(self.n_nodes(fine_level - 1) + 1))
            self._maps[fine_level] = LevelMap(fine_level, parent, (k & 7).astype(np.int64), ptr)
        return self._maps[fine_level]

    def interpolation_weights(self, x: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
        """Trilinear corner indices (N, 8) and weights (N, 8) on the finest level.

        Weight of unoccupied corners is redistributed proportionally over the
        occupied ones; if those all carry zero weight they share it equally.
        Rows with no occupied corner have all-zero weights.
        """
        x = np.atleast_2d(np.asarray(x, dtype=float))
        rel = (x - self.root_origin) / self.pitch
        if np.any(rel < 0) or np.any(rel > 2 ** self.max_depth):
            raise ValueError("query point outside the octree root cube")
        u = rel - 0.5
        base = np.floor(u).astype(np.int64)
        frac = u - base
        idx = np.empty((len(x), 8), dtype=np.int64)
        w = np.empty((len(x), 8))
        n_cells = 2 ** self.max_depth
        for c, (a, b, e) in enumerate(product((0, 1), repeat=3)):
            q = base + np.array([a, b, e])
            ok = np.all((q >= 0) & (q < n_cells), axis=1)
            found = np.full(len(x), EMPTY, dtype=np.int64)
            found[ok] = self.find(self.max_depth, encode(q[ok]))
            idx[:, c] = found
            w[:, c] = (frac[:, 0] if a else 1 - frac[:, 0]) * (frac[:, 1] if b else 1 - frac[:, 1]) * (frac[:, 2] if e else 1 - frac[:, 2])
        occ = idx != EMPTY
        w = np.where(occ, w, 0.0)
        total = w.sum(axis=1, keepdims=True)
        n_occ = occ.sum(axis=1, keepdims=True)
        tiny = total[:, 0] <= 1e-300
        w = np.where(tiny[:, None], occ / np.maximum(n_occ, 1), w / np.where(tiny[:, None], 1.0, total))
        return idx, w

    def interpolation_matrix(self, x: np.ndarray) -> sp.csr_matrix:
        idx, w = self.interpolation_weights(x)
        rows = np.repeat(np.arange(len(idx)), 8)
        keep = idx.ravel() != EMPTY
        return sp.csr_matrix((w.ravel()[keep], (rows[keep], idx.ravel()[keep])),
                             shape=(len(idx), self.n_nodes(self.max_depth)))


@dataclass
class OctreeFeatureField:
    level: int
    values: np.ndarray

    def __post_init__(self):
        if self.values.ndim != 2:
            raise ValueError("feature values must be (n_nodes, channels)")
        if not np.all(np.isfinite(self.values)):
            raise ValueError("non-finite octree features")

    @property
    def channels(self) -> int:
        return self.values.shape[1]


def _points(cloud) -> np.ndarray:
    return np.asarray(getattr(cloud, "points", cloud), dtype=float).reshape(-1, 3)


def build(cloud, config: OctreeConfig = OctreeConfig()) -> Octree:
    """Build the occupancy octree of a point cloud, root cube centred on the centroid."""
    pts = _points(cloud)
    if len(pts) == 0:
        raise ValueError("cannot build an octree from an empty cloud")
    origin = pts.mean(axis=0) - config.root_side / 2
    cells = np.floor((pts - origin) / config.finest_pitch).astype(np.int64)
    n_cells = 2 ** config.max_depth
    if np.any(cells < 0) or np.any(cells >= n_cells):
        raise ValueError("geometry exceeds octree domain")
    finest = encode(cells)
    keys = [None] * (config.max_depth + 1)
    uniq, inverse = np.unique(finest, return_inverse=True)
    keys[config.max_depth] = uniq
    for d in range(config.max_depth - 1, -1, -1):
        keys[d] = np.unique(keys[d + 1] >> 3)
    counts = np.bincount(inverse, minlength=len(uniq))
    mean_pos = np.stack([np.bincount(inverse, pts[:, c], len(uniq)) for c in range(3)], axis=1) / counts[:, None]
    return Octree(config, origin, keys, inverse.astype(np.int64), mean_pos)


def average_matrix(octree: Octree) -> sp.csr_matrix:
    """(n_finest, n_points) matrix averaging point rows into their finest node."""
    inv = octree.point_node
    counts = np.bincount(inv, minlength=octree.n_nodes(octree.max_depth))
    return sp.csr_matrix((1.0 / counts[inv], (inv, np.arange(len(inv)))),
                         shape=(len(counts), len(inv)))


def average_point_features(octree: Octree, cloud, per_point_features: np.ndarray) -> OctreeFeatureField:
    f = np.asarray(per_point_features, dtype=float)
    if f.ndim == 1:
        f = f[:, None]
    if len(f) != len(octree.point_node):
        raise ValueError(f"feature rows {len(f)} != cloud points {len(octree.point_node)}")
    return OctreeFeatureField(octree.max_depth, np.asarray(average_matrix(octree) @ f))


def interpolate(field: OctreeFeatureField, octree: Octree, x) -> np.ndarray:
    """Trilinear interpolation of finest-level features at ``x`` (a point or (N, 3) batch)."""
    if field.level != octree.max_depth:
        raise ValueError("interpolation needs a finest-level field")
    single = np.ndim(x) == 1
    idx, w = octree.interpolation_weights(x)
    v = field.values.reshape(len(field.values), -1)
    # offsets from a reference corner keep constant fields bit-exact
    ref = idx[np.arange(len(idx)), np.argmax(idx != EMPTY, axis=1)]
    base = np.where((ref != EMPTY)[:, None], v[ref], 0.0)
    diff = np.where((idx != EMPTY)[..., None], v[idx] - base[:, None], 0.0)
    out = (base + np.einsum("nk,nkc->nc", w, diff)).reshape(len(idx), *field.values.shape[1:])
    return out[0] if single else out


def level_maps(octree: Octree, from_level: int, to_level: int) -> LevelMap:
    if abs(from_level - to_level) != 1:
        raise ValueError("levels must be adjacent")
    return octree.level_map(max(from_level, to_level))
