"""Parametric synthetic vessel trees, lumen point sampling and wall distances.

Trees are unions of conical frusta along a binary centerline tree. Junctions
between a parent and its children are closed with spherical caps (the axis
distance is clamped to the segment), while the inlet start and the outlet ends
are open planes: flow enters and leaves there, so they are not walls.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, replace
from functools import cached_property
from pathlib import Path

import numpy as np

Vec3 = tuple[float, float, float]

TREE_HEADER = "vasctree v1"


@dataclass(frozen=True)
class BranchSegment:
    start: Vec3
    end: Vec3
    radius_start: float
    radius_end: float
    parent: int | None = None

    def __post_init__(self):
        if not (self.radius_start > 0 and self.radius_end > 0):
            raise ValueError("segment radii must be positive")
        if self.length <= 0:
            raise ValueError("segment has zero length")

    @property
    def length(self) -> float:
        return math.dist(self.start, self.end)

    @property
    def direction(self) -> np.ndarray:
        v = np.subtract(self.end, self.start)
        return v / np.linalg.norm(v)


@dataclass(frozen=True)
class TreeGenConfig:
    root_radius_range: tuple[float, float] = (1.62, 1.98)
    bifurcation_angle_range: tuple[float, float] = (35.0, 135.0)
    n_generations: int = 3
    radius_decay_exponent: float = 3.0
    extension_factor: float = 5.0
    segment_length_over_radius: float = 8.0
    # pull of each bifurcation's bisector toward +z (root axis); approximates
    # the vertical attraction knob of the original surface generator
    vertical_attraction: float = 0.3

    def __post_init__(self):
        lo, hi = self.root_radius_range
        if not (0 < lo <= hi):
            raise ValueError(f"invalid root_radius_range {self.root_radius_range}")
        alo, ahi = self.bifurcation_angle_range
        if not (0 < alo <= ahi < 180):
            raise ValueError(f"invalid bifurcation_angle_range {self.bifurcation_angle_range}")
        if self.n_generations < 0:
            raise ValueError("n_generations must be >= 0")
        if self.radius_decay_exponent <= 0 or self.segment_length_over_radius <= 0:
            raise ValueError("decay exponent and length ratio must be positive")
        if self.extension_factor < 0:
            raise ValueError("extension_factor must be >= 0")


@dataclass(frozen=True)
class VesselTree:
    segments: tuple[BranchSegment, ...]
    generation_seed: int = 0

    def __post_init__(self):
        roots = [i for i, s in enumerate(self.segments) if s.parent is None]
        if len(roots) != 1:
            raise ValueError(f"tree must have exactly one root, found {len(roots)}")
        for i, s in enumerate(self.segments):
            if s.parent is None:
                continue
            if not 0 <= s.parent < i:
                raise ValueError(f"segment {i} has invalid parent {s.parent}")
            p = self.segments[s.parent]
            if math.dist(p.end, s.start) > 1e-9:
                raise ValueError(f"segment {i} is not attached to its parent's end")
            if s.radius_start > p.radius_end * (1 + 1e-12):
                raise ValueError(f"segment {i} is wider than its parent")

    @property
    def inlet_segment(self) -> int:
        return next(i for i, s in enumerate(self.segments) if s.parent is None)

    @cached_property
    def children(self) -> tuple[tuple[int, ...], ...]:
        kids: list[list[int]] = [[] for _ in self.segments]
        for i, s in enumerate(self.segments):
            if s.parent is not None:
                kids[s.parent].append(i)
        return tuple(tuple(k) for k in kids)

    @property
    def outlet_segments(self) -> list[int]:
        return [i for i, k in enumerate(self.children) if not k]

    @cached_property
    def arrays(self) -> dict[str, np.ndarray]:
        starts = np.array([s.start for s in self.segments], dtype=float)
        ends = np.array([s.end for s in self.segments], dtype=float)
        axis = ends - starts
        length = np.linalg.norm(axis, axis=1)
        open_start = np.array([s.parent is None for s in self.segments])
        open_end = np.array([not k for k in self.children])
        return {
            "start": starts,
            "axis": axis,
            "length": length,
            "direction": axis / length[:, None],
            "r0": np.array([s.radius_start for s in self.segments]),
            "r1": np.array([s.radius_end for s in self.segments]),
            "open_start": open_start,
            "open_end": open_end,
        }

    def total_length(self) -> float:
        return float(self.arrays["length"].sum())

    def min_radius(self) -> float:
        a = self.arrays
        return float(min(a["r0"].min(), a["r1"].min()))


def _child_directions(parent_dir, angle_deg, azimuth, attraction):
    up = np.array([0.0, 0.0, 1.0])
    bis = parent_dir + attraction * up
    bis /= np.linalg.norm(bis)
    # any vector not parallel to the bisector seeds the perpendicular frame
    helper = np.array([1.0, 0.0, 0.0]) if abs(bis[0]) < 0.9 else np.array([0.0, 1.0, 0.0])
    e1 = np.cross(bis, helper)
    e1 /= np.linalg.norm(e1)
    e2 = np.cross(bis, e1)
    e = math.cos(azimuth) * e1 + math.sin(azimuth) * e2
    half = math.radians(angle_deg) / 2
    a = math.cos(half) * bis + math.sin(half) * e
    b = math.cos(half) * bis - math.sin(half) * e
    return a / np.linalg.norm(a), b / np.linalg.norm(b)


def generate_tree(config: TreeGenConfig, seed: int) -> VesselTree:
    """Grow a full binary tree of constant-radius segments from the origin along +z.

    Segments are numbered breadth first; the two children of a segment start at
    its end, span an inter-child angle drawn from ``bifurcation_angle_range`` and
    have radius ``r * 2**(-1/radius_decay_exponent)``.
    """
    rng = np.random.default_rng(seed)
    r_root = float(rng.uniform(*config.root_radius_range))
    decay = 2.0 ** (-1.0 / config.radius_decay_exponent)
    ratio = config.segment_length_over_radius

    def seg(start, direction, r, parent):
        end = np.asarray(start) + direction * ratio * r
        return BranchSegment(tuple(map(float, start)), tuple(map(float, end)), r, r, parent)

    segments = [seg((0.0, 0.0, 0.0), np.array([0.0, 0.0, 1.0]), r_root, None)]
    frontier = [0]
    for _ in range(config.n_generations):
        nxt = []
        for pid in frontier:
            parent = segments[pid]
            angle = float(rng.uniform(*config.bifurcation_angle_range))
            azimuth = float(rng.uniform(0.0, 2 * math.pi))
            dirs = _child_directions(parent.direction, angle, azimuth, config.vertical_attraction)
            r = parent.radius_end * decay
            for d in dirs:
                segments.append(seg(parent.end, d, r, pid))
                nxt.append(len(segments) - 1)
        frontier = nxt
    return VesselTree(tuple(segments), generation_seed=seed)


def add_flow_extensions(tree: VesselTree, extension_factor: float = 5.0) -> VesselTree:
    """Lengthen the inlet backwards and every outlet forwards by ``extension_factor`` diameters."""
    if extension_factor == 0:
        return tree
    segs = list(tree.segments)
    outlets = set(tree.outlet_segments)
    for i, s in enumerate(segs):
        d = s.direction
        start, end = np.array(s.start), np.array(s.end)
        if s.parent is None:
            start = start - d * extension_factor * 2 * s.radius_start
        if i in outlets:
            end = end + d * extension_factor * 2 * s.radius_end
        segs[i] = replace(s, start=tuple(map(float, start)), end=tuple(map(float, end)))
    # children attach to the (unchanged) parent end, so topology is preserved
    return VesselTree(tuple(segs), generation_seed=tree.generation_seed)


def segment_distances(tree: VesselTree, points: np.ndarray) -> np.ndarray:
    """Signed per-segment wall distance, shape (n_points, n_segments).

    Positive inside the segment. Beyond an open end the value is minus the
    distance past the end plane.
    """
    return _segment_distances(tree.arrays, points)


def _segment_distances(a: dict[str, np.ndarray], points: np.ndarray) -> np.ndarray:
    p = np.atleast_2d(np.asarray(points, dtype=float))
    rel = p[:, None, :] - a["start"][None]
    tau_raw = np.einsum("nsk,sk->ns", rel, a["axis"]) / a["length"] ** 2
    tau = np.clip(tau_raw, 0.0, 1.0)
    radial = rel - tau[..., None] * a["axis"][None]
    s = np.linalg.norm(radial, axis=2)
    r = a["r0"] + tau * (a["r1"] - a["r0"])
    d = r - s
    before = a["open_start"][None] & (tau_raw < 0)
    after = a["open_end"][None] & (tau_raw > 1)
    d = np.where(before, np.minimum(d, tau_raw * a["length"]), d)
    d = np.where(after, np.minimum(d, (1 - tau_raw) * a["length"]), d)
    return d


def wall_distance(tree: VesselTree, points: np.ndarray, chunk: int = 65536) -> tuple[np.ndarray, np.ndarray]:
    """Union wall distance (max over segments) and the owning segment per point."""
    p = np.atleast_2d(np.asarray(points, dtype=float))
    dist = np.empty(len(p))
    owner = np.empty(len(p), dtype=np.int64)
    for lo in range(0, len(p), chunk):
        d = segment_distances(tree, p[lo:lo + chunk])
        owner[lo:lo + chunk] = d.argmax(axis=1)
        dist[lo:lo + chunk] = d.max(axis=1)
    return dist, owner


def distance_to_wall(tree: VesselTree, point) -> float:
    """Distance to the vessel wall; positive inside the lumen, negative outside."""
    return float(wall_distance(tree, np.asarray(point, dtype=float)[None])[0][0])


@dataclass
class PointCloud:
    points: np.ndarray
    wall_distance: np.ndarray
    owning_segment: np.ndarray | None = None

    def __post_init__(self):
        self.points = np.asarray(self.points, dtype=float).reshape(-1, 3)
        self.wall_distance = np.asarray(self.wall_distance, dtype=float).reshape(-1)
        if len(self.wall_distance) != len(self.points):
            raise ValueError("points and wall_distance lengths differ")
        if self.owning_segment is not None:
            self.owning_segment = np.asarray(self.owning_segment, dtype=np.int64)
            if len(self.owning_segment) != len(self.points):
                raise ValueError("points and owning_segment lengths differ")

    def __len__(self) -> int:
        return len(self.points)


def _hash_uniform(cells: np.ndarray, seed: int, stream: int) -> np.ndarray:
    """Deterministic per-cell uniforms in [0, 1) from a splitmix64 hash."""
    with np.errstate(over="ignore"):
        h = np.uint64(seed & 0xFFFFFFFFFFFFFFFF) * np.uint64(0x9E3779B97F4A7C15) + np.uint64(stream)
        for c in range(cells.shape[1]):
            h = h ^ (cells[:, c].astype(np.uint64) + np.uint64(0x9E3779B97F4A7C15) + (h << np.uint64(6)) + (h >> np.uint64(2)))
        z = h + np.uint64(0x9E3779B97F4A7C15)
        z = (z ^ (z >> np.uint64(30))) * np.uint64(0xBF58476D1CE4E5B9)
        z = (z ^ (z >> np.uint64(27))) * np.uint64(0x94D049BB133111EB)
        z = z ^ (z >> np.uint64(31))
    return (z >> np.uint64(11)).astype(np.float64) / float(1 << 53)


def sample_lumen_points(tree: VesselTree, target_spacing: float, seed: int) -> PointCloud:
    """Jittered-grid sampling of the lumen, one candidate per grid cell.

    The grid is global, so a cell reached from several overlapping segments
    yields the same candidate and is kept only by its owning segment. Output is
    concatenated in segment-id order.
    """
    if target_spacing <= 0:
        raise ValueError("target_spacing must be positive")
    if target_spacing > tree.min_radius():
        raise ValueError("spacing exceeds minimal lumen size")
    a = tree.arrays
    h = float(target_spacing)
    pts, dists, owners = [], [], []
    for k in range(len(tree.segments)):
        r = max(a["r0"][k], a["r1"][k])
        ends = np.stack([a["start"][k], a["start"][k] + a["axis"][k]])
        lo = np.floor((ends.min(0) - r) / h).astype(np.int64)
        hi = np.floor((ends.max(0) + r) / h).astype(np.int64)
        grids = np.meshgrid(*[np.arange(l, u + 1) for l, u in zip(lo, hi)], indexing="ij")
        cells = np.stack([g.ravel() for g in grids], axis=1)
        jitter = np.stack([_hash_uniform(cells, seed, c) for c in range(3)], axis=1)
        cand = (cells + jitter) * h
        # cheap prefilter against this segment alone
        single = {key: v[k:k + 1] for key, v in a.items()}
        own = _segment_distances(single, cand)[:, 0] > 0
        cand = cand[own]
        d, owner = wall_distance(tree, cand)
        keep = (owner == k) & (d > 0)
        pts.append(cand[keep])
        dists.append(d[keep])
        owners.append(owner[keep])
    return PointCloud(np.concatenate(pts), np.concatenate(dists), np.concatenate(owners))


def cloud_from_points(tree: VesselTree, points: np.ndarray) -> PointCloud:
    d, owner = wall_distance(tree, points)
    return PointCloud(points, d, owner)


# ---------------------------------------------------------------------------
# text format

def _fmt(v: float) -> str:
    return f"{v:.9g}"


def format_tree(tree: VesselTree) -> str:
    lines = [f"{TREE_HEADER} seed={tree.generation_seed}"]
    for i, s in enumerate(tree.segments):
        parent = -1 if s.parent is None else s.parent
        lines.append(
            f"seg {i} parent={parent} start={','.join(map(_fmt, s.start))} "
            f"end={','.join(map(_fmt, s.end))} r0={_fmt(s.radius_start)} r1={_fmt(s.radius_end)}"
        )
    return "\n".join(lines) + "\n"


def parse_tree(text: str) -> VesselTree:
    lines = [ln for ln in text.splitlines() if ln.strip()]
    if not lines or not lines[0].startswith(TREE_HEADER):
        raise ValueError("not a vasctree v1 file")
    head = dict(kv.split("=", 1) for kv in lines[0].split()[2:])
    segs = []
    for n, ln in enumerate(lines[1:]):
        parts = ln.split()
        if parts[0] != "seg" or int(parts[1]) != n:
            raise ValueError(f"bad segment record: {ln!r}")
        kv = dict(p.split("=", 1) for p in parts[2:])
        parent = int(kv["parent"])
        segs.append(BranchSegment(
            start=tuple(float(x) for x in kv["start"].split(",")),
            end=tuple(float(x) for x in kv["end"].split(",")),
            radius_start=float(kv["r0"]),
            radius_end=float(kv["r1"]),
            parent=None if parent < 0 else parent,
        ))
    return VesselTree(tuple(segs), generation_seed=int(head.get("seed", 0)))


def write_tree(tree: VesselTree, path: str | Path) -> None:
    Path(path).write_text(format_tree(tree))


def read_tree(path: str | Path) -> VesselTree:
    return parse_tree(Path(path).read_text())
