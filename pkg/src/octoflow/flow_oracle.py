"""Analytic ground-truth velocity fields.

Each segment carries a quasi-steady Poiseuille profile scaled by its share of
the instantaneous total inflow. Where segments overlap (junctions) the profiles
are blended with weights ``max(d_k, 0)**2`` of the per-segment wall distance,
which keeps the field continuous and exactly zero on the wall.
"""

from __future__ import annotations

import math
import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .hemo_bc import (
    InflowWaveform,
    InjectionParams,
    OutletFlowAssignment,
    PhysicsConstants,
    total_flow,
)
from .vasctree import PointCloud, VesselTree

FRAME_DT_MS = 1000.0 / 30.0
RECORD_MAGIC = b"OFLOW1"
CLOUD_MAGIC = b"OCLD1"


def segment_flow(tree: VesselTree, assignment: OutletFlowAssignment, segment_id: int) -> float:
    """Fraction of the inlet flow through a segment: sum of its subtree's outlet fractions."""
    if not 0 <= segment_id < len(tree.segments):
        raise KeyError(f"unknown segment id {segment_id}")
    total, stack = 0.0, [segment_id]
    while stack:
        s = stack.pop()
        kids = tree.children[s]
        if kids:
            stack.extend(kids)
        else:
            total += assignment.fractions[s]
    return total


def segment_flows(tree: VesselTree, assignment: OutletFlowAssignment) -> np.ndarray:
    frac = np.zeros(len(tree.segments))
    for s in range(len(tree.segments) - 1, -1, -1):  # children follow parents
        kids = tree.children[s]
        frac[s] = sum(frac[k] for k in kids) if kids else assignment.fractions[s]
    return frac


def unit_velocity_field(tree: VesselTree, assignment: OutletFlowAssignment, points: np.ndarray,
                        chunk: int = 32768) -> np.ndarray:
    """Velocity (m/s) per 1 mL/s of inlet flow at each point, shape (N, 3)."""
    a = tree.arrays
    flows = segment_flows(tree, assignment)
    p_all = np.atleast_2d(np.asarray(points, dtype=float))
    out = np.zeros((len(p_all), 3))
    for lo in range(0, len(p_all), chunk):
        p = p_all[lo:lo + chunk]
        rel = p[:, None, :] - a["start"][None]
        tau_raw = np.einsum("nsk,sk->ns", rel, a["axis"]) / a["length"] ** 2
        tau = np.clip(tau_raw, 0.0, 1.0)
        s = np.linalg.norm(rel - tau[..., None] * a["axis"][None], axis=2)
        r = a["r0"] + tau * (a["r1"] - a["r0"])
        inside = s < r
        inside &= ~(a["open_start"][None] & (tau_raw < 0))
        inside &= ~(a["open_end"][None] & (tau_raw > 1))
        d = np.where(inside, r - s, 0.0)
        w = d * d
        # mL/s -> m^3/s is 1e-6, mm^2 -> m^2 is 1e-6: the factors cancel
        peak = 2.0 * flows[None] / (math.pi * r * r)
        speed = np.where(inside, peak * (1.0 - (s / r) ** 2), 0.0)
        wsum = w.sum(axis=1)
        blended = np.einsum("ns,ns,sk->nk", w, speed, a["direction"])
        ok = wsum > 0
        out[lo:lo + chunk][ok] = blended[ok] / wsum[ok, None]
    return out


def poiseuille_velocity(tree: VesselTree, assignment: OutletFlowAssignment, Q_total: float, point) -> np.ndarray:
    """Velocity vector (m/s) at a lumen point for total inflow ``Q_total`` (mL/s)."""
    from .vasctree import distance_to_wall

    if distance_to_wall(tree, point) < 0:
        raise ValueError("point lies outside the vessel tree")
    return Q_total * unit_velocity_field(tree, assignment, np.asarray(point, dtype=float)[None])[0]


@dataclass
class SimulationRecord:
    case_id: str
    times: np.ndarray  # ms
    velocities: np.ndarray  # (n_frames, n_points, 3) m/s
    waveform: InflowWaveform | None = None
    injection: InjectionParams | None = None

    @property
    def n_frames(self) -> int:
        return len(self.times)

    @property
    def duration(self) -> float:
        return float(self.times[-1] - self.times[0]) if len(self.times) > 1 else 0.0


def frame_times(n_cycles: int, cycle_length: float) -> np.ndarray:
    n = int(math.floor(n_cycles * cycle_length / FRAME_DT_MS + 1e-9)) + 1
    return np.arange(n) * FRAME_DT_MS


def generate_record(tree: VesselTree, cloud: PointCloud, waveform: InflowWaveform,
                    injection: InjectionParams, constants: PhysicsConstants = PhysicsConstants(),
                    n_cycles: int = 2, assignment: OutletFlowAssignment | None = None,
                    case_id: str = "") -> SimulationRecord:
    from .hemo_bc import flow_split

    if assignment is None:
        assignment = flow_split(tree)
    times = frame_times(n_cycles, waveform.cycle_length)
    q = np.asarray(total_flow(times, waveform, injection, constants))
    g = unit_velocity_field(tree, assignment, cloud.points)
    g[cloud.wall_distance <= 0] = 0.0
    vel = q[:, None, None] * g[None]
    return SimulationRecord(case_id, times, vel, waveform, injection)


# ---------------------------------------------------------------------------
# binary formats (little-endian, float32 payloads)

def dumps_cloud(cloud: PointCloud) -> bytes:
    body = np.concatenate([cloud.points, cloud.wall_distance[:, None]], axis=1).astype("<f4")
    return CLOUD_MAGIC + struct.pack("<I", len(cloud)) + body.tobytes()


def loads_cloud(buf: bytes) -> PointCloud:
    if not buf.startswith(CLOUD_MAGIC):
        raise ValueError("not an OCLD1 cloud file")
    (n,) = struct.unpack_from("<I", buf, len(CLOUD_MAGIC))
    body = np.frombuffer(buf, dtype="<f4", count=4 * n, offset=len(CLOUD_MAGIC) + 4).reshape(n, 4)
    body = body.astype(np.float64)
    return PointCloud(body[:, :3], body[:, 3])


def dumps_record(velocities: np.ndarray, frame_dt_ms: float) -> bytes:
    v = np.asarray(velocities, dtype="<f4")
    n_frames, n_points, _ = v.shape
    return RECORD_MAGIC + struct.pack("<IIf", n_points, n_frames, frame_dt_ms) + v.tobytes()


def loads_record(buf: bytes) -> tuple[np.ndarray, float]:
    """Return (velocities (n_frames, n_points, 3) float64, frame_dt_ms)."""
    if not buf.startswith(RECORD_MAGIC):
        raise ValueError("not an OFLOW1 record file")
    off = len(RECORD_MAGIC)
    n_points, n_frames, dt = struct.unpack_from("<IIf", buf, off)
    v = np.frombuffer(buf, dtype="<f4", count=n_frames * n_points * 3, offset=off + 12)
    if np.float32(dt) == np.float32(FRAME_DT_MS):
        dt = FRAME_DT_MS
    return v.reshape(n_frames, n_points, 3).astype(np.float64), float(dt)


def quantize_cloud(cloud: PointCloud) -> PointCloud:
    """Round a cloud to its on-disk float32 precision, keeping ownership."""
    c = loads_cloud(dumps_cloud(cloud))
    return PointCloud(c.points, c.wall_distance, cloud.owning_segment)


def write_cloud(cloud: PointCloud, path: str | Path) -> None:
    Path(path).write_bytes(dumps_cloud(cloud))


def read_cloud(path: str | Path) -> PointCloud:
    return loads_cloud(Path(path).read_bytes())


def write_record(record: SimulationRecord, path: str | Path) -> None:
    dt = float(record.times[1] - record.times[0]) if record.n_frames > 1 else 0.0
    Path(path).write_bytes(dumps_record(record.velocities, dt))


def read_record(path: str | Path, case_id: str = "") -> SimulationRecord:
    v, dt = loads_record(Path(path).read_bytes())
    return SimulationRecord(case_id, np.arange(len(v)) * dt, v)
