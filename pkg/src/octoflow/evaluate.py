"""Error statistics on time-averaged fields and the runtime benchmark."""

from __future__ import annotations

import csv
import io
import math
import time
from dataclasses import dataclass
from pathlib import Path

import numpy as np
from threadpoolctl import threadpool_info

from . import octree as ot
from .model import SurrogateModel
from .train import Case


def absolute_errors(pred, target) -> np.ndarray:
    """Flat array of per-component absolute errors."""
    pred, target = np.asarray(pred, dtype=float), np.asarray(target, dtype=float)
    if pred.shape != target.shape:
        raise ValueError(f"prediction shape {pred.shape} != target shape {target.shape}")
    return np.abs(pred - target).ravel()


def time_average_field(frames) -> np.ndarray:
    """Mean over the leading (frame) axis of a (T, N, 3) array."""
    frames = np.asarray(frames, dtype=float)
    if frames.ndim != 3 or frames.shape[0] == 0:
        raise ValueError(f"expected (T >= 1, N, 3) frames, got shape {frames.shape}")
    return frames.mean(axis=0)


@dataclass(frozen=True)
class ErrorStats:
    mean: float
    std: float
    median: float
    q75: float
    q90: float
    r_squared: float  # NaN when the target is constant


def r_squared(pred, target) -> float:
    """Pooled-component coefficient of determination; NaN for a constant target."""
    pred, target = np.asarray(pred, dtype=float).ravel(), np.asarray(target, dtype=float).ravel()
    ss_tot = float(np.sum((target - target.mean()) ** 2))
    if ss_tot == 0.0:
        return math.nan
    return 1.0 - float(np.sum((target - pred) ** 2)) / ss_tot


def compute_stats(pred_avg, target_avg) -> ErrorStats:
    err = absolute_errors(pred_avg, target_avg)
    if np.asarray(target_avg).reshape(-1, 3).shape[0] < 2:
        raise ValueError("statistics need at least two points")
    med, q75, q90 = np.quantile(err, [0.5, 0.75, 0.9])
    return ErrorStats(float(err.mean()), float(err.std()), float(med), float(q75), float(q90),
                      r_squared(pred_avg, target_avg))


def mean_speed(field) -> float:
    return float(np.linalg.norm(np.asarray(field, dtype=float).reshape(-1, 3), axis=1).mean())


def volumetric_flow_rate(velocities, normal, areas) -> float:
    """Flux through a slice in mL/s from velocities (m/s) and point areas (mm^2).

    1 m/s over 1 mm^2 is 1e-6 m^3/s = 1 mL/s, so no conversion factor is needed.
    """
    n = np.asarray(normal, dtype=float)
    n = n / np.linalg.norm(n)
    u = np.asarray(velocities, dtype=float).reshape(-1, 3)
    return float((u @ n) @ np.asarray(areas, dtype=float).reshape(-1))


def predict_case(model: SurrogateModel, case: Case, octree: ot.Octree | None = None) -> np.ndarray:
    """Predicted frames at every cloud point and every record time."""
    return model.predict(case.cloud, case.waveform, case.cloud.points, case.record.times, case.duration, octree)


@dataclass
class EvalResult:
    rows: list[tuple[str, ErrorStats]]  # per case
    pooled: ErrorStats
    pooled_errors: np.ndarray
    mean_speed: float


def evaluate_cases(model: SurrogateModel, cases: list[Case], predictions: dict[str, np.ndarray] | None = None) -> EvalResult:
    """Statistics of time-averaged fields per case plus a pooled row over all cases."""
    if not cases:
        raise ValueError("no cases to evaluate")
    rows, preds, targets = [], [], []
    for c in cases:
        frames = predictions[c.case_id] if predictions else predict_case(model, c)
        p, t = time_average_field(frames), time_average_field(c.record.velocities)
        rows.append((c.case_id, compute_stats(p, t)))
        preds.append(p)
        targets.append(t)
    P, T = np.concatenate(preds), np.concatenate(targets)
    return EvalResult(rows, compute_stats(P, T), absolute_errors(P, T), mean_speed(T))


def format_stats_csv(result: EvalResult) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["case", "mae", "std", "median", "q75", "q90", "r2"])
    for name, s in [*result.rows, ("pooled", result.pooled)]:
        w.writerow([name, *(repr(float(v)) for v in (s.mean, s.std, s.median, s.q75, s.q90, s.r_squared))])
    return buf.getvalue()


# ---------------------------------------------------------------------------
# runtime benchmark

@dataclass(frozen=True)
class PhaseTiming:
    mean_ms: float
    std_ms: float
    n: int


@dataclass
class RuntimeReport:
    t_net: PhaseTiming
    t_spatial: PhaseTiming  # per 1e6 query points
    t_temporal: PhaseTiming  # per 1e2 query times
    n_runs: int
    n_spatial: int
    n_temporal: int
    threads: str


@dataclass
class CostModelFit:
    t_net_ms: float
    t_spatial_ms: float  # per 1e6 points
    t_temporal_ms: float  # per 1e2 times
    grid: list[tuple[int, int, float, float]]  # (N_s, N_t, measured ms, fitted ms)
    max_rel_residual: float


@dataclass
class BenchmarkResult:
    report: RuntimeReport
    fit: CostModelFit
    spatial_doubling: float  # t_spatial(2 N) / t_spatial(N)


def _thread_mode() -> str:
    info = threadpool_info()
    if not info:
        return "default"
    return ";".join(f"{d.get('internal_api', '?')}={d.get('num_threads', '?')}" for d in info)


def query_points(cloud, n: int, pitch: float, rng: np.random.Generator) -> np.ndarray:
    """``n`` points near the lumen: cloud points jittered within one finest cell."""
    idx = rng.integers(0, len(cloud), n)
    return cloud.points[idx] + rng.uniform(-0.5 * pitch, 0.5 * pitch, (n, 3))


def _timed(fn, runs: int, warmup: int) -> np.ndarray:
    for _ in range(warmup):
        fn()
    out = np.empty(runs)
    for i in range(runs):
        t0 = time.perf_counter()
        fn()
        out[i] = (time.perf_counter() - t0) * 1e3
    return out


class _Phases:
    """Phase closures matching the three pipeline blocks."""

    def __init__(self, model: SurrogateModel, case: Case):
        self.model, self.case = model, case
        self.oc = ot.OctreeConfig(model.config.octree_depth)
        self.octree = ot.build(case.cloud, self.oc)
        self.field = model.encode(case.cloud, case.waveform, self.octree)

    def net(self):
        octree = ot.build(self.case.cloud, self.oc)
        return self.model.encode(self.case.cloud, self.case.waveform, octree)

    def spatial(self, pts):
        return self.model.spatial_head(self.field, self.octree, pts)

    def temporal(self, b, times):
        r = self.model.trunk_forward(times / self.case.duration)
        return self.model.evaluate_velocity(b, r)


def benchmark(model: SurrogateModel, case: Case, ns_grid=(10_000, 100_000), nt_grid=(10, 100),
              n_runs: int = 10, warmup: int = 5, seed: int = 0) -> BenchmarkResult:
    """Time the network, spatial-head and temporal phases and fit the linear cost model.

    Each phase is timed on its own; the total at a grid point is the sum of the
    phase means measured there, and the cost model
    ``t_net + N_s / 1e6 * t_spatial + N_t / 1e2 * t_temporal`` is fitted to those
    totals by least squares.
    """
    if n_runs < 10:
        raise ValueError("n_runs must be at least 10")
    rng = np.random.default_rng(seed)
    ph = _Phases(model, case)
    pitch = ph.oc.finest_pitch
    t_net = _timed(ph.net, n_runs, warmup)
    spatial: dict[int, np.ndarray] = {}
    temporal: dict[tuple[int, int], np.ndarray] = {}
    for ns in ns_grid:
        pts = query_points(case.cloud, ns, pitch, rng)
        spatial[ns] = _timed(lambda: ph.spatial(pts), n_runs, warmup)
        b = ph.spatial(pts)
        for nt in nt_grid:
            times = np.linspace(0.0, case.duration, nt)
            temporal[ns, nt] = _timed(lambda: ph.temporal(b, times), n_runs, warmup)
    n_big = max(ns_grid)
    pts2 = query_points(case.cloud, 2 * n_big, pitch, rng)
    t_double = _timed(lambda: ph.spatial(pts2), n_runs, warmup)
    doubling = float(np.median(t_double) / np.median(spatial[n_big]))

    rows, A, y = [], [], []
    for ns in ns_grid:
        for nt in nt_grid:
            total = t_net.mean() + spatial[ns].mean() + temporal[ns, nt].mean()
            A.append([1.0, ns / 1e6, nt / 1e2])
            y.append(total)
            rows.append((ns, nt))
    A, y = np.array(A), np.array(y)
    coef, *_ = np.linalg.lstsq(A, y, rcond=None)
    fitted = A @ coef
    fit = CostModelFit(float(coef[0]), float(coef[1]), float(coef[2]),
                       [(ns, nt, float(m), float(f)) for (ns, nt), m, f in zip(rows, y, fitted)],
                       float(np.max(np.abs(fitted - y) / y)))

    nt_ref = max(nt_grid)
    sp = spatial[n_big] * (1e6 / n_big)
    tm = temporal[n_big, nt_ref] * (1e2 / nt_ref)
    report = RuntimeReport(
        PhaseTiming(float(t_net.mean()), float(t_net.std()), n_runs),
        PhaseTiming(float(sp.mean()), float(sp.std()), n_runs),
        PhaseTiming(float(tm.mean()), float(tm.std()), n_runs),
        n_runs, n_big, nt_ref, _thread_mode())
    return BenchmarkResult(report, fit, doubling)


def format_bench_csv(report: RuntimeReport) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["phase", "mean_ms", "std_ms", "n"])
    for name, p in (("net", report.t_net), ("spatial_per_1e6", report.t_spatial),
                    ("temporal_per_1e2", report.t_temporal)):
        w.writerow([name, repr(p.mean_ms), repr(p.std_ms), p.n])
    return buf.getvalue()


def write_text(text: str, path: str | Path) -> None:
    Path(path).write_text(text, encoding="utf-8")
