"""Inflow waveforms, contrast injection, mixed total flow and outlet flow splitting.

Flow rates are in mL/s and times in ms throughout.
"""

from __future__ import annotations

import csv
import io
import math
from dataclasses import dataclass
from itertools import product
from pathlib import Path
from typing import Literal

import numpy as np

from .vasctree import VesselTree

AgeGroup = Literal["young", "elderly"]

# Normalised one-cycle ICA inflow templates (unit mean), as 8-harmonic Fourier
# series f(phase) = 1 + sum a_k cos(2 pi k phase) + b_k sin(2 pi k phase).
# They approximate the published young/elderly ICA waveform shapes: a sharp
# systolic peak near 13% of the cycle, a dicrotic notch, and a late-systolic
# secondary peak that is more pronounced for the elderly group.
WAVEFORM_TEMPLATES: dict[str, tuple[tuple[float, ...], tuple[float, ...]]] = {
    "young": (
        (0.079105, -0.005207, -0.102219, -0.185517, -0.047167, 0.023673, 0.022506, 0.017239),
        (0.246451, 0.16289, 0.157368, -0.009833, -0.107578, -0.049828, -0.015578, -0.001995),
    ),
    "elderly": (
        (0.024447, -0.108749, -0.030748, -0.111813, -0.048121, 0.037381, 0.021988, 0.002317),
        (0.311411, 0.08058, 0.046601, 0.024341, -0.086234, -0.041099, 0.006649, 0.007409),
    ),
}

GRID_MEAN_FLOWS = (3.4, 4.4, 5.4)
GRID_CYCLE_LENGTHS = (785.0, 885.0, 985.0)
AGE_GROUPS: tuple[AgeGroup, ...] = ("young", "elderly")


@dataclass(frozen=True)
class PhysicsConstants:
    kinematic_viscosity: float = 3.2e-6  # m^2/s
    density: float = 1.06e3  # kg/m^3
    mixing_factor: float = 0.3

    def __post_init__(self):
        if self.kinematic_viscosity <= 0 or self.density <= 0:
            raise ValueError("viscosity and density must be positive")
        if not 0 <= self.mixing_factor <= 1:
            raise ValueError("mixing_factor must lie in [0, 1]")


@dataclass(frozen=True)
class InflowWaveform:
    """One cardiac cycle sampled at ``n`` equispaced times, both ends included."""
    samples: np.ndarray
    cycle_length: float
    mean_flow: float
    age_group: AgeGroup

    @property
    def times(self) -> np.ndarray:
        return np.linspace(0.0, self.cycle_length, len(self.samples))

    def flow(self, t) -> np.ndarray:
        """Blood flow Q_B at time(s) ``t`` by periodic linear interpolation."""
        phase = np.mod(np.asarray(t, dtype=float), self.cycle_length)
        return np.interp(phase, self.times, self.samples)

    def time_average(self) -> float:
        s = self.samples
        return float((s[:-1] + s[1:]).sum() / (2 * (len(s) - 1)))

    def resampled(self, n: int) -> np.ndarray:
        """``n`` samples covering one period, endpoint excluded."""
        return self.flow(np.arange(n) * self.cycle_length / n)


@dataclass(frozen=True)
class InjectionParams:
    T_S: float  # injection start, ms
    T_L: float = 250.0  # lag time constant, ms
    Q_CA_max: float = 2.5  # mL/s

    def __post_init__(self):
        if self.T_L <= 0:
            raise ValueError("T_L must be positive")
        if self.Q_CA_max < 0:
            raise ValueError("Q_CA_max must be non-negative")


def default_injection(waveform: InflowWaveform, T_L: float = 250.0, Q_CA_max: float = 2.5) -> InjectionParams:
    """Injection starting one full cardiac cycle after record start."""
    return InjectionParams(T_S=waveform.cycle_length, T_L=T_L, Q_CA_max=Q_CA_max)


def _template(age_group: str, phase: np.ndarray) -> np.ndarray:
    a, b = WAVEFORM_TEMPLATES[age_group]
    k = np.arange(1, len(a) + 1)
    ang = 2 * np.pi * np.outer(phase, k)
    return 1.0 + np.cos(ang) @ np.array(a) + np.sin(ang) @ np.array(b)


def synth_inflow_waveform(mean_flow: float, cycle_length: float, age_group: AgeGroup,
                          n_samples: int = 256) -> InflowWaveform:
    if mean_flow <= 0 or cycle_length <= 0:
        raise ValueError("mean_flow and cycle_length must be positive")
    if n_samples < 32:
        raise ValueError("n_samples must be at least 32")
    if age_group not in WAVEFORM_TEMPLATES:
        raise ValueError(f"unknown age group {age_group!r}")
    phase = np.arange(n_samples) / (n_samples - 1)
    shape = _template(age_group, phase)
    shape[-1] = shape[0]
    return InflowWaveform(mean_flow * shape, float(cycle_length), float(mean_flow), age_group)


def waveform_grid(n_samples: int = 256) -> list[InflowWaveform]:
    """The 3 mean flows x 3 cycle lengths x 2 age groups = 18 inflow conditions."""
    return [synth_inflow_waveform(q, T, age, n_samples)
            for q, T, age in product(GRID_MEAN_FLOWS, GRID_CYCLE_LENGTHS, AGE_GROUPS)]


def injection_rate(t, params: InjectionParams):
    t = np.asarray(t, dtype=float)
    dt = t - params.T_S
    q = np.where(dt >= 0, params.Q_CA_max * -np.expm1(-np.maximum(dt, 0.0) / params.T_L), 0.0)
    return float(q) if q.ndim == 0 else q


def total_flow(t, waveform: InflowWaveform, params: InjectionParams,
               constants: PhysicsConstants = PhysicsConstants()):
    """Q_T = Q_B + m * Q_CA."""
    q = waveform.flow(t) + constants.mixing_factor * np.asarray(injection_rate(t, params))
    return float(q) if np.ndim(q) == 0 else q


@dataclass(frozen=True)
class OutletFlowAssignment:
    fractions: dict[int, float]

    def __post_init__(self):
        vals = np.array(list(self.fractions.values()))
        if np.any(vals <= 0) or np.any(vals > 1):
            raise ValueError("outlet fractions must lie in (0, 1]")
        if abs(math.fsum(vals) - 1) > 1e-12:
            raise ValueError("outlet fractions must sum to 1")


def segment_fractions(tree: VesselTree, split_exponent: float = 3.0) -> np.ndarray:
    """Fraction of inlet flow carried by every segment under radius-power splitting."""
    frac = np.zeros(len(tree.segments))
    frac[tree.inlet_segment] = 1.0
    for i in range(len(tree.segments)):  # parents precede children
        kids = tree.children[i]
        if not kids:
            continue
        w = np.array([tree.segments[k].radius_start ** split_exponent for k in kids])
        frac[list(kids)] = frac[i] * w / w.sum()
    return frac


def flow_split(tree: VesselTree, split_exponent: float = 3.0) -> OutletFlowAssignment:
    """Walk from the inlet, splitting flow at each bifurcation proportional to r_child**exponent."""
    frac = segment_fractions(tree, split_exponent)
    return OutletFlowAssignment({i: float(frac[i]) for i in tree.outlet_segments})


def format_waveform_csv(waveform: InflowWaveform) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["t_ms", "q_mls"])
    for t, q in zip(waveform.times, waveform.samples):
        w.writerow([repr(float(t)), repr(float(q))])
    return buf.getvalue()


def parse_waveform_csv(text: str, age_group: AgeGroup = "young") -> InflowWaveform:
    rows = list(csv.reader(io.StringIO(text)))
    if rows[0] != ["t_ms", "q_mls"]:
        raise ValueError("waveform CSV must have header t_ms,q_mls")
    data = np.array([[float(a), float(b)] for a, b in rows[1:]])
    t, q = data[:, 0], data[:, 1]
    wf = InflowWaveform(q, float(t[-1] - t[0]), 0.0, age_group)
    return InflowWaveform(q, wf.cycle_length, wf.time_average(), age_group)


def write_waveform_csv(waveform: InflowWaveform, path: str | Path) -> None:
    Path(path).write_text(format_waveform_csv(waveform))


def read_waveform_csv(path: str | Path, age_group: AgeGroup = "young") -> InflowWaveform:
    return parse_waveform_csv(Path(path).read_text(), age_group)
