import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from conftest import bifurcation, cylinder
from octoflow.hemo_bc import (
    InflowWaveform,
    InjectionParams,
    OutletFlowAssignment,
    PhysicsConstants,
    default_injection,
    flow_split,
    format_waveform_csv,
    injection_rate,
    parse_waveform_csv,
    read_waveform_csv,
    segment_fractions,
    synth_inflow_waveform,
    total_flow,
    waveform_grid,
    write_waveform_csv,
)
from octoflow.vasctree import TreeGenConfig, generate_tree


def steady(q=4.4, cycle=885.0):
    return InflowWaveform(np.full(64, q), cycle, q, "young")


def test_constants_defaults():
    c = PhysicsConstants()
    assert (c.kinematic_viscosity, c.density, c.mixing_factor) == (3.2e-6, 1.06e3, 0.3)
    with pytest.raises(ValueError):
        PhysicsConstants(mixing_factor=1.5)


def test_waveform_mean_preserved():
    wf = synth_inflow_waveform(4.4, 885.0, "young", 256)
    assert wf.time_average() == pytest.approx(4.4, abs=0.022)
    assert np.mean(wf.samples[:-1]) == pytest.approx(4.4, abs=0.022)


def test_waveform_scaling_is_exact():
    a = synth_inflow_waveform(2.2, 885.0, "elderly")
    b = synth_inflow_waveform(4.4, 885.0, "elderly")
    assert np.array_equal(2 * a.samples, b.samples)


def test_age_groups_differ():
    y = synth_inflow_waveform(4.4, 885.0, "young")
    e = synth_inflow_waveform(4.4, 885.0, "elderly")
    assert np.max(np.abs(y.samples - e.samples)) > 0


@pytest.mark.parametrize("age", ["young", "elderly"])
def test_waveform_shape(age):
    wf = synth_inflow_waveform(4.4, 885.0, age, 256)
    assert np.all(wf.samples > 0)
    assert abs(wf.samples[0] - wf.samples[-1]) < 1e-9
    assert np.argmax(wf.samples) < len(wf.samples) / 3  # systolic peak early


def test_waveform_validation():
    with pytest.raises(ValueError):
        synth_inflow_waveform(4.4, 885.0, "young", 16)
    with pytest.raises(ValueError):
        synth_inflow_waveform(-1.0, 885.0, "young")
    with pytest.raises(ValueError):
        synth_inflow_waveform(4.4, 885.0, "teen")


def test_waveform_grid():
    g = waveform_grid(256)
    assert len(g) == 18
    assert len({(w.mean_flow, w.cycle_length) for w in g}) == 9
    assert {w.mean_flow for w in g} == {3.4, 4.4, 5.4}
    assert {w.cycle_length for w in g} == {785.0, 885.0, 985.0}
    for w in g:
        assert abs(w.time_average() - w.mean_flow) / w.mean_flow < 0.005
    assert all(np.array_equal(a.samples, b.samples) for a, b in zip(g, waveform_grid(256)))


def test_flow_is_periodic_interpolation():
    wf = synth_inflow_waveform(4.4, 885.0, "young", 64)
    t = np.linspace(0, 885.0, 17)
    assert np.allclose(wf.flow(t + 885.0), wf.flow(t), atol=1e-12)
    assert wf.flow(0.0) == wf.samples[0]
    assert wf.flow(wf.times[5]) == pytest.approx(wf.samples[5])


def test_injection_examples():
    p = InjectionParams(T_S=500.0, T_L=250.0, Q_CA_max=2.5)
    assert injection_rate(499.0, p) == 0.0
    assert injection_rate(500.0 + 250.0, p) == pytest.approx(2.5 * (1 - math.exp(-1)), abs=1e-12)
    assert injection_rate(500.0 + 250.0, p) == pytest.approx(1.58030, abs=1e-5)
    assert injection_rate(500.0 + 30 * 250.0, p) == pytest.approx(2.5, abs=1e-9)


def test_injection_continuity_and_monotonicity():
    p = InjectionParams(T_S=500.0)
    assert injection_rate(500.0, p) == 0.0
    assert injection_rate(500.0 + 1e-9, p) < 1e-10
    t = np.linspace(500.0, 5000.0, 1000)
    assert np.all(np.diff(injection_rate(t, p)) >= 0)


def test_injection_validation():
    with pytest.raises(ValueError):
        InjectionParams(T_S=0.0, T_L=0.0)
    with pytest.raises(ValueError):
        InjectionParams(T_S=0.0, Q_CA_max=-1.0)


def test_default_injection_starts_after_one_cycle():
    wf = synth_inflow_waveform(4.4, 785.0, "young")
    inj = default_injection(wf)
    assert (inj.T_S, inj.T_L, inj.Q_CA_max) == (785.0, 250.0, 2.5)


def test_total_flow_examples():
    wf = synth_inflow_waveform(4.4, 885.0, "young")
    p = InjectionParams(T_S=885.0)
    t = np.linspace(0, 884.0, 50)
    assert np.array_equal(total_flow(t, wf, p), wf.flow(t))
    assert total_flow(885.0 + 40 * 250.0, steady(), p) == pytest.approx(5.15, abs=1e-12)
    late = np.linspace(900.0, 3000.0, 50)
    assert np.array_equal(total_flow(late, wf, p, PhysicsConstants(mixing_factor=0.0)), wf.flow(late))


def test_total_flow_periodic_without_injection():
    wf = synth_inflow_waveform(5.4, 985.0, "elderly")
    p = InjectionParams(T_S=0.0, Q_CA_max=0.0)
    t = np.linspace(0, 985.0, 101)
    assert np.allclose(total_flow(t, wf, p), total_flow(t + 985.0, wf, p), atol=1e-9)


def test_total_flow_monotone_in_mixing():
    wf = synth_inflow_waveform(4.4, 885.0, "young")
    p = InjectionParams(T_S=100.0)
    t = np.linspace(100.0, 2000.0, 40)
    qs = [total_flow(t, wf, p, PhysicsConstants(mixing_factor=m)) for m in (0.0, 0.3, 0.6, 1.0)]
    assert all(np.all(b >= a) for a, b in zip(qs, qs[1:]))


def test_flow_split_examples():
    assert flow_split(cylinder()).fractions == {0: 1.0}
    sym = flow_split(bifurcation(2.0, 1.2, 1.2))
    assert sym.fractions == {1: 0.5, 2: 0.5}
    f = flow_split(bifurcation(2.0, 1.5, 1.0), 3.0).fractions
    assert f[1] == pytest.approx(0.771, abs=1e-3)
    assert f[2] == pytest.approx(0.229, abs=1e-3)
    assert f[1] == pytest.approx(3.375 / 4.375, abs=1e-15)


def test_generated_symmetric_children_split_evenly():
    t = generate_tree(TreeGenConfig(n_generations=2), 1)
    assert set(flow_split(t).fractions.values()) == {0.25}


@settings(max_examples=100, deadline=None)
@given(st.integers(0, 2 ** 31 - 1), st.integers(0, 6), st.floats(1.0, 4.0))
def test_outlet_fractions_sum_to_one(seed, g, exponent):
    t = generate_tree(TreeGenConfig(n_generations=g), seed)
    f = flow_split(t, exponent)
    assert set(f.fractions) == set(t.outlet_segments)
    assert abs(math.fsum(f.fractions.values()) - 1.0) <= 1e-12


def test_segment_fractions_conserve_at_junctions():
    t = generate_tree(TreeGenConfig(n_generations=3), 2)
    frac = segment_fractions(t)
    for i, kids in enumerate(t.children):
        if kids:
            assert frac[i] == pytest.approx(sum(frac[k] for k in kids), abs=1e-15)


def test_assignment_validation():
    with pytest.raises(ValueError):
        OutletFlowAssignment({1: 0.5, 2: 0.4})
    with pytest.raises(ValueError):
        OutletFlowAssignment({1: 0.0, 2: 1.0})


def test_waveform_csv_round_trip(tmp_path):
    wf = synth_inflow_waveform(3.4, 785.0, "elderly", 64)
    text = format_waveform_csv(wf)
    assert text.startswith("t_ms,q_mls\n")
    write_waveform_csv(wf, tmp_path / "w.csv")
    back = read_waveform_csv(tmp_path / "w.csv", "elderly")
    assert np.array_equal(back.samples, wf.samples)
    assert back.cycle_length == wf.cycle_length
    assert format_waveform_csv(back) == text
    with pytest.raises(ValueError):
        parse_waveform_csv("t,q\n0,1\n")
