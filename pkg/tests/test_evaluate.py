import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from conftest import SMALL_RUN, TINY, cylinder
from octoflow import config as cf
from octoflow.autodiff import mae_loss
from octoflow.evaluate import (
    absolute_errors,
    benchmark,
    compute_stats,
    evaluate_cases,
    format_bench_csv,
    format_stats_csv,
    mean_speed,
    predict_case,
    r_squared,
    time_average_field,
    volumetric_flow_rate,
)
from octoflow.flow_oracle import generate_record
from octoflow.hemo_bc import InjectionParams, synth_inflow_waveform, total_flow
from octoflow.model import SurrogateModel
from octoflow.train import build_dataset
from octoflow.vasctree import PointCloud, add_flow_extensions, wall_distance


@pytest.fixture(scope="module")
def dataset():
    return build_dataset(4, {**cf.defaults(), **SMALL_RUN}, seed=2)


def test_absolute_error_examples():
    t = np.random.default_rng(0).normal(size=(5, 3))
    assert np.all(absolute_errors(t, t) == 0)
    assert sorted(absolute_errors([[3.0, 4.0, 0.0]], [[0.0, 0.0, 0.0]])) == [0.0, 3.0, 4.0]
    p = t + 0.1
    perm = np.random.default_rng(1).permutation(5)
    assert sorted(absolute_errors(p, t)) == sorted(absolute_errors(p[perm], t[perm]))
    with pytest.raises(ValueError):
        absolute_errors(np.zeros((2, 3)), np.zeros((3, 3)))


def test_time_average_examples():
    u = np.random.default_rng(0).normal(size=(4, 3))
    assert np.allclose(time_average_field(np.stack([u] * 5)), u, atol=1e-15)
    assert np.array_equal(time_average_field(np.stack([u, -u])), np.zeros_like(u))
    ramp = np.arange(3.0)[:, None, None] * np.ones((3, 2, 3))
    assert np.all(time_average_field(ramp) == 1.0)
    with pytest.raises(ValueError):
        time_average_field(np.zeros((0, 2, 3)))


def test_stats_examples():
    rng = np.random.default_rng(0)
    t = rng.normal(size=(50, 3))
    s = compute_stats(t, t)
    assert s.mean == 0 and s.r_squared == 1.0
    mean_pred = np.full_like(t, t.mean())
    assert abs(compute_stats(mean_pred, t).r_squared) < 1e-12
    assert math.isnan(r_squared(t, np.ones_like(t)))
    assert math.isnan(compute_stats(t, np.ones_like(t)).r_squared)
    with pytest.raises(ValueError):
        compute_stats(np.zeros((1, 3)), np.zeros((1, 3)))


def test_quantiles_use_linear_interpolation():
    pred = np.array([[0.0, 1.0, 2.0], [3.0, 4.0, 5.0], [6.0, 7.0, 8.0], [9.0, 10.0, 11.0]])
    s = compute_stats(pred, np.zeros_like(pred))
    # errors 0..11: linear quantiles at 0.5, 0.75 and 0.9
    assert (s.median, s.q75, s.q90) == (5.5, 8.25, 9.9)
    assert s.std == pytest.approx(np.sqrt(143 / 12))


@settings(max_examples=100, deadline=None)
@given(arrays(np.float64, (6, 3), elements=st.floats(-10, 10)), arrays(np.float64, (6, 3), elements=st.floats(-10, 10)))
def test_stats_invariants(p, t):
    s = compute_stats(p, t)
    assert 0 <= s.median <= s.q75 <= s.q90
    assert s.mean >= 0 and s.std >= 0
    assert math.isnan(s.r_squared) or s.r_squared <= 1.0


def test_mean_error_equals_training_loss():
    rng = np.random.default_rng(3)
    p, t = rng.normal(size=(7, 20, 3)), rng.normal(size=(7, 20, 3))
    assert absolute_errors(p, t).mean() == mae_loss(p, t).data


def test_flow_rate_examples():
    u = np.tile([0.0, 0.0, 0.1], (10, 1))
    assert volumetric_flow_rate(u, (0, 0, 1), np.ones(10)) == pytest.approx(1.0, abs=1e-12)
    assert volumetric_flow_rate(u, (0, 0, -2), np.ones(10)) == pytest.approx(-1.0, abs=1e-12)
    assert volumetric_flow_rate(u, (1, 0, 0), np.ones(10)) == 0.0


def test_oracle_slice_flux():
    tree = add_flow_extensions(cylinder(1.8, 20.0))
    wf = synth_inflow_waveform(4.4, 885.0, "young")
    inj = InjectionParams(T_S=885.0)
    # a polar grid on the slice z = 10 with exact annulus areas
    nr, nphi = 60, 64
    edges = np.linspace(0, 1.8, nr + 1)
    rc = 0.5 * (edges[1:] + edges[:-1])
    phi = (np.arange(nphi) + 0.5) * 2 * np.pi / nphi
    R, P = np.meshgrid(rc, phi, indexing="ij")
    pts = np.stack([R.ravel() * np.cos(P.ravel()), R.ravel() * np.sin(P.ravel()), np.full(R.size, 10.0)], axis=1)
    areas = np.repeat(np.pi * (edges[1:] ** 2 - edges[:-1] ** 2) / nphi, nphi)
    cloud = PointCloud(pts, wall_distance(tree, pts)[0])
    rec = generate_record(tree, cloud, wf, inj)
    for f in (0, 7, 40):
        q = volumetric_flow_rate(rec.velocities[f], (0, 0, 1), areas)
        assert q == pytest.approx(total_flow(rec.times[f], wf, inj), rel=0.05)


def test_mean_speed():
    assert mean_speed(np.array([[3.0, 4.0, 0.0], [0.0, 0.0, 1.0]])) == 3.0


def test_evaluate_cases(dataset):
    m = SurrogateModel(TINY, seed=0)
    cases = dataset.subset("test") + dataset.subset("val")
    res = evaluate_cases(m, cases)
    assert [r[0] for r in res.rows] == [c.case_id for c in cases]
    preds = {c.case_id: predict_case(m, c) for c in cases}
    again = evaluate_cases(m, cases, preds)
    assert again.pooled == res.pooled
    P = np.concatenate([time_average_field(preds[c.case_id]) for c in cases])
    T = np.concatenate([time_average_field(c.record.velocities) for c in cases])
    assert res.pooled.mean == pytest.approx(np.abs(P - T).mean(), abs=1e-12)
    assert res.mean_speed == mean_speed(T)
    text = format_stats_csv(res)
    lines = text.splitlines()
    assert lines[0] == "case,mae,std,median,q75,q90,r2"
    assert len(lines) == len(cases) + 2 and lines[-1].startswith("pooled,")
    with pytest.raises(ValueError):
        evaluate_cases(m, [])


def test_small_benchmark(dataset):
    m = SurrogateModel(TINY, seed=0)
    res = benchmark(m, dataset.cases[0], ns_grid=(200, 400), nt_grid=(2, 4), n_runs=10, warmup=1)
    rep = res.report
    assert rep.n_runs == 10 and rep.n_spatial == 400 and rep.n_temporal == 4
    for p in (rep.t_net, rep.t_spatial, rep.t_temporal):
        assert p.mean_ms > 0 and p.std_ms >= 0 and p.n == 10
    assert len(res.fit.grid) == 4
    assert res.spatial_doubling > 0
    lines = format_bench_csv(rep).splitlines()
    assert lines[0] == "phase,mean_ms,std_ms,n"
    assert [line.split(",")[0] for line in lines[1:]] == ["net", "spatial_per_1e6", "temporal_per_1e2"]
    with pytest.raises(ValueError):
        benchmark(m, dataset.cases[0], n_runs=5)
