import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from nonlocal_lwr.evaluation import (EvalReport, UndefinedMetricError, e_rho, e_v, export_report, fd_curve,
                                     make_report, predicted_speed, read_fd_curve, read_summary)
from nonlocal_lwr.fundamental import FdParams, fd_eval
from nonlocal_lwr.grid import ConfigError, Field, LossTrace, RingGrid, read_field
from nonlocal_lwr.kernels import kernel_linear, local_kernel, read_kernel
from nonlocal_lwr.solver import SolverConfig, required_substeps, simulate, sinusoid_profile, speed_field

GRID = RingGrid.from_lengths(40.0, 1.0, 5.0, 1.0)
GS = FdParams("greenshields", 30.0, 0.2)


def random_field(seed, grid=GRID, lo=0.01, hi=0.15):
    return Field(grid, np.random.default_rng(seed).uniform(lo, hi, grid.shape))


def test_e_rho_examples():
    f = random_field(0)
    assert e_rho(f, f) == 0.0
    assert e_rho(Field(GRID, np.zeros(GRID.shape)), f) == pytest.approx(100.0, rel=1e-14)
    g = Field(GRID, f.values * 1.1)
    assert e_rho(g, f) == pytest.approx(10.0, rel=1e-12)


def test_e_rho_errors():
    f = random_field(0)
    with pytest.raises(UndefinedMetricError):
        e_rho(f, Field(GRID, np.zeros(GRID.shape)))
    with pytest.raises(ConfigError, match="grids differ"):
        e_rho(f, random_field(1, RingGrid.from_lengths(40.0, 1.0, 6.0, 1.0)))


@settings(max_examples=30)
@given(st.integers(0, 1000), st.floats(1e-3, 1e3))
def test_e_rho_scale_invariant(seed, c):
    a, b = random_field(seed), random_field(seed + 1)
    scaled = e_rho(Field(GRID, c * a.values), Field(GRID, c * b.values))
    assert scaled == pytest.approx(e_rho(a, b), rel=1e-10)


@settings(max_examples=30)
@given(st.integers(0, 1000))
def test_e_rho_numerator_symmetric_and_triangle(seed):
    a, b, c = random_field(seed), random_field(seed + 1), random_field(seed + 2)
    na, nb = np.linalg.norm(a.values), np.linalg.norm(b.values)
    assert e_rho(a, b) * nb == pytest.approx(e_rho(b, a) * na, rel=1e-12)
    nc = np.linalg.norm(c.values)
    assert e_rho(a, c) <= (e_rho(a, b) * nb + e_rho(b, c) * nc) / nc * (1 + 1e-12)


def test_e_v_closed_loop_is_zero():
    g = RingGrid.from_lengths(100.0, 1.0, 20.0, 1.0)
    k = kernel_linear(10.0, 1.0)
    cfg = SolverConfig(g, GS, sinusoid_profile(g, 0.05, 0.02), k, 0.9, required_substeps(g, GS, 0.9))
    rho = simulate(cfg)
    v = speed_field(rho, GS, k)
    assert e_v(lambda r: fd_eval(GS, r), k, rho, v) == 0.0


def test_e_v_half_speed():
    rho = random_field(3)
    v = Field(GRID, np.full(GRID.shape, 12.0))
    assert e_v(lambda r: np.full(len(r), 6.0), kernel_linear(5.0, 1.0), rho, v) == pytest.approx(50.0, rel=1e-14)
    with pytest.raises(UndefinedMetricError):
        e_v(lambda r: r, None, rho, Field(GRID, np.zeros(GRID.shape)))


def test_unit_kernel_speed_is_local():
    rho = random_field(5)
    fn = lambda r: fd_eval(GS, r)
    np.testing.assert_array_equal(predicted_speed(fn, local_kernel(1.0), rho), predicted_speed(fn, None, rho))
    np.testing.assert_array_equal(predicted_speed(fn, None, rho), fd_eval(GS, rho.values))


def test_fd_curve_rows():
    curve = fd_curve(lambda r: fd_eval(GS, r), 0.2, 100)
    assert curve.shape == (101, 2)
    assert curve[0, 0] == 0.0 and curve[-1, 0] == pytest.approx(0.2)
    assert curve[0, 1] == 30.0 and curve[-1, 1] == pytest.approx(0.0, abs=1e-12)


def _report():
    est, truth = random_field(1), random_field(2)
    k = kernel_linear(10.0, 1.0)
    v = Field(GRID, fd_eval(GS, truth.values))
    return make_report(est, truth, k, lambda r: fd_eval(GS, r), 0.2, 50, v), est, truth


def test_make_report_fields():
    rep, est, truth = _report()
    assert rep.e_rho_pct == e_rho(est, truth)
    assert rep.e_v_pct > 0
    assert rep.fd_curve.shape == (51, 2)
    assert rep.mass_fraction_4m == pytest.approx(0.64, rel=1e-12)  # 1 - 0.6^2 for a decreasing linear kernel
    assert rep.mass_fraction_10m == pytest.approx(1.0)
    assert make_report(est, truth, rep.kernel_snapshot, lambda r: r, 0.2).e_v_pct is None


def test_export_round_trips(tmp_path):
    rep, est, truth = _report()
    trace = LossTrace()
    trace.append(0, 1.0, 0.5, 0.25, 0.25)
    paths = export_report(rep, tmp_path / "rep", est, trace, truth, figures=False)
    assert set(paths) == {"summary", "kernel", "fd_curve", "field_est", "loss_trace"}
    back = read_field(paths["field_est"])
    assert back.values.tobytes() == est.values.tobytes()
    assert read_summary(paths["summary"]) == rep.summary()
    np.testing.assert_array_equal(read_fd_curve(paths["fd_curve"]), rep.fd_curve)
    assert read_fd_curve(paths["fd_curve"]).shape == (51, 2)
    np.testing.assert_array_equal(read_kernel(paths["kernel"]).weights, rep.kernel_snapshot.weights)


def test_export_is_deterministic(tmp_path):
    rep, est, truth = _report()
    a = export_report(rep, tmp_path / "a", est, None, truth, figures=True)
    b = export_report(rep, tmp_path / "b", est, None, truth, figures=True)
    assert any(str(p).endswith(".png") for p in a.values())
    for name in a:
        assert a[name].read_bytes() == b[name].read_bytes(), name


def test_export_unwritable_directory(tmp_path):
    blocker = tmp_path / "file"
    blocker.write_text("x")
    rep, _, _ = _report()
    with pytest.raises(OSError, match=str(blocker)):
        export_report(rep, blocker / "sub", figures=False)


def test_summary_none_speed(tmp_path):
    rep, est, truth = _report()
    rep2 = EvalReport(rep.e_rho_pct, None, rep.kernel_snapshot, rep.fd_curve, 0.25, 0.5)
    paths = export_report(rep2, tmp_path, figures=False)
    assert read_summary(paths["summary"])["e_v_pct"] is None
