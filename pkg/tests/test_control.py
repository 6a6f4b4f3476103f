import warnings

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st
from scipy.integrate import quad

from gpecontrol import control as ctl
from gpecontrol.control import ControlTrajectory, FilterError, FilterKernel

DT = 0.01


def kernel(kind="critically_damped", cutoff=4.0, dt=DT):
    return ctl.make_kernel(kind, dt, cutoff=cutoff)


def smooth_control(n=600, n_horizon=None, dt=DT):
    t = dt * np.arange(n + 1)
    return ControlTrajectory(dt, 0.3 + 0.5 * np.sin(0.8 * t) * np.exp(-0.1 * t), n_horizon or n)


def test_constant_control_passes_unchanged():
    lam = ControlTrajectory(DT, np.full(400, 1.7))
    for kind in ("exponential", "critically_damped"):
        out = ctl.apply_filter(lam, kernel(kind))
        assert np.max(np.abs(out.values - 1.7)) < 1e-8


def test_impulse_kernel_is_identity():
    lam = smooth_control()
    out = ctl.apply_filter(lam, ctl.make_kernel("impulse", DT))
    assert np.array_equal(out.values, lam.values)


def truncated_step_response(t, w, tau):
    """Step response of ``w exp(-w s)`` cut at ``tau`` and renormalized."""
    return (1.0 - np.exp(-w * np.minimum(t, tau))) / (1.0 - np.exp(-w * tau))


def test_exponential_step_response():
    """Step 0 -> 1 at t = 0+ through an exponential kernel."""
    w = 5.0
    t_end = 2.0
    tau = ctl.response_time("exponential", w)
    # fine-grid quadrature oracle for the closed forms
    for t in (0.1, 0.5, 1.5):
        full, _ = quad(lambda s: w * np.exp(-w * s), 0.0, t)
        assert full == pytest.approx(1.0 - np.exp(-w * t), abs=1e-12)
        cut, _ = quad(lambda s: w * np.exp(-w * s), 0.0, min(t, tau))
        gain, _ = quad(lambda s: w * np.exp(-w * s), 0.0, tau)
        assert cut / gain == pytest.approx(truncated_step_response(t, w, tau), abs=1e-12)
    for dt in (0.004, 0.002, 0.001):
        n = int(round(t_end / dt))
        values = np.ones(n + 1)
        values[0] = 0.0
        step = ControlTrajectory(dt, values)
        k = ctl.make_kernel("exponential", dt, cutoff=w)
        out = ctl.apply_filter(step, k)
        # the rectangle sum of an exponential is a geometric series: exact
        assert np.max(np.abs(out.values - truncated_step_response(step.times, w, k.tau_star))) < 1e-12
        # against the untruncated response only the 1e-3 cut remains
        assert np.max(np.abs(out.values - (1.0 - np.exp(-w * step.times)))) < 2e-3


def test_critically_damped_kernel():
    # 0.5 ms response time at 0.1 ms per unit
    tau_star = 0.5 / 0.1
    w = ctl.cutoff_for_response_time("critically_damped", tau_star)
    k = ctl.make_kernel("critically_damped", DT, cutoff=w)
    assert abs(k.dc_gain - 1.0) < 1e-8
    assert k.tau_star == pytest.approx(tau_star, abs=DT)
    assert k.tau_star >= tau_star - 1e-12
    assert k.samples[0] == 0.0
    peak = np.argmax(k.samples)
    assert peak * DT == pytest.approx(1.0 / w, abs=DT)
    assert np.all(np.diff(k.samples[: peak + 1]) > 0)
    assert np.all(np.diff(k.samples[peak:]) < 0)
    # continuous envelope at tau* and beyond is below 1e-3 of the peak
    envelope = lambda tau: w**2 * tau * np.exp(-w * tau)
    for tau in (k.tau_star, k.tau_star + 1.0, 3 * k.tau_star):
        assert envelope(tau) <= 1e-3 * envelope(1.0 / w) * (1 + 1e-12)
    assert k.support * DT == pytest.approx(k.tau_star)


def test_exponential_kernel():
    k = ctl.make_kernel("exponential", 1e-3, cutoff=10.0)
    # normalization rescales the sampled value by 1 + O(w dt)
    assert k.samples[0] == pytest.approx(10.0, rel=10.0 * 1e-3)
    assert np.all(np.diff(k.samples) < 0)
    assert abs(k.dc_gain - 1.0) < 1e-8
    assert 10.0 * np.exp(-10.0 * k.tau_star) <= 1e-2 * (1 + 1e-12)


def test_kernel_errors(tmp_path):
    with pytest.raises(FilterError):
        ctl.make_kernel("gaussian", DT, cutoff=1.0)
    with pytest.raises(FilterError):
        ctl.make_kernel("exponential", DT, cutoff=-1.0)
    with pytest.raises(FilterError):
        ctl.make_kernel("critically_damped", DT, cutoff=1.0, max_support=50)
    with pytest.raises(FilterError):
        ctl.make_kernel("tabulated", DT, path=tmp_path / "missing.csv")
    bad = tmp_path / "bad.csv"
    bad.write_text("tau,h\n0,1\n0.01,2\n0.03,1\n")
    with pytest.raises(FilterError):
        ctl.load_kernel(bad, DT)


def test_tabulated_roundtrip(tmp_path):
    k = kernel()
    path = tmp_path / "kernel.csv"
    ctl.save_kernel(path, k)
    back = ctl.make_kernel("tabulated", DT, path=path)
    assert np.array_equal(back.samples, k.samples)
    assert path.read_text().splitlines()[0] == "tau,h"


def test_dt_mismatch():
    with pytest.raises(FilterError):
        ctl.apply_filter(smooth_control(), kernel(dt=0.02))


def test_unnormalized_kernel_warns_or_fails():
    k = FilterKernel(DT, np.ones(10))
    lam = smooth_control()
    with pytest.warns(RuntimeWarning):
        out = ctl.apply_filter(lam, k)
    with warnings.catch_warnings():
        warnings.simplefilter("error")
        assert np.allclose(out.values, ctl.apply_filter(lam, k.normalized()).values)
    with pytest.raises(FilterError):
        ctl.apply_filter(lam, k, auto_normalize=False)


@settings(max_examples=20)
@given(a=st.floats(-5, 5), b=st.floats(-5, 5), seed=st.integers(0, 1000))
def test_filter_linearity(a, b, seed):
    rng = np.random.default_rng(seed)
    l1 = ControlTrajectory(DT, rng.normal(size=300))
    l2 = ControlTrajectory(DT, rng.normal(size=300))
    k = kernel()
    lhs = ctl.apply_filter(l1.with_values(a * l1.values + b * l2.values), k).values
    rhs = a * ctl.apply_filter(l1, k).values + b * ctl.apply_filter(l2, k).values
    assert np.max(np.abs(lhs - rhs)) < 1e-10


@settings(max_examples=20)
@given(cut=st.integers(1, 298), seed=st.integers(0, 1000))
def test_filter_causality(cut, seed):
    rng = np.random.default_rng(seed)
    v1 = rng.normal(size=300)
    v2 = v1.copy()
    v2[cut + 1:] = rng.normal(size=300 - cut - 1)
    k = kernel()
    o1 = ctl.apply_filter(ControlTrajectory(DT, v1), k).values
    o2 = ctl.apply_filter(ControlTrajectory(DT, v2), k).values
    assert np.max(np.abs(o1[: cut + 1] - o2[: cut + 1])) < 1e-12


def test_filter_shift_covariance():
    k = kernel()
    n = 800
    shift = 37
    t = DT * np.arange(n + 1)
    pulse = np.where(t > 1.5, np.sin(3 * (t - 1.5)) * np.exp(-(t - 1.5)), 0.0) + 0.2
    later = np.full(n + 1, 0.2)
    later[shift:] = pulse[: n + 1 - shift]
    out = ctl.apply_filter(ControlTrajectory(DT, pulse), k).values
    out_later = ctl.apply_filter(ControlTrajectory(DT, later), k).values
    assert np.max(np.abs(out_later[shift:] - out[: n + 1 - shift])) < 1e-12


def test_clamp_tail():
    lam = ControlTrajectory.ramp(0.0, 1.0, 2.0, 3.0, DT)
    assert lam.is_clamped()
    assert ctl.clamp_tail(lam) is lam
    ramp = ControlTrajectory(DT, np.linspace(0.0, 3.0, 301), 200)
    clamped = ctl.clamp_tail(ramp)
    assert np.all(clamped.values[200:] == ramp.values[200])
    assert np.array_equal(clamped.values[:201], ramp.values[:201])
    assert ctl.clamp_tail(clamped).values is clamped.values


@pytest.mark.parametrize("kind", ["exponential", "critically_damped"])
def test_clamped_control_settles_after_filter(kind):
    k = kernel(kind)
    n_h = 400
    n_tail = ctl.steps_for(k.tau_star, DT)
    t = DT * np.arange(n_h + n_tail + 1)
    values = np.sin(2.0 * t) + 0.3 * t
    lam = ctl.clamp_tail(ControlTrajectory(DT, values, n_h))
    out = ctl.apply_filter(lam, k).values
    assert abs(out[-1] - lam.lambdaT) < 1e-8
    # constant on a terminal interval of at least one step
    assert abs(out[-2] - lam.lambdaT) < 1e-8


def test_ramp_constructor():
    lam = ControlTrajectory.ramp(0.5, 1.5, 1.0, 1.5, 0.01)
    assert lam.n_horizon == 100 and lam.n_steps == 150
    assert lam.lambda0 == 0.5 and lam.lambdaT == 1.5
    assert lam.T == pytest.approx(1.0) and lam.T_star == pytest.approx(1.5)
    with pytest.raises(ValueError):
        ControlTrajectory.ramp(0.0, 1.0, 1.0, 1.005, 0.01)


def test_deconvolution_roundtrip():
    k = kernel()
    n_h = 500
    t = DT * np.arange(n_h + k.support)
    lam = ctl.clamp_tail(ControlTrajectory(DT, 0.4 * np.sin(1.3 * t) * np.sin(np.pi * t / t[n_h]) ** 2, n_h))
    target = ctl.apply_filter(lam, k)
    back = ctl.deconvolve_naive(target, k, eps=1e-12)
    # lam at T* never reaches the output when h(0) = 0
    assert np.max(np.abs(back.values[:-1] - lam.values[:-1])) < 1e-3


def test_deconvolution_impulse_identity():
    lam = smooth_control()
    back = ctl.deconvolve_naive(lam, ctl.make_kernel("impulse", DT), eps=0.0)
    assert np.max(np.abs(back.values - lam.values)) < 1e-12


def test_deconvolution_singular_kernel():
    # moving average: its transfer function has exact zeros on the padded grid
    box = FilterKernel(DT, np.full(8, 1.0 / (8 * DT)))
    target = smooth_control()
    with pytest.raises(FilterError):
        ctl.deconvolve_naive(target, box, eps=0.0)
    assert np.all(np.isfinite(ctl.deconvolve_naive(target, box, eps=1e-6).values))


def test_deconvolution_blows_up_on_rough_target():
    rng = np.random.default_rng(7)
    k = kernel(cutoff=2.0)
    t = DT * np.arange(1000)
    target = ControlTrajectory(DT, np.sign(np.sin(20 * t)) + 0.1 * rng.normal(size=1000))
    out = ctl.deconvolve_naive(target, k, eps=1e-6)
    assert np.max(np.abs(out.values)) > 10 * np.max(np.abs(target.values))
    with pytest.raises(ValueError):
        ctl.deconvolve_naive(target, k, eps=-1.0)


def test_control_csv_roundtrip(tmp_path):
    lam = smooth_control(n_horizon=500)
    star = ctl.apply_filter(lam, kernel())
    path = tmp_path / "control.csv"
    ctl.save_control(path, lam, star)
    back, back_star = ctl.load_control(path, n_horizon=500)
    assert np.array_equal(back.values, lam.values)
    assert np.array_equal(back_star.values, star.values)
    assert back.dt == pytest.approx(DT, rel=1e-12)
