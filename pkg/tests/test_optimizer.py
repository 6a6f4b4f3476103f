import numpy as np
import pytest

from gpecontrol import control as ctl
from gpecontrol.control import ControlTrajectory
from gpecontrol.dynamics import PropagationSettings, excited_state, ground_state, propagate_adjoint, propagate_forward
from gpecontrol.grid import Grid1D, Wavefunction, normalize, inner_product
from gpecontrol.optimizer import (
    HISTORY_COLUMNS,
    OctProblem,
    OptimizerSettings,
    cost,
    cost_and_gradient,
    evaluate_protocol,
    gradient_filtered,
    gradient_unfiltered,
    initial_guess,
    objective,
    optimize,
    penalty,
    second_difference,
    smooth_direction,
)
from gpecontrol.potentials import TrapPotential

TRAP = TrapPotential.quartic(0.5, 0.15)
DT = 0.05


@pytest.fixture(scope="module")
def grid():
    return Grid1D(64, -8.0, 8.0)


@pytest.fixture(scope="module")
def states(grid):
    out = {}
    for kappa in (0.0, 1.0):
        psi0 = ground_state(TRAP, 0.0, kappa, grid, dt=DT)
        out[kappa] = (psi0, excited_state(TRAP, 0.0, kappa, grid, dt=DT, ground=psi0))
    return out


def make_problem(grid, states, kappa=1.0, filtered=True, T=4.0, gamma=1e-3, **settings):
    kernel = None
    if filtered:
        kernel = ctl.make_kernel("critically_damped", DT, cutoff=ctl.cutoff_for_response_time("critically_damped", 1.0))
    psi0, psi_d = states[kappa]
    T_star = T + (kernel.tau_star if kernel else 0.0)
    settings.setdefault("guess_amplitude", 0.5)
    return OctProblem.from_horizons(T, T_star, DT, grid=grid, trap=TRAP, kappa=kappa, psi0=psi0, psi_d=psi_d,
                                    gamma=gamma, kernel=kernel, settings=OptimizerSettings(**settings))


def random_direction(problem, seed):
    rng = np.random.default_rng(seed)
    d = np.zeros(problem.n_steps + 1)
    d[1 : problem.n_horizon] = rng.normal(size=problem.n_horizon - 1)
    return d


def directional_check(problem, lam, seed, eps=1e-6):
    _, g = cost_and_gradient(problem, lam)
    d = random_direction(problem, seed)
    adjoint = float(np.sum(g * d[: problem.n_horizon + 1]) * problem.dt)
    plus = objective(problem, ctl.clamp_tail(lam.with_values(lam.values + eps * d)))
    minus = objective(problem, ctl.clamp_tail(lam.with_values(lam.values - eps * d)))
    fd = (plus - minus) / (2 * eps)
    return adjoint, fd


# ---------------------------------------------------------------- cost
def test_cost_examples(grid, states):
    psi0, psi_d = states[1.0]
    lam = ControlTrajectory(DT, np.full(81, 0.3), 80)
    assert cost(psi_d, lam, 1e-9, psi_d)[0] < 1e-15
    J, J_T, J_g = cost(psi0, lam, 1e-9, psi_d)
    assert J_g == 0.0
    assert J == pytest.approx(0.5, abs=1e-12)


def test_cost_exact_for_identical_state(grid, states):
    _, psi_d = states[0.0]
    lam = ControlTrajectory(DT, np.zeros(41), 40)
    J, J_T, J_g = cost(psi_d, lam, 1e-9, psi_d)
    assert J_g == 0.0 and abs(J) < 1e-15


def test_ramp_penalty():
    gamma, slope, T = 1e-9, 0.7, 8.0
    lam = ControlTrajectory.ramp(0.0, slope * T, T, T + 1.0, 0.01)
    assert penalty(lam, gamma) == pytest.approx(gamma * slope**2 * T / 2, rel=1e-10)
    # the clamped tail does not count
    assert penalty(lam, 1.0) == pytest.approx(slope**2 * T / 2, rel=1e-10)


def test_second_difference():
    t = 0.01 * np.arange(201)
    lam = ControlTrajectory(0.01, 3 * t**2 + t)
    d2 = second_difference(lam)
    assert d2[0] == 0.0 and d2[-1] == 0.0
    assert np.allclose(d2[1:-1], 6.0, atol=1e-8)


# ---------------------------------------------------------------- gradients
@pytest.mark.parametrize("kappa", [0.0, 1.0])
@pytest.mark.parametrize("filtered", [False, True])
def test_gradient_matches_finite_differences(grid, states, kappa, filtered):
    problem = make_problem(grid, states, kappa, filtered)
    lam = initial_guess(problem)
    for seed in range(3):
        adjoint, fd = directional_check(problem, lam, seed)
        assert abs(adjoint - fd) <= 1e-4 * abs(fd)


def test_gradient_vanishing_costate_is_penalty_only(grid, states):
    psi0, _ = states[0.0]
    n = 60
    t = DT * np.arange(n + 1)
    lam = ControlTrajectory(DT, 0.5 * np.sin(np.pi * t / t[-1]) ** 2, n)
    settings = PropagationSettings(dt=DT, n_steps=n)
    fwd = propagate_forward(psi0, TRAP, lam, settings)
    # target orthogonal to the terminal state makes p(T) vanish
    other = Wavefunction(grid, grid.x * np.exp(-grid.x**2))
    psi_d = normalize(other - inner_product(fwd.final, other) * fwd.final)
    pT = Wavefunction(grid, 1j * inner_product(psi_d, fwd.final) * psi_d.values)
    adj = propagate_adjoint(pT, fwd, TRAP, lam, settings)
    gamma = 1.0
    g = gradient_unfiltered(fwd, adj, TRAP, lam, gamma)
    # sign convention: the L2 gradient of J is -gamma lam''
    expected = -gamma * second_difference(lam)
    expected[[0, -1]] = 0.0
    assert np.max(np.abs(g - expected)) < 1e-12 * np.max(np.abs(expected))


def test_impulse_kernel_gradient_reduces(grid, states):
    problem = make_problem(grid, states, 1.0, filtered=False)
    lam = initial_guess(problem)
    settings = problem.propagation()
    fwd = propagate_forward(problem.psi0, TRAP, lam, settings)
    from gpecontrol.dynamics import terminal_costate

    adj = propagate_adjoint(terminal_costate(fwd.final, problem.psi_d), fwd, TRAP, lam, settings)
    plain = gradient_unfiltered(fwd, adj, TRAP, lam, problem.gamma)
    impulse = gradient_filtered(fwd, adj, TRAP, lam, ctl.make_kernel("impulse", DT), problem.gamma)
    assert np.max(np.abs(plain - impulse)) < 1e-10
    with pytest.raises(ValueError):
        gradient_filtered(fwd, adj, TRAP, lam, ctl.make_kernel("impulse", 2 * DT), problem.gamma)


def test_filter_adjoint_identity():
    """Correlation is the transpose of causal convolution (double-sum oracle)."""
    rng = np.random.default_rng(3)
    k = ctl.make_kernel("critically_damped", 0.01, cutoff=30.0)
    n = 200
    w = k.weights
    a = rng.normal(size=n)
    b = rng.normal(size=n)
    a[0] = 0.0  # no pre-protocol hold contribution
    conv = np.array([sum(w[j] * a[i - j] for j in range(len(w)) if i - j >= 0) for i in range(n)])
    corr = np.array([sum(w[j] * b[i + j] for j in range(len(w)) if i + j < n) for i in range(n)])
    assert np.max(np.abs(ctl.apply_filter(ControlTrajectory(0.01, a), k).values - conv)) < 1e-12
    assert np.max(np.abs(ctl.filter_adjoint(b, k) - corr)) < 1e-12
    assert abs(np.dot(a, corr) - np.dot(conv, b)) < 1e-10


def test_gradient_record_mismatch(grid, states):
    problem = make_problem(grid, states, 1.0, filtered=False)
    lam = initial_guess(problem)
    settings = problem.propagation()
    fwd = propagate_forward(problem.psi0, TRAP, lam, settings)
    short = propagate_forward(problem.psi0, TRAP, np.zeros(11), PropagationSettings(dt=DT, n_steps=10))
    with pytest.raises(ValueError):
        gradient_unfiltered(fwd, short, TRAP, lam, 1.0)


# ---------------------------------------------------------------- smoothing
def test_smooth_direction():
    n = 100
    t = np.linspace(0.0, 1.0, n + 1)
    dt = t[1]
    assert np.array_equal(smooth_direction(np.zeros(n + 1), "H1", dt), np.zeros(n + 1))
    g = np.ones(n + 1)
    u = smooth_direction(g, "H1", dt)
    # three-point Laplacian is exact on quadratics
    assert np.max(np.abs(u - t * (1 - t) / 2)) < 1e-12
    assert u[0] == 0.0 and u[-1] == 0.0
    g = np.sin(3 * t)
    assert np.array_equal(smooth_direction(g, "L2", dt), g)
    with pytest.raises(ValueError):
        smooth_direction(g, "H2", dt)


# ---------------------------------------------------------------- outer loop
def test_zero_iterations_when_already_converged(grid, states):
    problem = make_problem(grid, states, 1.0, True, gradient_tolerance=1e6)
    res = optimize(problem)
    assert res.iterations == 0 and res.reason == "gradient_tolerance"
    assert len(res.history) == 1
    problem = make_problem(grid, states, 1.0, True, max_iterations=0)
    res = optimize(problem)
    assert res.iterations == 0 and res.reason == "max_iterations"


def test_descent_is_monotone_with_fixed_endpoints(grid, states):
    problem = make_problem(grid, states, 1.0, True, max_iterations=15)
    seen = []
    res = optimize(problem, callback=seen.append)
    J = res.costs
    assert len(J) == res.iterations + 1 == len(seen)
    assert np.all(np.diff(J) <= 0)
    assert J[-1] < J[0]
    assert res.lam.values[0] == problem.lambda0
    assert res.lam.lambdaT == problem.lambdaT
    assert res.lam.is_clamped()
    assert set(HISTORY_COLUMNS) == set(res.history[0])
    for row in res.history:
        assert row["J"] == pytest.approx(row["J_terminal"] + row["J_penalty"], rel=1e-14)


@pytest.mark.parametrize("direction", ["steepest", "conjugate"])
@pytest.mark.parametrize("smoothing", ["L2", "H1"])
def test_all_search_modes_descend(grid, states, direction, smoothing):
    problem = make_problem(grid, states, 1.0, True, max_iterations=5, direction=direction, smoothing=smoothing)
    res = optimize(problem)
    assert np.all(np.diff(res.costs) <= 0) and res.costs[-1] < res.costs[0]


def test_reduction_to_unfiltered(grid, states):
    plain = make_problem(grid, states, 1.0, filtered=False, max_iterations=5)
    impulse = OctProblem.from_horizons(plain.T, plain.T, DT, grid=grid, trap=TRAP, kappa=1.0, psi0=plain.psi0,
                                       psi_d=plain.psi_d, gamma=plain.gamma, kernel=ctl.make_kernel("impulse", DT),
                                       settings=plain.settings)
    a = optimize(plain)
    b = optimize(impulse)
    assert a.iterations == b.iterations == 5
    assert np.max(np.abs(a.costs - b.costs)) < 1e-10
    assert np.max(np.abs(a.lam.values - b.lam.values)) < 1e-10


def test_line_search_failure_is_reported(grid, states):
    problem = make_problem(grid, states, 1.0, True, initial_step=1e3, max_halvings=1)
    res = optimize(problem)
    assert res.reason == "stalled"
    assert res.iterations == 0


def test_initial_guess(grid, states):
    a = initial_guess(make_problem(grid, states, seed=1))
    b = initial_guess(make_problem(grid, states, seed=1))
    c = initial_guess(make_problem(grid, states, seed=2))
    assert np.array_equal(a.values, b.values)
    assert not np.array_equal(a.values, c.values)
    assert a.values[0] == 0.0 and a.lambdaT == 0.0 and a.is_clamped()
    flat = initial_guess(make_problem(grid, states, guess_amplitude=0.0))
    assert np.all(flat.values == 0.0)


def test_initial_control_must_respect_endpoints(grid, states):
    problem = make_problem(grid, states)
    lam = initial_guess(problem)
    bad = lam.values.copy()
    bad[0] = 0.1
    with pytest.raises(ValueError):
        optimize(problem, initial=lam.with_values(bad))


def test_problem_invariants(grid, states):
    psi0, psi_d = states[1.0]
    kw = dict(grid=grid, trap=TRAP, kappa=1.0, psi0=psi0, psi_d=psi_d)
    with pytest.raises(ValueError):
        OctProblem.from_horizons(4.0, 4.0, DT, gamma=0.0, **kw)
    with pytest.raises(ValueError):
        OctProblem.from_horizons(4.0, 5.0, DT, gamma=1e-9, **kw)
    with pytest.raises(ValueError):
        OctProblem.from_horizons(4.0, 3.0, DT, gamma=1e-9, kernel=ctl.make_kernel("impulse", DT), **kw)
    with pytest.raises(ValueError):
        OptimizerSettings(smoothing="H3")
    with pytest.raises(ValueError):
        OptimizerSettings(direction="newton")


def test_evaluate_protocol_stationary(grid, states):
    psi0, _ = states[1.0]
    problem = OctProblem.from_horizons(4.0, 4.0, DT, grid=grid, trap=TRAP, kappa=1.0, psi0=psi0, psi_d=psi0,
                                       gamma=1e-9)
    lam = ControlTrajectory(DT, np.zeros(problem.n_steps + 1), problem.n_horizon)
    f, J, record = evaluate_protocol(lam, problem)
    assert f >= 1 - 1e-6
    assert J < 1e-6
