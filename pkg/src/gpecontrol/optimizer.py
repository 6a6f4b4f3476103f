"""Filter-aware optimal control of the condensate shakeup.

The commanded control ``lam`` is optimized on ``[0, T]``; the atoms see the
filtered control ``lam* = h * lam`` on the longer window ``[0, T*]``. The
cost is

    J = 1/2 (1 - |<psi_d|psi(T*)>|^2) + gamma/2 int_0^T lam'(t)^2 dt

and its gradient is assembled from one forward and one adjoint solve.

Sign convention: every ``gradient_*`` function returns the L2 gradient of
``J`` itself, ``g = -gamma lam'' - Re <p|dV/dlam|psi>`` (correlated with the
kernel when filtering). Its zeros are the optimality condition
``gamma lam'' = -Re <p|dV/dlam|psi>``; the descent direction is ``-g``.
"""
from __future__ import annotations

import logging
from dataclasses import dataclass, field

import numpy as np
from scipy.linalg import solve_banded

from . import control as ctl
from .control import ControlTrajectory, FilterKernel
from .dynamics import (
    PropagationSettings,
    TrajectoryRecord,
    propagate_adjoint,
    propagate_forward,
    terminal_costate,
)
from .grid import Grid1D, Wavefunction, fidelity, inner_product
from .potentials import TrapPotential

log = logging.getLogger(__name__)

SMOOTHING_MODES = ("L2", "H1")
DIRECTIONS = ("steepest", "conjugate")


@dataclass(frozen=True)
class OptimizerSettings:
    """Outer-loop settings.

    ``initial_step`` is the largest control change (length units) of the
    first line-search trial; later trials start from ``step_growth`` times
    the last accepted step. ``direction`` selects plain (smoothed) steepest
    descent or Polak-Ribiere conjugate gradients on the smoothed gradient.
    """

    max_iterations: int = 500
    gradient_tolerance: float = 1e-8
    cost_tolerance: float = 1e-4
    smoothing: str = "L2"
    armijo: float = 1e-4
    max_halvings: int = 40
    initial_step: float = 0.1
    step_growth: float = 2.0
    guess_amplitude: float = 0.0
    seed: int = 0
    direction: str = "conjugate"

    def __post_init__(self):
        if self.smoothing not in SMOOTHING_MODES:
            raise ValueError(f"smoothing must be one of {SMOOTHING_MODES}")
        if self.direction not in DIRECTIONS:
            raise ValueError(f"direction must be one of {DIRECTIONS}")
        if not 0 < self.armijo < 1:
            raise ValueError("Armijo constant must lie in (0, 1)")
        if self.max_iterations < 0 or self.max_halvings < 1:
            raise ValueError("iteration limits must be positive")


@dataclass(frozen=True, eq=False)
class OctProblem:
    """Full definition of one control problem (dimensionless units).

    ``n_horizon`` and ``n_steps`` are the step counts of ``T`` and ``T*``.
    Without a kernel the control acts directly and ``T* = T``.
    """

    grid: Grid1D
    trap: TrapPotential
    kappa: float
    psi0: Wavefunction
    psi_d: Wavefunction
    gamma: float
    dt: float
    n_horizon: int
    n_steps: int
    lambda0: float = 0.0
    lambdaT: float = 0.0
    kernel: FilterKernel | None = None
    mass: float = 1.0
    settings: OptimizerSettings = field(default_factory=OptimizerSettings)
    store_every: int = 1

    def __post_init__(self):
        if not self.gamma > 0:
            raise ValueError("gamma must be positive")
        if self.n_steps < self.n_horizon or self.n_horizon < 2:
            raise ValueError("need T* >= T and at least two control steps")
        if self.kernel is None and self.n_steps != self.n_horizon:
            raise ValueError("without a filter the dynamics horizon must equal T")
        if self.kernel is not None and abs(self.kernel.dt - self.dt) > 1e-12 * self.dt:
            raise ValueError("kernel dt must equal the control dt")

    @classmethod
    def from_horizons(cls, T, T_star=None, dt=None, **kwargs):
        n_horizon = ctl.steps_for(T, dt)
        n_steps = n_horizon if T_star is None else ctl.steps_for(T_star, dt)
        return cls(dt=dt, n_horizon=n_horizon, n_steps=n_steps, **kwargs)

    @property
    def T(self) -> float:
        return self.n_horizon * self.dt

    @property
    def T_star(self) -> float:
        return self.n_steps * self.dt

    @property
    def filtered(self) -> bool:
        return self.kernel is not None

    def propagation(self, **overrides) -> PropagationSettings:
        kw = dict(dt=self.dt, n_steps=self.n_steps, kappa=self.kappa, mass=self.mass,
                  store_every=self.store_every)
        kw.update(overrides)
        return PropagationSettings(**kw)

    def control(self, values) -> ControlTrajectory:
        return ControlTrajectory(self.dt, values, self.n_horizon)

    def apply(self, lam: ControlTrajectory) -> ControlTrajectory:
        """Control seen by the atoms."""
        return lam if self.kernel is None else ctl.apply_filter(lam, self.kernel)


@dataclass
class OctResult:
    lam: ControlTrajectory
    lam_star: ControlTrajectory
    history: list
    fidelity: float
    iterations: int
    reason: str
    forward: TrajectoryRecord | None = None

    @property
    def costs(self) -> np.ndarray:
        return np.array([row["J"] for row in self.history])

    @property
    def final_cost(self) -> float:
        return float(self.history[-1]["J"])

    @property
    def final_terminal_cost(self) -> float:
        return float(self.history[-1]["J_terminal"])


HISTORY_COLUMNS = ("iter", "J", "J_terminal", "J_penalty", "grad_norm", "step_size")


def penalty(lam: ControlTrajectory, gamma) -> float:
    """``gamma/2 int_0^T lam'^2 dt`` with one-sided differences per step.

    Exact for piecewise-linear controls; its gradient is ``-gamma lam''``
    with the standard three-point second difference.
    """
    d = np.diff(lam.values[: lam.n_horizon + 1])
    return float(0.5 * gamma * np.sum(d * d) / lam.dt)


def cost(psi_T: Wavefunction, lam: ControlTrajectory, gamma, psi_d: Wavefunction):
    """Return ``(J, J_T, J_gamma)``; ``psi_T`` is the state at ``T*``."""
    j_t = 0.5 * (1.0 - abs(inner_product(psi_d, psi_T)) ** 2)
    j_g = penalty(lam, gamma)
    return j_t + j_g, j_t, j_g


def second_difference(lam: ControlTrajectory) -> np.ndarray:
    """``lam''`` on ``[0, T]``; zero at the (fixed) endpoints."""
    v = lam.values[: lam.n_horizon + 1]
    out = np.zeros_like(v)
    out[1:-1] = (v[2:] - 2.0 * v[1:-1] + v[:-2]) / lam.dt**2
    return out


def _assemble(bracket, lam, gamma):
    g = np.zeros(lam.n_horizon + 1)
    g[1:-1] = bracket[1 : lam.n_horizon] - gamma * second_difference(lam)[1:-1]
    return g


def _sensitivity(adjoint: TrajectoryRecord, dt):
    if adjoint.sensitivity is None:
        raise ValueError("adjoint record carries no control sensitivity")
    return adjoint.sensitivity / dt


def gradient_unfiltered(forward: TrajectoryRecord, adjoint: TrajectoryRecord, trap, lam: ControlTrajectory,
                        gamma) -> np.ndarray:
    """L2 gradient of ``J`` on ``[0, T]`` when the control acts directly.

    The interaction part is ``b(t) = -Re <p(t)|dV/dlam|psi(t)>`` as produced
    by the adjoint sweep (evaluated on the split-step sub-states, so the
    result is the exact gradient of the discrete cost).
    """
    if forward.n_steps != adjoint.n_steps or forward.n_steps != lam.n_steps:
        raise ValueError("forward, adjoint and control records do not match")
    return _assemble(_sensitivity(adjoint, lam.dt), lam, gamma)


def gradient_filtered(forward: TrajectoryRecord, adjoint: TrajectoryRecord, trap, lam: ControlTrajectory,
                      kernel: FilterKernel, gamma) -> np.ndarray:
    """L2 gradient of ``J`` with the filter in the loop.

    The per-step bracket is correlated with the kernel,
    ``r(t) = int_t^{T*} h(s - t) b(s) ds``, which is the transpose of the
    causal convolution applied to the control.
    """
    if abs(kernel.dt - lam.dt) > 1e-12 * lam.dt:
        raise ValueError("kernel dt does not match the control dt")
    if forward.n_steps != adjoint.n_steps or forward.n_steps != lam.n_steps:
        raise ValueError("forward, adjoint and control records do not match")
    sens = _sensitivity(adjoint, lam.dt)
    return _assemble(ctl.filter_adjoint(sens, kernel), lam, gamma)


def smooth_direction(g, mode="H1", dt=1.0) -> np.ndarray:
    """Map an L2 gradient to a search direction.

    ``H1`` solves ``-u'' = g`` with ``u = 0`` at both ends (tridiagonal
    solve); ``L2`` returns ``g``.
    """
    g = np.asarray(g, dtype=float)
    if mode == "L2":
        return g.copy()
    if mode != "H1":
        raise ValueError(f"unknown smoothing mode {mode!r}")
    n = len(g) - 2
    u = np.zeros_like(g)
    if n <= 0:
        return u
    ab = np.empty((3, n))
    ab[0] = -1.0
    ab[1] = 2.0
    ab[2] = -1.0
    u[1:-1] = solve_banded((1, 1), ab, g[1:-1] * dt**2)
    return u


def _perturbation(problem: OctProblem):
    s = problem.settings
    if s.guess_amplitude == 0.0:
        return 0.0
    rng = np.random.default_rng(s.seed)
    amplitude = s.guess_amplitude * (1.0 + 0.1 * rng.uniform(-1.0, 1.0))
    t = problem.dt * np.arange(problem.n_horizon + 1)
    bump = amplitude * np.sin(2.0 * np.pi * t / problem.T)
    bump[[0, -1]] = 0.0
    return bump


def initial_guess(problem: OctProblem) -> ControlTrajectory:
    """Linear ramp ``lambda0 -> lambdaT`` plus a one-period sine, tail held."""
    lam = ControlTrajectory.ramp(problem.lambda0, problem.lambdaT, problem.T, problem.T_star, problem.dt)
    values = lam.values.copy()
    values[: problem.n_horizon + 1] += _perturbation(problem)
    return ctl.clamp_tail(lam.with_values(values))


@dataclass
class _Evaluation:
    lam: ControlTrajectory
    lam_star: ControlTrajectory
    forward: TrajectoryRecord
    J: float
    J_T: float
    J_gamma: float


def _evaluate(problem: OctProblem, lam: ControlTrajectory, full_history=True) -> _Evaluation:
    lam_star = problem.apply(lam)
    fwd = propagate_forward(problem.psi0, problem.trap, lam_star, problem.propagation(), full_history)
    J, J_T, J_g = cost(fwd.final, lam, problem.gamma, problem.psi_d)
    return _Evaluation(lam, lam_star, fwd, J, J_T, J_g)


def _gradient(problem: OctProblem, ev: _Evaluation) -> np.ndarray:
    settings = problem.propagation()
    pT = terminal_costate(ev.forward.final, problem.psi_d)
    adj = propagate_adjoint(pT, ev.forward, problem.trap, ev.lam_star, settings)
    if problem.kernel is None:
        return gradient_unfiltered(ev.forward, adj, problem.trap, ev.lam, problem.gamma)
    return gradient_filtered(ev.forward, adj, problem.trap, ev.lam, problem.kernel, problem.gamma)


def cost_and_gradient(problem: OctProblem, lam: ControlTrajectory):
    """``(J, g)`` for a control; ``g`` lives on ``[0, T]``."""
    ev = _evaluate(problem, lam)
    return ev.J, _gradient(problem, ev)


def objective(problem: OctProblem, lam: ControlTrajectory) -> float:
    return _evaluate(problem, lam, full_history=False).J


def _l2_norm(g, dt):
    return float(np.sqrt(np.sum(g * g) * dt))


def optimize(problem: OctProblem, initial: ControlTrajectory | None = None, callback=None) -> OctResult:
    """Gradient descent with Armijo backtracking on ``[0, T]``.

    Per iteration: filter the control, solve forward on ``[0, T*]``, set the
    terminal costate and solve backwards, build the gradient, smooth it,
    and search along the smoothed descent direction with both endpoints and
    the held tail fixed.
    """
    s = problem.settings
    lam = ctl.clamp_tail(initial if initial is not None else initial_guess(problem))
    if lam.n_steps != problem.n_steps or lam.n_horizon != problem.n_horizon:
        raise ValueError("initial control does not match the problem horizons")
    if lam.values[0] != problem.lambda0 or lam.lambdaT != problem.lambdaT:
        raise ValueError("initial control violates the fixed endpoints")
    m = problem.n_horizon
    dt = problem.dt
    ev = _evaluate(problem, lam)
    history = []
    step = None
    previous = None
    reason = "max_iterations"
    iteration = 0
    while True:
        g = _gradient(problem, ev)
        gnorm = _l2_norm(g, dt)
        row = dict(iter=iteration, J=ev.J, J_terminal=ev.J_T, J_penalty=ev.J_gamma, grad_norm=gnorm,
                   step_size=0.0)
        history.append(row)
        if callback is not None:
            callback(row)
        if gnorm < s.gradient_tolerance:
            reason = "gradient_tolerance"
            break
        if ev.J_T < s.cost_tolerance:
            reason = "cost_tolerance"
            break
        if iteration >= s.max_iterations:
            break

        z = smooth_direction(g, s.smoothing, dt)
        direction = -z
        if s.direction == "conjugate" and previous is not None:
            g_old, z_old, d_old = previous
            beta = max(0.0, float(np.sum((g - g_old) * z) / np.sum(g_old * z_old)))
            direction = direction + beta * d_old
            if not np.sum(g * direction) < 0:
                direction = -z
        slope = float(np.sum(g * direction) * dt)
        if not slope < 0:
            reason = "stalled"
            break
        previous = (g, z, direction)
        if step is None:
            step = s.initial_step / max(np.max(np.abs(direction)), 1e-300)
        else:
            step *= s.step_growth
        accepted = None
        for _ in range(s.max_halvings):
            values = ev.lam.values.copy()
            values[: m + 1] += step * direction
            trial = _evaluate(problem, ctl.clamp_tail(ev.lam.with_values(values)))
            if trial.J <= ev.J + s.armijo * step * slope:
                accepted = trial
                break
            step *= 0.5
        if accepted is None:
            reason = "stalled"
            break
        row["step_size"] = step
        ev = accepted
        iteration += 1
        log.debug("iter %d J=%.6e J_T=%.6e |g|=%.3e step=%.3e", iteration, ev.J, ev.J_T, gnorm, step)

    return OctResult(
        lam=ev.lam,
        lam_star=ev.lam_star,
        history=history,
        fidelity=fidelity(problem.psi_d, ev.forward.final),
        iterations=iteration,
        reason=reason,
        forward=ev.forward,
    )


def evaluate_protocol(lam: ControlTrajectory, problem: OctProblem, filtered=True):
    """Forward-only run of a given control.

    Returns ``(fidelity, J, record)``; with ``filtered=False`` the filter is
    bypassed even if the problem has one.
    """
    lam = ctl.clamp_tail(lam)
    lam_star = problem.apply(lam) if filtered else lam
    fwd = propagate_forward(problem.psi0, problem.trap, lam_star, problem.propagation(), full_history=False)
    J, _, _ = cost(fwd.final, lam, problem.gamma, problem.psi_d)
    return fidelity(problem.psi_d, fwd.final), J, fwd


def terminal_hold_drift(problem: OctProblem, psi_T: Wavefunction, duration=None) -> float:
    """Largest fidelity change while holding the trap at ``lambdaT``.

    Propagates ``psi_T`` for ``duration`` (default: one small-oscillation
    trap period) and compares the fidelity with ``psi_d`` at every step to
    its starting value.
    """
    if duration is None:
        duration = 2.0 * np.pi / problem.trap.harmonic_frequency(problem.mass)
    n = max(1, int(np.ceil(duration / problem.dt)))
    settings = problem.propagation(n_steps=n, store_every=1)
    hold = np.full(n + 1, problem.lambdaT)
    rec = propagate_forward(psi_T, problem.trap, hold, settings, full_history=True)
    f = np.abs(rec.history @ np.conj(problem.psi_d.values) * problem.grid.dx) ** 2
    return float(np.max(np.abs(f - f[0])))
