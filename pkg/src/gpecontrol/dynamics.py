"""Split-step Fourier propagation of the Gross-Pitaevskii equation.

Real time
    ``i dpsi/dt = (-d2/dx2 / 2M + V(x, lam*(t)) + kappa |psi|^2) psi``,
    advanced with the symmetric (Strang) splitting
    ``half potential+mean-field -> full kinetic -> half potential+mean-field``.
    The two half steps of step ``n -> n+1`` use the control samples
    ``lam*_n`` and ``lam*_{n+1}`` and the density at the start of each half
    step (the half step conserves ``|psi|`` pointwise, so it is exact).

Adjoint
    The costate is propagated backwards with the transpose of the linearized
    forward step. Because the mean-field phase depends on ``|psi|^2``, the
    linearization mixes ``p`` and ``conj(p)``; each half step applies the
    corresponding real-linear 2x2 map at every grid point. The result is the
    exact gradient of the discrete cost, the discrete counterpart of
    ``i dp/dt = (H + 2 kappa |psi|^2) p + kappa psi^2 conj(p)``.

Imaginary time
    ``t -> -i tau`` with renormalization after each step, for stationary
    states.
"""
from __future__ import annotations

import logging
from dataclasses import dataclass, field

import numpy as np

from .grid import Grid1D, Wavefunction, _check_same_grid, inner_product, normalize
from .potentials import TrapPotential, evaluate

log = logging.getLogger(__name__)

EDGE_TOLERANCE = 1e-8
# relative energy rises below this are floating-point noise, not ascent
ENERGY_ROUNDOFF = 1e-12
_BLOCK = 256


class NumericalError(RuntimeError):
    """NaN/inf during propagation or failure to converge."""


class ConvergenceError(NumericalError):
    pass


@dataclass(frozen=True)
class PropagationSettings:
    """Time stepping for one propagation.

    ``kappa`` is the mean-field strength and ``mass`` the particle mass
    (hbar = 1). Snapshots are kept every ``store_every`` steps.
    """

    dt: float
    n_steps: int
    kappa: float = 0.0
    mass: float = 1.0
    store_every: int = 1

    def __post_init__(self):
        if not self.dt > 0:
            raise ValueError("dt must be positive")
        if self.n_steps < 0 or int(self.n_steps) != self.n_steps:
            raise ValueError("n_steps must be a non-negative integer")
        if self.store_every < 1:
            raise ValueError("store_every must be >= 1")
        if not self.mass > 0:
            raise ValueError("mass must be positive")

    @classmethod
    def for_horizon(cls, horizon, dt, **kwargs):
        from .control import steps_for

        return cls(dt=dt, n_steps=steps_for(horizon, dt), **kwargs)

    @property
    def horizon(self) -> float:
        return self.n_steps * self.dt


@dataclass(eq=False)
class TrajectoryRecord:
    """Output of a propagation.

    ``history`` holds every state (shape ``(n_steps + 1, n_points)``) when
    full history was requested, else ``None``. ``snapshots`` are the states
    at ``snapshot_times`` (stride ``store_every``, final step included). For
    adjoint records, ``sensitivity[n]`` is the derivative of the terminal
    cost with respect to the filtered control sample ``lam*_n``.
    ``edge_amplitude`` is the largest ``|psi|`` seen at the box edges (a
    box-size diagnostic).
    """

    grid: Grid1D
    times: np.ndarray
    snapshot_times: np.ndarray
    snapshots: list
    final: Wavefunction
    history: np.ndarray | None = None
    sensitivity: np.ndarray | None = field(default=None, repr=False)
    edge_amplitude: float = 0.0

    @property
    def full_history(self) -> bool:
        return self.history is not None

    @property
    def n_steps(self) -> int:
        return len(self.times) - 1

    def state(self, n) -> Wavefunction:
        if self.history is None:
            raise ValueError("record carries no full history")
        return Wavefunction(self.grid, self.history[n])

    def density_map(self) -> np.ndarray:
        return np.array([np.abs(s.values) ** 2 for s in self.snapshots])


def _control_values(control, settings):
    values = np.asarray(getattr(control, "values", control), dtype=float)
    if values.shape != (settings.n_steps + 1,):
        raise ValueError(
            f"control has {values.shape[0] if values.ndim else 0} samples, "
            f"propagation needs {settings.n_steps + 1}"
        )
    cdt = getattr(control, "dt", settings.dt)
    if abs(cdt - settings.dt) > 1e-12 * settings.dt:
        raise ValueError(f"control dt {cdt} does not match propagation dt {settings.dt}")
    if not np.all(np.isfinite(values)):
        raise ValueError("control contains non-finite samples")
    return values


def _kinetic_phase(grid, settings, sign=-1j):
    return np.exp(sign * grid.k**2 / (2.0 * settings.mass) * settings.dt)


def _half_phase(v, rho, kappa, dt):
    return np.exp(-0.5j * dt * (v + kappa * rho))


def _snapshot_indices(settings):
    """Every ``store_every``-th step plus the last one."""
    idx = np.arange(0, settings.n_steps + 1, settings.store_every)
    return idx if idx[-1] == settings.n_steps else np.append(idx, settings.n_steps)


def _record(grid, settings, states, final, full):
    times = settings.dt * np.arange(settings.n_steps + 1)
    idx = _snapshot_indices(settings)
    snaps = [Wavefunction(grid, states[i]) for i in idx]
    return TrajectoryRecord(
        grid=grid,
        times=times,
        snapshot_times=times[idx],
        snapshots=snaps,
        final=final,
        history=states if full else None,
    )


def _check_finite(values, step):
    if not np.all(np.isfinite(values)):
        raise NumericalError(f"non-finite field encountered at step {step}")


def _potential_rows(trap, grid, lam, derivative=False):
    """``V(x, lam_n)`` (or ``dV/dlam``) for a block of control samples."""
    y = grid.x[None, :] - np.asarray(lam)[:, None]
    return -trap.shape_derivative(y) if derivative else trap.shape(y)


def propagate_forward(psi0: Wavefunction, trap: TrapPotential, lambda_star, settings: PropagationSettings,
                      full_history=True) -> TrajectoryRecord:
    """Integrate the GPE forward over ``settings.n_steps`` steps.

    ``lambda_star`` supplies the control actually seen by the atoms, one
    sample per step boundary (``n_steps + 1`` values).
    """
    grid = psi0.grid
    lam = _control_values(lambda_star, settings)
    kin = _kinetic_phase(grid, settings)
    dt, kappa = settings.dt, settings.kappa
    n = settings.n_steps

    states = np.empty((n + 1, grid.n_points), dtype=complex) if full_history else {}
    psi = psi0.values.copy()

    def store(i, values):
        if full_history:
            states[i] = values
        elif i % settings.store_every == 0 or i == n:
            states[i] = values.copy()

    store(0, psi)
    edge = max(abs(psi[0]), abs(psi[-1]))
    phase = _half_phase(trap.shape(grid.x - lam[0]), np.abs(psi) ** 2, kappa, dt)
    for lo in range(1, n + 1, _BLOCK):
        hi = min(lo + _BLOCK, n + 1)
        vblock = _potential_rows(trap, grid, lam[lo:hi])
        for i in range(lo, hi):
            psi = np.fft.ifft(kin * np.fft.fft(psi * phase))
            phase = _half_phase(vblock[i - lo], np.abs(psi) ** 2, kappa, dt)
            psi = psi * phase
            store(i, psi)
            edge = max(edge, abs(psi[0]), abs(psi[-1]))
        _check_finite(psi, hi - 1)
    final = Wavefunction(grid, psi)
    if edge > EDGE_TOLERANCE:
        log.debug("field reaches the box edge (|psi| = %.2g)", edge)
    if full_history:
        record = _record(grid, settings, states, final, True)
    else:
        times = settings.dt * np.arange(n + 1)
        idx = sorted(states)
        record = TrajectoryRecord(
            grid=grid,
            times=times,
            snapshot_times=times[idx],
            snapshots=[Wavefunction(grid, states[i]) for i in idx],
            final=final,
        )
    record.edge_amplitude = float(edge)
    return record


def terminal_costate(psi_T: Wavefunction, psi_d: Wavefunction) -> Wavefunction:
    """``p(T) = i <psi_d|psi(T)> psi_d`` (not normalized)."""
    _check_same_grid(psi_T, psi_d)
    return Wavefunction(psi_d.grid, 1j * inner_product(psi_d, psi_T) * psi_d.values)


def propagate_adjoint(pT: Wavefunction, forward: TrajectoryRecord, trap: TrapPotential, lambda_star,
                      settings: PropagationSettings) -> TrajectoryRecord:
    """Integrate the costate backwards from ``T*`` to 0.

    The forward record must carry the full history and have been produced
    with the same control and settings. The returned record stores ``p(t_n)``
    at every step and the control sensitivity ``dJ/dlam*_n``.
    """
    if not forward.full_history:
        raise ValueError("adjoint propagation needs the full forward history")
    _check_same_grid(pT, forward.final)
    if forward.n_steps != settings.n_steps or (
        settings.n_steps > 0 and abs(forward.times[1] - settings.dt) > 1e-12 * settings.dt
    ):
        raise ValueError("forward record does not match the propagation settings")
    grid = pT.grid
    lam = _control_values(lambda_star, settings)
    psi = forward.history
    n = settings.n_steps
    dt, kappa, dx = settings.dt, settings.kappa, grid.dx
    kin_adj = _kinetic_phase(grid, settings, sign=+1j)

    # Work with q = i p, the gradient of the cost in the real inner product
    # Re<q, dpsi>; the transposed steps are simplest in that variable.
    q = 1j * pT.values
    costates = np.empty((n + 1, grid.n_points), dtype=complex)
    costates[n] = q
    # conj of the half-step phases; weights w multiplying dV/dlam per sample
    phases = np.empty_like(psi)
    for lo in range(0, n + 1, _BLOCK):
        hi = min(lo + _BLOCK, n + 1)
        v = _potential_rows(trap, grid, lam[lo:hi])
        phases[lo:hi] = np.conj(_half_phase(v, np.abs(psi[lo:hi]) ** 2, kappa, dt))
    weights = np.zeros((n + 1, grid.n_points))

    for i in range(n - 1, -1, -1):
        # second half step of i -> i+1, from psi_b = psi[i+1] * conj(phase)
        w = np.imag(np.conj(q) * psi[i + 1])
        weights[i + 1] += w
        q = phases[i + 1] * (q + kappa * dt * w * psi[i + 1])
        q = np.fft.ifft(kin_adj * np.fft.fft(q))
        # first half step, psi[i] -> psi_a = psi[i] * phase
        w = np.imag(np.conj(q) * psi[i] * np.conj(phases[i]))
        weights[i] += w
        q = phases[i] * q + kappa * dt * w * psi[i]
        costates[i] = q
        if i % _BLOCK == 0:
            _check_finite(q, i)
    _check_finite(q, 0)
    sens = np.empty(n + 1)
    for lo in range(0, n + 1, _BLOCK):
        hi = min(lo + _BLOCK, n + 1)
        dv = _potential_rows(trap, grid, lam[lo:hi], derivative=True)
        sens[lo:hi] = 0.5 * dt * dx * np.einsum("ij,ij->i", weights[lo:hi], dv)
    p_hist = -1j * costates
    record = _record(grid, settings, p_hist, Wavefunction(grid, p_hist[0]), True)
    record.sensitivity = sens
    return record


def energy(psi: Wavefunction, trap: TrapPotential, lam=0.0, kappa=0.0, mass=1.0) -> float:
    """GPE energy functional ``<T + V> + kappa/2 int |psi|^4``."""
    grid = psi.grid
    rho = np.abs(psi.values) ** 2
    phik = grid.to_momentum(psi.values)
    kinetic = np.sum(grid.k**2 / (2.0 * mass) * np.abs(phik) ** 2) * grid.dk / (2.0 * np.pi)
    potential = np.sum(evaluate(trap, grid, lam) * rho) * grid.dx
    interaction = 0.5 * kappa * np.sum(rho**2) * grid.dx
    return float(kinetic + potential + interaction)


def chemical_potential(psi: Wavefunction, trap: TrapPotential, lam=0.0, kappa=0.0, mass=1.0) -> float:
    """``mu = E + kappa/2 int |psi|^4`` for a normalized stationary state."""
    rho = np.abs(psi.values) ** 2
    return energy(psi, trap, lam, kappa, mass) + 0.5 * kappa * float(np.sum(rho**2) * psi.grid.dx)


@dataclass
class ImaginaryTimeResult:
    state: Wavefunction
    energy: float
    energies: list
    steps: int


def _imaginary_time(guess, trap, lam, kappa, grid, tolerance, dt, dt_min, mass, max_steps, project=None,
                    state_tolerance=1e-8):
    """Imaginary-time relaxation with step-size continuation.

    The fixed point of the split step at finite ``dt`` differs from the true
    stationary state by O(dt^2), so after converging at one ``dt`` the step
    is halved until it reaches ``dt_min``. Steps that would raise the energy
    by more than roundoff are rejected and the step halved, so the recorded
    energies never increase beyond ``ENERGY_ROUNDOFF``.

    A level counts as converged when the energy drops by less than
    ``tolerance`` in one step and the state moves by less than
    ``state_tolerance`` per unit imaginary time. The energy is quadratic in
    the state error, so the energy test alone would stop early.
    """
    v = evaluate(trap, grid, lam)
    k2 = grid.k**2 / (2.0 * mass)

    def clean(values):
        psi = Wavefunction(grid, values)
        if project is not None:
            psi = psi - inner_product(project, psi) * project
        return normalize(psi)

    def unit(values):
        return values / (np.linalg.norm(values) * np.sqrt(grid.dx))

    def step(values, h):
        # Strang composition of the exact flows of -(V - mu), -kappa|psi|^2
        # and the kinetic term. Shifting by the current chemical potential
        # keeps the norm at 1 + O(h^2) inside the step, so the mean-field
        # flow sees the right density and the fixed point is O(h^2) accurate.
        mu = chemical_potential(Wavefunction(grid, values), trap, lam, kappa, mass)
        half = np.exp(-0.25 * h * (v - mu))

        def local(a):
            a = a * half
            a = a / np.sqrt(1.0 + kappa * h * np.abs(a) ** 2)
            return a * half

        values = np.fft.ifft(np.exp(-h * k2) * np.fft.fft(local(values)))
        return clean(local(values)).values

    psi = clean(guess.values).values
    e = energy(Wavefunction(grid, psi), trap, lam, kappa, mass)
    energies = [e]
    h = dt
    steps = 0
    while True:
        while True:
            if steps >= max_steps:
                raise ConvergenceError(
                    f"imaginary-time relaxation did not converge in {max_steps} steps "
                    f"(last energy change {abs(energies[-1] - energies[-2]) if len(energies) > 1 else np.nan:.3g})"
                )
            trial = step(psi, h)
            steps += 1
            _check_finite(trial, steps)
            e_new = energy(Wavefunction(grid, trial), trap, lam, kappa, mass)
            moved = np.linalg.norm(trial - psi) * np.sqrt(grid.dx) / h
            if e_new - e > ENERGY_ROUNDOFF * max(1.0, abs(e)):
                h *= 0.5
                continue
            psi, change, e = trial, abs(e - e_new), e_new
            energies.append(e)
            if change < tolerance and moved < state_tolerance:
                break
        if h <= dt_min * (1 + 1e-12):
            break
        h = max(0.5 * h, dt_min)
    state = Wavefunction(grid, psi)
    if state.edge_amplitude() > EDGE_TOLERANCE:
        log.warning("stationary state reaches the box edge (|psi| = %.2g)", state.edge_amplitude())
    return ImaginaryTimeResult(state, e, energies, steps)


def _symmetrize(values, grid, parity):
    if not grid.is_symmetric():
        return values
    return 0.5 * (values + parity * grid.reflect(values))


def ground_state(trap: TrapPotential, lam=0.0, kappa=0.0, grid: Grid1D = None, tolerance=1e-10, dt=0.01,
                 dt_min=None, mass=1.0, max_steps=200_000, full_output=False):
    """Lowest stationary state by imaginary-time relaxation.

    ``dt`` is the initial imaginary step; ``dt_min`` (default ``dt / 16``)
    the final one. Returns the normalized state, or an
    :class:`ImaginaryTimeResult` when ``full_output`` is set.
    """
    if not tolerance > 0:
        raise ValueError("tolerance must be positive")
    dt_min = dt / 16 if dt_min is None else dt_min
    width = (2.0 * trap.coefficients[0] * mass) ** -0.25
    y = grid.x - lam
    guess = Wavefunction(grid, np.exp(-0.5 * (y / width) ** 2))
    result = _imaginary_time(guess, trap, lam, kappa, grid, tolerance, dt, dt_min, mass, max_steps)
    if trap.is_symmetric and lam == 0.0 and grid.is_symmetric():
        # imaginary time preserves parity only up to roundoff
        result.state = normalize(Wavefunction(grid, _symmetrize(result.state.values, grid, +1)))
    return result if full_output else result.state


def excited_state(trap: TrapPotential, lam=0.0, kappa=0.0, grid: Grid1D = None, tolerance=1e-10, dt=0.01,
                  dt_min=None, mass=1.0, max_steps=200_000, ground: Wavefunction = None,
                  overlap_tolerance=1e-6, full_output=False):
    """First excited stationary state.

    Imaginary-time relaxation restricted to the orthogonal complement of the
    (frozen) ground state, which is projected out after every step.
    """
    if not tolerance > 0:
        raise ValueError("tolerance must be positive")
    dt_min = dt / 16 if dt_min is None else dt_min
    if ground is None:
        ground = ground_state(trap, lam, kappa, grid, tolerance, dt, dt_min, mass, max_steps)
    width = (2.0 * trap.coefficients[0] * mass) ** -0.25
    y = grid.x - lam
    guess = Wavefunction(grid, y * np.exp(-0.5 * (y / width) ** 2))
    result = _imaginary_time(guess, trap, lam, kappa, grid, tolerance, dt, dt_min, mass, max_steps,
                             project=ground)
    state = result.state
    if trap.is_symmetric and lam == 0.0 and grid.is_symmetric():
        state = normalize(Wavefunction(grid, _symmetrize(state.values, grid, -1)))
    overlap = abs(inner_product(ground, state))
    if overlap > overlap_tolerance:
        raise ConvergenceError(f"excited state overlaps the ground state by {overlap:.3g}")
    result.state = state
    return result if full_output else state
