"""Control trajectories, causal filter kernels, and filtering.

A control lives on the uniform grid ``t_n = n dt``, ``n = 0..N`` covering the
dynamics horizon ``[0, T*]``. The first ``n_horizon`` steps, ``[0, T]``, are the
part the optimizer may change; on ``[T, T*]`` the commanded control is held
at its terminal value so that the filtered signal can settle.
"""
from __future__ import annotations

import csv
import logging
import warnings
from dataclasses import dataclass, replace

import numpy as np
from scipy.optimize import brentq

log = logging.getLogger(__name__)

KERNEL_KINDS = ("exponential", "critically_damped", "tabulated", "impulse")
# envelope fraction of the peak at which the response is taken to be over
RESPONSE_CUTOFF = 1e-3


class FilterError(ValueError):
    pass


@dataclass(frozen=True, eq=False)
class ControlTrajectory:
    """Sampled real control on ``[0, T*]``.

    Parameters
    ----------
    dt : float
        Sampling step.
    values : ndarray
        ``N + 1`` samples at ``t_n = n dt``.
    n_horizon : int
        Index of the optimization horizon, ``T = n_horizon * dt``. Defaults to
        the full length (``T = T*``).
    """

    dt: float
    values: np.ndarray
    n_horizon: int = -1

    def __post_init__(self):
        values = np.array(self.values, dtype=float)
        if values.ndim != 1 or len(values) < 2:
            raise ValueError("control needs at least two samples")
        if not self.dt > 0:
            raise ValueError("dt must be positive")
        values.setflags(write=False)
        object.__setattr__(self, "values", values)
        n_steps = len(values) - 1
        if self.n_horizon < 0:
            object.__setattr__(self, "n_horizon", n_steps)
        if not 1 <= self.n_horizon <= n_steps:
            raise ValueError(f"n_horizon must lie in [1, {n_steps}], got {self.n_horizon}")

    @property
    def n_steps(self) -> int:
        return len(self.values) - 1

    @property
    def times(self) -> np.ndarray:
        return self.dt * np.arange(len(self.values))

    @property
    def T(self) -> float:
        return self.n_horizon * self.dt

    @property
    def T_star(self) -> float:
        return self.n_steps * self.dt

    @property
    def lambda0(self) -> float:
        return float(self.values[0])

    @property
    def lambdaT(self) -> float:
        return float(self.values[self.n_horizon])

    def with_values(self, values) -> "ControlTrajectory":
        return replace(self, values=values)

    def is_clamped(self) -> bool:
        return bool(np.all(self.values[self.n_horizon:] == self.values[self.n_horizon]))

    @classmethod
    def ramp(cls, lambda0, lambdaT, T, T_star, dt):
        """Linear ramp ``lambda0 -> lambdaT`` on ``[0, T]``, then held."""
        n_horizon = steps_for(T, dt)
        n_steps = steps_for(T_star, dt)
        if n_steps < n_horizon:
            raise ValueError("T* must not be shorter than T")
        values = np.full(n_steps + 1, float(lambdaT))
        values[: n_horizon + 1] = np.linspace(lambda0, lambdaT, n_horizon + 1)
        return cls(dt, values, n_horizon)


def steps_for(duration, dt) -> int:
    """Number of steps of size ``dt`` spanning ``duration``.

    The product must reproduce the duration to one part in 1e9.
    """
    n = int(round(duration / dt))
    if abs(n * dt - duration) > 1e-9 * max(abs(duration), dt):
        raise ValueError(f"duration {duration} is not a multiple of dt={dt}")
    return n


@dataclass(frozen=True, eq=False)
class FilterKernel:
    """Causal impulse response ``h(tau_j)``, ``tau_j = j dt``, ``j = 0..K-1``.

    ``tau_star`` is the response time; it defaults to ``K dt``.
    """

    dt: float
    samples: np.ndarray
    tau_star: float | None = None
    kind: str = "tabulated"

    def __post_init__(self):
        samples = np.array(self.samples, dtype=float)
        if samples.ndim != 1 or len(samples) == 0:
            raise FilterError("kernel needs at least one sample")
        if not np.all(np.isfinite(samples)):
            raise FilterError("kernel samples must be finite")
        samples.setflags(write=False)
        object.__setattr__(self, "samples", samples)
        if self.tau_star is None:
            # the samples cover [0, tau*) in the rectangle rule
            object.__setattr__(self, "tau_star", len(samples) * self.dt)

    @property
    def support(self) -> int:
        """Number of samples ``K``."""
        return len(self.samples)

    @property
    def dc_gain(self) -> float:
        return float(np.sum(self.samples) * self.dt)

    def is_normalized(self, tol=1e-12) -> bool:
        return abs(self.dc_gain - 1.0) <= tol

    def normalized(self) -> "FilterKernel":
        if self.is_normalized():
            return self
        gain = self.dc_gain
        if gain == 0.0:
            raise FilterError("kernel has zero DC gain")
        return replace(self, samples=self.samples / gain)

    @property
    def weights(self) -> np.ndarray:
        """Quadrature weights ``h_j dt``."""
        return self.samples * self.dt


def _check_dt(control, kernel):
    if abs(control.dt - kernel.dt) > 1e-12 * control.dt:
        raise FilterError(f"kernel dt {kernel.dt} does not match control dt {control.dt}")


def apply_filter(control: ControlTrajectory, kernel: FilterKernel, auto_normalize=True):
    """Causal convolution ``lam*(t_n) = sum_j h_j lam(t_n - tau_j) dt``.

    Samples before ``t = 0`` are taken equal to ``lam(0)`` (the control is
    at rest before the protocol starts).
    """
    _check_dt(control, kernel)
    if not kernel.is_normalized(1e-8):
        msg = f"filter kernel DC gain is {kernel.dc_gain:.12g}, not 1"
        if not auto_normalize:
            raise FilterError(msg)
        warnings.warn(msg + "; normalizing", RuntimeWarning, stacklevel=2)
        kernel = kernel.normalized()
    lam = control.values
    w = kernel.weights
    n = len(lam)
    out = np.convolve(lam, w)[:n]
    # weight of the taps reaching before t=0
    before = np.zeros(n)
    m = min(n, len(w))
    before[:m] = np.sum(w) - np.cumsum(w)[:m]
    out += lam[0] * before
    return control.with_values(out)


def filter_adjoint(sensitivity, kernel: FilterKernel) -> np.ndarray:
    """Transpose of :func:`apply_filter` with respect to the control samples.

    Returns ``r_i = sum_j h_j dt s_{i+j}``, i.e. the discrete correlation of
    ``sensitivity`` with the kernel. The hold value before ``t = 0`` enters
    through ``lam(0)`` only and is excluded, matching the fixed endpoint.
    """
    s = np.asarray(sensitivity, dtype=float)
    n = len(s)
    return np.convolve(s[::-1], kernel.weights)[:n][::-1]


def clamp_tail(control: ControlTrajectory) -> ControlTrajectory:
    """Hold the control at ``lam(T)`` on ``[T, T*]``. Idempotent."""
    if control.is_clamped():
        return control
    values = control.values.copy()
    values[control.n_horizon:] = values[control.n_horizon]
    return control.with_values(values)


def _critically_damped_cutoff_argument():
    # solve x exp(1 - x) = RESPONSE_CUTOFF on the decaying side (x > 1)
    return brentq(lambda x: np.log(x) + 1.0 - x - np.log(RESPONSE_CUTOFF), 1.0 + 1e-12, 100.0)


def response_time(kind, cutoff) -> float:
    """Time after which the kernel envelope stays below 1e-3 of its peak."""
    if kind == "exponential":
        return float(np.log(1.0 / RESPONSE_CUTOFF) / cutoff)
    if kind == "critically_damped":
        return float(_critically_damped_cutoff_argument() / cutoff)
    raise ValueError(f"no analytic response time for kernel kind {kind!r}")


def cutoff_for_response_time(kind, tau_star) -> float:
    """Inverse of :func:`response_time`."""
    return response_time(kind, 1.0) / tau_star


def make_kernel(kind, dt, cutoff=None, path=None, max_support=None) -> FilterKernel:
    """Build a normalized causal kernel.

    ``exponential``: ``h = w exp(-w tau)``; ``critically_damped``:
    ``h = w^2 tau exp(-w tau)`` (rises from zero, peaks at ``1/w``, decays);
    ``tabulated``: ``tau,h`` CSV with spacing ``dt``; ``impulse``: the
    identity filter ``h_0 = 1/dt``.
    """
    if kind not in KERNEL_KINDS:
        raise FilterError(f"unknown kernel kind {kind!r}; expected one of {KERNEL_KINDS}")
    if kind == "impulse":
        kernel = FilterKernel(dt, [1.0 / dt], tau_star=0.0, kind="impulse")
    elif kind == "tabulated":
        if path is None:
            raise FilterError("tabulated kernel needs a file")
        kernel = load_kernel(path, dt)
    else:
        if cutoff is None or not cutoff > 0:
            raise FilterError("kernel cutoff frequency must be positive")
        tau_star = response_time(kind, cutoff)
        n_tau = max(1, int(np.ceil(tau_star / dt - 1e-9)))
        tau_star = n_tau * dt
        # samples on [0, tau*): a control clamped on [T, T*] then leaves the
        # last two output samples fully settled
        tau = dt * np.arange(n_tau)
        if kind == "exponential":
            h = cutoff * np.exp(-cutoff * tau)
        else:
            h = cutoff**2 * tau * np.exp(-cutoff * tau)
        kernel = FilterKernel(dt, h, tau_star=tau_star, kind=kind).normalized()
    if max_support is not None and kernel.support > max_support:
        raise FilterError(f"kernel support {kernel.support} exceeds maximum {max_support}")
    return kernel


def save_kernel(path, kernel: FilterKernel, t_scale=1.0):
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(["tau", "h"])
        for j, h in enumerate(kernel.samples):
            writer.writerow([f"{j * kernel.dt * t_scale:.17g}", f"{h / t_scale:.17g}"])


def load_kernel(path, dt, t_scale=1.0) -> FilterKernel:
    """Read a ``tau,h`` CSV. Spacing must be uniform and equal to ``dt``.

    ``t_scale`` converts file time units to internal ones (``h`` scales
    inversely so that the DC gain is unit-independent).
    """
    try:
        data = np.loadtxt(path, delimiter=",", skiprows=1, ndmin=2)
    except (OSError, ValueError) as exc:
        raise FilterError(f"cannot read kernel file {path}: {exc}") from exc
    if data.shape[1] != 2 or len(data) == 0:
        raise FilterError(f"{path}: expected two columns tau,h")
    tau = data[:, 0] / t_scale
    h = data[:, 1] * t_scale
    if abs(tau[0]) > 1e-12 * dt:
        raise FilterError(f"{path}: kernel must start at tau=0")
    if len(tau) > 1:
        spacing = np.diff(tau)
        if not np.allclose(spacing, dt, rtol=1e-9, atol=0):
            raise FilterError(f"{path}: tau spacing must be uniform and equal to dt={dt}")
    kernel = FilterKernel(dt, h, kind="tabulated")
    if not kernel.is_normalized(1e-8):
        log.warning("kernel %s has DC gain %.6g; normalizing", path, kernel.dc_gain)
        kernel = kernel.normalized()
    return kernel


def deconvolve_naive(target: ControlTrajectory, kernel: FilterKernel, eps=0.0) -> ControlTrajectory:
    """Regularized frequency-domain inversion of :func:`apply_filter`.

    This is the baseline that filter-aware optimization replaces: it divides
    by the kernel transfer function, ``X = Y conj(H) / (|H|^2 + eps)``, and so
    amplifies whatever the kernel suppresses.

    The division acts on the sample increments, which vanish before ``t = 0``
    and, for a settled target, after ``T*``; zero padding then makes the
    circular and linear convolutions agree. The last sample is free when
    ``h(0) = 0`` (it never reaches the output) and comes out as whatever the
    inversion produces.
    """
    _check_dt(target, kernel)
    if eps < 0:
        raise ValueError("regularization must be non-negative")
    kernel = kernel.normalized()
    y = target.values
    dy = np.diff(y, prepend=y[0])
    size = 1 << int(np.ceil(np.log2(len(y) + kernel.support)))
    Y = np.fft.rfft(dy, size)
    H = np.fft.rfft(kernel.weights, size)
    power = np.abs(H) ** 2
    if eps == 0.0:
        if np.min(np.abs(H)) < 1e-12:
            raise FilterError("singular deconvolution: kernel transfer function vanishes")
        X = Y / H
    else:
        X = Y * np.conj(H) / (power + eps)
    dx = np.fft.irfft(X, size)[: len(y)]
    return target.with_values(y[0] + np.cumsum(dx))


def save_control(path, control: ControlTrajectory, filtered: ControlTrajectory | None = None,
                 t_scale=1.0, x_scale=1.0):
    """Write ``t,lambda,lambda_star`` rows."""
    star = control.values if filtered is None else filtered.values
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(["t", "lambda", "lambda_star"])
        for t, lam, ls in zip(control.times, control.values, star):
            writer.writerow([f"{t * t_scale:.17g}", f"{lam * x_scale:.17g}", f"{ls * x_scale:.17g}"])


def load_control(path, n_horizon=-1, t_scale=1.0, x_scale=1.0):
    """Read a control CSV; returns ``(lambda, lambda_star)`` trajectories."""
    data = np.loadtxt(path, delimiter=",", skiprows=1, ndmin=2)
    if data.shape[1] != 3:
        raise ValueError(f"{path}: expected columns t,lambda,lambda_star")
    t = data[:, 0] / t_scale
    dt = (t[-1] - t[0]) / (len(t) - 1)
    if not np.allclose(np.diff(t), dt, rtol=1e-9, atol=0):
        raise ValueError(f"{path}: time grid is not uniform")
    lam = ControlTrajectory(dt, data[:, 1] / x_scale, n_horizon)
    star = ControlTrajectory(dt, data[:, 2] / x_scale, n_horizon)
    return lam, star
