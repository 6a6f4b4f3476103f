"""Uniform periodic 1D grid and complex-field algebra.

All quadratures are rectangle sums over the periodic grid, which coincide
with the trapezoidal rule there.
"""
from __future__ import annotations

import csv
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np


class GridMismatchError(ValueError):
    """Raised when two fields live on different grids."""


@dataclass(frozen=True)
class Grid1D:
    """Uniform periodic grid on ``[x_min, x_max)``.

    Parameters
    ----------
    n_points : int
        Number of grid points (at least 8, powers of two are fastest).
    x_min, x_max : float
        Box edges. The right edge is excluded, as usual for periodic grids.
    """

    n_points: int
    x_min: float
    x_max: float
    x: np.ndarray = field(init=False, repr=False, compare=False)
    k: np.ndarray = field(init=False, repr=False, compare=False)

    def __post_init__(self):
        if int(self.n_points) != self.n_points or self.n_points < 8:
            raise ValueError(f"n_points must be an integer >= 8, got {self.n_points}")
        if not self.x_max > self.x_min:
            raise ValueError("x_max must exceed x_min")
        x = self.x_min + self.dx * np.arange(self.n_points)
        k = 2.0 * np.pi * np.fft.fftfreq(self.n_points, d=self.dx)
        x.setflags(write=False)
        k.setflags(write=False)
        object.__setattr__(self, "x", x)
        object.__setattr__(self, "k", k)

    @property
    def length(self) -> float:
        return self.x_max - self.x_min

    @property
    def dx(self) -> float:
        return (self.x_max - self.x_min) / self.n_points

    @property
    def dk(self) -> float:
        return 2.0 * np.pi / self.length

    def to_momentum(self, values):
        """Continuous-normalized Fourier transform, ``dx * fft(values)``.

        With this convention ``sum(|f|^2) dx == sum(|F|^2) dk / (2 pi)``.
        """
        return self.dx * np.fft.fft(values)

    def from_momentum(self, values):
        return np.fft.ifft(values) / self.dx

    def is_symmetric(self, atol=1e-12) -> bool:
        """True when the point set is mirror-symmetric about x=0."""
        return abs(self.x_min + self.x_max) < atol * max(1.0, self.length) and self.n_points % 2 == 0

    def reflect(self, values):
        """Sample ``f(-x)`` for a field ``f`` on a symmetric grid."""
        if not self.is_symmetric():
            raise ValueError("reflection needs a grid symmetric about x=0")
        # x_j = -L/2 + j dx, so -x_j = x_{n-j} (index 0 maps to itself).
        return np.roll(values[::-1], 1)


@dataclass(frozen=True)
class UnitSystem:
    """Dimensionless units with hbar = 1.

    The ``*_per_unit`` scales only translate between dimensionless values and
    the ms / um numbers in config files and reports.
    """

    mass: float = 1.0
    time_scale_ms_per_unit: float = 1.0
    length_scale_um_per_unit: float = 1.0
    hbar: float = field(default=1.0, init=False)

    def __post_init__(self):
        for name in ("mass", "time_scale_ms_per_unit", "length_scale_um_per_unit"):
            if not getattr(self, name) > 0:
                raise ValueError(f"{name} must be positive")

    def time_to_units(self, t_ms):
        return t_ms / self.time_scale_ms_per_unit

    def time_to_ms(self, t):
        return t * self.time_scale_ms_per_unit

    def length_to_units(self, x_um):
        return x_um / self.length_scale_um_per_unit

    def length_to_um(self, x):
        return x * self.length_scale_um_per_unit


@dataclass(frozen=True, eq=False)
class Wavefunction:
    """Complex samples of a field on a :class:`Grid1D`.

    Used both for condensate states (unit norm) and costates (not normalized).
    """

    grid: Grid1D
    values: np.ndarray

    def __post_init__(self):
        values = np.asarray(self.values, dtype=complex)
        if values.shape != (self.grid.n_points,):
            raise ValueError(
                f"expected {self.grid.n_points} samples, got shape {values.shape}"
            )
        object.__setattr__(self, "values", values)

    def __mul__(self, scalar):
        return Wavefunction(self.grid, self.values * scalar)

    __rmul__ = __mul__

    def __add__(self, other):
        _check_same_grid(self, other)
        return Wavefunction(self.grid, self.values + other.values)

    def __sub__(self, other):
        _check_same_grid(self, other)
        return Wavefunction(self.grid, self.values - other.values)

    def edge_amplitude(self) -> float:
        """Largest ``|psi|`` over the two boundary samples."""
        return float(max(abs(self.values[0]), abs(self.values[-1])))


def _check_same_grid(a, b):
    if a.grid is b.grid:
        return
    ga, gb = a.grid, b.grid
    tol = 1e-12 * ga.length
    if (
        ga.n_points != gb.n_points
        or abs(ga.x_min - gb.x_min) > tol
        or abs(ga.x_max - gb.x_max) > tol
    ):
        raise GridMismatchError(f"grids differ: {ga} vs {gb}")


def inner_product(a: Wavefunction, b: Wavefunction) -> complex:
    """``<a|b> = sum(conj(a) b) dx``; antilinear in ``a``."""
    _check_same_grid(a, b)
    return complex(np.vdot(a.values, b.values) * a.grid.dx)


def norm(a: Wavefunction) -> float:
    return float(np.sqrt(inner_product(a, a).real))


def normalize(a: Wavefunction) -> Wavefunction:
    n = norm(a)
    if n == 0.0 or not np.isfinite(n):
        raise ValueError("cannot normalize a zero or non-finite field")
    return Wavefunction(a.grid, a.values / n)


def fidelity(a: Wavefunction, b: Wavefunction) -> float:
    """Squared overlap ``|<a|b>|^2``, blind to global phases."""
    return float(abs(inner_product(a, b)) ** 2)


def density(a: Wavefunction) -> np.ndarray:
    return np.abs(a.values) ** 2


def save_wavefunction(path, psi: Wavefunction, x_scale=1.0):
    """Write ``x,re,im`` rows at full double precision."""
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(["x", "re", "im"])
        for x, v in zip(psi.grid.x, psi.values):
            writer.writerow([f"{x * x_scale:.17g}", f"{v.real:.17g}", f"{v.imag:.17g}"])


def load_wavefunction(path, x_scale=1.0) -> Wavefunction:
    """Read a file written by :func:`save_wavefunction`.

    The grid is rebuilt from the sample positions, which must be uniform.
    """
    data = np.loadtxt(Path(path), delimiter=",", skiprows=1, ndmin=2)
    x = data[:, 0] / x_scale
    if len(x) < 8:
        raise ValueError(f"{path}: need at least 8 grid points")
    dx = (x[-1] - x[0]) / (len(x) - 1)
    if not np.allclose(np.diff(x), dx, rtol=1e-9, atol=0):
        raise ValueError(f"{path}: grid spacing is not uniform")
    grid = Grid1D(len(x), float(x[0]), float(x[0] + dx * len(x)))
    return Wavefunction(grid, data[:, 1] + 1j * data[:, 2])
