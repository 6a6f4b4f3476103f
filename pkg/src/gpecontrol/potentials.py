"""Displaceable trap potentials ``V(x, lam) = V0(x - lam)``."""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

TRAP_KINDS = ("harmonic", "quartic_anharmonic", "polynomial")
_N_COEFFS = {"harmonic": 1, "quartic_anharmonic": 2}


@dataclass(frozen=True)
class TrapPotential:
    """Even polynomial trap ``V0(y) = a2 y^2 + a4 y^4 + ...``.

    ``coefficients`` lists the even-order coefficients starting at ``a2``.
    The control rigidly displaces the trap center.
    """

    kind: str
    coefficients: tuple

    def __post_init__(self):
        if self.kind not in TRAP_KINDS:
            raise ValueError(f"unknown trap kind {self.kind!r}; expected one of {TRAP_KINDS}")
        coeffs = tuple(float(c) for c in np.atleast_1d(self.coefficients))
        expected = _N_COEFFS.get(self.kind)
        if expected is not None and len(coeffs) != expected:
            raise ValueError(f"{self.kind} trap takes {expected} coefficient(s), got {len(coeffs)}")
        if not coeffs or not all(np.isfinite(coeffs)):
            raise ValueError("trap coefficients must be finite and non-empty")
        if coeffs[-1] <= 0:
            raise ValueError("leading trap coefficient must be positive (confining)")
        object.__setattr__(self, "coefficients", coeffs)

    @classmethod
    def harmonic(cls, a2=0.5):
        return cls("harmonic", (a2,))

    @classmethod
    def quartic(cls, a2=0.5, a4=0.15):
        return cls("quartic_anharmonic", (a2, a4))

    @property
    def is_symmetric(self) -> bool:
        return True

    def harmonic_frequency(self, mass=1.0) -> float:
        """Small-oscillation angular frequency ``sqrt(2 a2 / M)``."""
        return float(np.sqrt(2.0 * self.coefficients[0] / mass))

    def shape(self, y):
        y2 = np.asarray(y, dtype=float) ** 2
        out = np.zeros_like(y2)
        # Horner in y^2, highest order first
        for c in reversed(self.coefficients):
            out = (out + c) * y2
        return out

    def shape_derivative(self, y):
        y = np.asarray(y, dtype=float)
        y2 = y * y
        out = np.zeros_like(y)
        for m, c in reversed(list(enumerate(self.coefficients, start=1))):
            out = out * y2 + 2 * m * c
        return out * y


def _check_lambda(lam):
    if not np.isfinite(lam):
        raise ValueError(f"control value must be finite, got {lam}")


def evaluate(trap: TrapPotential, grid, lam: float) -> np.ndarray:
    """Sample ``V0(x - lam)`` on the grid."""
    _check_lambda(lam)
    return trap.shape(grid.x - lam)


def d_evaluate_d_lambda(trap: TrapPotential, grid, lam: float) -> np.ndarray:
    """``dV/dlam = -V0'(x - lam)``, analytic."""
    _check_lambda(lam)
    return -trap.shape_derivative(grid.x - lam)
