import numpy as np
import pytest

from gpecontrol.grid import Grid1D
from gpecontrol.potentials import TrapPotential, d_evaluate_d_lambda, evaluate

TRAPS = [
    TrapPotential.harmonic(0.5),
    TrapPotential.quartic(0.5, 0.15),
    TrapPotential("polynomial", (0.5, 0.25, 0.01)),
]


class PointGrid:
    """Stand-in grid holding explicit sample points."""

    def __init__(self, *x):
        self.x = np.array(x, dtype=float)


@pytest.mark.parametrize(
    "trap, lam, x, expected",
    [
        (TrapPotential.harmonic(0.5), 0.0, 2.0, 2.0),
        (TrapPotential.quartic(0.5, 0.1), 1.0, 1.0, 0.0),
        (TrapPotential("polynomial", (0.5, 0.25)), 0.5, 1.5, 0.75),
    ],
)
def test_evaluate_examples(trap, lam, x, expected):
    assert evaluate(trap, PointGrid(x), lam)[0] == pytest.approx(expected, abs=1e-15)


@pytest.mark.parametrize(
    "trap, x, expected",
    [
        (TrapPotential.harmonic(0.5), 2.0, -2.0),
        (TrapPotential.quartic(0.5, 0.1), 1.0, -1.4),
    ],
)
def test_derivative_examples(trap, x, expected):
    assert d_evaluate_d_lambda(trap, PointGrid(x), 0.0)[0] == pytest.approx(expected, abs=1e-14)


@pytest.mark.parametrize("trap", TRAPS, ids=lambda t: t.kind)
@pytest.mark.parametrize("lam", [-1.3, 0.0, 0.7])
def test_derivative_matches_finite_difference(trap, lam):
    grid = Grid1D(128, -6.0, 6.0)
    h = 1e-6
    fd = (evaluate(trap, grid, lam + h) - evaluate(trap, grid, lam - h)) / (2 * h)
    assert np.max(np.abs(fd - d_evaluate_d_lambda(trap, grid, lam))) < 1e-6


@pytest.mark.parametrize("trap", TRAPS, ids=lambda t: t.kind)
@pytest.mark.parametrize("shift", [-5, 1, 3])
def test_translation_identity(trap, shift):
    grid = Grid1D(128, -6.0, 6.0)
    lam = shift * grid.dx
    moved = evaluate(trap, grid, lam)
    base = evaluate(trap, grid, 0.0)
    i = np.arange(128)
    inside = (i - shift >= 0) & (i - shift < 128)
    assert np.max(np.abs(moved[inside] - base[i[inside] - shift])) < 1e-12 * np.max(np.abs(base))


def test_invalid_traps():
    with pytest.raises(ValueError):
        TrapPotential("harmonic", (-0.5,))
    with pytest.raises(ValueError):
        TrapPotential("quartic_anharmonic", (0.5,))
    with pytest.raises(ValueError):
        TrapPotential("polynomial", (0.5, -0.1))
    with pytest.raises(ValueError):
        TrapPotential("cubic", (1.0,))


def test_non_finite_control():
    with pytest.raises(ValueError):
        evaluate(TRAPS[0], Grid1D(16, -1, 1), np.nan)


def test_harmonic_frequency():
    assert TrapPotential.harmonic(0.5).harmonic_frequency(1.0) == pytest.approx(1.0)
