"""Filter-aware optimal control of a 1D Gross-Pitaevskii condensate."""
from .control import (
    ControlTrajectory,
    FilterError,
    FilterKernel,
    apply_filter,
    clamp_tail,
    deconvolve_naive,
    filter_adjoint,
    make_kernel,
)
from .dynamics import (
    ConvergenceError,
    NumericalError,
    PropagationSettings,
    TrajectoryRecord,
    excited_state,
    ground_state,
    propagate_adjoint,
    propagate_forward,
    terminal_costate,
)
from .grid import Grid1D, GridMismatchError, UnitSystem, Wavefunction, fidelity, inner_product, normalize
from .optimizer import (
    OctProblem,
    OctResult,
    OptimizerSettings,
    cost,
    gradient_filtered,
    gradient_unfiltered,
    optimize,
    smooth_direction,
)
from .potentials import TrapPotential, d_evaluate_d_lambda, evaluate

__version__ = "0.1.0"
