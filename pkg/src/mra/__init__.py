"""Adaptive multiwavelet representation of functions and integral operators."""

from .basis import (
    MultiwaveletBasis,
    TwoScaleFilters,
    build_two_scale_filters,
    gauss_legendre_rule,
    get_basis,
    legendre_eval,
    scaling_eval,
)
from .convolution import KernelRangeError, apply, build_conv1d_block
from .funcops import (
    DomainError,
    ProjectionParams,
    RefinementError,
    constant,
    eval_point,
    eval_points,
    gaxpy,
    inner,
    multiply,
    norm2,
    project,
    scale,
    trace,
)
from .kernels import SeparatedKernel, fit_bsh, fit_coulomb, load_kernel
from .solvers import (
    Harmonic,
    PotentialSpec,
    ScfState,
    SmoothedCoulomb,
    SolverBreakdown,
    UserCallable,
    energy_update,
    scf_step,
    solve_ground_state,
)
from .tree import (
    IncompatibleFunctionsError,
    MRAFunction,
    NodeKey,
    compress,
    load_function,
    norm_coeffs,
    reconstruct,
    save_function,
    truncate,
)

__version__ = "0.1.0"
