"""Maximum-entropy approximation of conditionally invariant densities for
open piecewise-affine maps."""

from .errors import (
    AccimError,
    CacheFormatError,
    ConfigError,
    DualDivergenceError,
    EmptyReducedDomainError,
    NonConvergenceError,
    UndefinedPointError,
)
from .partition import (
    GridPartition,
    OverlapData,
    build_partition,
    compute_overlap,
    geometric_hole_vector,
    load_overlap,
    save_overlap,
)
from .reduction import ReducedProblem, reachability_oracle, reduce_domain
from .solver import (
    DualState,
    MaxentSolution,
    PiecewiseDensity,
    SolverConfig,
    dual_value_and_gradient,
    entropy,
    moment_residuals,
    psi_step,
    reconstruct_density,
    solve,
    survivor_mass_sequence,
)
from .system import (
    AffineBranch,
    DomainBox,
    OpenSystem,
    branch_preimage_box,
    builtin_system,
    evaluate,
    saddle,
    tent3,
)

__version__ = "0.1.0"
