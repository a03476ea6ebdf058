"""Structure-preserving solver for a spectral two-moment radiation-transport
model with O(v/c) velocity corrections: Minerbo closure, realizability-
preserving fixed-point solvers, nodal DG phase-space discretization, SSP /
IMEX time stepping with realizability and energy limiters, and a benchmark
harness."""

__version__ = "0.1.0"

from .closure import (
    APPROXIMATE,
    EXACT,
    ClosureEval,
    ClosureKind,
    ClosureSpec,
    FluxFactor,
    closure_approx,
    closure_exact,
    closure_tensors,
    langevin,
    langevin_inverse,
)
from .moments import (
    ConservedMoments,
    OpacitySpec,
    PrimitiveMoments,
    Velocity,
    VelocityDerivatives,
    eulerian_observables,
    model_fluxes,
    model_sources,
    primitive_to_conserved,
    realizability_check,
)
from .solvers import (
    Engine,
    SolveKind,
    SolveReport,
    SolverConfig,
    collision_operator,
    conversion_operator,
    fixed_point_solve,
    random_realizable,
)
from .mesh import BCKind, BoundaryCondition, PhaseSpaceMesh, build_mesh, node_sets
from .dg import MomentField, cell_average, lf_flux_energy, lf_flux_spatial, project_velocity
from .limiters import (
    LimiterConfig,
    compute_correction,
    element_number_energy,
    energy_limiter,
    realizability_limiter,
)
from .timestep import CflSpec, ImexTableau, compute_dt, explicit_step, imex_step
from .analysis import (
    BalanceLedger,
    bound_scan,
    flux_jacobian_1d,
    lipschitz_scan,
    rms_energy,
    wavespeed_scan_1d,
    wavespeed_scan_3d,
)
