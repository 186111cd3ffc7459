"""rcmhomlab: desk-scale homogenization lab for random conductance Laplacians.

Builds deterministic random-conductance environments on boxes and tori,
assembles and solves the rescaled lattice Poisson and eigenvalue problems,
estimates the homogenized matrix through the periodic corrector cell
problem, audits the weighted functional inequalities that govern the
theory, and evaluates the spectral large-deviation cumulant of the
variable-speed walk's local times.
"""

__version__ = "0.1.0"

from .env import (
    Constant,
    Environment,
    Geometry,
    IidParetoLower,
    IidTwoPoint,
    LongRangePolynomial,
    Periodic1D,
    TrapLaw,
    empirical_moment,
    moment_condition_report,
    sample_environment,
    trap_environment,
)
from .errors import (
    DomainError,
    ParameterError,
    PartialResultError,
    RcmHomLabError,
    SolverError,
)
from .lattice import (
    GridFunction,
    GridOperator,
    apply_operator,
    assemble_operator,
    dirichlet_energy,
    dump_operator,
    embed,
    grid_norm,
    restrict,
)
from .paths import (
    AuditReport,
    EdgeId,
    NuMeasure,
    PathFamily,
    default_path_family,
    inequality_audit,
    nu,
    nu_field,
    nu_l,
    nu_l_field,
    omega_l_inverse,
    rho,
)
from .solve import (
    EigenPairs,
    HomogenizedProblem,
    RefGridFunction,
    eigs_smallest,
    homogenized_eigs,
    homogenized_solve,
    poisson_solve,
)
from .corrector import (
    CorrectorField,
    HomogenizedMatrix,
    assemble_A_hom,
    estimate_A_hom,
    exact_a_hom,
    solve_cell_problem,
)
from .walker import (
    CumulantEstimate,
    LocalTimes,
    RescaledProfile,
    Trajectory,
    cumulant_spectral,
    local_times,
    rate_function,
    rescaled_profile,
    simulate_vsrw,
)
from .harness import ExperimentConfig, RunManifest, emit_plot, load_config, parse_config, run
