"""Particle methods for forward-backward systems whose coefficients read the
joint path law of the state, the backward component and the control, plus the
first-order machinery built on top: pathwise variational solves, adjoint
processes, a control-gradient representation, and a projected-gradient
optimizer with stationarity and sufficiency reporting.
"""

from .errors import (
    ConvergenceFailureError,
    InvalidArgumentError,
    NumericalFailureError,
    SeriesNotFoundError,
    ValidationFailureError,
)
from .grids import (
    NOISE_LAYOUT,
    EmpiricalPathLaw,
    NoiseEnsemble,
    ParticleEnsemble,
    TimeGrid,
    compactness_diagnostics,
    constant_ensemble,
    coupled_path_distance,
    make_time_grid,
    simulate_noise,
)
from .coefficients import (
    BoxBounds,
    CoefficientSet,
    ControlPath,
    KernelSpec,
    PathSample,
    builtin_problem,
    eval_law_functional,
    materialize_paths,
    path_samples,
    validate_partials,
)
from .solver import (
    BackwardCache,
    BasisSpec,
    CostValue,
    PicardParams,
    PicardResult,
    cost_functional,
    picard_solve,
    solve_backward_lsmc,
    solve_forward,
)
from .adjoint import (
    AdjointState,
    DualityReport,
    QuotientTable,
    SensitivityParams,
    StarredPaths,
    VariationalResult,
    compute_starred,
    difference_quotient_check,
    duality_check,
    solve_adjoint,
    solve_adjoint_p,
    solve_adjoint_qk,
    solve_variational,
)

from .optimizer import (
    GradientPath,
    HamiltonianSample,
    OptimizeParams,
    OptimizerReport,
    StationarityReport,
    SufficiencyReport,
    gradient_DvH,
    hamiltonian_vector,
    optimize,
    project_control,
    smp_stationarity_check,
    sufficiency_probe,
    variational_inequality_eval,
)

__version__ = "0.1.0"

from .harness import (  # noqa: E402  (harness reads __version__)
    COMMANDS,
    ExperimentConfig,
    ResultManifest,
    available_series,
    emit_plot_data,
    load_config,
    run,
    write_manifest,
)
