"""Two-scale homogenization toolkit for quasilinear elliptic problems.

Periodic cell problems feed an effective tensor and corrector tables; a
damped Picard macro solve plus a resolved fine-scale reference solve produce
remainders whose norms are fitted against eps to verify the expected decay
rates.
"""

from .analysis import (
    ErrorReport,
    LemmaResult,
    RateFit,
    antiderivative_lemma_1d,
    energy_difference,
    fit_rate,
    holder_seminorm,
    interior_gradient_sup,
    norm_h1,
    norm_l2,
    norm_linf,
    seminorm_h1,
)
from .cell_problems import (
    BuildDiagnostics,
    CorrectorSample,
    CorrectorTable,
    EffectiveTensorTable,
    ParameterGrid,
    TranslationReport,
    build_corrector_tables,
    check_translation_invariance,
    default_cell_quadrature,
    default_parameter_grid,
    effective_tensor,
    solve_first_correctors,
    solve_hessian_correctors,
    solve_slow_correctors,
    solve_source_corrector,
)
from .coefficients import (
    CoefficientModel,
    ConstantCoefficient,
    LayeredCoefficient,
    RosselandCoefficient,
    SeparatedCoefficient,
    SmoothPeriodicCoefficient,
    SourceModel,
    coefficient_from_config,
    eval_A1,
    source_from_config,
)
from .config import DEFAULT_CONFIG, ExperimentConfig, load_config
from .errors import (
    AssemblyError,
    CompatibilityError,
    ConfigurationError,
    NonConvergenceError,
    OutOfDomainError,
    PropertyViolationError,
)
from .expansion import (
    ExpansionField,
    RemainderField,
    fast_coordinates,
    fine_grid_for,
    reconstruct,
    remainder,
    solve_fine,
)
from .fem import (
    QuadratureRule,
    SolverOptions,
    SparseSystem,
    assemble_load,
    assemble_stiffness,
    gauss_rule,
    periodic_kernel_defect,
    solve_dirichlet,
    solve_periodic_zero_mean,
)
from .grids import (
    CellGrid,
    MacroGrid,
    ScalarField,
    fd_gradient,
    fd_hessian,
    interpolate,
    interpolate_values,
)
from .macro import (
    PicardOptions,
    PicardResult,
    homogenized_source,
    manufactured_residual,
    solve_homogenized,
)

__version__ = "0.1.0"
