"""Max-plus value-function propagation on the unitary group with
bundle-method importance pruning."""

from .basis import AffineBasis, BasisSet, read_basis_set, write_basis_set
from .bundle import (
    BundleParams,
    CutModel,
    InnerParams,
    bundle_solve,
    lens_support,
    smoothed_model_solve,
    solve_model_exact,
)
from .linalg import (
    dykstra_intersect,
    nuclear_norm,
    project_frobenius_ball,
    project_spectral_ball,
    real_inner,
    svd,
    unitary_propagator,
)
from .metric import (
    MetricInstance,
    MetricResult,
    PruningConfig,
    dual_value,
    importance_metric,
    make_instance,
    prune,
    schur_feasibility,
    solve_dual,
)
from .oracle import (
    brute_force_unitary,
    exactness_check,
    haar_unitary,
    integrate_schrodinger,
    random_instance,
    unitarize,
)
from .semigroup import (
    GateSynthesisProblem,
    Propagator,
    build_propagators,
    default_su2_problem,
    default_su4_problem,
    propagate_step,
    propagate_with_pruning,
    terminal_basis,
)

__version__ = "0.1.0"
