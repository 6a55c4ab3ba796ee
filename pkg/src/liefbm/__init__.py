"""Simulation and verification toolkit for rough paths on matrix Lie groups."""

from liefbm.liegroup import (
    TOL,
    AlgebraBasis,
    LieGroupError,
    Tolerances,
    abelian_basis,
    adjoint,
    adjoint_coordinates,
    basis_from_json,
    bracket,
    dilate_algebra,
    dilate_group,
    exp_matrix,
    free_step2_basis,
    heisenberg_basis,
    log_unipotent,
    make_basis,
    membership_defect,
    so3_basis,
)
from liefbm.fbm import (
    FbmError,
    FbmSample,
    FbmSampler,
    KernelEval,
    TimeGrid,
    check_hurst,
    fbm_covariance,
    increment_covariance,
    sample_fbm,
    sample_volterra,
    synthesize_from_wiener,
)
from liefbm.integrator import (
    GroupPath,
    IntegratorError,
    integrate,
    inverse_path,
    refinement_gap,
    shifted_flow,
)
from liefbm.signature import (
    SignatureError,
    SignatureTable,
    levy_area,
    nilpotent_flow,
    nilpotent_flow_path,
    signature_table,
    words_of_length,
)
from liefbm.stats import (
    ComparisonRow,
    GlobalScalingResult,
    GroupMorphism,
    LawComparison,
    MatrixFunctional,
    MomentReport,
    MonteCarloConfig,
    ScalingFit,
    StatsError,
    compare_laws,
    derivative_at_identity,
    entry_functional,
    global_scaling_test,
    isometry_invariance_test,
    local_selfsimilarity_test,
    log_coordinate_functional,
    moment_report,
    stationary_increments_test,
    trace_functional,
)
from liefbm.malliavin import (
    IbpReport,
    MalliavinError,
    MalliavinMatrix,
    VariationField,
    constant_field,
    ibp_check,
    ibp_terms,
    ibp_trace,
    malliavin_matrix,
    pathwise_variation,
)

__version__ = "0.1.0"

__all__ = [
    "TOL",
    "AlgebraBasis",
    "ComparisonRow",
    "FbmError",
    "FbmSample",
    "FbmSampler",
    "GlobalScalingResult",
    "GroupMorphism",
    "GroupPath",
    "IbpReport",
    "IntegratorError",
    "KernelEval",
    "LawComparison",
    "LieGroupError",
    "MalliavinError",
    "MalliavinMatrix",
    "MatrixFunctional",
    "MomentReport",
    "MonteCarloConfig",
    "ScalingFit",
    "SignatureError",
    "SignatureTable",
    "StatsError",
    "TimeGrid",
    "Tolerances",
    "VariationField",
    "abelian_basis",
    "adjoint",
    "adjoint_coordinates",
    "basis_from_json",
    "bracket",
    "check_hurst",
    "compare_laws",
    "constant_field",
    "derivative_at_identity",
    "dilate_algebra",
    "dilate_group",
    "entry_functional",
    "exp_matrix",
    "fbm_covariance",
    "free_step2_basis",
    "global_scaling_test",
    "heisenberg_basis",
    "ibp_check",
    "ibp_terms",
    "ibp_trace",
    "increment_covariance",
    "integrate",
    "inverse_path",
    "isometry_invariance_test",
    "levy_area",
    "local_selfsimilarity_test",
    "log_coordinate_functional",
    "log_unipotent",
    "make_basis",
    "malliavin_matrix",
    "membership_defect",
    "moment_report",
    "nilpotent_flow",
    "nilpotent_flow_path",
    "pathwise_variation",
    "refinement_gap",
    "sample_fbm",
    "sample_volterra",
    "shifted_flow",
    "signature_table",
    "so3_basis",
    "stationary_increments_test",
    "synthesize_from_wiener",
    "trace_functional",
    "words_of_length",
    "__version__",
]
