"""Two-level grouped panel generalized Pareto regression for peaks over thresholds."""

from .covariance import (
    SandwichResult,
    WindowConfig,
    sandwich_all_nets,
    sandwich_blockwise,
    sandwich_net,
    wald_intervals,
)
from .estimate import (
    EstimationError,
    FitResult,
    RegressionParams,
    bca_fit,
    bic_value,
    comp_loglik,
    fit_block_scale,
    fit_block_shape,
    random_init,
)
from .gpd import (
    GpParams,
    ReturnLevelSpec,
    gp_cdf,
    gp_loglik,
    gp_quantile,
    gp_score_hessian,
    return_level,
    return_level_variance,
)
from .groupsearch import (
    SearchConfig,
    SearchResult,
    multistep_fit,
    rand_index,
    select_by_bic,
    two_stage_hier,
)
from .kernels import BACKEND
from .panel import (
    ExcessPanel,
    GroupAssignment,
    PanelFormatError,
    SubjectNet,
    apply_thresholds,
    derive_nets,
    read_panel_csv,
    subsample,
    subsample_columns,
)
from .simgen import (
    ReplicationRecord,
    SimConfig,
    default_truth,
    gen_covariates,
    gen_excess_panel,
    run_study,
)

__version__ = "0.1.0"
