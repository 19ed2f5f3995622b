"""Maximum Diaconis-Ylvisaker prior penalized likelihood (MDYPL) for
high-dimensional logistic regression: state evolution, fitting, inference
and simulation."""

__version__ = "0.1.0"

from .core import (
    QuadratureRule,
    expect_bivariate_normal,
    expect_normal,
    gauss_hermite,
    prox_logistic,
    prox_logistic_array,
    zeta,
    zeta_double_prime,
    zeta_prime,
)
from .estimator import (
    Dataset,
    FitDivergence,
    FitError,
    FitOptions,
    MdyplFit,
    fit_mdypl,
    pseudo_responses,
    rescale,
    sloe,
    tau_hat,
)
from .inference import (
    Constants,
    InferenceReport,
    aggregate_metrics,
    estimate_constants,
    infer,
    oracle_constants,
    plr_test,
    z_linear_combination,
    z_statistics,
)
from .state_evolution import (
    SEInput,
    SESolution,
    SolverError,
    SolverOptions,
    InfeasibleUpsilon,
    find_alpha_min_amse,
    find_alpha_unbiased,
    residuals_intercept,
    residuals_plain,
    residuals_ridge,
    solve_from_upsilon,
    solve_intercept,
    solve_plain,
    solve_ridge,
    upsilon_of_gamma,
)
