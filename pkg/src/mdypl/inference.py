"""Adjusted Z-statistics, rescaled penalized likelihood ratio tests,
aggregate metrics and estimation of the state-evolution constants."""

from __future__ import annotations

import math
from dataclasses import dataclass, field, replace

import numpy as np
from scipy import stats

from .estimator import Dataset, FitOptions, MdyplFit, fit_mdypl, rescale, sloe, tau_hat
from .state_evolution import (
    SEInput,
    SESolution,
    SolverError,
    SolverOptions,
    solve_from_upsilon,
    solve_intercept,
    solve_plain,
)

__all__ = [
    "Constants",
    "PLRResult",
    "AggregateMetrics",
    "InferenceReport",
    "NestingError",
    "z_statistics",
    "z_linear_combination",
    "sigma_inv_quadform",
    "plr_test",
    "aggregate_metrics",
    "estimate_constants",
    "oracle_constants",
    "infer",
]


class NestingError(RuntimeError):
    """The null fit has a larger log-likelihood than the full fit."""


@dataclass
class Constants:
    """State-evolution constants used for inference.

    ``source`` is ``"oracle"`` when solved at known ``(kappa, gamma)`` and
    ``"estimate"`` when obtained through SLOE.
    """

    mu: float
    b: float
    sigma: float
    kappa: float
    gamma: float | None = None
    upsilon: float | None = None
    iota: float | None = None
    theta0: float | None = None
    source: str = "oracle"
    solution: SESolution | None = field(default=None, repr=False)

    def __post_init__(self):
        for name in ("mu", "b", "sigma", "kappa"):
            if not np.isfinite(getattr(self, name)):
                raise ValueError(f"constant {name} is not finite")
        if self.b <= 0 or self.sigma <= 0:
            raise ValueError("b and sigma must be positive")

    @property
    def plr_scale(self) -> float:
        """``b / (kappa sigma^2)``, the factor turning ``2 Lambda`` into a chi-square draw."""
        return self.b / (self.kappa * self.sigma ** 2)


@dataclass
class PLRResult:
    index_set: tuple
    lambda_raw: float
    lambda_rescaled: float
    df: int
    p_value: float


@dataclass
class AggregateMetrics:
    bias: float
    variance: float
    amse: float
    amse_theory: float
    cross: float
    rescaled_bias: float
    rescaled_variance: float
    rescaled_variance_theory: float
    rescaled_cross: float
    level_bias: dict = field(default_factory=dict)
    level_bias_theory: dict = field(default_factory=dict)
    level_rescaled_bias: dict = field(default_factory=dict)


@dataclass
class InferenceReport:
    constants: Constants
    kappa_hat: float
    rescaled_beta: np.ndarray
    z: np.ndarray
    p_values: np.ndarray
    plr: list = field(default_factory=list)
    fit: MdyplFit | None = field(default=None, repr=False)


def _check_constants(*values):
    if not all(np.isfinite(v) for v in values):
        raise ValueError("constants must be finite")


def z_statistics(fit: MdyplFit, tau, mu_star: float, sigma_star: float, beta_null=None):
    """Adjusted Z-statistics ``sqrt(n) tau_j (beta_j - mu* beta_null_j) / sigma*``.

    Returns ``(z, p)`` with two-sided normal p-values.
    """
    _check_constants(mu_star, sigma_star)
    tau = np.asarray(tau, dtype=float)
    if np.any(tau <= 0):
        raise ValueError("tau must be positive")
    beta = fit.beta_hat
    null = np.zeros_like(beta) if beta_null is None else np.asarray(beta_null, dtype=float)
    n = fit.eta_hat.size
    z = math.sqrt(n) * tau * (beta - mu_star * null) / sigma_star
    return z, 2 * stats.norm.sf(np.abs(z))


def sigma_inv_quadform(X, v) -> float:
    """``v^T S^{-1} v`` for the sample covariance ``S`` of ``X`` (divisor ``n``)."""
    S = np.cov(np.asarray(X, dtype=float), rowvar=False, bias=True)
    S = np.atleast_2d(S)
    if np.linalg.cond(S) > 1e12:
        raise np.linalg.LinAlgError("sample covariance is numerically singular")
    return float(v @ np.linalg.solve(S, v))


def z_linear_combination(fit: MdyplFit, v, quadform: float, mu_star: float, sigma_star: float,
                         beta_null=None):
    """Z-statistic for the contrast ``v^T beta``, with ``quadform = v^T Sigma^{-1} v``.

    Returns ``(z, p)``.
    """
    _check_constants(mu_star, sigma_star)
    v = np.asarray(v, dtype=float)
    if not abs(np.linalg.norm(v) - 1) < 1e-10:
        raise ValueError("v must have unit norm")
    if not quadform > 0:
        raise ValueError("quadform must be positive")
    beta = fit.beta_hat
    null = np.zeros_like(beta) if beta_null is None else np.asarray(beta_null, dtype=float)
    tau_v = 1 / math.sqrt(quadform)
    z = math.sqrt(fit.eta_hat.size) * tau_v * float(v @ (beta - mu_star * null)) / sigma_star
    return z, float(2 * stats.norm.sf(abs(z)))


def plr_test(data: Dataset, alpha: float, index_set, constants: Constants,
             full_fit: MdyplFit | None = None, options: FitOptions | None = None) -> PLRResult:
    """Penalized likelihood ratio test that the coefficients in ``index_set`` are zero.

    ``Lambda = l(full) - l(null)`` on the pseudo-response scale; the rescaled
    statistic ``2 Lambda b* / (kappa sigma*^2)`` is referred to a chi-square
    with ``len(index_set)`` degrees of freedom.
    """
    idx = tuple(sorted(int(i) for i in index_set))
    if not idx:
        return PLRResult((), 0.0, 0.0, 0, 1.0)
    if len(set(idx)) != len(idx) or idx[0] < 0 or idx[-1] >= data.p:
        raise ValueError("index_set must hold distinct covariate indices")
    options = replace(options or FitOptions(), hat=False)
    if full_fit is None:
        full_fit = fit_mdypl(data, alpha, options)
    keep = np.setdiff1d(np.arange(data.p), idx)
    start = full_fit.beta_hat[keep]
    if data.intercept:
        start = np.concatenate([[full_fit.theta_hat], start])
    null_fit = fit_mdypl(data.drop(idx), alpha, options, start=start)
    lam = full_fit.loglik_pseudo - null_fit.loglik_pseudo
    if lam < -1e-8 * max(1.0, abs(full_fit.loglik_pseudo)):
        raise NestingError(f"null log-likelihood exceeds the full one by {-lam:.3e}")
    lam = max(lam, 0.0)
    rescaled = 2 * lam * constants.plr_scale
    return PLRResult(idx, lam, rescaled, len(idx), float(stats.chi2.sf(rescaled, len(idx))))


def aggregate_metrics(beta_hat, beta0, mu_star: float, sigma_star: float, kappa: float,
                      gamma: float, levels=None) -> AggregateMetrics:
    """Empirical aggregate quantities next to their limits.

    ``levels`` maps each coordinate to a declared support point of the signal
    (an array of labels the same length as ``beta0``, typically ``beta0``
    itself); per-level biases are reported for each distinct label.
    """
    beta_hat = np.asarray(beta_hat, dtype=float)
    beta0 = np.asarray(beta0, dtype=float)
    if beta_hat.shape != beta0.shape:
        raise ValueError("beta_hat and beta0 must have the same length")
    centred = beta_hat - mu_star * beta0
    err = beta_hat - beta0
    resc = beta_hat / mu_star - beta0
    m = AggregateMetrics(
        bias=float(np.mean(err)),
        variance=float(np.mean(centred ** 2)),
        amse=float(np.mean(err ** 2)),
        amse_theory=sigma_star ** 2 + (1 - mu_star) ** 2 * gamma ** 2 / kappa,
        cross=float(np.mean(centred * beta0)),
        rescaled_bias=float(np.mean(resc)),
        rescaled_variance=float(np.mean(resc ** 2)),
        rescaled_variance_theory=sigma_star ** 2 / mu_star ** 2,
        rescaled_cross=float(np.mean(resc * beta0)),
    )
    if levels is not None:
        levels = np.asarray(levels)
        for lev in np.unique(levels):
            sel = levels == lev
            key = float(lev)
            m.level_bias[key] = float(np.mean(err[sel]))
            m.level_bias_theory[key] = float((mu_star - 1) * np.mean(beta0[sel]))
            m.level_rescaled_bias[key] = float(np.mean(resc[sel]))
    return m


def oracle_constants(kappa: float, gamma: float, alpha: float, theta0: float | None = None,
                     options: SolverOptions | None = None) -> Constants:
    """Constants solved at known ``(kappa, gamma)`` (and ``theta0`` when given)."""
    options = options or SolverOptions()
    if theta0 is None:
        sol = solve_plain(SEInput(kappa, gamma=gamma, alpha=alpha), options)
        iota = None
    else:
        sol = solve_intercept(SEInput(kappa, gamma=gamma, alpha=alpha, theta0=theta0),
                              "iota", options)
        iota = sol.iota_or_theta0
    if not sol.converged:
        raise SolverError(f"state evolution did not converge (residual {sol.residual_norm:.3e})")
    return Constants(sol.mu, sol.b, sol.sigma, kappa, gamma=gamma, iota=iota, theta0=theta0,
                     source="oracle", solution=sol)


def estimate_constants(data: Dataset, alpha: float, fit: MdyplFit | None = None,
                       options: SolverOptions | None = None,
                       fit_options: FitOptions | None = None) -> Constants:
    """Estimate the constants from data: ``kappa = p / n``, ``upsilon`` by SLOE.

    Without an intercept the plain system is solved in its ``upsilon`` form.
    With an intercept, ``iota`` is fixed at the fitted intercept and the
    ``upsilon`` form of the intercept system is solved for ``theta0``.
    """
    options = options or SolverOptions()
    if fit is None:
        fit = fit_mdypl(data, alpha, fit_options)
    kappa = data.p / data.n
    ups = sloe(fit, data)
    if not data.intercept:
        sol = solve_from_upsilon(SEInput(kappa, upsilon=ups, alpha=alpha), options)
        return Constants(sol.mu, sol.b, sol.sigma, kappa, gamma=sol.gamma, upsilon=ups,
                         source="estimate", solution=sol)
    iota = fit.theta_hat
    start = options.start
    if start is None:
        # plain upsilon solution is a good start for (mu, b, sigma)
        try:
            s0 = solve_from_upsilon(SEInput(kappa, upsilon=ups, alpha=alpha), options)
            start = [s0.mu, s0.b, s0.sigma, iota]
        except SolverError:
            start = None
    sol = solve_intercept(SEInput(kappa, upsilon=ups, alpha=alpha, iota=iota), "theta0",
                          replace(options, start=start))
    if not sol.converged:
        raise SolverError(f"intercept system did not converge (residual {sol.residual_norm:.3e})")
    return Constants(sol.mu, sol.b, sol.sigma, kappa, gamma=sol.gamma, upsilon=ups, iota=iota,
                     theta0=sol.iota_or_theta0, source="estimate", solution=sol)


def infer(data: Dataset, alpha: float, constants: Constants | None = None, null_sets=(),
          beta_null=None, fit_options: FitOptions | None = None,
          options: SolverOptions | None = None) -> InferenceReport:
    """Full pipeline: fit, constants (estimated unless given), Z-statistics and PLR tests."""
    fit = fit_mdypl(data, alpha, fit_options)
    if constants is None:
        constants = estimate_constants(data, alpha, fit, options)
    z, pv = z_statistics(fit, tau_hat(data.X), constants.mu, constants.sigma, beta_null)
    plr = [plr_test(data, alpha, s, constants, fit, fit_options) for s in null_sets]
    return InferenceReport(constants=constants, kappa_hat=data.p / data.n,
                           rescaled_beta=rescale(fit, constants.mu), z=z, p_values=pv,
                           plr=plr, fit=fit)
