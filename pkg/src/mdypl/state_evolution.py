"""State-evolution systems for MDYPL logistic regression and their solvers.

Three systems are covered:

* the plain system in ``(mu, b, sigma)`` (no intercept), optionally
  parameterised by the corrupted signal strength ``upsilon`` instead of
  ``gamma``;
* the four-equation system with an intercept, in ``(mu, b, sigma, iota)`` or
  ``(mu, b, sigma, theta0)``;
* the logistic ridge system in ``(mu, b, sigma)`` with penalty ``lambda``.

Expectations are taken by tensor-product Gauss-Hermite quadrature over two
independent standard normals. Unknowns ``b`` and ``sigma`` are solved on the
log scale so they stay positive.
"""

from __future__ import annotations

import math
import warnings
from dataclasses import dataclass, field, replace
from typing import Callable, Sequence

import numpy as np
from scipy.optimize import brentq

from .core import (
    DEFAULT_ORDER,
    ProxConvergenceError,
    QuadratureRule,
    gauss_hermite,
    prox_logistic_array,
    zeta_double_prime,
    zeta_prime,
)

__all__ = [
    "SEInput",
    "SESolution",
    "SolverOptions",
    "SolverError",
    "InfeasibleUpsilon",
    "residuals_plain",
    "residuals_upsilon",
    "residuals_intercept",
    "residuals_ridge",
    "solve_plain",
    "solve_intercept",
    "solve_ridge",
    "solve_from_upsilon",
    "upsilon_of_gamma",
    "UpsilonCurve",
    "find_alpha_unbiased",
    "find_alpha_min_amse",
    "AlphaSearch",
    "amse",
    "NEAR_SINGULAR",
]

NEAR_SINGULAR = 1e8


class SolverError(RuntimeError):
    pass


class InfeasibleUpsilon(SolverError):
    """No iterate satisfied ``upsilon^2 > kappa * sigma^2``."""


@dataclass(frozen=True)
class SEInput:
    """External parameters of a state-evolution system.

    Exactly one of ``gamma`` and ``upsilon`` is set. For the intercept system
    one of ``theta0`` and ``iota`` is given and the other is solved for;
    ``lam`` is the ridge penalty and only used by the ridge system.
    """

    kappa: float
    gamma: float | None = None
    upsilon: float | None = None
    alpha: float = 1.0
    theta0: float | None = None
    iota: float | None = None
    lam: float | None = None

    def __post_init__(self):
        if not 0 < self.kappa < 1:
            raise ValueError(f"kappa must lie in (0, 1), got {self.kappa}")
        if (self.gamma is None) == (self.upsilon is None):
            raise ValueError("exactly one of gamma and upsilon must be given")
        signal = self.gamma if self.gamma is not None else self.upsilon
        if not (np.isfinite(signal) and signal >= 0):
            raise ValueError("signal strength must be a non-negative finite number")
        if not 0 < self.alpha <= 1:
            raise ValueError(f"alpha must lie in (0, 1], got {self.alpha}")
        if self.theta0 is not None and self.iota is not None:
            raise ValueError("theta0 and iota are mutually exclusive inputs")
        if self.lam is not None and self.lam < 0:
            raise ValueError("lam must be non-negative")


@dataclass
class SolverOptions:
    """Settings for the damped Newton solver.

    ``start`` is an initial point in natural coordinates (``(mu, b, sigma)``
    plus the free intercept quantity where relevant). ``continuation`` is the
    number of intermediate signal strengths used when a cold solve fails; the
    path runs from a small signal strength up to the target with warm starts.
    """

    start: Sequence[float] | None = None
    tol: float = 1e-9
    maxiter: int = 200
    fd_step: float = 1e-6
    quad_order: int = DEFAULT_ORDER
    continuation: int = 8
    # intercept system conventions, see residuals_intercept. The defaults
    # match the plain system at theta0 = 0 and calibrate the intercept PLR in
    # simulation; "printed" reproduces the displayed system literally.
    intercept_level: str = "plain"
    intercept_predictor: str = "true"

    @property
    def rule(self) -> QuadratureRule:
        return gauss_hermite(self.quad_order)


@dataclass
class SESolution:
    mu: float
    b: float
    sigma: float
    iota_or_theta0: float | None = None
    residual_norm: float = np.inf
    jacobian_condition: float = np.inf
    converged: bool = False
    solver_trace: list = field(default_factory=list)
    gamma: float | None = None
    kind: str = "plain"

    @property
    def near_singular(self) -> bool:
        return not self.jacobian_condition < NEAR_SINGULAR

    @property
    def params(self) -> np.ndarray:
        base = [self.mu, self.b, self.sigma]
        if self.iota_or_theta0 is not None:
            base.append(self.iota_or_theta0)
        return np.array(base)

    def amse(self, kappa: float, gamma: float | None = None) -> float:
        g = self.gamma if gamma is None else gamma
        return amse(self.mu, self.sigma, kappa, g)


def amse(mu: float, sigma: float, kappa: float, gamma: float) -> float:
    """Asymptotic aggregate MSE ``sigma^2 + (1 - mu)^2 gamma^2 / kappa``."""
    return sigma ** 2 + (1 - mu) ** 2 * gamma ** 2 / kappa


# --------------------------------------------------------------------------
# residual systems
# --------------------------------------------------------------------------


def _grid(rule):
    rule = rule or gauss_hermite()
    return rule.grid


def _plain_core(mu, b, sigma, kappa, gamma, mu_gamma, alpha, rule):
    # mu_gamma is passed separately so the upsilon form can supply mu*gamma
    # without dividing by mu
    z1, z2, w = _grid(rule)
    c = (1 + alpha) / 2
    z = gamma * z1
    zstar = mu_gamma * z1 + math.sqrt(kappa) * sigma * z2
    p = prox_logistic_array(b, zstar + c * b)
    q = c - zeta_prime(p)
    weight = 2 * zeta_prime(z) * w
    r1 = np.sum(weight * z * q)
    r2 = 1 - kappa - np.sum(weight / (1 + b * zeta_double_prime(p)))
    r3 = sigma ** 2 - b ** 2 / kappa ** 2 * np.sum(weight * q ** 2)
    return np.array([r1, r2, r3])


def residuals_plain(params, inp: SEInput, rule: QuadratureRule | None = None) -> np.ndarray:
    """Left-hand sides of the plain MDYPL state-evolution equations.

    With ``Z = gamma * Z1``, ``Z* = mu * Z + sqrt(kappa) * sigma * Z2`` and
    ``c = (1 + alpha) / 2``::

        E[2 zeta'(Z) Z {c - zeta'(prox_{b zeta}(Z* + c b))}]
        1 - kappa - E[2 zeta'(Z) / (1 + b zeta''(prox_{b zeta}(Z* + c b)))]
        sigma^2 - b^2 / kappa^2 E[2 zeta'(Z) {c - zeta'(prox_{b zeta}(Z* + c b))}^2]
    """
    if inp.gamma is None:
        raise ValueError("residuals_plain needs gamma; use residuals_upsilon")
    mu, b, sigma = params
    return _plain_core(mu, b, sigma, inp.kappa, inp.gamma, mu * inp.gamma, inp.alpha, rule)


def residuals_upsilon(params, inp: SEInput, rule: QuadratureRule | None = None) -> np.ndarray:
    """Plain system with ``gamma^2 = (upsilon^2 - kappa sigma^2) / mu^2`` substituted.

    Returns NaNs where ``upsilon^2 <= kappa sigma^2``.
    """
    if inp.upsilon is None:
        raise ValueError("residuals_upsilon needs upsilon")
    mu, b, sigma = params
    slack = inp.upsilon ** 2 - inp.kappa * sigma ** 2
    if slack <= 0 or mu == 0:
        return np.full(3, np.nan)
    mu_gamma = math.copysign(math.sqrt(slack), mu)
    gamma = math.sqrt(slack) / abs(mu)
    return _plain_core(mu, b, sigma, inp.kappa, gamma, mu_gamma, inp.alpha, rule)


def _intercept_level(alpha, level):
    if level == "printed":
        return 1 / (1 + alpha)
    if level == "plain":
        return (1 + alpha) / 2
    raise ValueError(f"unknown intercept level convention {level!r}")


def residuals_intercept(params, inp: SEInput, rule: QuadratureRule | None = None,
                        solve_for: str = "iota", level: str = "printed",
                        predictor: str = "printed") -> np.ndarray:
    """Residuals of the four-equation system with an intercept.

    ``params`` is ``(mu, b, sigma, free)`` where ``free`` is ``iota`` when
    ``solve_for == "iota"`` (``theta0`` taken from ``inp``) and ``theta0``
    when ``solve_for == "theta0"`` (``iota`` taken from ``inp``).

    With ``Z2 = mu gamma Z + sqrt(kappa) sigma G + iota``, level ``c`` and
    ``Q(+-) = c - zeta'(prox_{b zeta}(c b +- Z2))`` the residuals are::

        E[zeta'(Z1) Z1 Q+] - E[zeta'(-Z1) Z1 Q-]
        1 - kappa - E[zeta'(Z1) / (1 + b zeta''(P+))] - E[zeta'(-Z1) / (1 + b zeta''(P-))]
        sigma^2 kappa^2 / b^2 - E[zeta'(Z1) Q+^2] - E[zeta'(-Z1) Q-^2]
        E[zeta'(Z1) Q+] - E[zeta'(-Z1) Q-]

    ``level="printed"`` uses ``c = 1 / (1 + alpha)``; ``level="plain"`` uses
    the plain-system level ``c = (1 + alpha) / 2``. ``predictor="printed"``
    uses ``Z1 = mu gamma Z + theta0``; ``predictor="true"`` uses the true
    linear predictor ``Z1 = gamma Z + theta0``.
    """
    if inp.gamma is None:
        raise ValueError("residuals_intercept needs gamma")
    mu, b, sigma, free = params
    if solve_for == "iota":
        theta0, iota = inp.theta0, free
    elif solve_for == "theta0":
        theta0, iota = free, inp.iota
    else:
        raise ValueError("solve_for must be 'iota' or 'theta0'")
    if theta0 is None or iota is None:
        raise ValueError("the fixed one of theta0 / iota must be provided")
    return _intercept_core(mu, b, sigma, theta0, iota, inp.kappa, inp.gamma, mu * inp.gamma,
                           inp.alpha, rule, level, predictor)


def _intercept_core(mu, b, sigma, theta0, iota, kappa, gamma, mu_gamma, alpha, rule,
                    level, predictor):
    z, g, w = _grid(rule)
    c = _intercept_level(alpha, level)
    if predictor == "printed":
        z1 = mu_gamma * z + theta0
    elif predictor == "true":
        z1 = gamma * z + theta0
    else:
        raise ValueError(f"unknown intercept predictor convention {predictor!r}")
    z2 = mu_gamma * z + math.sqrt(kappa) * sigma * g + iota
    pp = prox_logistic_array(b, c * b + z2)
    pm = prox_logistic_array(b, c * b - z2)
    qp = c - zeta_prime(pp)
    qm = c - zeta_prime(pm)
    wp = w * zeta_prime(z1)
    wm = w * zeta_prime(-z1)
    r1 = np.sum(wp * z1 * qp) - np.sum(wm * z1 * qm)
    r2 = (1 - kappa - np.sum(wp / (1 + b * zeta_double_prime(pp)))
          - np.sum(wm / (1 + b * zeta_double_prime(pm))))
    r3 = sigma ** 2 * kappa ** 2 / b ** 2 - np.sum(wp * qp ** 2) - np.sum(wm * qm ** 2)
    r4 = np.sum(wp * qp) - np.sum(wm * qm)
    return np.array([r1, r2, r3, r4])


def _residuals_intercept_upsilon(params, inp, rule, solve_for, level, predictor):
    mu, b, sigma, free = params
    slack = inp.upsilon ** 2 - inp.kappa * sigma ** 2
    if slack <= 0 or mu == 0:
        return np.full(4, np.nan)
    theta0, iota = (inp.theta0, free) if solve_for == "iota" else (free, inp.iota)
    mu_gamma = math.copysign(math.sqrt(slack), mu)
    gamma = math.sqrt(slack) / abs(mu)
    return _intercept_core(mu, b, sigma, theta0, iota, inp.kappa, gamma, mu_gamma, inp.alpha,
                           rule, level, predictor)


def residuals_ridge(params, inp: SEInput, rule: QuadratureRule | None = None) -> np.ndarray:
    """Residuals of the logistic ridge state evolution.

    With independent standard normals ``Z1, Z2``, ``x = mu gamma Z1 + sigma Z2``
    and ``P = prox_{b zeta}(x)``::

        E[2 zeta''(-gamma Z1) P] + mu kappa
        1 - kappa + b lambda - E[2 zeta'(-gamma Z1) / (1 + b zeta''(P))]
        sigma^2 kappa - E[2 zeta'(-gamma Z1) (x - P)^2]
    """
    if inp.gamma is None:
        raise ValueError("residuals_ridge needs gamma")
    mu, b, sigma = params
    lam = inp.lam or 0.0
    kappa, gamma = inp.kappa, inp.gamma
    z1, z2, w = _grid(rule)
    x = mu * gamma * z1 + sigma * z2
    p = prox_logistic_array(b, x)
    wneg = 2 * zeta_prime(-gamma * z1) * w
    r1 = np.sum(2 * zeta_double_prime(-gamma * z1) * w * p) + mu * kappa
    r2 = 1 - kappa + b * lam - np.sum(wneg / (1 + b * zeta_double_prime(p)))
    r3 = sigma ** 2 * kappa - np.sum(wneg * (x - p) ** 2)
    return np.array([r1, r2, r3])


# --------------------------------------------------------------------------
# damped Newton
# --------------------------------------------------------------------------


def _fd_jacobian(fun, x, f0, step):
    n = x.size
    jac = np.empty((f0.size, n))
    for i in range(n):
        h = step * max(1.0, abs(x[i]))
        e = np.zeros(n)
        e[i] = h
        jac[:, i] = (fun(x + e) - fun(x - e)) / (2 * h)
    return jac


def _norm(f):
    n = float(np.linalg.norm(f))
    return n if np.isfinite(n) else np.inf


def _damped_newton(fun, x0, tol, maxiter, fd_step, trace):
    x = np.asarray(x0, dtype=float)
    f = fun(x)
    fn = _norm(f)
    if not np.isfinite(fn):
        raise InfeasibleUpsilon("starting point is outside the feasible region")
    history = []
    for it in range(maxiter):
        trace.append({"iter": it, "x": x.tolist(), "norm": fn})
        if fn <= tol:
            return x, f, fn, True
        # give up when ten iterations have not cut the residual by 10%
        history.append(fn)
        if len(history) > 10 and fn > 0.9 * history[-11]:
            break
        jac = _fd_jacobian(fun, x, f, fd_step)
        try:
            step = np.linalg.solve(jac, -f)
        except np.linalg.LinAlgError:
            step = np.linalg.lstsq(jac, -f, rcond=None)[0]
        if not np.all(np.isfinite(step)):
            break
        # keep log-scale moves bounded so exp() cannot overflow
        big = np.max(np.abs(step))
        if big > 5:
            step *= 5 / big
        t = 1.0
        for _ in range(40):
            xn = x + t * step
            fnew = fun(xn)
            fnn = _norm(fnew)
            if fnn < fn:
                break
            t *= 0.5
        else:
            break
        x, f, fn = xn, fnew, fnn
    trace.append({"iter": len(trace), "x": x.tolist(), "norm": fn})
    return x, f, fn, fn <= tol


def _natural(x, n_log=(1, 2)):
    y = np.array(x, dtype=float)
    for i in n_log:
        y[i] = math.exp(x[i])
    return y


def _transformed(y, n_log=(1, 2)):
    x = np.array(y, dtype=float)
    for i in n_log:
        if x[i] <= 0:
            raise ValueError("b and sigma must be positive")
        x[i] = math.log(x[i])
    return x


def _jacobian_condition(resid, y, step):
    """Condition number of the Jacobian in the natural coordinates."""
    y = np.asarray(y, dtype=float)
    f0 = resid(y)
    jac = _fd_jacobian(resid, y, f0, step)
    if not np.all(np.isfinite(jac)):
        return np.inf
    return float(np.linalg.cond(jac))


def _guarded(resid):
    # trial points far outside the useful range are rejected by the line search
    def fun(x):
        if np.any(np.abs(x[1:3]) > 30):
            return np.full(len(x), np.nan)
        try:
            return resid(_natural(x))
        except (ProxConvergenceError, OverflowError, FloatingPointError):
            return np.full(len(x), np.nan)
    return fun


def _run(resid, start, options, trace):
    """Solve ``resid(y) = 0`` from a natural-coordinate start point."""
    x0 = _transformed(start)
    fun = _guarded(resid)
    x, f, fn, ok = _damped_newton(fun, x0, options.tol, options.maxiter, options.fd_step, trace)
    y = _natural(x)
    return y, fn, ok


# --------------------------------------------------------------------------
# plain system
# --------------------------------------------------------------------------


def _default_start(inp: SEInput):
    g = inp.gamma if inp.gamma is not None else inp.upsilon
    return [inp.alpha, 1 + inp.kappa * g, 1 + g * math.sqrt(inp.kappa)]


def _finish(y, fn, ok, trace, resid, options, kind, gamma, extra=None):
    # report the residual of the target problem, not of a continuation step
    try:
        fn = _norm(resid(y))
    except (ProxConvergenceError, OverflowError, FloatingPointError, ValueError):
        fn = np.inf
    ok = bool(ok and fn <= options.tol)
    cond = _jacobian_condition(resid, y, options.fd_step) if ok else np.inf
    return SESolution(mu=float(y[0]), b=float(y[1]), sigma=float(y[2]),
                      iota_or_theta0=None if extra is None else float(y[3]),
                      residual_norm=float(fn), jacobian_condition=cond,
                      converged=bool(ok), solver_trace=trace, gamma=gamma, kind=kind)


def _solve_zero_signal(inp, options, trace):
    # with gamma = 0 the first equation vanishes identically and mu drops out
    rule = options.rule

    def resid(y):
        return residuals_plain([0.0, y[0], y[1]], inp, rule)[1:]

    start = options.start[1:3] if options.start is not None else _default_start(inp)[1:]
    x0 = np.log(np.asarray(start, dtype=float))
    fun = lambda x: resid(np.exp(x))
    x, f, fn, ok = _damped_newton(fun, x0, options.tol, options.maxiter, options.fd_step, trace)
    y = np.exp(x)
    cond = _jacobian_condition(resid, y, options.fd_step) if ok else np.inf
    return SESolution(mu=np.nan, b=float(y[0]), sigma=float(y[1]), residual_norm=fn,
                      jacobian_condition=cond, converged=ok, solver_trace=trace,
                      gamma=0.0, kind="plain")


def solve_plain(inp: SEInput, options: SolverOptions | None = None) -> SESolution:
    """Solve the plain state evolution for ``(mu, b, sigma)``.

    A failed cold start triggers continuation in ``gamma`` from a weak signal.
    Non-convergence is reported through ``converged=False`` rather than raised.
    At ``gamma = 0`` ``mu`` is not identified and is returned as NaN.
    """
    options = options or SolverOptions()
    if inp.gamma is None:
        raise ValueError("solve_plain needs gamma; use solve_from_upsilon")
    trace: list = []
    if inp.gamma == 0:
        return _solve_zero_signal(inp, options, trace)
    rule = options.rule
    resid = lambda y: residuals_plain(y, inp, rule)
    start = options.start if options.start is not None else _default_start(inp)
    y, fn, ok = _run(resid, start, options, trace)
    if not ok and options.continuation > 0:
        y, fn, ok = _continue_plain(inp, options, trace)
    return _finish(y, fn, ok, trace, resid, options, "plain", inp.gamma)


def _continue(make_resid, start, options, trace, min_step=1e-3, max_steps=60):
    """Adaptive continuation of ``make_resid(s)`` from ``s = 0`` to ``s = 1``.

    ``start`` is a solved or easily solved point at the first step; the step
    size halves on failure and grows after successes. At most ``max_steps``
    sub-problems are attempted.
    """
    y = np.asarray(start, dtype=float)
    s, ds = 0.0, 1.0 / (options.continuation + 1)
    fn, ok = np.inf, False
    for _ in range(max_steps):
        if s >= 1.0:
            break
        t = min(1.0, s + ds)
        try:
            yt, fnt, okt = _run(make_resid(t), y, options, trace)
        except (InfeasibleUpsilon, ValueError):
            okt = False
        if okt:
            y, fn, ok, s = yt, fnt, True, t
            ds *= 1.5
        else:
            ds *= 0.5
            if ds < min_step:
                return y, fn, False
    return y, fn, ok and s >= 1.0


def _continue_plain(inp, options, trace):
    g0 = min(0.1, inp.gamma) * 0.5
    first = replace(inp, gamma=g0)
    y, fn, ok = _run(lambda v: residuals_plain(v, first, options.rule),
                     _default_start(first), options, trace)
    if not ok:
        return y, fn, False

    def make(t):
        sub = replace(inp, gamma=g0 + t * (inp.gamma - g0))
        return lambda v: residuals_plain(v, sub, options.rule)

    return _continue(make, y, options, trace)


# --------------------------------------------------------------------------
# intercept system
# --------------------------------------------------------------------------


def solve_intercept(inp: SEInput, solve_for: str = "iota",
                    options: SolverOptions | None = None) -> SESolution:
    """Solve the intercept state evolution for ``(mu, b, sigma)`` and ``iota`` or ``theta0``.

    ``solve_for="iota"`` needs ``inp.theta0``; ``solve_for="theta0"`` needs
    ``inp.iota``. Works with either ``gamma`` or ``upsilon`` in ``inp``.
    """
    options = options or SolverOptions()
    if solve_for == "iota" and inp.theta0 is None:
        raise ValueError("solving for iota requires theta0")
    if solve_for == "theta0" and inp.iota is None:
        raise ValueError("solving for theta0 requires iota")
    rule = options.rule
    level, predictor = options.intercept_level, options.intercept_predictor
    if inp.gamma is not None:
        resid = lambda y: residuals_intercept(y, inp, rule, solve_for, level, predictor)
    else:
        resid = lambda y: _residuals_intercept_upsilon(y, inp, rule, solve_for, level, predictor)
    fixed = inp.theta0 if solve_for == "iota" else inp.iota
    if options.start is not None:
        start = list(options.start)
    else:
        start = _default_start(inp) + [fixed]
        if inp.upsilon is not None:
            start = _upsilon_start(inp) + [fixed]
    trace: list = []
    y, fn, ok = _run(resid, start, options, trace)
    if not ok and options.continuation > 0 and inp.gamma is not None and inp.gamma > 0:
        # continuation from the zero-intercept problem at the same gamma
        y0 = solve_plain(replace(inp, theta0=None, iota=None), options)
        if y0.converged:
            def make(t):
                if solve_for == "iota":
                    sub = replace(inp, theta0=t * inp.theta0)
                else:
                    sub = replace(inp, iota=t * inp.iota)
                return lambda v: residuals_intercept(v, sub, rule, solve_for, level, predictor)

            y, fn, ok = _continue(make, [y0.mu, y0.b, y0.sigma, 0.0], options, trace)
    extra = y[3]
    return _finish(y, fn, ok, trace, resid, options, "intercept", _implied_gamma(inp, y), extra)


def _implied_gamma(inp, y):
    if inp.gamma is not None:
        return inp.gamma
    slack = inp.upsilon ** 2 - inp.kappa * y[2] ** 2
    return math.sqrt(slack) / abs(y[0]) if slack > 0 and y[0] != 0 else np.nan


# --------------------------------------------------------------------------
# ridge system
# --------------------------------------------------------------------------


def solve_ridge(inp: SEInput, options: SolverOptions | None = None) -> SESolution:
    """Solve the logistic ridge state evolution for ``(mu, b, sigma)``."""
    options = options or SolverOptions()
    if inp.gamma is None:
        raise ValueError("solve_ridge needs gamma")
    rule = options.rule
    resid = lambda y: residuals_ridge(y, inp, rule)
    trace: list = []
    if options.start is not None:
        start = options.start
    else:
        # ridge sigma lives on the sqrt(kappa) scale of the plain sigma
        s = _default_start(replace(inp, alpha=1.0))
        start = [s[0], s[1], s[2] * math.sqrt(inp.kappa)]
    y, fn, ok = _run(resid, start, options, trace)
    if not ok and options.continuation > 0:
        g0 = min(0.1, inp.gamma) * 0.5
        first = replace(inp, gamma=g0)
        s0 = _default_start(replace(first, alpha=1.0))
        y, fn, ok = _run(lambda v: residuals_ridge(v, first, rule),
                         [s0[0], s0[1], s0[2] * math.sqrt(inp.kappa)], options, trace)
        if ok:
            def make(t):
                sub = replace(inp, gamma=g0 + t * (inp.gamma - g0))
                return lambda v: residuals_ridge(v, sub, rule)

            y, fn, ok = _continue(make, y, options, trace)
    return _finish(y, fn, ok, trace, resid, options, "ridge", inp.gamma)


# --------------------------------------------------------------------------
# upsilon parameterisation
# --------------------------------------------------------------------------


def _upsilon_start(inp):
    # sigma must satisfy kappa sigma^2 < upsilon^2; aim at half the budget
    ups = inp.upsilon
    sigma = 0.5 * ups / math.sqrt(inp.kappa)
    return [inp.alpha, 1 + inp.kappa * ups, max(sigma, 1e-3)]


def solve_from_upsilon(inp: SEInput, options: SolverOptions | None = None) -> SESolution:
    """Solve the plain system parameterised by ``upsilon`` instead of ``gamma``.

    The implied ``gamma_hat = sqrt((upsilon^2 - kappa sigma^2) / mu^2)`` is
    stored on ``SESolution.gamma``. Raises :class:`InfeasibleUpsilon` when no
    feasible solution is reached; the returned branch is the one reached from
    ``options.start``.
    """
    options = options or SolverOptions()
    if inp.upsilon is None:
        raise ValueError("solve_from_upsilon needs upsilon")
    if inp.upsilon <= 0:
        raise InfeasibleUpsilon("upsilon must be positive")
    rule = options.rule
    resid = lambda y: residuals_upsilon(y, inp, rule)
    trace: list = []
    starts = []
    if options.start is not None:
        starts.append(list(options.start))
    starts.append(_upsilon_start(inp))
    best = None
    for start in starts:
        try:
            y, fn, ok = _run(resid, start, options, trace)
        except InfeasibleUpsilon:
            continue
        if best is None or fn < best[1]:
            best = (y, fn, ok)
        if ok:
            break
    if best is None or not best[2]:
        # gamma-continuation: trace h(gamma) until it brackets upsilon
        found = _upsilon_by_bracketing(inp, options, trace)
        if found is not None:
            y, fn, ok = _run(resid, found, options, trace)
            best = (y, fn, ok)
    if best is None or not best[2]:
        raise InfeasibleUpsilon(
            f"no feasible state-evolution solution for upsilon={inp.upsilon:.6g}, "
            f"kappa={inp.kappa:.6g}, alpha={inp.alpha:.6g}; upsilon may lie outside "
            "the image of h(gamma)")
    y, fn, ok = best
    return _finish(y, fn, ok, trace, resid, options, "upsilon", _implied_gamma(inp, y))


def _upsilon_by_bracketing(inp, options, trace, gamma_max=20.0, n=41):
    # walk up a gamma grid with warm starts; stop at the first crossing
    prev = None
    start = None
    for g in np.linspace(0.05, gamma_max, n):
        sol = solve_plain(SEInput(inp.kappa, gamma=float(g), alpha=inp.alpha),
                          replace(options, start=start))
        if not sol.converged:
            start = None
            continue
        start = [sol.mu, sol.b, sol.sigma]
        h = math.sqrt(sol.mu ** 2 * g ** 2 + inp.kappa * sol.sigma ** 2)
        if prev is not None and (prev[0] - inp.upsilon) * (h - inp.upsilon) <= 0:
            w = (inp.upsilon - prev[0]) / (h - prev[0]) if h != prev[0] else 0.5
            return list((1 - w) * np.asarray(prev[1]) + w * np.asarray(start))
        prev = (h, start)
    return None


@dataclass
class UpsilonCurve:
    kappa: float
    alpha: float
    gamma: np.ndarray
    upsilon: np.ndarray
    converged: np.ndarray
    solutions: list

    @property
    def monotone_increasing(self) -> bool:
        u = self.upsilon[self.converged]
        return bool(np.all(np.diff(u) > 0))

    @property
    def invertible(self) -> bool:
        u = self.upsilon[self.converged]
        d = np.diff(u)
        return bool(np.all(d > 0) or np.all(d < 0))

    def preimages(self, upsilon: float) -> np.ndarray:
        """Gamma values on the grid (linearly interpolated) where ``h(gamma) = upsilon``."""
        g = self.gamma[self.converged]
        u = self.upsilon[self.converged] - upsilon
        idx = np.nonzero(u[:-1] * u[1:] <= 0)[0]
        out = []
        for i in idx:
            if u[i + 1] == u[i]:
                out.append(g[i])
            else:
                out.append(g[i] - u[i] * (g[i + 1] - g[i]) / (u[i + 1] - u[i]))
        return np.unique(np.array(out))


def upsilon_of_gamma(kappa: float, alpha: float, gamma_grid,
                     options: SolverOptions | None = None) -> UpsilonCurve:
    """Trace ``upsilon = h(gamma) = sqrt(mu*^2 gamma^2 + kappa sigma*^2)`` on a grid.

    The grid is solved in increasing order with warm starts.
    """
    options = options or SolverOptions()
    gammas = np.asarray(gamma_grid, dtype=float)
    order = np.argsort(gammas)
    ups = np.full(gammas.size, np.nan)
    conv = np.zeros(gammas.size, dtype=bool)
    sols: list = [None] * gammas.size
    start = None
    for i in order:
        g = gammas[i]
        sol = solve_plain(SEInput(kappa, gamma=float(g), alpha=alpha),
                          replace(options, start=start))
        sols[i] = sol
        if sol.converged:
            conv[i] = True
            mu_term = 0.0 if g == 0 else sol.mu ** 2 * g ** 2
            ups[i] = math.sqrt(mu_term + kappa * sol.sigma ** 2)
            if g > 0:
                start = [sol.mu, sol.b, sol.sigma]
        else:
            start = None
    return UpsilonCurve(kappa, alpha, gammas, ups, conv, sols)


# --------------------------------------------------------------------------
# shrinkage tuning
# --------------------------------------------------------------------------


@dataclass
class AlphaSearch:
    alpha: float
    solution: SESolution | None
    alphas: np.ndarray | None = None
    values: np.ndarray | None = None
    converged: np.ndarray | None = None


def find_alpha_unbiased(kappa: float, gamma: float, options: SolverOptions | None = None,
                        bracket=(0.01, 0.999), xtol: float = 1e-10, scan: int = 50) -> AlphaSearch:
    """Shrinkage ``alpha`` for which the solved ``mu*`` equals one.

    ``mu*(alpha) - 1`` is scanned upwards over ``scan`` points of ``bracket``
    with warm starts until it changes sign (or the solver stops converging,
    typically beyond the region where a solution exists), and the root is then
    polished by Brent's method. Raises :class:`SolverError` when no sign change
    is found.
    """
    options = options or SolverOptions()

    def solve(a, start):
        sol = solve_plain(SEInput(kappa, gamma=gamma, alpha=float(a)), replace(options, start=start))
        if not sol.converged and start is not None:
            sol = solve_plain(SEInput(kappa, gamma=gamma, alpha=float(a)), options)
        return sol

    lo = hi = lo_sol = None
    start = None
    for a in np.linspace(bracket[0], bracket[1], scan):
        sol = solve(a, start)
        if not sol.converged:
            break
        if sol.mu >= 1:
            if sol.mu == 1:
                return AlphaSearch(alpha=float(a), solution=sol)
            hi = a
            break
        lo, lo_sol = a, sol
        start = [sol.mu, sol.b, sol.sigma]
    if lo_sol is None or hi is None:
        raise SolverError(
            f"mu*(alpha) - 1 has no sign change on [{bracket[0]}, {bracket[1]}] "
            f"for kappa={kappa}, gamma={gamma}")
    cache: dict = {}
    warm = [lo_sol.mu, lo_sol.b, lo_sol.sigma]

    def f(a):
        sol = solve(a, warm)
        if not sol.converged:
            raise SolverError(f"state evolution failed at alpha={a}")
        cache[a] = sol
        return sol.mu - 1

    a = brentq(f, lo, hi, xtol=xtol, rtol=4 * np.finfo(float).eps)
    sol = cache.get(a) or solve(a, warm)
    return AlphaSearch(alpha=float(a), solution=sol)


def find_alpha_min_amse(kappa: float, gamma: float, alpha_grid=None,
                        options: SolverOptions | None = None) -> AlphaSearch:
    """Grid minimiser of ``sigma*/mu*`` over ``alpha``; ties go to the smaller alpha.

    The grid defaults to 100 values from 0.01 to 0.99. Points where the solver
    fails are dropped with a warning. The grid is solved from the largest alpha
    down with warm starts.
    """
    options = options or SolverOptions()
    alphas = np.linspace(0.01, 0.99, 100) if alpha_grid is None else np.asarray(alpha_grid, float)
    vals = np.full(alphas.size, np.inf)
    conv = np.zeros(alphas.size, dtype=bool)
    sols: list = [None] * alphas.size
    start = None
    for i in np.argsort(alphas)[::-1]:
        sol = solve_plain(SEInput(kappa, gamma=gamma, alpha=float(alphas[i])),
                          replace(options, start=start))
        if not sol.converged:
            sol = solve_plain(SEInput(kappa, gamma=gamma, alpha=float(alphas[i])), options)
        sols[i] = sol
        if sol.converged and sol.mu > 0:
            conv[i] = True
            vals[i] = sol.sigma / sol.mu
            start = [sol.mu, sol.b, sol.sigma]
        else:
            start = None
    if not conv.all():
        warnings.warn(f"{(~conv).sum()} alpha grid points failed and were excluded",
                      RuntimeWarning, stacklevel=2)
    if not conv.any():
        raise SolverError("state evolution failed on the whole alpha grid")
    best = np.flatnonzero(vals == vals.min()).min()
    return AlphaSearch(alpha=float(alphas[best]), solution=sols[best], alphas=alphas,
                       values=vals, converged=conv)


def solve_grid(kappa: float, gammas, alpha: float | Callable = None,
               options: SolverOptions | None = None) -> list:
    """Solve the plain system along an increasing gamma path with warm starts."""
    options = options or SolverOptions()
    out = []
    start = None
    for g in gammas:
        a = alpha(kappa) if callable(alpha) else alpha
        sol = solve_plain(SEInput(kappa, gamma=float(g), alpha=a), replace(options, start=start))
        if not sol.converged and start is not None:
            sol = solve_plain(SEInput(kappa, gamma=float(g), alpha=a), options)
        out.append(sol)
        start = [sol.mu, sol.b, sol.sigma] if sol.converged and g > 0 else None
    return out
