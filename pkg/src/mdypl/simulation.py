"""Seeded data generation and the experiment runners behind the tables and
figure datasets.

Random numbers come from numpy's Philox-4x64 counter-based generator. Each
stream is keyed by ``(seed, blake2b(scenario key, replicate, purpose))`` so
that every replicate draws from its own stream regardless of scheduling.
Normal variates are produced by the inverse-CDF method from 53-bit uniforms,
which only depends on the raw 64-bit outputs and ``scipy.special.ndtri``.
"""

from __future__ import annotations

import configparser
import csv
import hashlib
import io
import json
import math
import os
import platform
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass, field, fields, replace
from typing import Callable, Sequence

import numpy as np
import scipy
from scipy import stats
from scipy.special import expit, ndtri

from .estimator import Dataset, FitDivergence, FitError, FitOptions, fit_mdypl, sloe, tau_hat
from .inference import (
    NestingError,
    estimate_constants,
    oracle_constants,
    plr_test,
    z_statistics,
)
from .state_evolution import (
    SEInput,
    SolverError,
    SolverOptions,
    find_alpha_min_amse,
    find_alpha_unbiased,
    solve_plain,
    solve_ridge,
)

__all__ = [
    "RNG_ALGORITHM",
    "ScenarioSpec",
    "ReplicateResult",
    "stream",
    "standard_normal",
    "uniform",
    "sigma_matrix",
    "gen_design",
    "gen_signal",
    "gen_responses",
    "gen_dataset",
    "run_replicates",
    "run_table1",
    "run_qq_plr",
    "run_table2",
    "run_zstat",
    "run_sloe",
    "run_contours",
    "TABLE1_SCENARIOS",
    "load_scenarios",
    "write_csv",
    "write_metadata",
    "default_threads",
]

RNG_ALGORITHM = "numpy.random.Philox (Philox-4x64-10), inverse-CDF normals via scipy.special.ndtri"
_MASK64 = (1 << 64) - 1
FAILURE_THRESHOLD = 0.01


def default_threads() -> int:
    env = os.environ.get("MDYPL_THREADS")
    if env:
        return max(1, int(env))
    return os.cpu_count() or 1


# --------------------------------------------------------------------------
# random streams
# --------------------------------------------------------------------------


def _key_hash(*parts) -> int:
    h = hashlib.blake2b(repr(parts).encode(), digest_size=8)
    return int.from_bytes(h.digest(), "little")


def stream(seed: int, *parts) -> np.random.Generator:
    """Independent Philox stream for ``seed`` and a tuple of key parts."""
    key = ((int(seed) & _MASK64) << 64) | _key_hash(*parts)
    return np.random.Generator(np.random.Philox(key=key))


def uniform(gen: np.random.Generator, size) -> np.ndarray:
    """Uniforms on (0, 1) from the top 53 bits of the raw 64-bit outputs."""
    count = int(np.prod(size))
    raw = gen.bit_generator.random_raw(count)
    return (((raw >> np.uint64(11)).astype(np.float64) + 0.5) * 2.0 ** -53).reshape(size)


def standard_normal(gen: np.random.Generator, size) -> np.ndarray:
    return ndtri(uniform(gen, size))


# --------------------------------------------------------------------------
# scenarios
# --------------------------------------------------------------------------


@dataclass(frozen=True)
class ScenarioSpec:
    """Declarative simulation scenario.

    ``sigma`` is one of ``identity_over_n``, ``identity_over_p``,
    ``equicorrelated:<rho>`` or ``cholesky:<path>`` (a whitespace separated
    lower-triangular factor). ``signal`` is one of ``replicated:<v1,v2,...>``,
    ``sparse:<count>,<value>[,random]``, ``gaussian`` or ``file:<path>``.
    The signal is rescaled so that ``beta0^T Sigma beta0 = gamma^2``.
    ``alpha`` is a number or the rule ``1/(1+kappa)``.
    """

    name: str = "scenario"
    n: int = 1000
    kappa: float = 0.2
    gamma: float = 1.0
    alpha: str = "1/(1+kappa)"
    sigma: str = "identity_over_n"
    signal: str = "replicated:-3,-1.5,0,1.5,3"
    theta0: float = 0.0
    intercept: bool = False
    replicates: int = 100
    seed: int = 20240101

    def __post_init__(self):
        if self.n < 2 or not 0 < self.kappa < 1:
            raise ValueError("need n >= 2 and kappa in (0, 1)")
        if self.p < 1 or self.p >= self.n:
            raise ValueError(f"p = round(n kappa) = {self.p} must lie in [1, n)")
        if self.gamma < 0 or self.replicates < 1:
            raise ValueError("gamma must be non-negative and replicates positive")
        self.alpha_value  # validates

    @property
    def p(self) -> int:
        return int(round(self.n * self.kappa))

    @property
    def kappa_realised(self) -> float:
        return self.p / self.n

    @property
    def alpha_value(self) -> float:
        a = str(self.alpha).replace(" ", "")
        if a == "1/(1+kappa)":
            return 1 / (1 + self.kappa_realised)
        value = float(a)
        if not 0 < value <= 1:
            raise ValueError(f"alpha must lie in (0, 1], got {value}")
        return value

    @property
    def key(self) -> str:
        """Stable identity of the data-generating settings (replicates excluded)."""
        d = asdict(self)
        d.pop("replicates")
        return json.dumps(d, sort_keys=True)

    def with_(self, **kw) -> "ScenarioSpec":
        return replace(self, **kw)


def sigma_matrix(spec: ScenarioSpec) -> np.ndarray | None:
    """Covariance of a design row; ``None`` for scaled identities (handled implicitly)."""
    kind, _, arg = spec.sigma.partition(":")
    p = spec.p
    if kind in ("identity_over_n", "identity_over_p"):
        return None
    if kind == "equicorrelated":
        rho = float(arg)
        return (1 - rho) * np.eye(p) + rho * np.ones((p, p))
    if kind == "cholesky":
        L = np.loadtxt(arg, ndmin=2)
        if L.shape != (p, p):
            raise ValueError(f"Cholesky factor has shape {L.shape}, expected {(p, p)}")
        return L @ L.T
    raise ValueError(f"unknown sigma pattern {spec.sigma!r}")


def _identity_scale(spec: ScenarioSpec) -> float:
    kind = spec.sigma.partition(":")[0]
    return 1 / spec.n if kind == "identity_over_n" else 1 / spec.p


def _quadform(spec: ScenarioSpec, beta: np.ndarray) -> float:
    S = sigma_matrix(spec)
    if S is None:
        return _identity_scale(spec) * float(beta @ beta)
    return float(beta @ S @ beta)


def gen_design(spec: ScenarioSpec, replicate: int) -> np.ndarray:
    """``X = G L^T`` with standard normal ``G`` and the Cholesky factor ``L`` of Sigma."""
    G = standard_normal(stream(spec.seed, spec.key, int(replicate), "design"), (spec.n, spec.p))
    S = sigma_matrix(spec)
    if S is None:
        return G * math.sqrt(_identity_scale(spec))
    L = np.linalg.cholesky(S)
    return G @ L.T


def _signal_pattern(spec: ScenarioSpec):
    kind, _, arg = spec.signal.partition(":")
    p = spec.p
    if kind == "replicated":
        v = np.array([float(t) for t in arg.split(",")])
        reps = -(-p // v.size)
        return np.tile(v, reps)[:p], np.tile(np.arange(v.size), reps)[:p]
    if kind == "sparse":
        parts = arg.split(",")
        count = int(parts[0])
        value = float(parts[1]) if len(parts) > 1 and parts[1] else 1.0
        random = len(parts) > 2 and parts[2] == "random"
        if not 0 < count <= p:
            raise ValueError("sparse count must lie in [1, p]")
        beta = np.zeros(p)
        if random:
            u = uniform(stream(spec.seed, spec.key, "signal"), p)
            beta[np.sort(np.argsort(u, kind="stable")[:count])] = value
        else:
            beta[:count] = value
        return beta, (beta != 0).astype(int)
    if kind == "gaussian":
        beta = standard_normal(stream(spec.seed, spec.key, "signal"), p)
        return beta, None
    if kind == "file":
        beta = np.loadtxt(arg, ndmin=1).astype(float)
        if beta.size != p:
            raise ValueError(f"signal file has {beta.size} entries, expected {p}")
        return beta, None
    raise ValueError(f"unknown signal pattern {spec.signal!r}")


def gen_signal(spec: ScenarioSpec, return_levels: bool = False):
    """Signal vector rescaled so that ``beta0^T Sigma beta0 = gamma^2``.

    With ``return_levels`` also returns integer labels of the declared support
    point of each coordinate (``None`` for continuous patterns).
    """
    beta, levels = _signal_pattern(spec)
    if spec.gamma == 0:
        beta = np.zeros_like(beta)
    else:
        q = _quadform(spec, beta)
        if q <= 0:
            raise ValueError("signal pattern is identically zero but gamma > 0")
        beta = beta * (spec.gamma / math.sqrt(q))
    return (beta, levels) if return_levels else beta


def gen_responses(X, beta0, theta0: float = 0.0, seed: int = 0, key=()) -> np.ndarray:
    """Bernoulli draws with success probabilities ``zeta'(theta0 + X beta0)``."""
    eta = theta0 + np.asarray(X) @ np.asarray(beta0)
    u = uniform(stream(seed, *key, "response") if not isinstance(seed, np.random.Generator)
                else seed, eta.size)
    return (u < expit(eta)).astype(float)


def gen_dataset(spec: ScenarioSpec, replicate: int, beta0=None) -> Dataset:
    beta0 = gen_signal(spec) if beta0 is None else beta0
    X = gen_design(spec, replicate)
    y = gen_responses(X, beta0, spec.theta0, spec.seed, (spec.key, int(replicate)))
    return Dataset(y, X, spec.intercept)


# --------------------------------------------------------------------------
# replicate harness
# --------------------------------------------------------------------------


@dataclass
class ReplicateResult:
    replicate: int
    status: str = "ok"
    reason: str = ""
    values: dict = field(default_factory=dict)

    @property
    def ok(self) -> bool:
        return self.status == "ok"


_REASONS = (
    (FitDivergence, "fit_divergence"),
    (FitError, "fit_failure"),
    (NestingError, "nesting_violation"),
    (SolverError, "solver_failure"),
    (np.linalg.LinAlgError, "linalg_failure"),
)


def _reason(exc: Exception) -> str:
    for cls, code in _REASONS:
        if isinstance(exc, cls):
            return code
    return "error"


def run_replicates(work: Callable[[int], dict], replicates: int, threads: int | None = None,
                   first: int = 0) -> list[ReplicateResult]:
    """Evaluate ``work(r)`` for each replicate, recording failures by reason code.

    Results are returned in replicate order, whatever the thread count.
    """

    def one(r):
        try:
            return ReplicateResult(r, values=work(r))
        except (FitError, NestingError, SolverError, np.linalg.LinAlgError) as exc:
            return ReplicateResult(r, status="failed", reason=f"{_reason(exc)}: {exc}")

    idx = range(first, first + replicates)
    threads = threads or default_threads()
    if threads <= 1:
        return [one(r) for r in idx]
    with ThreadPoolExecutor(max_workers=threads) as ex:
        return list(ex.map(one, idx))


def _failure_summary(results):
    failed = [r for r in results if not r.ok]
    return len(failed), len(failed) > FAILURE_THRESHOLD * len(results)


# --------------------------------------------------------------------------
# Table 1: coordinatewise and aggregate bias / root MSE
# --------------------------------------------------------------------------

TABLE1_SCENARIOS = {
    "a": dict(kappa=0.2, gamma=math.sqrt(0.9), signal="replicated:-3,-1.5,0,1.5,3"),
    "b": dict(kappa=0.05, gamma=10.0, signal="replicated:-3,-1.5,0,1.5,3"),
    "c": dict(kappa=0.2, gamma=math.sqrt(3.1), signal="replicated:-3,-1.5,0,1.5,8"),
}


def run_table1(scenarios: Sequence[str] = ("a", "b", "c"), n: int = 1000,
               replicates: int = 5000, seed: int = 1, threads: int | None = None,
               solver: SolverOptions | None = None) -> list[dict]:
    """Empirical bias and root MSE by support level and in aggregate.

    One row per (scenario, level) plus an ``aggregate`` row per scenario.
    """
    rows = []
    for name in scenarios:
        spec = ScenarioSpec(name=f"table1-{name}", n=n, replicates=replicates, seed=seed,
                            alpha="1/(1+kappa)", **TABLE1_SCENARIOS[name])
        alpha = spec.alpha_value
        beta0, levels = gen_signal(spec, return_levels=True)
        sol = solve_plain(SEInput(spec.kappa_realised, gamma=spec.gamma, alpha=alpha), solver)
        opts = FitOptions(hat=False)

        def work(r, spec=spec, beta0=beta0, alpha=alpha):
            fit = fit_mdypl(gen_dataset(spec, r, beta0), alpha, opts)
            return {"err": fit.beta_hat - beta0}

        results = run_replicates(work, replicates, threads)
        nfail, unreliable = _failure_summary(results)
        errs = np.array([r.values["err"] for r in results if r.ok])
        common = dict(scenario=name, n=n, p=spec.p, kappa=spec.kappa_realised,
                      gamma2=spec.gamma ** 2, alpha=alpha, mu_star=sol.mu, sigma_star=sol.sigma,
                      replicates=len(errs), failures=nfail, unreliable=unreliable)
        for lev in np.unique(levels):
            sel = levels == lev
            e = errs[:, sel]
            rows.append(dict(common, level=float(beta0[sel][0]), bias=float(e.mean()),
                             rmse=float(np.sqrt(np.mean(e ** 2))),
                             bias_theory=float((sol.mu - 1) * beta0[sel][0]),
                             bias_se=float(e.mean(axis=1).std(ddof=1) / math.sqrt(len(e)))))
        rows.append(dict(common, level="aggregate", bias=float(errs.mean()),
                         rmse=float(np.sqrt(np.mean(errs ** 2))),
                         bias_theory=float((sol.mu - 1) * beta0.mean()),
                         bias_se=float(errs.mean(axis=1).std(ddof=1) / math.sqrt(len(errs))),
                         rmse_theory=math.sqrt(sol.amse(spec.kappa_realised, spec.gamma))))
    return rows


# --------------------------------------------------------------------------
# PLR experiments
# --------------------------------------------------------------------------


def run_qq_plr(n: int = 2000, kappas: Sequence[float] = (0.1, 0.5),
               alphas: Sequence[float] = (1 / 1.5, 1 / 2), ks: Sequence[int] = (5, 50),
               gamma2: float = 5.0, replicates: int = 1000, seed: int = 2,
               threads: int | None = None, solver: SolverOptions | None = None,
               signal: str = "replicated:-3,-1.5,0,1.5,3") -> list[dict]:
    """Raw and rescaled PLR draws for nested models dropping the first ``k`` coordinates.

    The first ``max(ks)`` coordinates of the signal are set to zero so that
    every tested hypothesis is true. A ``k = 0`` control row is included.
    """
    rows = []
    kmax = max(ks)
    for kappa in kappas:
        spec = ScenarioSpec(name="qq-plr", n=n, kappa=kappa, gamma=math.sqrt(gamma2),
                            alpha="1", signal=signal, replicates=replicates, seed=seed)
        base, _ = _signal_pattern(spec)
        base = base.copy()
        base[:kmax] = 0.0
        scale = spec.gamma / math.sqrt(_quadform(spec, base))
        beta0 = base * scale
        for alpha in alphas:
            c = oracle_constants(spec.kappa_realised, spec.gamma, alpha, options=solver)
            opts = FitOptions(hat=False)

            def work(r, spec=spec, beta0=beta0, alpha=alpha, c=c):
                data = gen_dataset(spec, r, beta0)
                full = fit_mdypl(data, alpha, opts)
                out = {}
                for k in (0, *ks):
                    res = plr_test(data, alpha, range(k), c, full, opts)
                    out[k] = (res.lambda_raw, res.lambda_rescaled)
                return out

            for res in run_replicates(work, replicates, threads):
                for k in (0, *ks):
                    raw, resc = res.values[k] if res.ok else (math.nan, math.nan)
                    rows.append(dict(kappa=spec.kappa_realised, alpha=alpha, k=k,
                                     replicate=res.replicate, status=res.status,
                                     reason=res.reason, lambda_raw=raw, lambda_rescaled=resc,
                                     plr_scale=c.plr_scale))
    return rows


TABLE2_QUANTILES = (0.01, 0.05, 0.10, 0.25, 0.50, 0.75, 0.90, 0.95, 0.99)


def run_table2(kappas: Sequence[float] = (0.2, 0.4, 0.6, 0.8),
               theta0s: Sequence[float] = (0.5, 1.0, 1.5, 2.0, 2.5), n: int = 2000,
               gamma2: float = 5.0, k: int = 10, replicates: int = 5000, seed: int = 3,
               threads: int | None = None, solver: SolverOptions | None = None,
               return_draws: bool = False):
    """Percent of rescaled PLR statistics below chi-square quantiles, with an intercept.

    Constants come from the intercept system at the true ``theta0``; the
    nested model drops the first ``k`` coordinates whose signal is zero.
    """
    rows, draws = [], {}
    for kappa in kappas:
        for theta0 in theta0s:
            spec = ScenarioSpec(name="table2", n=n, kappa=kappa, gamma=math.sqrt(gamma2),
                                alpha="1/(1+kappa)", theta0=theta0, intercept=True,
                                signal=f"sparse:{max(1, int(round(n * kappa)) // 4)},1,random",
                                replicates=replicates, seed=seed)
            alpha = spec.alpha_value
            beta0 = gen_signal(spec)
            null_set = np.flatnonzero(beta0 == 0)[:k]
            c = oracle_constants(spec.kappa_realised, spec.gamma, alpha, theta0, options=solver)
            opts = FitOptions(hat=False)

            def work(r, spec=spec, beta0=beta0, alpha=alpha, c=c, null_set=null_set):
                data = gen_dataset(spec, r, beta0)
                res = plr_test(data, alpha, null_set, c, None, opts)
                return {"stat": res.lambda_rescaled}

            results = run_replicates(work, replicates, threads)
            nfail, unreliable = _failure_summary(results)
            stat = np.array([r.values["stat"] for r in results if r.ok])
            row = dict(kappa=spec.kappa_realised, theta0=theta0, alpha=alpha, mu_star=c.mu,
                       b_star=c.b, sigma_star=c.sigma, iota_star=c.iota, replicates=len(stat),
                       failures=nfail, unreliable=unreliable)
            for q in TABLE2_QUANTILES:
                row[f"pct_{int(round(100 * q))}"] = 100 * float(np.mean(stat <= stats.chi2.ppf(q, k)))
            rows.append(row)
            draws[(spec.kappa_realised, theta0)] = stat
    return (rows, draws) if return_draws else rows


# --------------------------------------------------------------------------
# Z-statistics and SLOE
# --------------------------------------------------------------------------


def run_zstat(ns: Sequence[int] = (400, 2000), kappas: Sequence[float] = (0.2, 0.5),
              alpha: float = 0.95, gamma2: float = 9.0, rho: float = 0.5, nonzero: int = 5,
              nulls: int = 25, replicates: int = 300, seed: int = 4,
              threads: int | None = None, solver: SolverOptions | None = None) -> list[dict]:
    """Null-coordinate Z-statistic p-values under an equicorrelated design.

    One row per (n, kappa, replicate, coordinate) with p-values from oracle
    and from estimated constants.
    """
    rows = []
    for n in ns:
        for kappa in kappas:
            spec = ScenarioSpec(name="zstat", n=n, kappa=kappa, gamma=math.sqrt(gamma2),
                                alpha=str(alpha), sigma=f"equicorrelated:{rho}",
                                signal=f"sparse:{nonzero},1", replicates=replicates, seed=seed)
            beta0 = gen_signal(spec)
            oracle = oracle_constants(spec.kappa_realised, spec.gamma, alpha, options=solver)
            cols = np.arange(nonzero, nonzero + nulls)

            def work(r, spec=spec, beta0=beta0, oracle=oracle, cols=cols):
                data = gen_dataset(spec, r, beta0)
                fit = fit_mdypl(data, alpha)
                tau = tau_hat(data.X)
                est = estimate_constants(data, alpha, fit, solver)
                _, p_or = z_statistics(fit, tau, oracle.mu, oracle.sigma, beta0)
                _, p_es = z_statistics(fit, tau, est.mu, est.sigma, beta0)
                return {"oracle": p_or[cols], "estimate": p_es[cols], "mu_hat": est.mu,
                        "sigma_hat": est.sigma}

            for res in run_replicates(work, replicates, threads):
                if not res.ok:
                    rows.append(dict(n=n, kappa=spec.kappa_realised, replicate=res.replicate,
                                     status=res.status, reason=res.reason))
                    continue
                for j, c in enumerate(cols):
                    rows.append(dict(n=n, kappa=spec.kappa_realised, replicate=res.replicate,
                                     status="ok", reason="", coordinate=int(c),
                                     p_oracle=float(res.values["oracle"][j]),
                                     p_estimate=float(res.values["estimate"][j]),
                                     mu_hat=res.values["mu_hat"],
                                     sigma_hat=res.values["sigma_hat"]))
    return rows


def run_sloe(n: int = 4000, kappa: float = 0.2, gamma2: float = 0.9, alpha: float = 1 / 1.2,
             replicates: int = 100, seed: int = 5, threads: int | None = None,
             signal: str = "replicated:-3,-1.5,0,1.5,3") -> list[dict]:
    """SLOE estimates of ``upsilon`` across replicates."""
    spec = ScenarioSpec(name="sloe", n=n, kappa=kappa, gamma=math.sqrt(gamma2),
                        alpha=str(alpha), signal=signal, replicates=replicates, seed=seed)
    beta0 = gen_signal(spec)

    def work(r):
        data = gen_dataset(spec, r, beta0)
        fit = fit_mdypl(data, alpha)
        return {"upsilon_hat": sloe(fit, data),
                "upsilon_printed": sloe(fit, data, variant="printed"),
                "sd_eta": float(np.std(fit.eta_hat))}

    rows = []
    for res in run_replicates(work, replicates, threads):
        rows.append(dict(replicate=res.replicate, status=res.status, reason=res.reason,
                         **(res.values if res.ok else {})))
    return rows


# --------------------------------------------------------------------------
# contour grids
# --------------------------------------------------------------------------

CONTOUR_FAMILIES = ("bias", "unbiased_alpha", "min_amse_alpha", "ridge_ratio")


def _ridge_best(kappa, gamma, lambdas, solver):
    best, start = None, None
    for lam in lambdas:
        sol = solve_ridge(SEInput(kappa, gamma=gamma, lam=float(lam)),
                          replace(solver, start=start))
        if not sol.converged:
            start = None
            continue
        start = [sol.mu, sol.b, sol.sigma]
        ratio = sol.sigma ** 2 / sol.mu ** 2
        if best is None or ratio < best[1]:
            best = (float(lam), ratio)
    return best


def run_contours(kappas: Sequence[float], gammas: Sequence[float],
                 families: Sequence[str] = CONTOUR_FAMILIES,
                 solver: SolverOptions | None = None, alpha_grid=None, lambda_grid=None,
                 threads: int | None = None) -> list[dict]:
    """State-evolution quantities over a ``(kappa, gamma)`` grid.

    ``bias``: ``mu*`` and aMSE at ``alpha = 1/(1+kappa)``; ``unbiased_alpha``:
    the alpha giving ``mu* = 1``; ``min_amse_alpha``: grid argmin of
    ``sigma*/mu*``; ``ridge_ratio``: ``min_alpha kappa sigma*^2/mu*^2`` over
    ``min_lambda sigma_bar^2/mu_bar^2``, plus the ratio of the MDYPL aMSE at
    ``alpha = 1/(1+kappa)`` to the ML aMSE (``alpha = 1``) where ML solves.
    """
    solver = solver or SolverOptions()
    unknown = set(families) - set(CONTOUR_FAMILIES)
    if unknown:
        raise ValueError(f"unknown contour families {sorted(unknown)}")
    alpha_grid = np.linspace(0.01, 0.99, 100) if alpha_grid is None else np.asarray(alpha_grid)
    lambda_grid = np.geomspace(1e-3, 10, 60) if lambda_grid is None else np.asarray(lambda_grid)
    points = [(float(k), float(g)) for k in kappas for g in gammas]

    def work(i):
        kappa, gamma = points[i]
        row = dict(kappa=kappa, gamma=gamma)
        if "bias" in families:
            a = 1 / (1 + kappa)
            sol = solve_plain(SEInput(kappa, gamma=gamma, alpha=a), solver)
            row.update(alpha=a, mu=sol.mu, b=sol.b, sigma=sol.sigma,
                       amse=sol.amse(kappa, gamma), converged=sol.converged)
            ml = solve_plain(SEInput(kappa, gamma=gamma, alpha=1.0), solver)
            row["ml_converged"] = ml.converged
            row["amse_ratio_ml"] = (sol.amse(kappa, gamma) / ml.amse(kappa, gamma)
                                    if ml.converged and sol.converged else math.nan)
        if "unbiased_alpha" in families:
            try:
                row["alpha_unbiased"] = find_alpha_unbiased(kappa, gamma, solver).alpha
            except SolverError:
                row["alpha_unbiased"] = math.nan
        if "min_amse_alpha" in families or "ridge_ratio" in families:
            search = find_alpha_min_amse(kappa, gamma, alpha_grid, solver)
            row["alpha_min_amse"] = search.alpha
            sol = search.solution
            row["mdypl_min_ratio"] = kappa * sol.sigma ** 2 / sol.mu ** 2 if sol else math.nan
        if "ridge_ratio" in families:
            best = _ridge_best(kappa, gamma, lambda_grid, solver)
            row["lambda_min"] = best[0] if best else math.nan
            row["ridge_min_ratio"] = best[1] if best else math.nan
            row["ridge_ratio"] = (row["mdypl_min_ratio"] / best[1]) if best else math.nan
        return row

    threads = threads or default_threads()
    if threads <= 1:
        return [work(i) for i in range(len(points))]
    with ThreadPoolExecutor(max_workers=threads) as ex:
        return list(ex.map(work, range(len(points))))


# --------------------------------------------------------------------------
# scenario files and output
# --------------------------------------------------------------------------


def load_scenarios(path_or_text: str) -> list[ScenarioSpec]:
    """Parse scenarios from an INI-style key-value file, one ``[section]`` each.

    Keys are the :class:`ScenarioSpec` field names; the section name becomes
    ``name`` unless given. A ``[DEFAULT]`` section supplies shared values.
    """
    parser = configparser.ConfigParser(interpolation=None)
    if os.path.exists(path_or_text):
        with open(path_or_text) as fh:
            parser.read_file(fh)
    else:
        parser.read_string(path_or_text)
    types = {f.name: f.type for f in fields(ScenarioSpec)}
    casts = {"int": int, "float": float, "str": str, "bool": None}
    out = []
    for section in parser.sections():
        kw = {"name": section}
        for key, raw in parser[section].items():
            if key not in types:
                raise ValueError(f"unknown scenario key {key!r} in [{section}]")
            t = types[key] if isinstance(types[key], str) else types[key].__name__
            if t == "bool":
                kw[key] = parser[section].getboolean(key)
            else:
                kw[key] = casts[t](raw)
        out.append(ScenarioSpec(**kw))
    return out


def _fmt(v):
    if isinstance(v, (bool, np.bool_)):
        return "true" if v else "false"
    if isinstance(v, (float, np.floating)):
        return repr(float(v))
    if isinstance(v, (int, np.integer)):
        return str(int(v))
    if v is None:
        return ""
    return str(v)


def write_csv(rows: list[dict], path_or_buf=None) -> str:
    """Write dict rows as RFC-4180 CSV with round-trip float formatting.

    The header is the union of keys in first-seen order. Returns the text.
    """
    header: list = []
    for r in rows:
        for k in r:
            if k not in header:
                header.append(k)
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\r\n")
    w.writerow(header)
    for r in rows:
        w.writerow([_fmt(r.get(k)) for k in header])
    text = buf.getvalue()
    if isinstance(path_or_buf, str):
        with open(path_or_buf, "w", newline="") as fh:
            fh.write(text)
    elif path_or_buf is not None:
        path_or_buf.write(text)
    return text


def write_metadata(path: str, config: dict, wall_time: float | None = None, **extra) -> dict:
    """Append one JSON-lines metadata record next to an output file."""
    from . import __version__

    record = dict(config=config, rng=RNG_ALGORITHM, wall_time=wall_time,
                  timestamp=time.strftime("%Y-%m-%dT%H:%M:%S%z"),
                  versions=dict(mdypl=__version__, numpy=np.__version__,
                                scipy=scipy.__version__, python=platform.python_version()),
                  **extra)
    with open(path, "a") as fh:
        fh.write(json.dumps(record, default=_json_default) + "\n")
    return record


def _json_default(o):
    if isinstance(o, np.generic):
        return o.item()
    if isinstance(o, np.ndarray):
        return o.tolist()
    return str(o)
