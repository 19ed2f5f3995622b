"""Logistic cumulant functions, the logistic proximal operator and
Gauss-Hermite expectations over standard normal variables."""

from __future__ import annotations

from dataclasses import dataclass
from functools import lru_cache
from typing import Callable

import numpy as np
from numpy.polynomial.hermite_e import hermegauss
from scipy.special import expit

__all__ = [
    "zeta",
    "zeta_prime",
    "zeta_double_prime",
    "ProxResult",
    "ProxConvergenceError",
    "prox_logistic",
    "prox_logistic_array",
    "QuadratureRule",
    "gauss_hermite",
    "expect_normal",
    "expect_bivariate_normal",
    "DEFAULT_ORDER",
]

DEFAULT_ORDER = 50
PROX_TOL = 1e-10
PROX_MAXITER = 200


def zeta(x):
    """Cumulant transform ``log(1 + exp(x))`` of the logistic model."""
    x = np.asarray(x, dtype=float)
    pos = np.maximum(x, 0.0)
    # x + log1p(e^-x) for x > 0, log1p(e^x) otherwise
    out = pos + np.log1p(np.exp(-np.abs(x)))
    return out[()] if out.ndim == 0 else out


def zeta_prime(x):
    """Logistic function ``1 / (1 + exp(-x))``."""
    return expit(x)


def zeta_double_prime(x):
    """Logistic variance function ``zeta'(x) * (1 - zeta'(x))``.

    Evaluated as ``zeta'(x) * zeta'(-x)`` so that the tails stay positive
    instead of cancelling to zero.
    """
    x = np.asarray(x, dtype=float)
    # rounding near zero can push the product one ulp past its bound 1/4
    out = np.minimum(expit(x) * expit(-x), 0.25)
    return out[()] if out.ndim == 0 else out


class ProxConvergenceError(RuntimeError):
    pass


@dataclass(frozen=True)
class ProxResult:
    value: float
    iterations: int
    residual: float


def prox_logistic_array(b, x, tol: float = PROX_TOL, maxiter: int = PROX_MAXITER,
                        return_info: bool = False):
    """Vectorised proximal operator of ``b * zeta``.

    Solves ``u + b * zeta'(u) = x`` elementwise by Newton's method started at
    ``x - b * zeta'(x)``, falling back to bisection whenever a Newton step
    leaves the bracket ``[x - b, x]``. ``b`` and ``x`` broadcast.
    """
    b, x = np.broadcast_arrays(np.asarray(b, dtype=float), np.asarray(x, dtype=float))
    if np.any(b < 0):
        raise ValueError("b must be non-negative")
    lo = x - b
    hi = x.copy()
    u = x - b * expit(x)
    g = u + b * expit(u) - x
    prev = np.full(u.shape, np.inf)
    it = 0
    while True:
        absg = np.abs(g)
        # at large |x| the float spacing of u can exceed tol
        done = (absg <= tol) | (hi - lo <= 4 * np.spacing(np.abs(x) + 1.0))
        if np.all(done) or it >= maxiter:
            break
        it += 1
        lo = np.where(g < 0, u, lo)
        hi = np.where(g > 0, u, hi)
        step = u - g / (1.0 + b * expit(u) * expit(-u))
        # bisect when Newton leaves the bracket or stopped halving |g|
        newton = (step > lo) & (step < hi) & (absg <= 0.5 * prev)
        prev = absg
        u_new = np.where(newton, step, 0.5 * (lo + hi))
        u = np.where(done, u, u_new)
        g = u + b * expit(u) - x
    if not np.all(done):
        raise ProxConvergenceError(
            f"prox iteration cap {maxiter} reached, max residual {np.max(np.abs(g)):.3e}")
    # one polishing Newton step; callers amplify prox errors by b^2 / kappa^2
    polished = u - g / (1.0 + b * expit(u) * expit(-u))
    gp = polished + b * expit(polished) - x
    better = np.abs(gp) < np.abs(g)
    u = np.where(better, polished, u)
    g = np.where(better, gp, g)
    if return_info:
        return u, it, np.max(np.abs(g), initial=0.0)
    return u


def prox_logistic(b: float, x: float, tol: float = PROX_TOL,
                  maxiter: int = PROX_MAXITER) -> ProxResult:
    """``argmin_u {b * zeta(u) + (x - u)^2 / 2}`` for scalar ``b >= 0`` and ``x``."""
    if b == 0:
        return ProxResult(float(x), 0, 0.0)
    u, it, res = prox_logistic_array(b, x, tol=tol, maxiter=maxiter, return_info=True)
    return ProxResult(float(u), int(it), float(res))


@dataclass(frozen=True)
class QuadratureRule:
    """Gauss-Hermite rule for expectations under a standard normal."""

    order: int
    nodes: np.ndarray
    weights: np.ndarray

    def expect(self, f: Callable) -> float:
        return float(np.dot(self.weights, f(self.nodes)))

    @property
    def grid(self):
        """Tensor-product nodes ``(z1, z2)`` and weights, as 2-D arrays."""
        return _tensor_grid(self.order)


@lru_cache(maxsize=None)
def _rule(order: int) -> QuadratureRule:
    nodes, weights = hermegauss(order)
    weights = weights / weights.sum()
    # symmetrise against round-off in the eigen-solve
    nodes = 0.5 * (nodes - nodes[::-1])
    weights = 0.5 * (weights + weights[::-1])
    nodes.setflags(write=False)
    weights.setflags(write=False)
    return QuadratureRule(order, nodes, weights)


@lru_cache(maxsize=None)
def _tensor_grid(order: int):
    r = _rule(order)
    z1, z2 = np.meshgrid(r.nodes, r.nodes, indexing="ij")
    w = np.outer(r.weights, r.weights)
    for a in (z1, z2, w):
        a.setflags(write=False)
    return z1, z2, w


def gauss_hermite(order: int = DEFAULT_ORDER) -> QuadratureRule:
    """Cached probabilists' Gauss-Hermite rule with weights summing to one."""
    if order < 1:
        raise ValueError("order must be a positive integer")
    return _rule(int(order))


def expect_normal(f: Callable, rule: QuadratureRule | None = None) -> float:
    """``E[f(Z)]`` for ``Z ~ N(0, 1)``."""
    rule = rule or gauss_hermite()
    return rule.expect(f)


def expect_bivariate_normal(f: Callable, rule: QuadratureRule | None = None) -> float:
    """``E[f(Z1, Z2)]`` for independent standard normals by a tensor-product rule.

    ``f`` must accept two arrays of equal shape and evaluate elementwise.
    """
    rule = rule or gauss_hermite()
    z1, z2, w = rule.grid
    return float(np.sum(w * f(z1, z2)))
