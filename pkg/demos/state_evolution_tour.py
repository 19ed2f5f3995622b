"""
Solving the state-evolution system
==================================

Asymptotic bias and variance of the MDYPL estimator for one (kappa, gamma)
setting, and how the shrinkage parameter alpha moves them.
"""

import math

import numpy as np

from mdypl.state_evolution import (SEInput, find_alpha_min_amse, find_alpha_unbiased,
                                   solve_from_upsilon, solve_plain)

# one setting: p/n = 0.2 and signal strength gamma^2 = 0.9
kappa, gamma = 0.2, math.sqrt(0.9)
sol = solve_plain(SEInput(kappa, gamma=gamma, alpha=1 / (1 + kappa)))
print(f"mu* = {sol.mu:.4f}  b* = {sol.b:.4f}  sigma* = {sol.sigma:.4f}")
print(f"aggregate MSE = {sol.amse(kappa, gamma):.4f}, Jacobian condition {sol.jacobian_condition:.1f}")

# mu* < 1 means the estimator shrinks; mu* grows with alpha and exceeds one near ML
for alpha in (0.3, 0.6, 0.9, 1.0):
    s = solve_plain(SEInput(kappa, gamma=gamma, alpha=alpha))
    print(f"alpha={alpha:.1f}: mu*={s.mu:.4f} sigma*={s.sigma:.4f}")

# the alpha giving mu* = 1, and the alpha minimising sigma*/mu*
unb = find_alpha_unbiased(kappa, gamma)
best = find_alpha_min_amse(kappa, gamma, alpha_grid=np.linspace(0.05, 0.99, 48))
print(f"unbiased alpha = {unb.alpha:.4f}; min sigma/mu alpha = {best.alpha:.4f}")

# the same system indexed by upsilon = sd of the fitted predictor, which is
# estimable from data; solving it recovers gamma
ups = math.sqrt(sol.mu ** 2 * gamma ** 2 + kappa * sol.sigma ** 2)
back = solve_from_upsilon(SEInput(kappa, upsilon=ups, alpha=1 / (1 + kappa)))
print(f"upsilon = {ups:.4f} maps back to gamma = {back.gamma:.6f} (true {gamma:.6f})")
