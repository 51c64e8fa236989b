"""Detection power of the residual test against single-meter gross errors.

For meter i the residual keeps e * sqrt(1 - h_ii) of a gross error e, where
h_ii is the leverage (diagonal of the hat matrix).  The squared normalized
residual norm is then non-central chi-square with m - n dof and
non-centrality (e/sigma)^2 (1 - h_ii).  This script prints the theoretical
and simulated detection rate per meter and the average over meters.

    python scripts/bdd_power_analysis.py [k_sigma] [trials]
"""
import sys

import numpy as np
from scipy import stats

from fdia_imaging.grid_case import build_dc_model, bundled_case57
from fdia_imaging.state_estimation import WlsEstimator, bdd_residual, bdd_threshold, dc_power_flow

k = float(sys.argv[1]) if len(sys.argv) > 1 else 10.0
trials = int(sys.argv[2]) if len(sys.argv) > 2 else 400
alpha = 0.01

case = bundled_case57()
model = build_dc_model(case, 0.02)
est = WlsEstimator(model)
sigma, m, n = model.noise_sigma, model.m, model.n_states
hw = model.h / sigma
lev = np.einsum("ij,ji->i", hw, np.linalg.solve(hw.T @ hw, hw.T))
tau = bdd_threshold(model, alpha)
crit = stats.chi2.ppf(1 - alpha, m - n)
theory = stats.ncx2.sf(crit, m - n, np.maximum(k * k * (1 - lev), 1e-300))

rng = np.random.default_rng(0)
_, flows = dc_power_flow(case, case.nominal_loads_pu())
sim = np.zeros(m)
for i in range(m):
    z = flows + rng.normal(0.0, sigma, size=(trials, m))
    z[:, i] += rng.choice([-1.0, 1.0], size=trials) * k * sigma
    sim[i] = np.mean(bdd_residual(model, z, est.estimate(z)) > tau)

print(f"{k:g}-sigma single-meter errors, alpha {alpha}, {m - n} dof, {trials} trials per meter")
print(f"{'meter':>14} {'1-h_ii':>8} {'theory':>8} {'sim':>8}")
for i in np.argsort(lev)[::-1]:
    br = model.meter_index[i]
    print(f"{br.from_bus:>6}-{br.to_bus:<7} {1 - lev[i]:8.4f} {theory[i]:8.3f} {sim[i]:8.3f}")
print(f"mean over meters: theory {theory.mean():.3f}  simulated {sim.mean():.3f}")
print(f"meters with redundancy 1-h_ii < 0.1: {int(np.sum(1 - lev < 0.1))}; critical (< 1e-9): {int(np.sum(1 - lev < 1e-9))}")
