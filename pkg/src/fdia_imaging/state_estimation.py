"""DC power flow, WLS state estimation and residual bad-data detection."""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy import linalg, stats

from .grid_case import GridCase, MeasurementModel, incidence_reduced

__all__ = [
    "PowerFlowError",
    "UnobservableError",
    "BddResult",
    "WlsEstimator",
    "dc_power_flow",
    "wls_estimate",
    "bdd_residual",
    "bdd_threshold",
    "bdd_check",
]


class PowerFlowError(ValueError):
    pass


class UnobservableError(ValueError):
    pass


@dataclass(frozen=True)
class BddResult:
    residual_norm: float
    threshold: float

    @property
    def flagged(self) -> bool:
        return self.residual_norm > self.threshold


def dispatch_shares(case: GridCase) -> np.ndarray:
    """Fraction of total load carried at each bus, proportional to unit Pmax."""
    pos = case.bus_position()
    shares = np.zeros(case.n_buses)
    cap = sum(g.pmax_mw for g in case.generators)
    if cap <= 0:
        return shares
    for g in case.generators:
        shares[pos[g.bus]] += g.pmax_mw / cap
    return shares


def dc_power_flow(case: GridCase, bus_loads_pu) -> tuple[np.ndarray, np.ndarray]:
    """Noise-free non-slack angles (rad) and from-side branch flows (pu).

    ``bus_loads_pu`` follows the case's bus order; a (T, n) array solves T
    operating points at once.  Flows are ordered like the in-service branches,
    which is also the meter order of :func:`build_dc_model`.
    """
    loads = np.asarray(bus_loads_pu, dtype=float)
    if loads.shape[-1:] != (case.n_buses,) or loads.ndim > 2:
        raise ValueError(f"expected {case.n_buses} bus loads per row, got shape {loads.shape}")
    total = loads.sum(axis=-1)
    if np.any(total < 0):
        raise PowerFlowError("total load is negative")
    shares = dispatch_shares(case)
    if np.any(total != 0) and not shares.any():
        raise PowerFlowError("zero total generation capacity with nonzero load")
    injection = np.multiply.outer(total, shares) - loads

    branches = case.active_branches
    a, state_ids = incidence_reduced(case, branches)
    b = 1.0 / np.array([br.reactance_pu for br in branches])
    bprime = a.T @ (b[:, None] * a)
    pos = case.bus_position()
    p_red = injection[..., [pos[i] for i in state_ids]]
    try:
        factor = linalg.cho_factor(bprime)
    except linalg.LinAlgError:
        raise PowerFlowError("singular reduced susceptance matrix (disconnected network)") from None
    theta = linalg.cho_solve(factor, p_red.T).T
    flows = (theta @ a.T) * b
    return theta, flows


class WlsEstimator:
    """Reusable WLS solver for one measurement model.

    Factorizes W^-1/2 H once with a QR decomposition; estimates are
    ``R^-1 Q^T W^-1/2 z``.  Accepts a single measurement vector or a
    (batch, m) array.
    """

    def __init__(self, model: MeasurementModel, rcond: float = 1e-10):
        self.model = model
        self._scale = 1.0 / np.sqrt(model.w_diag)
        hw = model.h * self._scale[:, None]
        q, r = np.linalg.qr(hw)
        diag = np.abs(np.diag(r))
        if diag.size == 0 or diag.min() <= rcond * diag.max():
            raise UnobservableError("normal equations are rank deficient (unobservable network)")
        self._q = q
        self._r = r

    def estimate(self, z) -> np.ndarray:
        z = np.asarray(z, dtype=float)
        if z.shape[-1] != self.model.m:
            raise ValueError(f"expected {self.model.m} measurements, got {z.shape[-1]}")
        zw = (z * self._scale).T
        x = linalg.solve_triangular(self._r, self._q.T @ zw)
        return x.T


def wls_estimate(model: MeasurementModel, z) -> np.ndarray:
    return WlsEstimator(model).estimate(z)


def bdd_residual(model: MeasurementModel, z, x_hat):
    """Euclidean norm of z - H x_hat (row-wise for batches)."""
    r = np.asarray(z, dtype=float) - np.asarray(x_hat, dtype=float) @ model.h.T
    return np.linalg.norm(r, axis=-1)


def bdd_threshold(model: MeasurementModel, alpha: float = 0.01) -> float:
    """Residual-norm threshold giving false-alarm rate ``alpha`` under Gaussian noise."""
    if not 0 < alpha < 1:
        raise ValueError(f"alpha must lie in (0, 1), got {alpha}")
    dof = model.m - model.n_states
    if dof <= 0:
        raise ValueError("no measurement redundancy (m <= n-1)")
    return model.noise_sigma * float(np.sqrt(stats.chi2.ppf(1.0 - alpha, dof)))


def bdd_check(model: MeasurementModel, z, alpha: float = 0.01, estimator: WlsEstimator | None = None) -> BddResult:
    est = estimator or WlsEstimator(model)
    x_hat = est.estimate(z)
    return BddResult(float(bdd_residual(model, z, x_hat)), bdd_threshold(model, alpha))
