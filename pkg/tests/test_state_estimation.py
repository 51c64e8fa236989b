import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from fdia_imaging.grid_case import Branch, Bus, BusType, Generator, GridCase, MeasurementModel, build_dc_model, parse_case
from fdia_imaging.state_estimation import (
    PowerFlowError,
    UnobservableError,
    WlsEstimator,
    bdd_check,
    bdd_residual,
    bdd_threshold,
    dc_power_flow,
    wls_estimate,
)

from conftest import TWO_BUS, grid_cases


def chi2_cdf(x, k):
    """Regularized lower incomplete gamma P(k/2, x/2) by its power series."""
    a, y = k / 2.0, x / 2.0
    if y <= 0:
        return 0.0
    term = 1.0 / a
    total = term
    n = 0
    while abs(term) > 1e-17 * abs(total):
        n += 1
        term *= y / (a + n)
        total += term
    return math.exp(-y + a * math.log(y) - math.lgamma(a)) * total


def chi2_quantile(p, k):
    lo, hi = 0.0, 1.0
    while chi2_cdf(hi, k) < p:
        hi *= 2
    for _ in range(200):
        mid = 0.5 * (lo + hi)
        if chi2_cdf(mid, k) < p:
            lo = mid
        else:
            hi = mid
    return 0.5 * (lo + hi)


def toy_model(h, sigma=1.0):
    h = np.asarray(h, dtype=float)
    m, n = h.shape
    dummy = tuple(Branch(1, 2, 1.0) for _ in range(m))
    return MeasurementModel(h, np.full(m, sigma ** 2), dummy, tuple(range(2, n + 2)), 1, sigma)


def triangle_case():
    buses = [Bus(1, BusType.SLACK, 0.0), Bus(2, BusType.PQ, 50.0), Bus(3, BusType.PQ, 70.0)]
    branches = [Branch(1, 2, 0.1), Branch(2, 3, 0.2), Branch(1, 3, 0.25)]
    return GridCase(100.0, buses, branches, [Generator(1, 300.0)])


# --- power flow ---------------------------------------------------------------

def test_two_bus_power_flow():
    theta, flows = dc_power_flow(parse_case(TWO_BUS), [0.0, 1.0])
    np.testing.assert_allclose(theta, [-0.5], atol=1e-15)
    np.testing.assert_allclose(flows, [1.0], atol=1e-15)


def test_zero_load(case57):
    theta, flows = dc_power_flow(case57, np.zeros(57))
    assert not theta.any() and not flows.any()


def test_case57_nodal_balance(case57):
    loads = case57.nominal_loads_pu()
    theta, flows = dc_power_flow(case57, loads)
    cap = sum(g.pmax_mw for g in case57.generators)
    gen = {b.id: 0.0 for b in case57.buses}
    for g in case57.generators:
        gen[g.bus] += loads.sum() * g.pmax_mw / cap
    net = {b.id: 0.0 for b in case57.buses}
    for br, f in zip(case57.active_branches, flows):
        net[br.from_bus] += f
        net[br.to_bus] -= f
    for bus, load in zip(case57.buses, loads):
        if bus.id == case57.slack_bus:
            continue
        assert abs(net[bus.id] - (gen[bus.id] - load)) <= 1e-9
    # flows recomputed from angles with the slack at zero
    ang = {case57.slack_bus: 0.0}
    ang.update(zip([b.id for b in case57.buses if b.id != case57.slack_bus], theta))
    for br, f in zip(case57.active_branches, flows):
        assert abs((ang[br.from_bus] - ang[br.to_bus]) / br.reactance_pu - f) <= 1e-9


def test_batched_power_flow_matches_rows(case57):
    rng = np.random.default_rng(3)
    loads = case57.nominal_loads_pu() * rng.uniform(0.5, 1.5, size=(4, 57))
    theta, flows = dc_power_flow(case57, loads)
    for i in range(4):
        t1, f1 = dc_power_flow(case57, loads[i])
        np.testing.assert_allclose(theta[i], t1, atol=1e-14)
        np.testing.assert_allclose(flows[i], f1, atol=1e-14)


def test_no_capacity_with_load():
    case = parse_case(TWO_BUS.replace("1   100   1   250", "1   100   1   0"))
    with pytest.raises(PowerFlowError, match="zero total generation capacity"):
        dc_power_flow(case, [0.0, 1.0])


# --- WLS ------------------------------------------------------------------------

def test_hand_solved_wls():
    model = toy_model([[1.0], [1.0]])
    np.testing.assert_allclose(wls_estimate(model, [1.0, 3.0]), [2.0], atol=1e-15)


def test_noise_free_recovery_case57(model57):
    rng = np.random.default_rng(0)
    est = WlsEstimator(model57)
    for _ in range(100):
        x = rng.uniform(-0.6, 0.6, size=56)
        np.testing.assert_allclose(est.estimate(model57.h @ x), x, rtol=0, atol=1e-9)


@settings(max_examples=100, deadline=None)
@given(grid_cases(min_buses=3), st.integers(0, 2 ** 31 - 1))
def test_noise_free_recovery_random_cases(case, seed):
    model = build_dc_model(case, 0.02)
    x = np.random.default_rng(seed).uniform(-0.5, 0.5, size=model.n_states)
    np.testing.assert_allclose(wls_estimate(model, model.h @ x), x, rtol=0, atol=1e-9)


def test_residual_orthogonality(model57):
    rng = np.random.default_rng(1)
    est = WlsEstimator(model57)
    z = rng.normal(size=(50, 80))
    r = z - est.estimate(z) @ model57.h.T
    grad = (r / model57.w_diag) @ model57.h
    assert np.abs(grad).max() <= 1e-8


def test_weight_scaling_invariance(case57):
    rng = np.random.default_rng(2)
    z = rng.normal(size=80)
    a = wls_estimate(build_dc_model(case57, 0.02), z)
    b = wls_estimate(build_dc_model(case57, 7.3), z)
    np.testing.assert_allclose(a, b, rtol=0, atol=1e-10)


def test_batch_estimate_matches_single(model57):
    rng = np.random.default_rng(4)
    z = rng.normal(size=(5, 80))
    est = WlsEstimator(model57)
    batch = est.estimate(z)
    for i in range(5):
        np.testing.assert_allclose(batch[i], est.estimate(z[i]), atol=1e-14)


def test_unobservable():
    with pytest.raises(UnobservableError):
        WlsEstimator(toy_model([[1.0, 1.0], [2.0, 2.0], [3.0, 3.0]]))


# --- bad data detection -------------------------------------------------------

def test_noise_free_residual_zero(model57):
    x = np.random.default_rng(5).uniform(-0.3, 0.3, size=56)
    z = model57.h @ x
    assert bdd_residual(model57, z, wls_estimate(model57, z)) <= 1e-9


def test_threshold_one_dof():
    model = build_dc_model(triangle_case(), 0.05)
    assert model.m - model.n_states == 1
    assert bdd_threshold(model, 0.3173) == pytest.approx(0.05 * 1.0, rel=1e-4)
    assert bdd_threshold(model, 1 - math.erf(1 / math.sqrt(2))) == pytest.approx(0.05, rel=1e-9)


def test_threshold_case57_matches_oracle(model57):
    dof = 80 - 56
    assert dof == 24
    for alpha in (0.01, 0.05, 0.3):
        expected = 0.02 * math.sqrt(chi2_quantile(1 - alpha, dof))
        assert bdd_threshold(model57, alpha) == pytest.approx(expected, rel=1e-6)


def test_threshold_monotone(model57):
    alphas = [0.5, 0.1, 0.01, 1e-4, 1e-8, 1e-12]
    taus = [bdd_threshold(model57, a) for a in alphas]
    assert all(b > a for a, b in zip(taus, taus[1:]))


@pytest.mark.parametrize("alpha", [0.0, 1.0, -0.1, 2.0])
def test_threshold_alpha_range(model57, alpha):
    with pytest.raises(ValueError):
        bdd_threshold(model57, alpha)


def test_gross_error_flagged(case57, model57):
    rng = np.random.default_rng(11)
    _, flows = dc_power_flow(case57, case57.nominal_loads_pu())
    z = flows + rng.normal(0, 0.02, size=80)
    z[17] += 10 * 0.02
    res = bdd_check(model57, z, alpha=0.01)
    assert res.flagged
    assert res.residual_norm > res.threshold


def redundancy(model):
    """1 - h_ii: the share of a single-meter error that survives into the residual."""
    h = model.h
    hat = h @ np.linalg.solve(h.T @ h, h.T)
    return 1.0 - np.diag(hat)


def test_detection_power_redundant_meters(case57, model57):
    # Meters whose 10-sigma errors the test should catch with near certainty are caught.
    from scipy import stats

    _, flows = dc_power_flow(case57, case57.nominal_loads_pu())
    est = WlsEstimator(model57)
    tau = bdd_threshold(model57, 0.01)
    power = stats.ncx2.sf((tau / 0.02) ** 2, 24, 100 * redundancy(model57))
    meters = np.flatnonzero(power >= 0.995)
    assert len(meters) >= 5
    flagged = 0
    for trial in range(100):
        rng = np.random.default_rng([99, trial])
        z = flows + rng.normal(0, 0.02, size=80)
        z[rng.choice(meters)] += rng.choice([-1, 1]) * 10 * 0.02
        flagged += bdd_residual(model57, z, est.estimate(z)) > tau
    assert flagged >= 99


def test_critical_meter_is_invisible(model57):
    # A meter with zero redundancy is fully absorbed by the estimate.
    red = redundancy(model57)
    j = int(np.argmin(red))
    assert red[j] < 1e-9
    g = np.zeros(80)
    g[j] = 10 * 0.02
    assert bdd_residual(model57, g, wls_estimate(model57, g)) < 1e-9


def test_detection_rate_matches_noncentral_chi2(case57, model57):
    from scipy import stats

    _, flows = dc_power_flow(case57, case57.nominal_loads_pu())
    est = WlsEstimator(model57)
    tau = bdd_threshold(model57, 0.01)
    red = redundancy(model57)
    rng = np.random.default_rng(5)
    for j in (int(np.argsort(red)[40]), int(np.argmax(red))):
        z = flows + rng.normal(0, 0.02, size=(4000, 80))
        z[:, j] += 10 * 0.02
        rate = np.mean(bdd_residual(model57, z, est.estimate(z)) > tau)
        theory = stats.ncx2.sf((tau / 0.02) ** 2, 24, 100 * red[j])
        assert abs(rate - theory) < 0.03


def test_false_alarm_rate_near_alpha(case57, model57):
    rng = np.random.default_rng(12)
    _, flows = dc_power_flow(case57, case57.nominal_loads_pu())
    z = flows + rng.normal(0, 0.02, size=(20000, 80))
    res = bdd_residual(model57, z, wls_estimate(model57, z))
    rate = np.mean(res > bdd_threshold(model57, 0.05))
    assert abs(rate - 0.05) < 0.01
