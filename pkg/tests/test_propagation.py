import numpy as np
import pytest
from hypothesis import given, settings, strategies as st
from scipy.linalg import solve_discrete_lyapunov

from lmpcc.propagation import (IDELTA, IVX, IVY, LateralCovariance, StageDisturbance, horizon_sensitivities,
                               propagate_horizon, propagate_step)
from lmpcc.stp import KernelHyper, STPModel
from lmpcc.vehicle import ControlInput, FialaParams, MismatchCorrection, VehicleParams, VehicleState, dynamics_jacobians

VP = VehicleParams()
FP = FialaParams.from_vehicle(VP)
DT = 0.05


def random_case(rng):
    L = rng.normal(size=(2, 2)) * [[0.1], [0.02]]
    cov = LateralCovariance.from_matrix(L @ L.T)
    A = rng.normal(size=(2, 2)) * [[5.0, 15.0], [2.0, 5.0]]
    _, B = dynamics_jacobians(VehicleState(v_x=rng.uniform(10, 25)), ControlInput(rng.uniform(-0.2, 0.2)),
                              MismatchCorrection(), VP, FP)
    dist = StageDisturbance(*(rng.uniform(0, 1) * np.array([300.0**2, 200.0**2, 0.01**2])))
    return cov, A, B, dist, rng.uniform(10, 25)


def monte_carlo_check(seed, samples=100_000):
    """Largest deviation, in standard errors, between propagate_step and sampling the linear map."""
    rng = np.random.default_rng(seed)
    cov, A, B, dist, vx = random_case(rng)
    out = propagate_step(cov, A, B, dist, DT, vx).as_matrix()
    x = rng.multivariate_normal(np.zeros(2), cov.as_matrix(), size=samples)
    w = rng.normal(size=(samples, 3)) * np.sqrt([dist.var_FyF, dist.var_FyR, dist.var_r])
    Ad = np.eye(2) + A * DT
    x1 = x @ Ad.T + DT * (w[:, :2] @ B.T) + DT * np.outer(-vx * w[:, 2], [1.0, 0.0])
    emp = x1.T @ x1 / samples
    # standard error of a second moment of zero-mean Gaussians: sqrt((S_ii S_jj + S_ij^2) / n)
    se = np.sqrt((np.outer(np.diag(out), np.diag(out)) + out**2) / samples)
    return float(np.max(np.abs(emp - out) / se))


def test_zero_system_is_identity():
    cov = LateralCovariance(0.3, 0.2, 0.1)
    out = propagate_step(cov, np.zeros((2, 2)), np.zeros((2, 2)), StageDisturbance(), DT)
    assert out == cov


def test_hand_oracle_at_zero_steer():
    q = 1e4
    _, B = dynamics_jacobians(VehicleState(v_x=15.0), ControlInput(), MismatchCorrection(), VP, FP)
    out = propagate_step(LateralCovariance(), np.zeros((2, 2)), B, StageDisturbance(q, q, 0.0), DT)
    assert out.s_vyvy == pytest.approx(DT**2 * q * 2 / VP.m**2, rel=1e-14)
    assert out.s_rr == pytest.approx(DT**2 * q * (VP.l_f**2 + VP.l_r**2) / VP.I_zz**2, rel=1e-14)
    assert out.s_vyr == pytest.approx(DT**2 * q * (VP.l_f - VP.l_r) / (VP.m * VP.I_zz), rel=1e-12)


def test_yaw_mismatch_injects_into_lateral_velocity_only():
    out = propagate_step(LateralCovariance(), np.zeros((2, 2)), np.zeros((2, 2)), StageDisturbance(0, 0, 1e-4), DT,
                         v_x=20.0)
    assert out.s_vyvy == pytest.approx(DT**2 * 400.0 * 1e-4)
    assert out.s_rr == 0.0 and out.s_vyr == 0.0
    with pytest.raises(ValueError):
        propagate_step(LateralCovariance(), np.zeros((2, 2)), np.zeros((2, 2)), StageDisturbance(0, 0, 1e-4), DT)


@pytest.mark.parametrize("seed", range(5))
def test_monte_carlo_agreement(seed):
    assert monte_carlo_check(seed) < 3.0


def test_lyapunov_closed_form():
    Ad_target = np.array([[0.9, 0.05], [-0.02, 0.85]])
    A = (Ad_target - np.eye(2)) / DT
    _, B = dynamics_jacobians(VehicleState(v_x=15.0), ControlInput(0.05), MismatchCorrection(), VP, FP)
    dist = StageDisturbance(250.0**2, 150.0**2, 0.0)
    Q = DT**2 * B @ np.diag([dist.var_FyF, dist.var_FyR]) @ B.T
    S_inf = solve_discrete_lyapunov(Ad_target, Q)
    S0 = np.array([[1e-3, 2e-4], [2e-4, 5e-4]])
    cov = LateralCovariance.from_matrix(S0)
    for k in range(1, 41):
        cov = propagate_step(cov, A, B, dist, DT)
        Ak = np.linalg.matrix_power(Ad_target, k)
        closed = Ak @ (S0 - S_inf) @ Ak.T + S_inf
        np.testing.assert_allclose(cov.as_matrix(), closed, rtol=1e-10, atol=1e-16)


def test_stable_system_contracts_without_disturbance():
    A = (np.array([[0.9, 0.05], [-0.02, 0.85]]) - np.eye(2)) / DT
    cov = LateralCovariance(1.0, 0.5, 0.2)
    norms = []
    for _ in range(20):
        cov = propagate_step(cov, A, np.zeros((2, 2)), StageDisturbance(), DT)
        norms.append(np.linalg.norm(cov.as_matrix()))
    assert np.all(np.diff(norms) < 0)


@settings(max_examples=300, deadline=None)
@given(st.integers(0, 2**31))
def test_psd_preserved(seed):
    rng = np.random.default_rng(seed)
    cov, A, B, dist, vx = random_case(rng)
    w = np.linalg.eigvalsh(propagate_step(cov, A, B, dist, DT, vx).as_matrix())
    assert w.min() >= -1e-12


def test_psd_preserved_bulk():
    rng = np.random.default_rng(123)
    worst = 0.0
    for _ in range(10_000):
        cov, A, B, dist, vx = random_case(rng)
        worst = min(worst, np.linalg.eigvalsh(propagate_step(cov, A, B, dist, DT, vx).as_matrix()).min())
    assert worst >= -1e-12


def straight_trajectory(n, v=18.0, delta=0.02):
    X = np.zeros((n, 9))
    X[:, 0] = v * DT * np.arange(n)
    X[:, IVX] = v
    X[:, IVY] = 0.1
    X[:, IDELTA] = delta
    return X


def constant_models(var):
    """GP models whose predictive variance is ``var`` everywhere (far from their single datum)."""
    out = {}
    for ch, v in zip(("dfyf", "dfyr", "dr"), var):
        h = KernelHyper(np.full(6, 1e-3), v, v)
        out[ch] = STPModel.from_normalised(np.full((1, 6), 1e6), np.zeros(1), h, kind="gp", channel=ch)
    return out


def test_horizon_zero_variance_gives_zero_sigmas():
    X = straight_trajectory(30)
    corr = np.zeros((30, 3))
    svy, sr = propagate_horizon(X, corr, None, 20, VP, FP, DT, variances=np.zeros((20, 3)))
    assert np.all(svy == 0) and np.all(sr == 0) and len(svy) == 20


def test_horizon_sigma_accumulates_and_stays_finite():
    X = straight_trajectory(30)
    corr = np.zeros((30, 3))
    svy, sr = propagate_horizon(X, corr, constant_models((200.0**2, 200.0**2, 0.01**2)), 20, VP, FP, DT)
    assert svy[0] == 0 and sr[0] == 0
    assert np.all(np.diff(svy) >= 0)
    assert np.all(np.isfinite(svy)) and np.all(np.isfinite(sr))
    with pytest.raises(ValueError):
        propagate_horizon(X[:10], corr, None, 20, VP, FP, DT)


def test_sensitivity_values_match_horizon():
    X = straight_trajectory(30)
    corr = np.zeros((30, 3))
    models = constant_models((200.0**2, 150.0**2, 0.01**2))
    svy, sr = propagate_horizon(X, corr, models, 20, VP, FP, DT)
    svy2, sr2, gvy, gr = horizon_sensitivities(X, corr, models, 20, VP, FP, DT)
    np.testing.assert_allclose(svy2, svy, rtol=1e-12)
    np.testing.assert_allclose(sr2, sr, rtol=1e-12)
    assert gvy.shape == (20, 20, 5)
    # a stage's sigma only depends on earlier stages
    for k in range(20):
        assert np.all(gvy[k, k:] == 0)
