import dataclasses

import numpy as np
import pytest

from lmpcc.mpcc import (IS, NU, NX, Controller, ControllerVariant, OCPConfig, SigmaModel, TERMS,
                        build_ocp, collision_priority_weights, enforce_sigma_rule, initial_guess,
                        n_decision_variables, solve, stage_cost)
from lmpcc.qp import solve_qp
from lmpcc.solver import GaussNewtonSQP, OCProblem
from lmpcc.track import dlc_scenario, straight_scenario
from lmpcc.vehicle import FialaParams, Measurement, VehicleParams, VehicleState

VP = VehicleParams()
FP = FialaParams.from_vehicle(VP)


# ---------------------------------------------------------------------------
# QP and SQP on problems with closed-form answers


def test_qp_matches_kkt_solution():
    rng = np.random.default_rng(0)
    M = rng.normal(size=(6, 6))
    H = M @ M.T + np.eye(6)
    g = rng.normal(size=6)
    x_free = np.linalg.solve(H, -g)
    res = solve_qp(H, g)
    np.testing.assert_allclose(res.x, x_free, rtol=1e-8, atol=1e-10)
    # one active bound: x0 <= x_free0 - 1
    G = np.zeros((1, 6))
    G[0, 0] = 1.0
    h = np.array([x_free[0] - 1.0])
    res = solve_qp(H, g, G, h)
    assert res.status == "optimal"
    assert res.x[0] == pytest.approx(h[0], abs=1e-7)
    # stationarity with the bound multiplier
    np.testing.assert_allclose(H @ res.x + g + G.T @ res.z, 0.0, atol=1e-6)
    assert res.z[0] > 0


class DoubleIntegrator(OCProblem):
    """Exactly discretised double integrator with quadratic costs on x_{k+1} and u_k."""

    def __init__(self, N=20, dt=0.1, q=(1.0, 0.5), r=0.1):
        self.N, self.nx, self.nu = N, 2, 1
        self.A = np.array([[1.0, dt], [0.0, 1.0]])
        self.B = np.array([[0.5 * dt * dt], [dt]])
        self.sq = np.sqrt(np.asarray(q))
        self.sr = np.sqrt(r)
        inf = np.inf
        self.x_lb, self.x_ub = np.array([-inf, -inf]), np.array([inf, inf])
        self.u_lb, self.u_ub = np.array([-inf]), np.array([inf])
        self.x_scale, self.u_scale = np.ones(2), np.ones(1)

    def step(self, X, U):
        return X @ self.A.T + U @ self.B.T

    def residuals(self, Xn, U):
        return np.concatenate([Xn * self.sq, U * self.sr], axis=-1)


def lqr_oracle(prob, x0):
    Q, R = np.diag(prob.sq**2), np.array([[prob.sr**2]])
    A, B = prob.A, prob.B
    P = Q.copy()
    gains = []
    for _ in range(prob.N):
        K = np.linalg.solve(R + B.T @ P @ B, B.T @ P @ A)
        gains.append(K)
        P = Q + A.T @ P @ (A - B @ K)
    gains.reverse()
    x, us = x0, []
    for K in gains:
        u = -K @ x
        us.append(u)
        x = A @ x + B @ u
    return np.array(us)


def test_sqp_matches_lqr():
    prob = DoubleIntegrator()
    x0 = np.array([1.0, -0.5])
    res = GaussNewtonSQP().solve(prob, x0, np.zeros((prob.N, 2)), np.zeros((prob.N, 1)))
    assert res.status == "converged"
    np.testing.assert_allclose(res.U, lqr_oracle(prob, x0), atol=1e-4)


def test_sqp_respects_input_bounds():
    prob = DoubleIntegrator()
    prob.u_lb, prob.u_ub = np.array([-0.5]), np.array([0.5])
    res = GaussNewtonSQP().solve(prob, np.array([3.0, 0.0]), np.zeros((prob.N, 2)), np.zeros((prob.N, 1)))
    assert np.all(np.abs(res.U) <= 0.5 + 1e-6)
    assert np.min(res.U) < -0.49


# ---------------------------------------------------------------------------
# cost, OCP construction and priority scheduling


def on_path_state(sc, s=10.0):
    v = sc.v_ref
    return np.array([s, 0.0, 0.0, v, 0.0, 0.0, s, 0.0, VP.drag_coeff * v * v])


def test_stage_cost_examples():
    sc = straight_scenario(55.0)
    zero = OCPConfig(**{f.name: 0.0 for f in dataclasses.fields(OCPConfig) if f.name.startswith("q_")})
    x = on_path_state(sc)
    x[1] = 0.5
    assert stage_cost(x, [0.3, 100.0, 5.0], sc, zero, VP, (1.0, 1.0)) == 0.0
    cfg = OCPConfig()
    assert stage_cost(on_path_state(sc), np.zeros(3), sc, cfg, VP, (0.0, 0.0)) == 0.0
    only_con = dataclasses.replace(zero, q_eCon=1.0)
    assert stage_cost(x, np.zeros(3), sc, only_con, VP) == pytest.approx(0.25, abs=1e-14)
    with_sigma = dataclasses.replace(zero, q_sigma_vy=2.0, q_sigma_r=3.0)
    assert stage_cost(x, np.zeros(3), sc, with_sigma, VP, (0.5, 0.1), k=3) == pytest.approx(2 * 0.25 + 3 * 0.01)
    assert stage_cost(x, np.zeros(3), sc, with_sigma, VP, (0.5, 0.1), k=25) == 0.0


def test_ocp_config_validation():
    assert OCPConfig().horizon_time == pytest.approx(1.5)
    with pytest.raises(ValueError):
        OCPConfig(N=10, N_prob=20)
    with pytest.raises(ValueError):
        OCPConfig(q_eCon=-1.0)
    with pytest.raises(ValueError):
        OCPConfig(dt=0.0)


def test_decision_variable_count():
    assert n_decision_variables(OCPConfig()) == 30 * (NX + NU)


@pytest.mark.parametrize("seed", range(5))
def test_qp_infeasible_rows_do_not_raise(seed):
    # contradictory rows drive slacks to zero; the solver must report, not crash
    rng = np.random.default_rng(seed)
    n = 20
    A = rng.normal(size=(n, n))
    H = A @ A.T + np.eye(n)
    g = rng.normal(size=n) * 1e3
    row = rng.normal(size=n)
    G = np.vstack([rng.normal(size=(40, n)), row, -row])
    h = np.concatenate([np.abs(rng.normal(size=40)) * 1e4, [-1.0], [-1.0]])
    res = solve_qp(H, g, G, h)
    assert res.status not in ("optimal", "optimal_inaccurate")
    assert np.all(np.isfinite(res.x))


def test_build_ocp_rejects_infeasible_bounds():
    with pytest.raises(ValueError):
        build_ocp(straight_scenario(55.0), OCPConfig(fx_min=6000.0, fx_max=5000.0), "mpcc", VP, FP)


def fake_sigma(cfg, value=0.3):
    n = cfg.N_prob
    return SigmaModel(np.zeros((cfg.N + 1, NX)), np.full(n, value), np.full(n, value),
                      np.zeros((n, n, 5)), np.zeros((n, n, 5)))


def test_baseline_variant_drops_learning_terms():
    sc, cfg = dlc_scenario(55.0), OCPConfig()
    corr = np.full((cfg.N, 3), 100.0)
    base = build_ocp(sc, cfg, ControllerVariant.MPCC, VP, FP, corr, fake_sigma(cfg))
    assert np.all(base.corr == 0) and base.sigma is None and base.affine_residuals(np.zeros((31, NX))) is None


def test_zero_learning_terms_give_bitwise_identical_ocps():
    sc, cfg = dlc_scenario(55.0), OCPConfig()
    a = build_ocp(sc, cfg, "mpcc", VP, FP)
    b = build_ocp(sc, cfg, "lmpcc-stp", VP, FP, np.zeros((cfg.N, 3)), None)
    rng = np.random.default_rng(0)
    X = on_path_state(sc) + rng.normal(scale=0.1, size=(cfg.N, 1, NX))
    U = rng.normal(scale=0.1, size=(cfg.N, 1, NU))
    assert a.step(X, U).tobytes() == b.step(X, U).tobytes()
    assert a.residuals(X, U).tobytes() == b.residuals(X, U).tobytes()
    for name in ("x_lb", "x_ub", "u_lb", "u_ub"):
        assert getattr(a, name).tobytes() == getattr(b, name).tobytes()


def test_priority_weights_examples():
    cfg = OCPConfig()
    out, active = collision_priority_weights(cfg, 10.0)
    assert out == enforce_sigma_rule(cfg) and not active
    out, active = collision_priority_weights(cfg, 0.5)
    assert active
    assert out.q_eObs == 10 * cfg.q_eObs and out.q_eEdg == 10 * cfg.q_eEdg
    assert out.q_eCon == pytest.approx(0.1 * cfg.q_eCon) and out.q_eVel == pytest.approx(0.1 * cfg.q_eVel)


def test_priority_hysteresis_on_scripted_trace():
    cfg = OCPConfig()
    t = np.arange(400)
    # slow ramp down and up with a +-0.1 m ripple around every level
    clearance = 4.0 - 3.0 * np.sin(np.pi * t / 400) + 0.1 * np.sign(np.sin(t))
    active, states = False, []
    for c in clearance:
        _, active = collision_priority_weights(cfg, c, active)
        states.append(active)
    switches = int(np.sum(np.diff(np.array(states, dtype=int)) != 0))
    # oracle: one switch per crossing of the on threshold (downwards) or the off threshold (upwards)
    on, off = cfg.priority_clearance, cfg.priority_clearance + cfg.priority_hysteresis
    crossings = int(np.any(clearance < on)) + int(np.any((clearance > off) & (t > np.argmax(clearance < on))))
    assert switches <= crossings == 2


def test_sigma_rule_caps_sigma_cost():
    cfg = OCPConfig(q_sigma_vy=1e4, q_sigma_r=1e4)
    out = enforce_sigma_rule(cfg)
    assert out.sigma_cost_ceiling() == pytest.approx(out.obstacle_cost_ceiling())
    assert out.q_sigma_vy / out.q_sigma_r == pytest.approx(1.0)
    small = OCPConfig(q_sigma_vy=0.1, q_sigma_r=0.1)
    assert enforce_sigma_rule(small) == small


def test_sigma_model_clips_to_ceiling():
    cfg = OCPConfig()
    (svy, gvy), (sr, gr) = fake_sigma(cfg, 5.0).evaluate(np.zeros((31, NX)), cfg)
    assert np.all(svy == cfg.sigma_vy_max) and np.all(sr == cfg.sigma_r_max)
    assert np.all(gvy == 0)


# ---------------------------------------------------------------------------
# solving


def test_straight_on_speed_converges_immediately():
    sc = straight_scenario(55.0)
    prob = build_ocp(sc, OCPConfig(), "mpcc", VP, FP)
    x0 = on_path_state(sc, 0.0)
    sol = solve(prob, x0)
    assert sol.status == "converged" and sol.iterations <= 3 and sol.objective < 1e-10


def test_solution_invariants_on_dlc():
    sc, cfg = dlc_scenario(60.0, True), OCPConfig()
    prob = build_ocp(sc, cfg, "lmpcc-stp", VP, FP, np.full((cfg.N, 3), [300.0, -200.0, 0.005]), fake_sigma(cfg))
    x0 = on_path_state(sc, 60.0)
    x0[4], x0[5] = 0.3, 0.1
    sol = solve(prob, x0)
    assert sol.status in ("converged", "degraded")
    assert sol.dynamics_residual(prob) < 1e-6
    total = sum(float(np.sum(v)) for v in sol.costs.values())
    assert total == pytest.approx(sol.objective, rel=1e-8, abs=1e-8)
    assert set(sol.costs) == set(TERMS)
    tol = 1e-6
    assert np.all(sol.X[1:, 7] <= cfg.delta_max + tol) and np.all(sol.X[1:, 7] >= -cfg.delta_max - tol)
    assert np.all(np.abs(sol.U[:, 0]) <= cfg.ddelta_max + tol)
    assert np.all(sol.U[:, 2] >= -tol)
    # merit descent: every accepted step lowers the merit measured at the next iterate's penalty
    assert sol.merit_trace[-1] <= sol.merit_trace[0]


def test_warm_start_needs_no_more_iterations_than_cold():
    sc, cfg = dlc_scenario(55.0), OCPConfig()
    ctl = Controller(sc, cfg, "mpcc", VP, FP)
    v = sc.v_ref
    ctl.reset(0.0, VP.drag_coeff * v * v)
    state = VehicleState(v_x=v)
    warm_it, cold_it = [], []
    # 200 cycles cover the first lane change
    for _ in range(200):
        _, _, sol, diag = ctl.step(state, Measurement(0.0, 0.0, state.r))
        warm_it.append(diag["iterations"])
        # cold start of the same cycle from a rollout
        prob = build_ocp(sc, enforce_sigma_rule(cfg), "mpcc", VP, FP)
        cold_it.append(solve(prob, sol.X[0]).iterations)
        state = VehicleState.from_array(sol.X[1])
    assert np.median(warm_it) <= np.median(cold_it)


def test_controller_requires_matching_models():
    with pytest.raises(ValueError):
        Controller(straight_scenario(55.0), OCPConfig(), "lmpcc-stp", VP, FP, None)


def test_initial_guess_is_a_rollout():
    sc = straight_scenario(55.0)
    prob = build_ocp(sc, OCPConfig(), "mpcc", VP, FP)
    x0 = on_path_state(sc, 0.0)
    X, U = initial_guess(prob, x0)
    assert X.shape == (30, NX) and U.shape == (30, NU)
    assert X[-1, IS] == pytest.approx(30 * 0.05 * sc.v_ref)
