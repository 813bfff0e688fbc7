import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from lmpcc.vehicle import (ControlInput, FialaParams, MismatchCorrection, PacejkaAxle, PlantParams, SingularityError,
                           VehicleParams, VehicleState, ZERO_CORRECTION, dynamics_jacobians, fiala_lateral_force,
                           nominal_derivatives, pacejka_lateral_force, plant_initial_state, plant_step, rk4_step,
                           slip_angles)

VP = VehicleParams()
FP = FialaParams.from_vehicle(VP)

# values frozen from a 40-digit mpmath evaluation of the closed forms
ALPHA_F_ORACLE = 0.04796318687707670
ALPHA_R_ORACLE = 0.011999424049761282
FIALA_ORACLE = -2816.297160844020
PACEJKA_ORACLE = -3600.218088583190
DERIV_ORACLE = [16.989192659597971, 5.9880992622920366, 0.25, 0.91912179948372161, -6.1590199749410840,
                0.44612932677127352]


def test_slip_angles_examples():
    assert slip_angles(VehicleState(v_x=15.0), ControlInput(), VP) == (0.0, 0.0)
    af, ar = slip_angles(VehicleState(v_x=15.0), ControlInput(delta=0.05), VP)
    assert af == pytest.approx(-0.05, abs=1e-15) and ar == 0.0
    af, ar = slip_angles(VehicleState(v_x=15.0, v_y=0.5, r=0.2), ControlInput(), VP)
    assert af == pytest.approx(ALPHA_F_ORACLE, rel=1e-14)
    assert ar == pytest.approx(ALPHA_R_ORACLE, rel=1e-14)


def test_slip_angles_reject_low_speed():
    with pytest.raises(SingularityError):
        slip_angles(VehicleState(v_x=0.4), ControlInput(), VP)
    slip_angles(VehicleState(v_x=0.3), ControlInput(), VP, v_eps=0.2)


def test_fiala_examples():
    assert fiala_lateral_force(0.0, 80e3, 4000.0, 1.0) == 0.0
    assert fiala_lateral_force(0.05, 80e3, 4000.0, 1.0) == pytest.approx(FIALA_ORACLE, rel=1e-13)
    a_sl = math.atan(3 * 4000.0 / 80e3)
    for a in (a_sl, a_sl + 1e-3, 0.5):
        assert fiala_lateral_force(a, 80e3, 4000.0, 1.0) == pytest.approx(-4000.0, rel=1e-12)
    with pytest.raises(ValueError):
        fiala_lateral_force(0.1, -1.0, 4000.0, 1.0)


@given(st.floats(-1.2, 1.2), st.floats(1e4, 2e5), st.floats(1e3, 1e4), st.floats(0.3, 1.5))
def test_fiala_odd_and_bounded(alpha, c, fz, mu):
    f = fiala_lateral_force(alpha, c, fz, mu)
    assert abs(f) <= mu * fz * (1 + 1e-12)
    assert fiala_lateral_force(-alpha, c, fz, mu) == pytest.approx(-f, abs=1e-9)


def test_fiala_monotone_and_continuous():
    c, fz, mu = 80e3, 4000.0, 1.0
    a_sl = math.atan(3 * mu * fz / c)
    a = np.linspace(0.0, a_sl, 2001)
    f = fiala_lateral_force(a, c, fz, mu)
    assert np.all(np.diff(f) <= 1e-9)
    # continuity at the sliding angle
    eps = 1e-9
    assert abs(fiala_lateral_force(a_sl - eps, c, fz, mu) - fiala_lateral_force(a_sl + eps, c, fz, mu)) < 1e-4


def test_pacejka_examples():
    p = PacejkaAxle(B=10.0, C=1.5, D=4000.0, E=-1.0)
    assert pacejka_lateral_force(0.0, p) == 0.0
    assert pacejka_lateral_force(0.08, p) == pytest.approx(PACEJKA_ORACLE, rel=1e-13)
    a = np.linspace(-0.6, 0.6, 41)
    np.testing.assert_allclose(pacejka_lateral_force(-a, p), -pacejka_lateral_force(a, p), atol=1e-9)


def test_nominal_derivatives_oracle():
    s = VehicleState(3.0, -1.0, 0.3, 18.0, 0.7, 0.25)
    d = nominal_derivatives(s, ControlInput(0.04, 1200.0), MismatchCorrection(150.0, -80.0, 0.01), VP, FP)
    np.testing.assert_allclose(d, DERIV_ORACLE, rtol=1e-13, atol=1e-13)


def test_equilibrium_and_yaw_correction_coupling():
    v = 15.0
    s = VehicleState(v_x=v)
    u = ControlInput(0.0, VP.drag_coeff * v * v)
    d = nominal_derivatives(s, u, ZERO_CORRECTION, VP, FP)
    np.testing.assert_allclose(d[2:], 0.0, atol=1e-12)
    assert d[0] == v
    d = nominal_derivatives(s, u, MismatchCorrection(dr=0.02), VP, FP)
    assert d[4] == pytest.approx(-0.02 * v, rel=1e-14)
    assert d[3] == pytest.approx(0.0, abs=1e-12)
    assert d[5] == pytest.approx(0.0, abs=1e-12)


def test_zero_correction_is_bitwise_nominal():
    s = VehicleState(1.0, 2.0, 0.1, 20.0, 0.3, -0.1)
    u = ControlInput(0.02, 500.0)
    a = nominal_derivatives(s, u, ZERO_CORRECTION, VP, FP)
    b = nominal_derivatives(s, u, MismatchCorrection(0.0, 0.0, 0.0), VP, FP)
    assert a.tobytes() == b.tobytes()


def test_rk4_trivial_cases():
    v = 15.0
    s = VehicleState(v_x=v)
    u = ControlInput(0.0, VP.drag_coeff * v * v)
    s1 = rk4_step(s, u, ZERO_CORRECTION, 0.05, VP, FP)
    assert s1.X == pytest.approx(v * 0.05, rel=1e-14)
    assert (s1.Y, s1.psi, s1.v_y, s1.r) == (0.0, 0.0, 0.0, 0.0)
    assert s1.v_x == pytest.approx(v, abs=1e-12)
    assert rk4_step(s, u, ZERO_CORRECTION, 0.0, VP, FP) == s
    with pytest.raises(ValueError):
        rk4_step(s, u, ZERO_CORRECTION, -0.1, VP, FP)


def rk4_order(state, inp, corr, T=0.4):
    """Observed order from a Richardson sequence of step halvings."""
    sols = []
    for n in (4, 8, 16, 32):
        x = state
        for _ in range(n):
            x = rk4_step(x, inp, corr, T / n, VP, FP)
        sols.append(x.as_array())
    e1 = np.linalg.norm(sols[1] - sols[0])
    e2 = np.linalg.norm(sols[2] - sols[1])
    e3 = np.linalg.norm(sols[3] - sols[2])
    return math.log2(e1 / e2), math.log2(e2 / e3)


def test_rk4_convergence_order():
    o1, o2 = rk4_order(VehicleState(0, 0, 0.1, 20.0, 0.4, 0.3), ControlInput(0.05, 800.0),
                       MismatchCorrection(100.0, -50.0, 0.01))
    assert min(o1, o2) >= 3.9


def _jacobian_fd(s, u, c, h=1e-6):
    def f(vy, r, dF, dR):
        d = nominal_derivatives(VehicleState(s.X, s.Y, s.psi, s.v_x, vy, r), u,
                                MismatchCorrection(dF, dR, c.dr), VP, FP)
        return d[[4, 5]]
    base = (s.v_y, s.r, c.dFyF, c.dFyR)
    cols = []
    for i, step in enumerate((h, h, 1.0, 1.0)):
        p = list(base)
        m = list(base)
        p[i] += step
        m[i] -= step
        cols.append((f(*p) - f(*m)) / (2 * step))
    J = np.column_stack(cols)
    return J[:, :2], J[:, 2:]


def random_operating_points(n, seed=0):
    rng = np.random.default_rng(seed)
    for _ in range(n):
        s = VehicleState(0.0, 0.0, rng.uniform(-0.5, 0.5), rng.uniform(5.0, 30.0), rng.uniform(-1.0, 1.0),
                         rng.uniform(-0.5, 0.5))
        u = ControlInput(rng.uniform(-0.3, 0.3), rng.uniform(-5000.0, 3000.0))
        c = MismatchCorrection(rng.uniform(-500, 500), rng.uniform(-500, 500), rng.uniform(-0.05, 0.05))
        yield s, u, c


def jacobian_agreement(n=1000, seed=0, rtol=1e-5):
    """Fraction of random points where analytic and central-difference Jacobians agree."""
    ok = 0
    skipped = 0
    for s, u, c in random_operating_points(n, seed):
        af, ar = slip_angles(s, u, VP)
        # the Fiala slope has a kink at the sliding angle; skip points within the FD stencil of it
        a_sl_f = math.atan(3 * VP.mu * FP.F_z_f / FP.C_alpha_f)
        a_sl_r = math.atan(3 * VP.mu * FP.F_z_r / FP.C_alpha_r)
        if min(abs(abs(af) - a_sl_f), abs(abs(ar) - a_sl_r)) < 1e-5:
            skipped += 1
            continue
        A, B = dynamics_jacobians(s, u, c, VP, FP)
        Af, Bf = _jacobian_fd(s, u, c)
        scale = np.maximum(np.abs(Af), 1e-3 * np.max(np.abs(Af)))
        if np.all(np.abs(A - Af) <= rtol * scale + 1e-9) and np.allclose(B, Bf, rtol=1e-9, atol=1e-12):
            ok += 1
    return ok, n - skipped


def test_jacobians_match_finite_differences():
    ok, total = jacobian_agreement(200, seed=1)
    assert ok == total


def test_jacobian_B_at_zero_steer():
    _, B = dynamics_jacobians(VehicleState(v_x=15.0), ControlInput(), ZERO_CORRECTION, VP, FP)
    np.testing.assert_allclose(B[0], [1 / VP.m, 1 / VP.m])
    np.testing.assert_allclose(B[1], [VP.l_f / VP.I_zz, -VP.l_r / VP.I_zz])


def test_plant_equilibrium():
    v = 15.0
    pp = PlantParams.default(VP, FP)
    ps = plant_initial_state(VehicleState(v_x=v), 0.0, VP.drag_coeff * v * v, VP, pp)
    ps2, meas = plant_step(ps, ControlInput(0.0, VP.drag_coeff * v * v), 0.05, VP, pp)
    assert meas.fy_f == 0.0 and meas.fy_r == 0.0 and meas.r == 0.0
    assert ps2.vehicle.v_x == pytest.approx(v, abs=1e-12)
    assert ps2.vehicle.Y == 0.0


@pytest.mark.parametrize("substeps, tol", [(1, 1e-12), (5, 2e-6)])
def test_plant_matches_nominal_model_in_linear_regime(substeps, tol):
    pp = PlantParams.nominal_equivalent(VP, FP, substeps=substeps, noise_fy=0.0, noise_r=0.0)
    s = VehicleState(v_x=15.0)
    u = ControlInput(0.004, 120.0)
    ps = plant_initial_state(s, u.delta, u.F_x, VP, pp)
    x = s
    for _ in range(10):
        ps, _ = plant_step(ps, u, 0.05, VP, pp)
        x = rk4_step(x, u, ZERO_CORRECTION, 0.05, VP, FP)
        af, ar = slip_angles(x, u, VP)
        assert max(abs(af), abs(ar)) < 0.01
    # with one substep the integrators coincide; five substeps differ by the RK4 truncation error
    assert np.max(np.abs(ps.vehicle.as_array() - x.as_array())) < tol


def test_steering_lag_time_constant():
    pp = PlantParams.default(VP, FP)
    tau = pp.pacejka.steer_tau
    dt = tau / 10
    ps = plant_initial_state(VehicleState(v_x=15.0), 0.0, 0.0, VP, pp)
    for _ in range(10):
        ps, _ = plant_step(ps, ControlInput(0.05, 0.0), dt, VP, pp)
    assert ps.delta / 0.05 == pytest.approx(1 - math.exp(-1), abs=0.02)


def test_plant_coasting_never_speeds_up():
    pp = PlantParams.default(VP, FP)
    ps = plant_initial_state(VehicleState(v_x=20.0), 0.0, 0.0, VP, pp)
    v = [ps.vehicle.v_x]
    for _ in range(60):
        ps, _ = plant_step(ps, ControlInput(0.0, 0.0), 0.05, VP, pp)
        v.append(ps.vehicle.v_x)
    assert np.all(np.diff(v) < 0)


def test_plant_noise_only_with_rng():
    pp = PlantParams.default(VP, FP, noise_fy=50.0, noise_r=0.005)
    ps = plant_initial_state(VehicleState(v_x=15.0), 0.0, 0.0, VP, pp)
    _, m0 = plant_step(ps, ControlInput(0.01, 0.0), 0.05, VP, pp)
    _, m1 = plant_step(ps, ControlInput(0.01, 0.0), 0.05, VP, pp, np.random.default_rng(0))
    assert m0 != m1
    _, m2 = plant_step(ps, ControlInput(0.01, 0.0), 0.05, VP, pp, np.random.default_rng(0))
    assert m1 == m2


def test_parameter_validation():
    with pytest.raises(ValueError):
        VehicleParams(m=-1.0)
    with pytest.raises(ValueError):
        FialaParams(0.0, 1.0, 1.0, 1.0)
    with pytest.raises(ValueError):
        PacejkaAxle(B=10.0, C=1.5, D=-1.0, E=0.0)


@settings(max_examples=50, deadline=None)
@given(st.floats(5.0, 30.0), st.floats(-1.0, 1.0), st.floats(-0.5, 0.5), st.floats(-0.3, 0.3))
def test_jacobian_property(vx, vy, r, delta):
    s = VehicleState(0, 0, 0, vx, vy, r)
    u = ControlInput(delta, 0.0)
    af, ar = slip_angles(s, u, VP)
    a_sl = math.atan(3 * VP.mu * FP.F_z_f / FP.C_alpha_f)
    if min(abs(abs(af) - a_sl), abs(abs(ar) - math.atan(3 * VP.mu * FP.F_z_r / FP.C_alpha_r))) < 1e-5:
        return
    A, _ = dynamics_jacobians(s, u, ZERO_CORRECTION, VP, FP)
    Af, _ = _jacobian_fd(s, u, ZERO_CORRECTION)
    np.testing.assert_allclose(A, Af, rtol=1e-5, atol=1e-6 * np.max(np.abs(Af)))
