"""Single-track vehicle models.

Two models share the state ``(X, Y, psi, v_x, v_y, r)``:

* the nominal prediction model (Fiala brush tyres, additive mismatch terms on
  the lateral tyre forces and on the yaw rate used in the velocity coupling),
* a surrogate plant with Pacejka tyres, a first-order steering actuator,
  first-order tyre-force relaxation and optional friction-ellipse derating.

The array kernels (``_fiala``, ``_derivatives`` ...) are complex-step safe:
branch selection always looks at the real part, so the OCP can differentiate
through them with an imaginary perturbation.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

GRAVITY = 9.81
V_EPS = 0.5

STATE_FIELDS = ("X", "Y", "psi", "v_x", "v_y", "r")


class SingularityError(ValueError):
    """Raised when the slip angles are evaluated below the low-speed guard."""


@dataclass(frozen=True)
class VehicleParams:
    m: float = 1500.0
    I_zz: float = 2500.0
    l_f: float = 1.1
    l_r: float = 1.6
    drag_coeff: float = 0.5 * 1.225 * 0.3 * 2.2
    fx_front_ratio: float = 0.6
    mu: float = 1.0
    width: float = 1.8

    def __post_init__(self):
        if self.m <= 0 or self.I_zz <= 0:
            raise ValueError("mass and yaw inertia must be positive")
        if self.l_f <= 0 or self.l_r <= 0:
            raise ValueError("axle distances must be positive")
        if not 0.0 <= self.fx_front_ratio <= 1.0:
            raise ValueError("fx_front_ratio must lie in [0, 1]")
        if self.mu <= 0:
            raise ValueError("mu must be positive")

    @property
    def wheelbase(self) -> float:
        return self.l_f + self.l_r

    def static_loads(self) -> tuple[float, float]:
        """Static front/rear axle loads from the CoG position."""
        w = self.m * GRAVITY
        return w * self.l_r / self.wheelbase, w * self.l_f / self.wheelbase


@dataclass(frozen=True)
class FialaParams:
    C_alpha_f: float
    C_alpha_r: float
    F_z_f: float
    F_z_r: float

    def __post_init__(self):
        if min(self.C_alpha_f, self.C_alpha_r, self.F_z_f, self.F_z_r) <= 0:
            raise ValueError("Fiala parameters must be strictly positive")

    @classmethod
    def from_vehicle(cls, vp: VehicleParams, C_alpha_f=80e3, C_alpha_r=80e3):
        fz_f, fz_r = vp.static_loads()
        return cls(C_alpha_f, C_alpha_r, fz_f, fz_r)


@dataclass(frozen=True)
class VehicleState:
    X: float = 0.0
    Y: float = 0.0
    psi: float = 0.0
    v_x: float = 10.0
    v_y: float = 0.0
    r: float = 0.0

    def as_array(self) -> np.ndarray:
        return np.array([self.X, self.Y, self.psi, self.v_x, self.v_y, self.r])

    @classmethod
    def from_array(cls, x) -> "VehicleState":
        return cls(*(float(v) for v in np.asarray(x, dtype=float)[:6]))

    @property
    def sideslip(self) -> float:
        return float(np.arctan2(self.v_y, self.v_x))


@dataclass(frozen=True)
class ControlInput:
    delta: float = 0.0
    F_x: float = 0.0

    def as_array(self) -> np.ndarray:
        return np.array([self.delta, self.F_x])


@dataclass(frozen=True)
class MismatchCorrection:
    dFyF: float = 0.0
    dFyR: float = 0.0
    dr: float = 0.0

    def as_array(self) -> np.ndarray:
        return np.array([self.dFyF, self.dFyR, self.dr])


ZERO_CORRECTION = MismatchCorrection()


@dataclass(frozen=True)
class PacejkaAxle:
    B: float
    C: float
    D: float
    E: float

    def __post_init__(self):
        if self.D <= 0:
            raise ValueError("Pacejka peak factor D must be positive")

    @classmethod
    def matched(cls, c_alpha: float, peak_force: float, C: float = 1.5, E: float = 0.0):
        """Axle whose small-slip slope B*C*D equals ``c_alpha``."""
        return cls(B=c_alpha / (C * peak_force), C=C, D=peak_force, E=E)


@dataclass(frozen=True)
class PacejkaParams:
    """Surrogate-plant tyre and actuator parameters.

    ``relax_length = 0`` and ``steer_tau = 0`` switch the respective lag off
    (algebraic force / instantaneous actuator).
    """

    front: PacejkaAxle
    rear: PacejkaAxle
    relax_length: float = 0.5
    steer_tau: float = 0.05

    def __post_init__(self):
        if self.relax_length < 0 or self.steer_tau < 0:
            raise ValueError("relax_length and steer_tau must be non-negative")


@dataclass(frozen=True)
class PlantParams:
    """Everything the surrogate plant needs beyond :class:`VehicleParams`.

    ``tyre`` selects ``"pacejka"`` or ``"fiala"``; the latter together with
    zero lags and ``combined_slip=False`` makes the plant identical to the
    nominal model.
    """

    pacejka: PacejkaParams
    fiala: FialaParams
    tyre: str = "pacejka"
    combined_slip: bool = True
    substeps: int = 5
    noise_fy: float = 50.0
    noise_r: float = 0.005

    def __post_init__(self):
        if self.tyre not in ("pacejka", "fiala"):
            raise ValueError(f"unknown plant tyre model {self.tyre!r}")
        if self.substeps < 1:
            raise ValueError("substeps must be >= 1")

    @classmethod
    def default(cls, vp: VehicleParams, fp: FialaParams | None = None, **kw):
        fp = fp or FialaParams.from_vehicle(vp)
        # grip and stiffness deliberately below the nominal tyre
        pac = PacejkaParams(
            front=PacejkaAxle.matched(0.9 * fp.C_alpha_f, 0.9 * vp.mu * fp.F_z_f, C=1.6, E=-0.5),
            rear=PacejkaAxle.matched(0.95 * fp.C_alpha_r, 0.9 * vp.mu * fp.F_z_r, C=1.6, E=-0.5),
        )
        return cls(pacejka=pac, fiala=fp, **kw)

    @classmethod
    def nominal_equivalent(cls, vp: VehicleParams, fp: FialaParams, **kw):
        """Plant that reproduces the nominal model exactly (no lags, no noise)."""
        pac = PacejkaParams(
            front=PacejkaAxle.matched(fp.C_alpha_f, vp.mu * fp.F_z_f),
            rear=PacejkaAxle.matched(fp.C_alpha_r, vp.mu * fp.F_z_r),
            relax_length=0.0,
            steer_tau=0.0,
        )
        kw.setdefault("noise_fy", 0.0)
        kw.setdefault("noise_r", 0.0)
        return cls(pacejka=pac, fiala=fp, tyre="fiala", combined_slip=False, **kw)


# ---------------------------------------------------------------------------
# tyre models


def _fiala(alpha, c_alpha, f_z, mu):
    t = np.tan(alpha)
    mfz = mu * f_z
    sgn = np.sign(np.real(t))
    brush = -c_alpha * t + c_alpha**2 / (3.0 * mfz) * sgn * t * t - c_alpha**3 / (27.0 * mfz**2) * t**3
    return np.where(np.abs(np.real(t)) < 3.0 * mfz / c_alpha, brush, -sgn * mfz)


def _fiala_slope(alpha, c_alpha, f_z, mu):
    """dF/dalpha of the Fiala model."""
    t = np.tan(alpha)
    mfz = mu * f_z
    at = np.abs(t)
    d = (-c_alpha + 2.0 * c_alpha**2 * at / (3.0 * mfz) - c_alpha**3 * t * t / (9.0 * mfz**2)) * (1.0 + t * t)
    return np.where(at < 3.0 * mfz / c_alpha, d, 0.0)


def fiala_lateral_force(alpha, C_alpha: float, F_z: float, mu: float):
    """Fiala brush-model lateral force.

    Cubic in ``tan(alpha)`` up to the full-sliding angle
    ``atan(3 mu F_z / C_alpha)`` and saturated at ``-sign(alpha) mu F_z``
    beyond it. Accepts scalars or arrays.
    """
    if C_alpha <= 0 or F_z <= 0 or mu <= 0:
        raise ValueError("C_alpha, F_z and mu must be positive")
    out = _fiala(np.asarray(alpha, dtype=float), C_alpha, F_z, mu)
    return float(out) if out.ndim == 0 else out


def _pacejka(alpha, B, C, D, E):
    ba = B * alpha
    return -D * np.sin(C * np.arctan(ba - E * (ba - np.arctan(ba))))


def pacejka_lateral_force(alpha, p: PacejkaAxle):
    """Magic-formula lateral force ``-D sin(C atan(B a - E (B a - atan(B a))))``."""
    out = _pacejka(np.asarray(alpha, dtype=float), p.B, p.C, p.D, p.E)
    return float(out) if out.ndim == 0 else out


# ---------------------------------------------------------------------------
# nominal model


def _slip_angles(vx, vy, r, delta, l_f, l_r):
    alpha_f = np.arctan((vy + l_f * r) / vx) - delta
    alpha_r = np.arctan((vy - l_r * r) / vx)
    return alpha_f, alpha_r


def slip_angles(state: VehicleState, inp: ControlInput, params: VehicleParams, v_eps: float = V_EPS):
    """Front and rear kinematic slip angles ``(alpha_f, alpha_r)`` [rad]."""
    if state.v_x < v_eps:
        raise SingularityError(f"v_x={state.v_x:.3g} below low-speed guard {v_eps}")
    af, ar = _slip_angles(state.v_x, state.v_y, state.r, inp.delta, params.l_f, params.l_r)
    return float(af), float(ar)


def nominal_axle_forces(x, u, vp: VehicleParams, fp: FialaParams):
    """Fiala lateral axle forces for stacked states ``x[..., 6]`` and inputs ``u[..., 2]``."""
    af, ar = _slip_angles(x[..., 3], x[..., 4], x[..., 5], u[..., 0], vp.l_f, vp.l_r)
    return _fiala(af, fp.C_alpha_f, fp.F_z_f, vp.mu), _fiala(ar, fp.C_alpha_r, fp.F_z_r, vp.mu)


def _body_derivatives(x, delta, fx, fyf, fyr, dr, vp: VehicleParams):
    psi, vx, vy, r = x[..., 2], x[..., 3], x[..., 4], x[..., 5]
    fxf = vp.fx_front_ratio * fx
    fxr = (1.0 - vp.fx_front_ratio) * fx
    cd, sd = np.cos(delta), np.sin(delta)
    drag = vp.drag_coeff * vx * vx
    reff = r + dr
    dvx = (fxf * cd - fyf * sd + fxr - drag) / vp.m + reff * vy
    dvy = (fxf * sd + fyf * cd + fyr) / vp.m - reff * vx
    dr_ = (fyf * cd * vp.l_f - fyr * vp.l_r + fxf * sd * vp.l_f) / vp.I_zz
    dX = vx * np.cos(psi) - vy * np.sin(psi)
    dY = vx * np.sin(psi) + vy * np.cos(psi)
    return np.stack([dX, dY, r, dvx, dvy, dr_], axis=-1)


def _derivatives(x, u, corr, vp: VehicleParams, fp: FialaParams):
    fyf, fyr = nominal_axle_forces(x, u, vp, fp)
    return _body_derivatives(x, u[..., 0], u[..., 1], fyf + corr[..., 0], fyr + corr[..., 1], corr[..., 2], vp)


def nominal_derivatives(state: VehicleState, inp: ControlInput, corr: MismatchCorrection,
                        vp: VehicleParams, fp: FialaParams) -> np.ndarray:
    """State derivative of the corrected single-track model.

    Returns ``(dX, dY, dpsi, dv_x, dv_y, dr)``. The lateral-force corrections
    add to the Fiala forces; the yaw-rate correction only enters the
    ``(r + dr) * v`` coupling terms.
    """
    slip_angles(state, inp, vp)
    return _derivatives(state.as_array(), inp.as_array(), corr.as_array(), vp, fp)


def _rk4(f, x, dt):
    k1 = f(x)
    k2 = f(x + 0.5 * dt * k1)
    k3 = f(x + 0.5 * dt * k2)
    k4 = f(x + dt * k3)
    return x + dt / 6.0 * (k1 + 2.0 * k2 + 2.0 * k3 + k4)


def rk4_step(state: VehicleState, inp: ControlInput, corr: MismatchCorrection, dt: float,
             vp: VehicleParams, fp: FialaParams) -> VehicleState:
    """Advance the nominal model by one classical Runge-Kutta step."""
    if dt < 0:
        raise ValueError("dt must be non-negative")
    if dt == 0:
        return state
    slip_angles(state, inp, vp)
    u, c = inp.as_array(), corr.as_array()
    x = _rk4(lambda z: _derivatives(z, u, c, vp, fp), state.as_array(), dt)
    return VehicleState.from_array(x)


def dynamics_jacobians(state: VehicleState, inp: ControlInput, corr: MismatchCorrection,
                       vp: VehicleParams, fp: FialaParams):
    """Analytic lateral Jacobians.

    ``A = d(dv_y, dr)/d(v_y, r)`` and ``B = d(dv_y, dr)/d(dFyF, dFyR)``.
    """
    slip_angles(state, inp, vp)
    return _lateral_jacobians(state.v_x, state.v_y, state.r, inp.delta, corr.dr, vp, fp)


def _lateral_jacobians(vx, vy, r, delta, dr, vp: VehicleParams, fp: FialaParams):
    """Vectorised version of :func:`dynamics_jacobians`; returns ``(..., 2, 2)`` arrays."""
    vx, vy, r, delta, dr = np.broadcast_arrays(*(np.asarray(a, dtype=float) for a in (vx, vy, r, delta, dr)))
    af, ar = _slip_angles(vx, vy, r, delta, vp.l_f, vp.l_r)
    sf = _fiala_slope(af, fp.C_alpha_f, fp.F_z_f, vp.mu)
    sr = _fiala_slope(ar, fp.C_alpha_r, fp.F_z_r, vp.mu)
    gf = vx / (vx * vx + (vy + vp.l_f * r) ** 2)
    gr = vx / (vx * vx + (vy - vp.l_r * r) ** 2)
    cd = np.cos(delta)
    A = np.empty(vx.shape + (2, 2))
    A[..., 0, 0] = (sf * gf * cd + sr * gr) / vp.m
    A[..., 0, 1] = (sf * gf * vp.l_f * cd - sr * gr * vp.l_r) / vp.m - vx
    A[..., 1, 0] = (sf * gf * cd * vp.l_f - sr * gr * vp.l_r) / vp.I_zz
    A[..., 1, 1] = (sf * gf * vp.l_f * cd * vp.l_f + sr * gr * vp.l_r * vp.l_r) / vp.I_zz
    B = np.empty(vx.shape + (2, 2))
    B[..., 0, 0] = cd / vp.m
    B[..., 0, 1] = 1.0 / vp.m
    B[..., 1, 0] = cd * vp.l_f / vp.I_zz
    B[..., 1, 1] = -vp.l_r / vp.I_zz
    return A, B


# ---------------------------------------------------------------------------
# surrogate plant


@dataclass(frozen=True)
class PlantState:
    vehicle: VehicleState
    delta: float = 0.0
    fy_f: float = 0.0
    fy_r: float = 0.0


@dataclass(frozen=True)
class Measurement:
    """What the force-sensing bearings and the yaw-rate gyro report."""

    fy_f: float
    fy_r: float
    r: float


def _plant_steady_forces(x, delta, fx, vp: VehicleParams, pp: PlantParams):
    af, ar = _slip_angles(x[3], x[4], x[5], delta, vp.l_f, vp.l_r)
    if pp.tyre == "fiala":
        fp = pp.fiala
        fyf = _fiala(af, fp.C_alpha_f, fp.F_z_f, vp.mu)
        fyr = _fiala(ar, fp.C_alpha_r, fp.F_z_r, vp.mu)
    else:
        pf, pr = pp.pacejka.front, pp.pacejka.rear
        fyf = _pacejka(af, pf.B, pf.C, pf.D, pf.E)
        fyr = _pacejka(ar, pr.B, pr.C, pr.D, pr.E)
    if pp.combined_slip:
        # friction ellipse: longitudinal force use eats lateral capacity
        fzf, fzr = pp.fiala.F_z_f, pp.fiala.F_z_r
        uf = vp.fx_front_ratio * fx / (vp.mu * fzf)
        ur = (1.0 - vp.fx_front_ratio) * fx / (vp.mu * fzr)
        fyf = fyf * np.sqrt(max(0.0, 1.0 - uf * uf))
        fyr = fyr * np.sqrt(max(0.0, 1.0 - ur * ur))
    return fyf, fyr


def _plant_rhs(z, cmd, vp: VehicleParams, pp: PlantParams):
    delta_cmd, fx = cmd
    x = z[:6]
    tau = pp.pacejka.steer_tau
    delta = z[6] if tau > 0 else delta_cmd
    fss_f, fss_r = _plant_steady_forces(x, delta, fx, vp, pp)
    if pp.pacejka.relax_length > 0:
        fyf, fyr = z[7], z[8]
        k = x[3] / pp.pacejka.relax_length
        dfy = (k * (fss_f - fyf), k * (fss_r - fyr))
    else:
        fyf, fyr = fss_f, fss_r
        dfy = (0.0, 0.0)
    body = _body_derivatives(x, delta, fx, fyf, fyr, 0.0, vp)
    ddelta = (delta_cmd - z[6]) / tau if tau > 0 else 0.0
    return np.concatenate([body, [ddelta, dfy[0], dfy[1]]])


def plant_initial_state(state: VehicleState, delta: float, fx: float, vp: VehicleParams, pp: PlantParams) -> PlantState:
    """Plant state with actuator and tyre forces at their steady values."""
    fyf, fyr = _plant_steady_forces(state.as_array(), delta, fx, vp, pp)
    return PlantState(state, float(delta), float(fyf), float(fyr))


def plant_step(ps: PlantState, cmd: ControlInput, dt: float, vp: VehicleParams, pp: PlantParams,
               rng: np.random.Generator | None = None):
    """Advance the surrogate plant by ``dt`` with ``pp.substeps`` RK4 substeps.

    Returns the new :class:`PlantState` and a :class:`Measurement`. Additive
    Gaussian noise is applied to the measurement only when ``rng`` is given.
    """
    if dt <= 0:
        raise ValueError("dt must be positive")
    if ps.vehicle.v_x < V_EPS:
        raise SingularityError(f"plant v_x={ps.vehicle.v_x:.3g} below low-speed guard")
    u = (cmd.delta, cmd.F_x)
    z = np.concatenate([ps.vehicle.as_array(), [ps.delta, ps.fy_f, ps.fy_r]])
    h = dt / pp.substeps
    for _ in range(pp.substeps):
        z = _rk4(lambda q: _plant_rhs(q, u, vp, pp), z, h)
    if pp.pacejka.steer_tau <= 0:
        z[6] = cmd.delta
    if pp.pacejka.relax_length <= 0:
        z[7], z[8] = _plant_steady_forces(z[:6], z[6], cmd.F_x, vp, pp)
    new = PlantState(VehicleState.from_array(z[:6]), float(z[6]), float(z[7]), float(z[8]))
    meas = Measurement(new.fy_f, new.fy_r, new.vehicle.r)
    if rng is not None and (pp.noise_fy > 0 or pp.noise_r > 0):
        n = rng.standard_normal(3)
        meas = Measurement(meas.fy_f + pp.noise_fy * n[0], meas.fy_r + pp.noise_fy * n[1], meas.r + pp.noise_r * n[2])
    return new, meas

