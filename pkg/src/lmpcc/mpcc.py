"""Contouring MPC with learned mismatch correction and uncertainty cost.

OCP state ``(X, Y, psi, v_x, v_y, r, s, delta, F_x)``; controls
``(delta_dot, F_x_dot, s_dot)``. The steering angle and drive force are
states so that their rates can be penalised exactly. Over interval ``k``
the vehicle sees the updated inputs ``delta_{k+1}, F_x_{k+1}``, which is
also what the plant receives when stage 1 is applied.
"""
from __future__ import annotations

import enum
import logging
from dataclasses import dataclass, field, replace

import numpy as np

from .propagation import IDELTA, IFX, IVX, SENS_IDX, channel_means, horizon_sensitivities, stage_features
from .solver import GaussNewtonSQP, OCProblem, SolverOptions, SQPResult, rollout
from .stp import CHANNELS, augment
from .track import Scenario, _contouring_lag, _ellipse_distance, obstacle_clearance, project
from .vehicle import (FialaParams, Measurement, VehicleParams, VehicleState, _derivatives, _rk4,
                      nominal_axle_forces)

logger = logging.getLogger(__name__)

NX, NU = 9, 3
IS = 6
TERMS = ("obs", "edg", "ddelta", "dfx", "con", "lag", "vel", "sigma_vy", "sigma_r")


class ControllerVariant(str, enum.Enum):
    MPCC = "mpcc"
    LMPCC_GP = "lmpcc-gp"
    LMPCC_STP = "lmpcc-stp"

    @property
    def learning(self) -> bool:
        return self is not ControllerVariant.MPCC


@dataclass(frozen=True)
class OCPConfig:
    """Horizon, weights and bounds; all values are repo defaults."""

    N: int = 30
    N_prob: int = 20
    dt: float = 0.05
    q_eObs: float = 500.0
    q_eEdg: float = 200.0
    q_ddelta: float = 50.0
    q_dFx: float = 1e-6
    q_eCon: float = 1.0
    q_eLag: float = 10.0
    q_eVel: float = 0.5
    q_sigma_r: float = 20.0
    q_sigma_vy: float = 20.0
    delta_max: float = 0.5
    ddelta_max: float = 0.6
    fx_min: float = -10000.0
    fx_max: float = 5000.0
    dfx_max: float = 15000.0
    vx_min: float = 2.0
    sdot_factor: float = 1.5
    priority_multiplier: float = 10.0
    tracking_scale: float = 0.1
    priority_clearance: float = 2.0
    priority_hysteresis: float = 0.5
    sigma_vy_max: float = 0.5
    sigma_r_max: float = 0.5
    hinge_width: float = 0.01
    max_iter: int = 50
    kkt_tol: float = 1e-6
    online_window: int = 20

    def __post_init__(self):
        if not self.N >= self.N_prob >= 1:
            raise ValueError("need N >= N_prob >= 1")
        if self.dt <= 0:
            raise ValueError("dt must be positive")
        for name in self.__dataclass_fields__:
            if name.startswith("q_") and getattr(self, name) < 0:
                raise ValueError(f"{name} must be non-negative")
        if self.delta_max <= 0 or self.ddelta_max <= 0 or self.dfx_max <= 0:
            raise ValueError("input and rate bounds must be positive")
        if self.fx_min >= self.fx_max:
            raise ValueError("fx_min must be below fx_max")
        if self.sigma_vy_max <= 0 or self.sigma_r_max <= 0:
            raise ValueError("sigma ceilings must be positive")

    @property
    def horizon_time(self) -> float:
        return self.N * self.dt

    def sigma_cost_ceiling(self) -> float:
        """Largest total sigma cost the clipped residuals can produce."""
        return (self.N_prob - 1) * (self.q_sigma_vy * self.sigma_vy_max**2 + self.q_sigma_r * self.sigma_r_max**2)

    def obstacle_cost_ceiling(self) -> float:
        """Cost of one stage at full penetration of one obstacle (hinge = 1)."""
        return self.q_eObs


def n_decision_variables(cfg: OCPConfig) -> int:
    return cfg.N * (NX + NU)


def enforce_sigma_rule(cfg: OCPConfig) -> OCPConfig:
    """Scale the sigma weights down so their ceiling stays below the obstacle ceiling."""
    ceil = cfg.sigma_cost_ceiling()
    obs = cfg.obstacle_cost_ceiling()
    if ceil <= obs or ceil == 0:
        return cfg
    f = obs / ceil
    return replace(cfg, q_sigma_vy=cfg.q_sigma_vy * f, q_sigma_r=cfg.q_sigma_r * f)


def collision_priority_weights(cfg: OCPConfig, min_clearance: float, active: bool = False):
    """Return ``(cfg', active')`` for the current predicted clearance.

    Switches on below ``priority_clearance`` and off only above
    ``priority_clearance + priority_hysteresis``. When on, obstacle and edge
    weights are multiplied and contouring/velocity weights scaled down.
    """
    if active:
        active = not min_clearance > cfg.priority_clearance + cfg.priority_hysteresis
    else:
        active = min_clearance < cfg.priority_clearance
    if active:
        m, t = cfg.priority_multiplier, cfg.tracking_scale
        cfg = replace(cfg, q_eObs=cfg.q_eObs * m, q_eEdg=cfg.q_eEdg * m, q_eCon=cfg.q_eCon * t,
                      q_eVel=cfg.q_eVel * t)
    return enforce_sigma_rule(cfg), active


def _hinge(x, w):
    """Hinge ``max(0, x)`` with a quadratic blend on ``(0, w)``; complex-step safe."""
    xr = np.real(x)
    return np.where(xr <= 0, 0.0 * x, np.where(xr < w, x * x / (2.0 * w), x - 0.5 * w))


def stage_terms(Xn, U, scenario: Scenario, cfg: OCPConfig, vp: VehicleParams):
    """Square-root-weighted residuals of the tracking and safety terms.

    ``Xn`` is the stage state (``(..., 9)``), ``U`` the rates. Returns a dict
    term -> residual array ``(..., m)``; the stage cost is the sum of
    squares.
    """
    x, y, vx, s = Xn[..., 0], Xn[..., 1], Xn[..., IVX], Xn[..., IS]
    px, py, tx, ty = scenario.spline.frame(s)
    e_con, e_lag = _contouring_lag(x, y, px, py, tx, ty)
    w = cfg.hinge_width
    out = {}
    if scenario.obstacles:
        out["obs"] = np.sqrt(cfg.q_eObs) * np.stack(
            [_hinge(1.0 - _ellipse_distance(x, y, ob, ob.margin), w) for ob in scenario.obstacles], axis=-1)
    else:
        out["obs"] = np.zeros(np.shape(x) + (0,))
    left, right = scenario.edges.lookup(s)
    half = 0.5 * vp.width
    out["edg"] = np.sqrt(cfg.q_eEdg) * np.stack(
        [_hinge(e_con - (left - half), w), _hinge((right + half) - e_con, w)], axis=-1)
    out["ddelta"] = np.sqrt(cfg.q_ddelta) * U[..., 0:1]
    out["dfx"] = np.sqrt(cfg.q_dFx) * U[..., 1:2]
    out["con"] = np.sqrt(cfg.q_eCon) * e_con[..., None]
    out["lag"] = np.sqrt(cfg.q_eLag) * e_lag[..., None]
    out["vel"] = np.sqrt(cfg.q_eVel) * (vx - scenario.v_ref)[..., None]
    return out


def stage_cost(state, rates, scenario: Scenario, cfg: OCPConfig, vp: VehicleParams,
               sigmas=None, k: int = 0) -> float:
    """Cost of one stage: quadratic tracking, hinge safety and sigma terms.

    ``state`` is a 9-vector, ``rates`` the 3 controls and ``sigmas`` the
    ``(sigma_vy, sigma_r)`` pair at this stage, used only for ``k < N_prob``.
    """
    terms = stage_terms(np.asarray(state, dtype=float), np.asarray(rates, dtype=float), scenario, cfg, vp)
    c = float(sum(np.sum(np.real(v) ** 2) for v in terms.values()))
    if sigmas is not None and k < cfg.N_prob:
        c += cfg.q_sigma_vy * sigmas[0] ** 2 + cfg.q_sigma_r * sigmas[1] ** 2
    return c


@dataclass
class SigmaModel:
    """Affine model of the propagated sigmas around a reference trajectory.

    ``sig[j] + sum_i g[j, i, c] (x_i - xbar_i)[SENS_IDX[c]]``, clipped to
    ``[0, ceiling]``; index ``j`` is the OCP state index.
    """

    xbar: np.ndarray
    sig_vy: np.ndarray
    sig_r: np.ndarray
    g_vy: np.ndarray
    g_r: np.ndarray

    def evaluate(self, Xall, cfg: OCPConfig):
        n = len(self.sig_vy)
        dx = (Xall[:n] - self.xbar[:n])[:, SENS_IDX]
        lin_vy = self.sig_vy + np.einsum("jic,ic->j", self.g_vy, dx)
        lin_r = self.sig_r + np.einsum("jic,ic->j", self.g_r, dx)
        out = []
        for lin, g, cap in ((lin_vy, self.g_vy, cfg.sigma_vy_max), (lin_r, self.g_r, cfg.sigma_r_max)):
            inside = (lin > 0) & (lin < cap)
            out.append((np.clip(lin, 0.0, cap), g * inside[:, None, None]))
        return out


class MPCCProblem(OCProblem):
    """Multiple-shooting contouring OCP in the form the SQP expects."""

    def __init__(self, scenario: Scenario, cfg: OCPConfig, vp: VehicleParams, fp: FialaParams,
                 corr=None, sigma: SigmaModel | None = None):
        self.scenario, self.cfg, self.vp, self.fp = scenario, cfg, vp, fp
        self.N = cfg.N
        self.nx, self.nu = NX, NU
        self.corr = np.zeros((cfg.N, 3)) if corr is None else np.asarray(corr, dtype=float)
        if self.corr.shape != (cfg.N, 3):
            raise ValueError("corrections must have shape (N, 3)")
        self.sigma = sigma
        inf = np.inf
        self.x_lb = np.array([-inf, -inf, -inf, cfg.vx_min, -inf, -inf, -inf, -cfg.delta_max, cfg.fx_min])
        self.x_ub = np.array([inf, inf, inf, inf, inf, inf, inf, cfg.delta_max, cfg.fx_max])
        self.u_lb = np.array([-cfg.ddelta_max, -cfg.dfx_max, 0.0])
        self.u_ub = np.array([cfg.ddelta_max, cfg.dfx_max, cfg.sdot_factor * scenario.v_ref])
        if np.any(self.x_lb > self.x_ub) or np.any(self.u_lb > self.u_ub):
            raise ValueError("infeasible bounds")
        self.x_scale = np.array([1.0, 1.0, 0.1, 1.0, 0.1, 0.1, 1.0, 0.05, 1000.0])
        self.u_scale = np.array([0.5, 5000.0, 10.0])

    def step(self, X, U):
        return self.advance(X, U, self.corr[:, None, :] if X.ndim == 3 else self.corr)

    def advance(self, X, U, c):
        """Dynamics with an explicit (broadcastable) correction array."""
        dt = self.cfg.dt
        delta = X[..., IDELTA] + dt * U[..., 0]
        fx = X[..., IFX] + dt * U[..., 1]
        u = np.stack([delta, fx], axis=-1)
        veh = _rk4(lambda z: _derivatives(z, u, c, self.vp, self.fp), X[..., :6], dt)
        s = X[..., IS] + dt * U[..., 2]
        return np.concatenate([veh, s[..., None], delta[..., None], fx[..., None]], axis=-1)

    def residuals(self, Xn, U):
        terms = stage_terms(Xn, U, self.scenario, self.cfg, self.vp)
        return np.concatenate([terms[t] for t in TERMS[:7]], axis=-1)

    def affine_residuals(self, Xall):
        if self.sigma is None:
            return None
        cfg = self.cfg
        (svy, gvy), (sr, gr) = self.sigma.evaluate(Xall, cfg)
        n = len(svy)
        G = np.zeros((2 * n, cfg.N + 1, NX))
        G[:n, :n, SENS_IDX] = np.sqrt(cfg.q_sigma_vy) * gvy
        G[n:, :n, SENS_IDX] = np.sqrt(cfg.q_sigma_r) * gr
        rho = np.concatenate([np.sqrt(cfg.q_sigma_vy) * svy, np.sqrt(cfg.q_sigma_r) * sr])
        return rho, G

    def cost_breakdown(self, Xall, U) -> dict:
        """Per-stage cost of every term; stage ``k`` pairs ``x_{k+1}`` with ``u_k``."""
        terms = stage_terms(Xall[1:], U, self.scenario, self.cfg, self.vp)
        out = {t: np.sum(np.real(terms[t]) ** 2, axis=-1) for t in TERMS[:7]}
        out["sigma_vy"] = np.zeros(self.N)
        out["sigma_r"] = np.zeros(self.N)
        if self.sigma is not None:
            (svy, _), (sr, _) = self.sigma.evaluate(Xall, self.cfg)
            n = len(svy)
            # sigma of state j is charged to stage j-1; sigma_0 = 0 by construction
            out["sigma_vy"][: n - 1] = self.cfg.q_sigma_vy * svy[1:] ** 2
            out["sigma_r"][: n - 1] = self.cfg.q_sigma_r * sr[1:] ** 2
            out["sigma_vy"][self.N - 1] += self.cfg.q_sigma_vy * svy[0] ** 2
            out["sigma_r"][self.N - 1] += self.cfg.q_sigma_r * sr[0] ** 2
        return out


def build_ocp(scenario: Scenario, cfg: OCPConfig, variant: ControllerVariant, vp: VehicleParams,
              fp: FialaParams, corr=None, sigma: SigmaModel | None = None) -> MPCCProblem:
    """Assemble the OCP; the baseline variant drops corrections and sigma terms."""
    variant = ControllerVariant(variant)
    if not variant.learning:
        corr, sigma = None, None
    return MPCCProblem(scenario, cfg, vp, fp, corr, sigma)


@dataclass
class OCPSolution:
    X: np.ndarray
    U: np.ndarray
    status: str
    iterations: int
    objective: float
    kkt: float
    costs: dict = field(default_factory=dict)
    corr: np.ndarray | None = None
    sig_vy: np.ndarray | None = None
    sig_r: np.ndarray | None = None
    merit_trace: list = field(default_factory=list)

    @property
    def states(self) -> list[VehicleState]:
        return [VehicleState.from_array(x) for x in self.X]

    def dynamics_residual(self, prob: MPCCProblem) -> float:
        F = prob.step(self.X[:-1], self.U)
        return float(np.max(np.abs(F - self.X[1:])))

    def shifted(self, prob: MPCCProblem) -> "OCPSolution":
        """Drop the first stage and extend the tail with the last rates held."""
        U = np.vstack([self.U[1:], self.U[-1:]])
        U[-1, :2] = 0.0
        corr = None if self.corr is None else np.vstack([self.corr[1:], self.corr[-1:]])
        last = prob.advance(self.X[-1:], U[-1:], np.zeros(3) if corr is None else corr[-1])
        X = np.vstack([self.X[1:], last])
        return replace(self, X=X, U=U, corr=corr)


def initial_guess(prob: MPCCProblem, x0) -> tuple[np.ndarray, np.ndarray]:
    """Forward rollout holding the current inputs and the current speed."""
    U = np.zeros((prob.N, NU))
    U[:, 2] = min(max(x0[IVX], 0.0), prob.u_ub[2])
    X = rollout(prob, x0, U)
    return X, U


def solve(prob: MPCCProblem, x0, warm: OCPSolution | None = None, options: SolverOptions | None = None) -> OCPSolution:
    """Run the SQP from ``warm`` (already shifted) or from a rollout."""
    x0 = np.asarray(x0, dtype=float)
    if not np.all(np.isfinite(x0)):
        raise ValueError("initial state must be finite")
    if warm is None:
        X, U = initial_guess(prob, x0)
    else:
        X, U = warm.X[1:], warm.U
    opts = options or SolverOptions(max_iter=prob.cfg.max_iter, kkt_tol=prob.cfg.kkt_tol)
    res: SQPResult = GaussNewtonSQP(opts).solve(prob, x0, X, U)
    Xall = np.vstack([x0[None], res.X])
    costs = prob.cost_breakdown(Xall, res.U)
    return OCPSolution(Xall, res.U, res.status, res.iterations, res.objective, res.kkt, costs,
                       prob.corr.copy(), merit_trace=res.merit_trace)


def min_predicted_clearance(X, scenario: Scenario) -> float:
    if not scenario.obstacles:
        return np.inf
    return float(min(np.min(obstacle_clearance(X[:, 0], X[:, 1], ob)) for ob in scenario.obstacles))


def measured_mismatch(prev_state: VehicleState, prev_input, state: VehicleState, prev_delta: float,
                      meas: Measurement, vp: VehicleParams, fp: FialaParams, dt: float) -> np.ndarray:
    """Mismatch targets ``(dFyF, dFyR, dr)`` observed at one tick.

    Force targets are measured axle forces minus the Fiala forces at the
    current state with the applied steering; the yaw-rate target is the
    measured yaw rate minus the nominal one-step prediction from the last
    tick.
    """
    x = state.as_array()
    fyf, fyr = nominal_axle_forces(x, np.array([prev_delta, 0.0]), vp, fp)
    u = np.asarray(prev_input, dtype=float)
    pred = _rk4(lambda z: _derivatives(z, u, np.zeros(3), vp, fp), prev_state.as_array(), dt)
    return np.array([meas.fy_f - float(fyf), meas.fy_r - float(fyr), meas.r - float(pred[5])])


@dataclass
class Controller:
    """Stateful wrapper running one full control cycle per call."""

    scenario: Scenario
    cfg: OCPConfig
    variant: ControllerVariant
    vp: VehicleParams
    fp: FialaParams
    models: dict | None = None
    previous: OCPSolution | None = None
    priority_active: bool = False
    window_Z: list = field(default_factory=list)
    window_y: list = field(default_factory=list)
    last_input: np.ndarray = field(default_factory=lambda: np.zeros(2))
    _last: tuple | None = None

    def __post_init__(self):
        self.variant = ControllerVariant(self.variant)
        if self.variant.learning:
            want = "gp" if self.variant is ControllerVariant.LMPCC_GP else "stp"
            if not self.models or any(m.kind != want for m in self.models.values()):
                raise ValueError(f"variant {self.variant.value} needs trained {want} models for every channel")

    def reset(self, delta: float = 0.0, fx: float = 0.0):
        self.previous, self.priority_active, self._last = None, False, None
        self.window_Z.clear()
        self.window_y.clear()
        self.last_input = np.array([delta, fx])

    def _online_models(self):
        if not self.window_y:
            return self.models
        Z = np.array(self.window_Z)
        Y = np.array(self.window_y)
        return {ch: augment(self.models[ch], Z, Y[:, j]) for j, ch in enumerate(CHANNELS) if ch in self.models}

    def observe(self, state: VehicleState, meas: Measurement):
        """Record the mismatch seen since the previous tick for online conditioning."""
        if self._last is not None and self.variant.learning and self.cfg.online_window > 0:
            prev_state, prev_in = self._last
            y = measured_mismatch(prev_state, prev_in, state, prev_in[0], meas, self.vp, self.fp, self.cfg.dt)
            z = np.array([state.v_x, prev_in[0], prev_in[1], meas.r, meas.fy_f, meas.fy_r])
            self.window_Z.append(z)
            self.window_y.append(y)
            del self.window_Z[:-self.cfg.online_window]
            del self.window_y[:-self.cfg.online_window]

    def step(self, state: VehicleState, meas: Measurement):
        """One control cycle; returns ``(delta, F_x, solution, diagnostics)``."""
        cfg, sc = self.cfg, self.scenario
        self.observe(state, meas)
        s_guess = None if self.previous is None else float(self.previous.X[1, IS])
        s0 = project(sc.spline, state.X, state.Y, s_guess)
        x0 = np.concatenate([state.as_array(), [s0, self.last_input[0], self.last_input[1]]])

        clearance = np.inf if self.previous is None else min_predicted_clearance(self.previous.X, sc)
        if sc.priority:
            cfg_eff, self.priority_active = collision_priority_weights(cfg, clearance, self.priority_active)
        else:
            cfg_eff = enforce_sigma_rule(cfg)

        base = MPCCProblem(sc, cfg_eff, self.vp, self.fp)
        if self.previous is not None:
            warm = self.previous.shifted(base)
            Xref = np.vstack([x0[None], warm.X[1:]])
        else:
            warm = None
            Xg, _ = initial_guess(base, x0)
            Xref = np.vstack([x0[None], Xg])

        corr, sigma, sig_vy, sig_r = None, None, np.zeros(cfg.N), np.zeros(cfg.N)
        if self.variant.learning:
            models = self._online_models()
            prev_corr = np.zeros((cfg.N, 3)) if warm is None or warm.corr is None else warm.corr
            measured = (meas.fy_f, meas.fy_r, meas.r)
            Z = stage_features(Xref[:cfg.N], prev_corr, self.vp, self.fp, measured)
            corr = channel_means(models, Z)
            sig_vy, sig_r, gvy, gr = horizon_sensitivities(Xref[:cfg.N], corr, models, cfg.N, self.vp, self.fp,
                                                           cfg.dt, measured)
            n = cfg.N_prob
            sigma = SigmaModel(Xref.copy(), sig_vy[:n], sig_r[:n], gvy[:n, :n], gr[:n, :n])
        prob = build_ocp(sc, cfg_eff, self.variant, self.vp, self.fp, corr, sigma)

        sol = solve(prob, x0, warm)
        sol.sig_vy, sol.sig_r = sig_vy, sig_r
        if sol.status == "failed":
            logger.warning("solver failed; reusing the shifted previous solution")
            if warm is not None:
                fallback = warm
                fallback.status = "failed"
                sol = fallback
        # the applied inputs are stage 1, clipped to the hard bounds and rates
        if sol.status == "failed" and warm is None:
            delta, fx = self.last_input
        else:
            delta, fx = sol.X[1, IDELTA], sol.X[1, IFX]
        d_prev, f_prev = self.last_input
        delta = float(np.clip(delta, max(-cfg.delta_max, d_prev - cfg.ddelta_max * cfg.dt),
                              min(cfg.delta_max, d_prev + cfg.ddelta_max * cfg.dt)))
        fx = float(np.clip(fx, max(cfg.fx_min, f_prev - cfg.dfx_max * cfg.dt),
                           min(cfg.fx_max, f_prev + cfg.dfx_max * cfg.dt)))
        self._last = (state, np.array([delta, fx]))
        self.last_input = np.array([delta, fx])
        self.previous = sol
        diag = {
            "status": sol.status,
            "iterations": sol.iterations,
            "objective": sol.objective,
            "kkt": sol.kkt,
            "corr": np.zeros((cfg.N, 3)) if corr is None else corr,
            "sig_vy": sig_vy,
            "sig_r": sig_r,
            "costs": {k: float(np.sum(v)) for k, v in sol.costs.items()},
            "priority": self.priority_active,
            "q_eObs": cfg_eff.q_eObs,
            "sigma_ceiling": cfg_eff.sigma_cost_ceiling(),
            "obstacle_ceiling": cfg_eff.obstacle_cost_ceiling(),
            "merit_trace": sol.merit_trace,
        }
        return delta, fx, sol, diag


def control_step(state: VehicleState, meas: Measurement, controller: Controller):
    """Functional alias of :meth:`Controller.step`."""
    return controller.step(state, meas)
