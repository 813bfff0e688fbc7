"""Open-loop propagation of the lateral ``(v_y, r)`` covariance.

The force-mismatch variances from the learned processes enter through the
input matrix ``B = d(dv_y, dr)/d(dFyF, dFyR)``; the yaw-rate mismatch enters
the ``v_y`` row through the ``-(r + dr) v_x`` coupling, i.e. with injection
vector ``[-v_x dt, 0]``. Channels are treated as independent.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .stp import moment_match_gaussian, posterior
from .vehicle import FialaParams, VehicleParams, _lateral_jacobians, nominal_axle_forces

# indices into the augmented OCP state (X, Y, psi, v_x, v_y, r, s, delta, F_x)
IVX, IVY, IR, IDELTA, IFX = 3, 4, 5, 7, 8
SENS_IDX = (IVX, IVY, IR, IDELTA, IFX)


@dataclass(frozen=True)
class LateralCovariance:
    s_vyvy: float = 0.0
    s_rr: float = 0.0
    s_vyr: float = 0.0

    def as_matrix(self) -> np.ndarray:
        return np.array([[self.s_vyvy, self.s_vyr], [self.s_vyr, self.s_rr]])

    @classmethod
    def from_matrix(cls, S) -> "LateralCovariance":
        return cls(float(S[0, 0]), float(S[1, 1]), float(0.5 * (S[0, 1] + S[1, 0])))

    @property
    def sigmas(self) -> tuple[float, float]:
        return float(np.sqrt(max(self.s_vyvy, 0.0))), float(np.sqrt(max(self.s_rr, 0.0)))


@dataclass(frozen=True)
class StageDisturbance:
    var_FyF: float = 0.0
    var_FyR: float = 0.0
    var_r: float = 0.0

    def __post_init__(self):
        if min(self.var_FyF, self.var_FyR, self.var_r) < 0:
            raise ValueError("disturbance variances must be non-negative")


def disturbance_matrix(B, var_fyf, var_fyr, var_r, v_x, dt):
    """Process-noise covariance of one step; broadcasts over leading axes."""
    B = np.asarray(B)
    Q = dt * dt * (B[..., :, 0, None] * B[..., None, :, 0] * np.asarray(var_fyf)[..., None, None]
                   + B[..., :, 1, None] * B[..., None, :, 1] * np.asarray(var_fyr)[..., None, None])
    Q = np.array(Q, copy=True)
    Q[..., 0, 0] += dt * dt * np.asarray(v_x) ** 2 * var_r
    return Q


def propagate_step(cov: LateralCovariance, A, B, dist: StageDisturbance, dt: float, v_x: float | None = None,
                   diagnostics: dict | None = None) -> LateralCovariance:
    """One EKF-style covariance update with ``A_d = I + A dt``.

    ``v_x`` is required whenever ``dist.var_r > 0``. Negative eigenvalues
    from round-off are floored at zero and counted in
    ``diagnostics["psd_floor"]``.
    """
    if dt <= 0:
        raise ValueError("dt must be positive")
    if dist.var_r > 0 and v_x is None:
        raise ValueError("v_x is needed to inject the yaw-rate mismatch variance")
    Ad = np.eye(2) + np.asarray(A, dtype=float) * dt
    S = Ad @ cov.as_matrix() @ Ad.T
    S = S + disturbance_matrix(B, dist.var_FyF, dist.var_FyR, dist.var_r, 0.0 if v_x is None else v_x, dt)
    S = 0.5 * (S + S.T)
    w, V = np.linalg.eigh(S)
    if w[0] < 0:
        if diagnostics is not None:
            diagnostics["psd_floor"] = diagnostics.get("psd_floor", 0) + 1
        S = (V * np.maximum(w, 0.0)) @ V.T
    return LateralCovariance.from_matrix(S)


def stage_features(X, corr, vp: VehicleParams, fp: FialaParams, measured=None):
    """Process inputs ``[v_x, delta, F_x, r, F_yF, F_yR]`` along a trajectory.

    ``X`` holds augmented OCP states (``(..., 9)``). Forces are the corrected
    model forces; ``measured`` (``(F_yF, F_yR, r)``), when given, replaces
    stage 0 with what the sensors report.
    """
    X = np.asarray(X)
    fyf, fyr = nominal_axle_forces(X[..., :6], X[..., IDELTA:], vp, fp)
    Z = np.stack([X[..., IVX], X[..., IDELTA], X[..., IFX], X[..., IR],
                  fyf + corr[..., 0], fyr + corr[..., 1]], axis=-1)
    if measured is not None:
        Z = np.array(Z, copy=True)
        Z[0, 3] = measured[2]
        Z[0, 4] = measured[0]
        Z[0, 5] = measured[1]
    return Z


def channel_variances(models, Z) -> np.ndarray:
    """Moment-matched Gaussian variances ``(..., 3)`` for the three channels."""
    Z = np.asarray(Z)
    flat = Z.reshape(-1, Z.shape[-1])
    out = np.zeros((len(flat), 3))
    for j, ch in enumerate(("dfyf", "dfyr", "dr")):
        m = models.get(ch) if models else None
        if m is not None:
            out[:, j] = moment_match_gaussian(posterior(m, flat))
    return out.reshape(Z.shape[:-1] + (3,))


def channel_means(models, Z) -> np.ndarray:
    Z = np.asarray(Z)
    flat = Z.reshape(-1, Z.shape[-1])
    out = np.zeros((len(flat), 3))
    for j, ch in enumerate(("dfyf", "dfyr", "dr")):
        m = models.get(ch) if models else None
        if m is not None:
            out[:, j] = posterior(m, flat).mean
    return out.reshape(Z.shape[:-1] + (3,))


def _stage_Q(X, corr, variances, vp, fp, dt):
    _, B = _lateral_jacobians(X[..., IVX], X[..., IVY], X[..., IR], X[..., IDELTA], corr[..., 2], vp, fp)
    return disturbance_matrix(B, variances[..., 0], variances[..., 1], variances[..., 2], X[..., IVX], dt)


def propagate_horizon(X, corr, models, n_prob: int, vp: VehicleParams, fp: FialaParams, dt: float,
                      variances=None, diagnostics: dict | None = None):
    """Standard deviations of ``v_y`` and ``r`` at stages ``0 .. n_prob-1``.

    ``X`` is the predicted augmented state trajectory (at least ``n_prob``
    rows) and ``corr`` the per-stage mismatch means. Stage 0 is the measured
    state and carries zero covariance. ``variances`` may be passed to skip
    the process queries.
    """
    X = np.asarray(X, dtype=float)
    if len(X) < n_prob:
        raise ValueError("trajectory shorter than the uncertainty horizon")
    if variances is None:
        variances = channel_variances(models, stage_features(X[:n_prob], corr[:n_prob], vp, fp))
    A, B = _lateral_jacobians(X[:n_prob, IVX], X[:n_prob, IVY], X[:n_prob, IR], X[:n_prob, IDELTA],
                              corr[:n_prob, 2], vp, fp)
    cov = LateralCovariance()
    sig = np.zeros((n_prob, 2))
    for k in range(n_prob - 1):
        dist = StageDisturbance(*np.maximum(variances[k], 0.0))
        cov = propagate_step(cov, A[k], B[k], dist, dt, X[k, IVX], diagnostics)
        sig[k + 1] = cov.sigmas
    return sig[:, 0], sig[:, 1]


def horizon_sensitivities(X, corr, models, n_prob: int, vp: VehicleParams, fp: FialaParams, dt: float,
                          measured=None, fd_step=None):
    """Propagated sigmas plus their first-order dependence on the stage states.

    Returns ``(sig_vy, sig_r, dvy, dr)`` where ``dvy[k, j, c]`` is
    ``d sigma_vy[k] / d X[j, SENS_IDX[c]]``. Only the dependence through the
    injected disturbance is linearised; the transition matrices are frozen.
    """
    X = np.asarray(X, dtype=float)[:n_prob]
    corr = np.asarray(corr, dtype=float)[:n_prob]
    nc = len(SENS_IDX)
    if fd_step is None:
        fd_step = np.array([1e-3, 1e-3, 1e-4, 1e-4, 1.0])
    # batch: unperturbed + central differences in each sensitive component
    P = 1 + 2 * nc
    Xb = np.repeat(X[:, None, :], P, axis=1)
    for c, idx in enumerate(SENS_IDX):
        Xb[:, 1 + 2 * c, idx] += fd_step[c]
        Xb[:, 2 + 2 * c, idx] -= fd_step[c]
    cb = np.repeat(corr[:, None, :], P, axis=1)
    Zb = stage_features(Xb, cb, vp, fp)
    if measured is not None:
        Zb[0, :, 3:] = [measured[2], measured[0], measured[1]]
    var = np.maximum(channel_variances(models, Zb), 0.0)
    Qb = _stage_Q(Xb, cb, var, vp, fp, dt)
    Q = Qb[:, 0]
    dQ = (Qb[:, 1::2] - Qb[:, 2::2]) / (2.0 * fd_step[None, :, None, None])
    if measured is not None:
        dQ[0] = 0.0

    A, _ = _lateral_jacobians(X[:, IVX], X[:, IVY], X[:, IR], X[:, IDELTA], corr[:, 2], vp, fp)
    Ad = np.eye(2) + A * dt
    S = np.zeros((2, 2))
    # dS[j, c] = d Sigma_k / d x_{j,c}, carried forward
    dS = np.zeros((n_prob, nc, 2, 2))
    Svy, Sr = np.zeros(n_prob), np.zeros(n_prob)
    dSvy, dSr = np.zeros((n_prob, n_prob, nc)), np.zeros((n_prob, n_prob, nc))
    for k in range(n_prob - 1):
        S = Ad[k] @ S @ Ad[k].T + Q[k]
        dS[:k] = np.einsum("ab,jcbd,ed->jcae", Ad[k], dS[:k], Ad[k])
        dS[k] = dQ[k]
        Svy[k + 1], Sr[k + 1] = S[0, 0], S[1, 1]
        dSvy[k + 1, :k + 1] = dS[:k + 1, :, 0, 0]
        dSr[k + 1, :k + 1] = dS[:k + 1, :, 1, 1]
    sig_vy = np.sqrt(np.maximum(Svy, 0.0))
    sig_r = np.sqrt(np.maximum(Sr, 0.0))
    with np.errstate(divide="ignore", invalid="ignore"):
        gvy = np.where(sig_vy[:, None, None] > 1e-12, dSvy / (2.0 * sig_vy[:, None, None]), 0.0)
        gr = np.where(sig_r[:, None, None] > 1e-12, dSr / (2.0 * sig_r[:, None, None]), 0.0)
    return sig_vy, sig_r, gvy, gr
