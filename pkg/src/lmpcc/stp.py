"""Student-t and Gaussian process regression of the model mismatches.

Each mismatch channel (front/rear lateral-force error, yaw-rate error) gets
its own single-output process with a Matern 5/2 ARD kernel. The Student-t
process shares the GP posterior mean; its predictive covariance is the GP
covariance scaled by ``(nu + beta - 2) / (nu + n - 2)`` where
``beta = y' K^-1 y`` measures how far the observed targets deviate from what
the kernel expects.
"""
from __future__ import annotations

import json
import logging
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from scipy.linalg import cho_solve, cholesky, solve_triangular
from scipy.optimize import minimize
from scipy.special import digamma, gammaln

logger = logging.getLogger(__name__)

SQRT5 = math.sqrt(5.0)
CHANNELS = ("dfyf", "dfyr", "dr")
FEATURES = ("v_x", "delta", "F_x", "r", "F_yF", "F_yR")
NU_BOUNDS = (2.1, 1000.0)
MODEL_VERSION = 1


class ConditioningError(np.linalg.LinAlgError):
    """Gram matrix not positive definite even after jitter escalation."""


@dataclass(frozen=True)
class KernelHyper:
    lengthscales: np.ndarray
    signal_variance: float
    noise_variance: float

    def __post_init__(self):
        ls = np.atleast_1d(np.asarray(self.lengthscales, dtype=float))
        object.__setattr__(self, "lengthscales", ls)
        if np.any(ls <= 0) or self.signal_variance <= 0 or self.noise_variance <= 0:
            raise ValueError("kernel hyperparameters must be strictly positive")


@dataclass(frozen=True)
class Posterior:
    mean: np.ndarray | float
    variance: np.ndarray | float
    dof: float


def _scaled_distance(z1, z2, lengthscales):
    d = (z1[:, None, :] - z2[None, :, :]) / lengthscales
    return d, np.sqrt(np.maximum(np.sum(d * d, axis=-1), 0.0))


def _matern(rho, sf2):
    return sf2 * (1.0 + SQRT5 * rho + 5.0 / 3.0 * rho * rho) * np.exp(-SQRT5 * rho)


def kernel_matrix(Z1, Z2, hyper: KernelHyper) -> np.ndarray:
    """Cross-covariance ``k(Z1_i, Z2_j)`` without noise."""
    Z1, Z2 = np.atleast_2d(Z1), np.atleast_2d(Z2)
    _, rho = _scaled_distance(Z1, Z2, hyper.lengthscales)
    return _matern(rho, hyper.signal_variance)


def matern52_ard(z1, z2, hyper: KernelHyper) -> float:
    """Matern 5/2 kernel with one lengthscale per input dimension."""
    z1, z2 = np.asarray(z1, dtype=float), np.asarray(z2, dtype=float)
    if z1.shape != hyper.lengthscales.shape or z2.shape != hyper.lengthscales.shape:
        raise ValueError("input dimension does not match lengthscales")
    rho = float(np.linalg.norm((z1 - z2) / hyper.lengthscales))
    return float(_matern(rho, hyper.signal_variance))


def gram(Z, hyper: KernelHyper) -> np.ndarray:
    """``K(Z, Z) + noise_variance * I``."""
    K = kernel_matrix(Z, Z, hyper)
    K[np.diag_indices_from(K)] += hyper.noise_variance
    return K


def robust_cholesky(K: np.ndarray) -> np.ndarray:
    """Lower Cholesky factor, escalating diagonal jitter from 1e-10 to 1e-6 (relative)."""
    scale = max(float(np.mean(np.diag(K))), 1e-300)
    for jitter in (0.0, 1e-10, 1e-9, 1e-8, 1e-7, 1e-6):
        try:
            return cholesky(K + jitter * scale * np.eye(len(K)), lower=True)
        except np.linalg.LinAlgError:
            continue
    raise ConditioningError("Gram matrix is not positive definite after jitter 1e-6")


@dataclass(frozen=True, eq=False)
class MismatchDataset:
    Z: np.ndarray
    targets: dict
    sources: tuple = ()

    def __post_init__(self):
        n = len(self.Z)
        for ch in CHANNELS:
            if len(self.targets[ch]) != n:
                raise ValueError(f"channel {ch} has {len(self.targets[ch])} rows, expected {n}")
        if not np.all(np.isfinite(self.Z)) or not all(np.all(np.isfinite(self.targets[c])) for c in CHANNELS):
            raise ValueError("non-finite entries in mismatch dataset")

    def __len__(self):
        return len(self.Z)

    def subset(self, idx) -> "MismatchDataset":
        return MismatchDataset(self.Z[idx], {c: self.targets[c][idx] for c in CHANNELS}, self.sources)


def farthest_point_indices(X: np.ndarray, m: int) -> np.ndarray:
    """Greedy max-min subset of ``m`` rows, seeded with the row farthest from the centroid."""
    n = len(X)
    if m >= n:
        return np.arange(n)
    first = int(np.argmax(np.sum((X - X.mean(axis=0)) ** 2, axis=1)))
    chosen = [first]
    dmin = np.sum((X - X[first]) ** 2, axis=1)
    for _ in range(m - 1):
        nxt = int(np.argmax(dmin))
        chosen.append(nxt)
        dmin = np.minimum(dmin, np.sum((X - X[nxt]) ** 2, axis=1))
    return np.array(sorted(chosen))


def decimate(ds: MismatchDataset, m_max: int) -> MismatchDataset:
    if len(ds) <= m_max:
        return ds
    mu, sd = ds.Z.mean(axis=0), ds.Z.std(axis=0)
    sd[sd == 0] = 1.0
    return ds.subset(farthest_point_indices((ds.Z - mu) / sd, m_max))


def build_training_set(logs, m_max: int | None = None) -> MismatchDataset:
    """Stack the mismatch rows of several run logs.

    Each row pairs the feature vector ``[v_x, delta, F_x, r, F_yF, F_yR]``
    (measured) with ``measured - nominal`` for the three channels. Rows
    without a nominal yaw-rate prediction (first tick of a run) are dropped.
    """
    logs = list(logs)
    if not logs:
        raise ValueError("no run logs given")
    Zs, tg, src = [], {c: [] for c in CHANNELS}, []
    for log in logs:
        z, t = log.mismatch_rows()
        Zs.append(z)
        for c in CHANNELS:
            tg[c].append(t[c])
        src.append(log.name)
    Z = np.vstack(Zs)
    if len(Z) == 0:
        raise ValueError("run logs contain no usable rows")
    ds = MismatchDataset(Z, {c: np.concatenate(tg[c]) for c in CHANNELS}, tuple(src))
    return decimate(ds, m_max) if m_max else ds


@dataclass(frozen=True, eq=False)
class STPModel:
    """Trained single-channel process (``nu = inf`` for a plain GP).

    ``Z`` is stored in normalised coordinates; ``z_mean``/``z_std`` map raw
    feature vectors into them.
    """

    nu: float
    hyper: KernelHyper
    Z: np.ndarray
    y: np.ndarray
    z_mean: np.ndarray
    z_std: np.ndarray
    channel: str = ""
    kind: str = "stp"
    converged: bool = True
    chol: np.ndarray | None = field(default=None, repr=False)
    alpha: np.ndarray = field(init=False, repr=False)
    beta: float = field(init=False)

    def __post_init__(self):
        if self.kind == "stp" and not self.nu > 2:
            raise ValueError("Student-t process needs nu > 2")
        L = self.chol if self.chol is not None else robust_cholesky(gram(self.Z, self.hyper))
        alpha = cho_solve((L, True), self.y)
        object.__setattr__(self, "chol", L)
        object.__setattr__(self, "alpha", alpha)
        object.__setattr__(self, "beta", float(self.y @ alpha))

    @property
    def n(self) -> int:
        return len(self.y)

    def normalise(self, z) -> np.ndarray:
        return (np.atleast_2d(np.asarray(z, dtype=float)) - self.z_mean) / self.z_std

    def with_hyper(self, hyper: KernelHyper | None = None, nu: float | None = None, y=None) -> "STPModel":
        return STPModel(self.nu if nu is None else nu, hyper or self.hyper, self.Z,
                        self.y if y is None else np.asarray(y, dtype=float), self.z_mean, self.z_std,
                        self.channel, self.kind)

    @classmethod
    def from_normalised(cls, Z, y, hyper, nu=np.inf, kind="stp", channel=""):
        Z = np.atleast_2d(np.asarray(Z, dtype=float))
        d = Z.shape[1]
        return cls(nu, hyper, Z, np.asarray(y, dtype=float), np.zeros(d), np.ones(d), channel, kind)


def augment(model: STPModel, z_raw, y_new) -> STPModel:
    """Condition on extra observations with frozen hyperparameters.

    The training block of the Cholesky factor is reused; only the new rows
    are factorised.
    """
    y_new = np.asarray(y_new, dtype=float)
    if len(y_new) == 0:
        return model
    Zn = model.normalise(z_raw)
    K12 = kernel_matrix(model.Z, Zn, model.hyper)
    L21 = solve_triangular(model.chol, K12, lower=True).T
    S = gram(Zn, model.hyper) - L21 @ L21.T
    L22 = robust_cholesky(S)
    n, m = model.n, len(y_new)
    L = np.zeros((n + m, n + m))
    L[:n, :n] = model.chol
    L[n:, :n] = L21
    L[n:, n:] = L22
    return STPModel(model.nu, model.hyper, np.vstack([model.Z, Zn]), np.concatenate([model.y, y_new]),
                    model.z_mean, model.z_std, model.channel, model.kind, model.converged, L)


def _gp_moments(model: STPModel, z_star):
    zs = model.normalise(z_star)
    Ks = kernel_matrix(model.Z, zs, model.hyper)
    mean = Ks.T @ model.alpha
    v = solve_triangular(model.chol, Ks, lower=True)
    var = model.hyper.signal_variance - np.sum(v * v, axis=0)
    return mean, np.maximum(var, 0.0)


def _unwrap(a, scalar):
    return float(a[0]) if scalar else a


def stp_posterior(model: STPModel, z_star) -> Posterior:
    """Student-t predictive distribution of the latent mismatch at ``z_star``."""
    scalar = np.ndim(z_star) == 1
    mean, var = _gp_moments(model, z_star)
    nu, n = model.nu, model.n
    if np.isinf(nu):
        return Posterior(_unwrap(mean, scalar), _unwrap(var, scalar), np.inf)
    scale = (nu + model.beta - 2.0) / (nu + n - 2.0)
    return Posterior(_unwrap(mean, scalar), _unwrap(scale * var, scalar), nu + n)


def gp_posterior(model: STPModel, z_star) -> Posterior:
    """Gaussian predictive distribution with the model's kernel, ignoring ``nu``."""
    scalar = np.ndim(z_star) == 1
    mean, var = _gp_moments(model, z_star)
    return Posterior(_unwrap(mean, scalar), _unwrap(var, scalar), np.inf)


def posterior(model: STPModel, z_star) -> Posterior:
    """Dispatch on the model kind."""
    return gp_posterior(model, z_star) if model.kind == "gp" else stp_posterior(model, z_star)


def moment_match_gaussian(p: Posterior):
    """Variance of the Gaussian with the same second moment as ``p``."""
    if np.isinf(p.dof):
        return p.variance
    if p.dof <= 2:
        raise ValueError("Student-t with dof <= 2 has no finite variance")
    return p.variance * p.dof / (p.dof - 2.0)


# ---------------------------------------------------------------------------
# hyperparameter fitting


def _unpack(theta, d, kind):
    ls = np.exp(theta[:d])
    sf2, sn2 = np.exp(theta[d]), np.exp(theta[d + 1])
    nu = 2.0 + np.exp(theta[d + 2]) if kind == "stp" else np.inf
    return ls, sf2, sn2, nu


NU_PRIOR = (2.0, 0.1)


def log_marginal_likelihood(theta, Z, y, kind="stp", nu_prior=None):
    """Log evidence and its gradient w.r.t. the log-parameters.

    ``theta = [log l_1..l_d, log sf2, log sn2(, log(nu - 2))]``. With
    ``nu_prior=(shape, rate)`` the log of a Gamma density on ``nu`` is added.
    """
    n, d = Z.shape
    ls, sf2, sn2, nu = _unpack(theta, d, kind)
    diff, rho = _scaled_distance(Z, Z, ls)
    e = np.exp(-SQRT5 * rho)
    Kf = sf2 * (1.0 + SQRT5 * rho + 5.0 / 3.0 * rho * rho) * e
    K = Kf + sn2 * np.eye(n)
    try:
        L = cholesky(K, lower=True)
    except np.linalg.LinAlgError:
        return -np.inf, np.zeros_like(theta)
    alpha = cho_solve((L, True), y)
    beta = float(y @ alpha)
    Kinv = cho_solve((L, True), np.eye(n))
    logdet = 2.0 * np.sum(np.log(np.diag(L)))

    if kind == "stp":
        lml = (-0.5 * n * np.log((nu - 2.0) * np.pi) - 0.5 * logdet + gammaln(0.5 * (nu + n))
               - gammaln(0.5 * nu) - 0.5 * (nu + n) * np.log1p(beta / (nu - 2.0)))
        w = (nu + n) / (nu - 2.0 + beta)
    else:
        lml = -0.5 * beta - 0.5 * logdet - 0.5 * n * np.log(2.0 * np.pi)
        w = 1.0
    # dL/dK = 0.5 * (w * alpha alpha' - K^-1)
    W = 0.5 * (w * np.outer(alpha, alpha) - Kinv)
    grad = np.empty_like(theta)
    radial = 5.0 / 3.0 * sf2 * (1.0 + SQRT5 * rho) * e
    for j in range(d):
        grad[j] = np.sum(W * radial * diff[:, :, j] ** 2)
    grad[d] = np.sum(W * Kf)
    grad[d + 1] = sn2 * np.trace(W)
    if kind == "stp":
        dnu = (-0.5 * n / (nu - 2.0) + 0.5 * digamma(0.5 * (nu + n)) - 0.5 * digamma(0.5 * nu)
               - 0.5 * np.log1p(beta / (nu - 2.0))
               + 0.5 * (nu + n) * beta / ((nu - 2.0) * (nu - 2.0 + beta)))
        if nu_prior is not None:
            a, b = nu_prior
            lml += (a - 1.0) * np.log(nu) - b * nu
            dnu += (a - 1.0) / nu - b
        grad[d + 2] = dnu * (nu - 2.0)
    return float(lml), grad



def fit(dataset: MismatchDataset, channel: str, init: KernelHyper | None = None, restarts: int = 3,
        seed: int = 0, kind: str = "stp", nu0: float = 10.0, nu_prior=NU_PRIOR,
        trace: list | None = None, noise_floor: float = 0.0,
        lengthscale_bounds: tuple[float, float] = (1e-2, 1e2)) -> STPModel:
    """Maximise the log evidence with L-BFGS-B over log-parameters.

    Restart 0 starts from ``init`` (or a data-driven default); the others
    from log-uniform perturbations drawn with ``seed``. ``nu`` is kept in
    ``[2.1, 1000]`` and, unless ``nu_prior=None``, regularised by a
    Gamma(shape, rate) prior: with a free signal variance the plain evidence
    always prefers the Gaussian limit. ``noise_floor`` bounds the noise
    standard deviation from below (the known sensor noise). If every restart
    fails, the best iterate is returned with ``converged=False``.
    """
    if channel not in CHANNELS:
        raise ValueError(f"unknown channel {channel!r}")
    if kind not in ("stp", "gp"):
        raise ValueError(f"unknown process kind {kind!r}")
    Zraw = np.asarray(dataset.Z, dtype=float)
    y = np.asarray(dataset.targets[channel], dtype=float)
    n, d = Zraw.shape
    if n < 10:
        raise ValueError("need at least 10 training rows")
    z_mean, z_std = Zraw.mean(axis=0), Zraw.std(axis=0)
    z_std[z_std == 0] = 1.0
    Z = (Zraw - z_mean) / z_std
    vy = max(float(np.mean(y * y)), 1e-12)

    sn_lo = max(vy * 1e-8, noise_floor**2)
    if sn_lo >= vy * 1e1:
        raise ValueError("noise floor exceeds the target scale")
    ls_lo, ls_hi = lengthscale_bounds
    bounds = [(np.log(ls_lo), np.log(ls_hi))] * d + [(np.log(vy * 1e-6), np.log(vy * 1e4)),
                                                    (np.log(sn_lo), np.log(vy * 1e1))]
    if kind == "stp":
        bounds.append((np.log(NU_BOUNDS[0] - 2.0), np.log(NU_BOUNDS[1] - 2.0)))
    lo, hi = np.array(bounds).T
    if init is not None:
        t0 = np.concatenate([np.log(init.lengthscales), [np.log(init.signal_variance), np.log(init.noise_variance)]])
    else:
        t0 = np.concatenate([np.zeros(d), [np.log(vy), np.log(0.1 * vy)]])
    if kind == "stp":
        t0 = np.append(t0, np.log(nu0 - 2.0))
    t0 = np.clip(t0, lo, hi)

    rng = np.random.default_rng(seed)
    best, best_val, any_ok = t0, -np.inf, False
    for k in range(max(1, restarts)):
        start = t0 if k == 0 else np.clip(t0 + rng.uniform(-1.5, 1.5, size=t0.shape), lo, hi)
        hist = []

        def neg(th):
            v, g = log_marginal_likelihood(th, Z, y, kind, nu_prior)
            if not np.isfinite(v):
                return 1e300, np.zeros_like(th)
            return -v, -g

        res = minimize(neg, start, jac=True, method="L-BFGS-B", bounds=bounds,
                       callback=lambda th: hist.append(-neg(th)[0]), options={"maxiter": 200})
        if trace is not None:
            trace.append(hist)
        if np.isfinite(res.fun) and res.fun < 1e299:
            any_ok = any_ok or res.success
            if -res.fun > best_val:
                best, best_val = res.x, -res.fun
    if not any_ok:
        logger.warning("hyperparameter fit for %s did not converge; keeping best iterate", channel)
    ls, sf2, sn2, nu = _unpack(best, d, kind)
    return STPModel(float(nu), KernelHyper(ls, float(sf2), float(sn2)), Z, y, z_mean, z_std,
                    channel, kind, converged=any_ok)


def fit_all(dataset: MismatchDataset, kind: str = "stp", seed: int = 0, restarts: int = 3,
            noise_floors: dict | None = None, **kw) -> dict:
    """Fit one process per channel; returns ``{channel: STPModel}``.

    ``noise_floors`` maps channel to the sensor noise standard deviation
    used as a lower bound on the fitted noise.
    """
    floors = noise_floors or {}
    return {ch: fit(dataset, ch, kind=kind, seed=seed + i, restarts=restarts, noise_floor=floors.get(ch, 0.0), **kw)
            for i, ch in enumerate(CHANNELS)}


# ---------------------------------------------------------------------------
# model files


def model_to_dict(model: STPModel) -> dict:
    return {
        "format": "lmpcc-stp-model",
        "version": MODEL_VERSION,
        "channel": model.channel,
        "kind": model.kind,
        "nu": None if np.isinf(model.nu) else model.nu,
        "lengthscales": model.hyper.lengthscales.tolist(),
        "signal_variance": model.hyper.signal_variance,
        "noise_variance": model.hyper.noise_variance,
        "features": list(FEATURES),
        "z_mean": model.z_mean.tolist(),
        "z_std": model.z_std.tolist(),
        "inputs": model.Z.tolist(),
        "targets": model.y.tolist(),
        "converged": model.converged,
    }


def model_from_dict(doc: dict) -> STPModel:
    if doc.get("format") != "lmpcc-stp-model" or doc.get("version") != MODEL_VERSION:
        raise ValueError("not a version-1 lmpcc STP model file")
    nu = np.inf if doc["nu"] is None else float(doc["nu"])
    hyper = KernelHyper(np.array(doc["lengthscales"]), doc["signal_variance"], doc["noise_variance"])
    return STPModel(nu, hyper, np.array(doc["inputs"], dtype=float), np.array(doc["targets"], dtype=float),
                    np.array(doc["z_mean"]), np.array(doc["z_std"]), doc["channel"], doc["kind"],
                    bool(doc.get("converged", True)))


def save_model(model: STPModel, path) -> None:
    Path(path).write_text(json.dumps(model_to_dict(model), indent=1))


def load_model(path) -> STPModel:
    return model_from_dict(json.loads(Path(path).read_text()))


def save_models(models: dict, path) -> None:
    """Several channels in one file (keyed by channel name)."""
    Path(path).write_text(json.dumps({c: model_to_dict(m) for c, m in models.items()}, indent=1))


def load_models(path) -> dict:
    doc = json.loads(Path(path).read_text())
    if "format" in doc:
        m = model_from_dict(doc)
        return {m.channel: m}
    return {c: model_from_dict(d) for c, d in doc.items()}
