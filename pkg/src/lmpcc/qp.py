"""Dense convex QP solver (Mehrotra predictor-corrector interior point).

Solves ``min 0.5 x'Hx + g'x  s.t.  G x <= h`` for the small condensed
problems the SQP produces (about 100 variables, a few hundred inequality
rows). Infinite rows must be removed by the caller.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy.linalg import cho_factor, cho_solve


@dataclass
class QPResult:
    x: np.ndarray
    z: np.ndarray
    status: str
    iterations: int


def solve_qp(H, g, G=None, h=None, tol: float = 1e-9, max_iter: int = 50) -> QPResult:
    n = len(g)
    if G is None or len(G) == 0:
        x = cho_solve(cho_factor(H + 1e-14 * np.eye(n)), -g)
        return QPResult(x, np.zeros(0), "optimal", 0)
    m = len(h)
    x = np.zeros(n)
    s = np.maximum(h - G @ x, 1.0)
    z = np.ones(m)
    scale_d = 1.0 + np.max(np.abs(g))
    scale_p = 1.0 + np.max(np.abs(h))
    status = "max_iter"
    best = (np.inf, x, z)
    for it in range(1, max_iter + 1):
        rd = H @ x + g + G.T @ z
        rp = G @ x + s - h
        mu = float(s @ z) / m
        err = max(np.max(np.abs(rd)) / scale_d, np.max(np.abs(rp)) / scale_p, mu / scale_d)
        if err <= tol:
            status = "optimal"
            break
        if err < best[0]:
            best = (err, x, z)
        with np.errstate(over="ignore", divide="ignore", invalid="ignore"):
            w = z / s
            K = H + (G.T * w) @ G
            K = K + 1e-13 * np.trace(K) / n * np.eye(n)
        try:
            fac = cho_factor(K)
        except (np.linalg.LinAlgError, ValueError):
            # singular or non-finite system, e.g. a slack underflowed on infeasible rows
            status = "numerical"
            break

        def newton(rc):
            rhs = -rd - G.T @ ((-rc + z * rp) / s)
            dx = cho_solve(fac, rhs)
            ds = -rp - G @ dx
            dz = (-rc - z * ds) / s
            return dx, ds, dz

        def max_step(v, dv):
            neg = dv < 0
            return min(1.0, float(np.min(-v[neg] / dv[neg]))) if np.any(neg) else 1.0

        with np.errstate(over="ignore", divide="ignore", invalid="ignore"):
            try:
                dx, ds, dz = newton(s * z)
                a_aff = min(max_step(s, ds), max_step(z, dz))
                mu_aff = float((s + a_aff * ds) @ (z + a_aff * dz)) / m
                sigma = (mu_aff / mu) ** 3 if mu > 0 else 0.0
                dx, ds, dz = newton(s * z + ds * dz - sigma * mu)
            except ValueError:
                status = "numerical"
                break
        if not (np.all(np.isfinite(dx)) and np.all(np.isfinite(dz))):
            status = "numerical"
            break
        a = 0.995 * min(max_step(s, ds), max_step(z, dz))
        x = x + a * dx
        s = s + a * ds
        z = z + a * dz
    else:
        it = max_iter
    if status != "optimal":
        # loose-tolerance iterates are still usable as SQP steps
        _, x, z = best
        if best[0] < 1e-6:
            status = "optimal_inaccurate"
    return QPResult(x, z, status, it)
