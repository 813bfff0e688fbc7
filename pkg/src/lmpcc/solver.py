"""Multiple-shooting Gauss-Newton SQP for least-squares optimal control.

Problem layout: fixed initial state ``x_0``, decision variables
``x_1..x_N`` and ``u_0..u_{N-1}``, dynamics ``x_{k+1} = F_k(x_k, u_k)``,
stage residuals ``r_k(x_{k+1}, u_k)`` and box bounds. The objective is
``sum_k ||r_k||^2 + ||rho(x)||^2`` where ``rho`` is an optional affine
residual block over the whole state trajectory.

Each iteration linearises with complex-step derivatives (exact to machine
precision), condenses the states out of the QP, solves the dense QP with the
interior-point method in :mod:`lmpcc.qp` and globalises with an Armijo line
search on the L1 merit ``f + mu ||defects||_1``.
"""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .qp import solve_qp

CS_STEP = 1e-20


class OCProblem:
    """Interface the solver expects; subclass and fill in the hooks.

    ``step`` and ``residuals`` receive ``(N, P, n)`` arrays (P = batch of
    perturbation directions) and must be complex-step safe.
    """

    nx: int
    nu: int
    N: int
    x_lb: np.ndarray
    x_ub: np.ndarray
    u_lb: np.ndarray
    u_ub: np.ndarray
    x_scale: np.ndarray
    u_scale: np.ndarray

    def step(self, X, U):
        raise NotImplementedError

    def residuals(self, Xn, U):
        raise NotImplementedError

    def affine_residuals(self, Xall):
        """Optional ``(rho, G)`` with ``G`` of shape ``(m, N+1, nx)``; ``None`` if absent."""
        return None


@dataclass
class SolverOptions:
    max_iter: int = 50
    kkt_tol: float = 1e-6
    armijo: float = 1e-4
    min_step: float = 1e-6
    reg: float = 1e-9


@dataclass
class SQPResult:
    X: np.ndarray
    U: np.ndarray
    status: str
    iterations: int
    objective: float
    kkt: float
    merit_trace: list = field(default_factory=list)
    lam: np.ndarray | None = None


def _cs_eval(fun, X, U):
    """Value and Jacobians of a stage-wise function via the complex step."""
    N, nx = X.shape
    nu = U.shape[1]
    E = np.eye(nx + nu)
    Xc = X[:, None, :] + 1j * CS_STEP * E[None, :, :nx]
    Uc = U[:, None, :] + 1j * CS_STEP * E[None, :, nx:]
    F = fun(Xc, Uc)
    val = F[:, 0, :].real
    J = np.swapaxes(F.imag / CS_STEP, 1, 2)
    return val, J[:, :, :nx], J[:, :, nx:]


def _real_eval(fun, X, U):
    return fun(X[:, None, :], U[:, None, :])[:, 0, :].real


def rollout(prob: OCProblem, x0, U):
    # stage-dependent dynamics need full-length arrays; N is small
    X = np.tile(np.asarray(x0, dtype=float), (prob.N + 1, 1))
    for k in range(prob.N):
        X[k + 1] = _real_eval(prob.step, X[:-1], U)[k]
    return X[1:]


class GaussNewtonSQP:
    def __init__(self, options: SolverOptions | None = None):
        self.opt = options or SolverOptions()

    def _objective(self, prob, x0, X, U):
        r = _real_eval(prob.residuals, X, U)
        f = float(np.sum(r * r))
        aff = prob.affine_residuals(np.vstack([x0[None], X]))
        if aff is not None:
            f += float(np.sum(aff[0] ** 2))
        return f

    def _defects(self, prob, x0, X, U):
        Xall = np.vstack([x0[None], X])
        return _real_eval(prob.step, Xall[:-1], U) - X

    def solve(self, prob: OCProblem, x0, X, U) -> SQPResult:
        opt = self.opt
        N, nx, nu = prob.N, prob.nx, prob.nu
        x0 = np.asarray(x0, dtype=float)
        X = np.array(X, dtype=float)
        U = np.array(U, dtype=float)
        sx, su = prob.x_scale, prob.u_scale
        mu_pen = 1.0
        lam = None
        nu_x = np.zeros((N, nx))
        nu_u = np.zeros((N, nu))
        trace = []
        status, kkt, it = "degraded", np.inf, 0

        for it in range(opt.max_iter + 1):
            Xall = np.vstack([x0[None], X])
            Fk, A, B = _cs_eval(prob.step, Xall[:-1], U)
            d = Fk - X
            r, Jx, Ju = _cs_eval(prob.residuals, X, U)
            aff = prob.affine_residuals(Xall)
            nr = r.shape[1]
            gx = 2.0 * np.einsum("kri,kr->ki", Jx, r)
            gu = 2.0 * np.einsum("kri,kr->ki", Ju, r)
            if aff is not None:
                rho, Gaff = aff
                gx += 2.0 * np.einsum("m,mki->ki", rho, Gaff[:, 1:])
            f = float(np.sum(r * r)) + (float(np.sum(aff[0] ** 2)) if aff is not None else 0.0)
            if not (np.isfinite(f) and np.all(np.isfinite(A)) and np.all(np.isfinite(Jx))):
                return SQPResult(X, U, "failed", it, f, np.inf, trace, lam)
            phi = f + mu_pen * float(np.sum(np.abs(d)))
            trace.append(phi)

            if lam is not None:
                sx_res = gx - lam + nu_x
                sx_res[:-1] += np.einsum("kij,ki->kj", A[1:], lam[1:])
                su_res = gu + np.einsum("kij,ki->kj", B, lam) + nu_u
                kkt = max(np.max(np.abs(sx_res * sx)), np.max(np.abs(su_res * su)),
                          np.max(np.abs(d / sx)))
                if kkt < opt.kkt_tol:
                    status = "converged"
                    break
            if it == opt.max_iter:
                break

            # condensing: dx_{k+1} = M[k] du + e[k] (du in scaled coordinates)
            nU = N * nu
            M = np.zeros((N, nx, nU))
            e = np.zeros((N, nx))
            Bs = B * su[None, None, :]
            for k in range(N):
                if k > 0:
                    M[k] = A[k] @ M[k - 1]
                    e[k] = A[k] @ e[k - 1]
                M[k, :, k * nu:(k + 1) * nu] += Bs[k]
                e[k] += d[k]
            # stacked residual Jacobian w.r.t. du
            Jc = np.einsum("kri,kij->krj", Jx, M)
            for k in range(N):
                Jc[k, :, k * nu:(k + 1) * nu] += Ju[k] * su[None, :]
            r0 = r + np.einsum("kri,ki->kr", Jx, e)
            Jc = Jc.reshape(N * nr, nU)
            r0 = r0.reshape(N * nr)
            if aff is not None:
                Ga = Gaff[:, 1:]
                Jc = np.vstack([Jc, np.einsum("mki,kij->mj", Ga, M)])
                r0 = np.concatenate([r0, rho + np.einsum("mki,ki->m", Ga, e)])
            H = 2.0 * Jc.T @ Jc + opt.reg * np.eye(nU)
            g = 2.0 * Jc.T @ r0

            # bounds: rows in du space, G du <= h
            rows, hs, tags = [], [], []
            for i in range(nx):
                for k in range(N):
                    for sgn, bound in ((1.0, prob.x_ub[i]), (-1.0, prob.x_lb[i])):
                        if np.isfinite(bound):
                            rows.append(sgn * M[k, i])
                            hs.append(sgn * (bound - X[k, i] - e[k, i]))
                            tags.append((0, k, i, sgn))
            for i in range(nu):
                for k in range(N):
                    for sgn, bound in ((1.0, prob.u_ub[i]), (-1.0, prob.u_lb[i])):
                        if np.isfinite(bound):
                            row = np.zeros(nU)
                            row[k * nu + i] = sgn * su[i]
                            rows.append(row)
                            hs.append(sgn * (bound - U[k, i]))
                            tags.append((1, k, i, sgn))
            G = np.array(rows) if rows else None
            h = np.array(hs) if hs else None
            qp = solve_qp(H, g, G, h)
            if not np.all(np.isfinite(qp.x)):
                return SQPResult(X, U, "failed", it, f, kkt, trace, lam)
            if qp.status == "numerical":
                # no trustworthy step; keep the current iterate
                status = "degraded"
                break
            du = (qp.x.reshape(N, nu)) * su[None, :]
            dX = np.einsum("kij,j->ki", M, qp.x) + e

            # multipliers
            nu_x = np.zeros((N, nx))
            nu_u = np.zeros((N, nu))
            for (kind, k, i, sgn), z in zip(tags, qp.z):
                if kind == 0:
                    nu_x[k, i] += sgn * z
                else:
                    nu_u[k, i] += sgn * z / 1.0
            r_lin = (r0 + Jc @ qp.x)
            r_lin_st = r_lin[:N * nr].reshape(N, nr)
            gqx = 2.0 * np.einsum("kri,kr->ki", Jx, r_lin_st)
            if aff is not None:
                gqx += 2.0 * np.einsum("m,mki->ki", r_lin[N * nr:], Gaff[:, 1:])
            lam = np.zeros((N, nx))
            lam[N - 1] = gqx[N - 1] + nu_x[N - 1]
            for k in range(N - 2, -1, -1):
                lam[k] = gqx[k] + A[k + 1].T @ lam[k + 1] + nu_x[k]
            mu_pen = max(mu_pen, 1.1 * float(np.max(np.abs(lam))))

            phi = f + mu_pen * float(np.sum(np.abs(d)))
            full_step = max(np.max(np.abs(dX / sx)), np.max(np.abs(du / su)))
            if full_step < 1e-10 and np.max(np.abs(d / sx)) < opt.kkt_tol:
                # the QP solution is a KKT point of the NLP: nothing left to do
                kkt = full_step
                status = "converged"
                break
            D =float(np.sum(gx * dX) + np.sum(gu * du)) - mu_pen * float(np.sum(np.abs(d)))
            alpha, accepted = 1.0, False
            while alpha >= opt.min_step:
                Xt, Ut = X + alpha * dX, U + alpha * du
                ft = self._objective(prob, x0, Xt, Ut)
                dt_ = self._defects(prob, x0, Xt, Ut)
                phit = ft + mu_pen * float(np.sum(np.abs(dt_)))
                if np.isfinite(phit) and phit <= phi + opt.armijo * alpha * min(D, 0.0):
                    accepted = True
                    break
                alpha *= 0.5
            if not accepted:
                status = "degraded"
                break
            X, U = Xt, Ut
            step_norm = max(np.max(np.abs(alpha * dX / sx)), np.max(np.abs(alpha * du / su)))
            if step_norm < 1e-10 and np.max(np.abs(dt_ / sx)) < opt.kkt_tol:
                status = "converged"
                it += 1
                break

        f = self._objective(prob, x0, X, U)
        return SQPResult(X, U, status, it, f, kkt, trace, lam)
