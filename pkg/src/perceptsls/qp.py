"""Operator-splitting solver for convex QPs: minimize 0.5 x'Px + q'x s.t. l <= Ax <= u.

ADMM of the OSQP family with a single sparse KKT factorization per rho setting,
over-relaxation, per-row step sizes (equality rows are driven harder), and an
active-set polish that refines the first-order solution to direct-solver
accuracy. Everything is deterministic for fixed inputs.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
import scipy.sparse as sp
import scipy.sparse.linalg as spla


@dataclass
class QpResult:
    status: str  # "solved" | "max_iter"
    x: np.ndarray
    y: np.ndarray
    iterations: int
    primal_residual: float
    dual_residual: float
    polished: bool


def _kkt_factor(P, A, sigma, rho_vec):
    m = A.shape[0]
    KKT = sp.bmat(
        [
            [P + sigma * sp.eye(P.shape[0], format="csc"), A.T],
            [A, -sp.diags(1.0 / rho_vec)],
        ],
        format="csc",
    )
    return spla.splu(KKT)


def solve_qp(
    P,
    q,
    A,
    l,
    u,
    eps_abs: float = 1e-8,
    eps_rel: float = 1e-8,
    max_iter: int = 200000,
    sigma: float = 1e-6,
    rho: float = 0.1,
    alpha: float = 1.6,
    polish: bool = True,
) -> QpResult:
    """Solve the QP; `l == u` rows are equalities. P must be PSD (sparse), A sparse."""
    n = P.shape[0]
    m = A.shape[0]
    P = sp.csc_matrix(P)
    A = sp.csc_matrix(A)
    q = np.asarray(q, dtype=float)
    l = np.asarray(l, dtype=float)
    u = np.asarray(u, dtype=float)

    eq = np.isclose(l, u, rtol=0.0, atol=0.0)
    rho_vec = np.full(m, rho)
    rho_vec[eq] = rho * 1e3

    lu = _kkt_factor(P, A, sigma, rho_vec)
    x = np.zeros(n)
    z = np.clip(np.zeros(m), l, u)
    y = np.zeros(m)

    def residuals(x, z, y):
        Ax = A @ x
        rp = float(np.max(np.abs(Ax - z))) if m else 0.0
        rd = float(np.max(np.abs(P @ x + q + A.T @ y)))
        sp_ = max(float(np.max(np.abs(Ax))) if m else 0.0, float(np.max(np.abs(z))) if m else 0.0)
        sd_ = max(
            float(np.max(np.abs(P @ x))),
            float(np.max(np.abs(q))),
            float(np.max(np.abs(A.T @ y))) if m else 0.0,
        )
        return rp, rd, sp_, sd_

    # a polished active-set solve reaches direct-solver accuracy, so try it at a
    # loose first-order tolerance before grinding the ADMM all the way down
    stages = sorted({max(eps_abs, 1e-5), max(eps_abs, 1e-6), eps_abs}, reverse=True)
    stage_idx = 0
    it = 0
    total_cap = max_iter
    status = "max_iter"
    while it < total_cap:
        it += 1
        rhs = np.concatenate([sigma * x - q, z - y / rho_vec])
        sol = lu.solve(rhs)
        xt = sol[:n]
        nu = sol[n:]
        zt = z + (nu - y) / rho_vec
        x = alpha * xt + (1 - alpha) * x
        zr = alpha * zt + (1 - alpha) * z
        z = np.clip(zr + y / rho_vec, l, u)
        y = y + rho_vec * (zr - z)

        if it % 25 == 0 or it == total_cap:
            rp, rd, sp_, sd_ = residuals(x, z, y)
            eps_now = stages[stage_idx]
            if rp <= eps_now + eps_rel * sp_ and rd <= eps_now + eps_rel * sd_:
                cand = QpResult("solved", x.copy(), y.copy(), it, rp, rd, polished=False)
                if polish and m:
                    _polish(P, q, A, l, u, cand)
                final_stage = eps_now <= eps_abs
                if cand.polished or final_stage:
                    return cand
                stage_idx += 1
            elif it % 200 == 0 and rp > 0 and rd > 0:
                ratio = np.sqrt((rp / max(sp_, 1e-12)) / (rd / max(sd_, 1e-12)))
                ratio = float(np.clip(ratio, 1e-3, 1e3))
                if ratio > 5.0 or ratio < 0.2:
                    rho_vec = np.clip(rho_vec * ratio, 1e-6, 1e8)
                    lu = _kkt_factor(P, A, sigma, rho_vec)

    rp, rd, _, _ = residuals(x, z, y)
    res = QpResult(status, x, y, it, rp, rd, polished=False)
    if polish and m:
        _polish(P, q, A, l, u, res)
    return res


def _polish(P, q, A, l, u, res: QpResult, act_tol: float = 1e-7):
    """Solve the equality-constrained QP on the active set and keep it if it improves."""
    n = P.shape[0]
    z = A @ res.x
    lfin, ufin = np.isfinite(l), np.isfinite(u)
    low = lfin & ((z - l <= act_tol * (1 + np.abs(np.where(lfin, l, 0.0)))) | (res.y < -act_tol))
    upp = ufin & ((u - z <= act_tol * (1 + np.abs(np.where(ufin, u, 0.0)))) | (res.y > act_tol))
    act = low | upp
    if not np.any(act):
        return
    Aact = sp.csc_matrix(A[act])
    bact = np.where(low[act], l[act], u[act])
    ma = Aact.shape[0]
    delta = 1e-9
    K = sp.bmat(
        [[P + delta * sp.eye(n, format="csc"), Aact.T], [Aact, -delta * sp.eye(ma, format="csc")]],
        format="csc",
    )
    try:
        lu = spla.splu(K)
    except RuntimeError:
        return
    rhs = np.concatenate([-q, bact])
    sol = lu.solve(rhs)
    # iterative refinement against the unregularized KKT
    for _ in range(3):
        r1 = -q - (P @ sol[:n] + Aact.T @ sol[n:])
        r2 = bact - Aact @ sol[:n]
        sol = sol + lu.solve(np.concatenate([r1, r2]))
    xp = sol[:n]
    yp = np.zeros(A.shape[0])
    yp[act] = sol[n:]
    zp = A @ xp
    rp = float(np.max(np.maximum(zp - u, 0) + np.maximum(l - zp, 0)))
    rd = float(np.max(np.abs(P @ xp + q + A.T @ yp)))
    if rp <= max(res.primal_residual, 1e-9) and rd <= max(res.dual_residual, 1e-9):
        res.x, res.y = xp, yp
        res.primal_residual, res.dual_residual = rp, rd
        res.polished = True
        res.status = "solved"
