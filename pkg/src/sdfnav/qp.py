"""Operator-splitting (ADMM) solver for convex QPs

    minimize 0.5 x'Px + q'x  subject to  l <= Ax <= u

following the OSQP iteration: a regularised reduced KKT solve, relaxation,
projection onto the box, adaptive step size, and a final active-set polish.
"""

from dataclasses import dataclass, field

import numpy as np
from scipy import linalg


@dataclass
class QpProblem:
    P: np.ndarray
    q: np.ndarray
    A: np.ndarray
    l: np.ndarray
    u: np.ndarray
    const: float = 0.0
    layout: dict = field(default_factory=dict)

    def __post_init__(self):
        n = len(self.q)
        if self.P.shape != (n, n) or self.A.shape[1] != n:
            raise ValueError("QP dimensions are inconsistent")
        m = self.A.shape[0]
        if self.l.shape != (m,) or self.u.shape != (m,):
            raise ValueError("constraint bounds have the wrong length")

    @property
    def n(self):
        return len(self.q)

    @property
    def m(self):
        return self.A.shape[0]

    def objective(self, x):
        return float(0.5 * x @ self.P @ x + self.q @ x + self.const)


@dataclass
class QpResult:
    x: np.ndarray
    y: np.ndarray
    status: str
    iterations: int
    prim_res: float
    dual_res: float
    polished: bool = False


def _check_psd(P):
    if not np.allclose(P, P.T, atol=1e-10 * max(1.0, np.abs(P).max())):
        raise ValueError("P is not symmetric")
    ev = linalg.eigvalsh(P)
    if ev.size and ev[0] < -1e-9 * max(1.0, abs(ev[-1])):
        raise ValueError(f"P is not positive semidefinite (min eigenvalue {ev[0]:.3g})")


def residuals(qp, x, z, y):
    ax = qp.A @ x
    px = qp.P @ x
    aty = qp.A.T @ y
    prim = float(np.abs(ax - z).max()) if qp.m else 0.0
    dual = float(np.abs(px + qp.q + aty).max()) if qp.n else 0.0
    prim_scale = max(np.abs(ax).max(initial=0.0), np.abs(z).max(initial=0.0))
    dual_scale = max(np.abs(px).max(initial=0.0), np.abs(aty).max(initial=0.0), np.abs(qp.q).max(initial=0.0))
    return prim, dual, prim_scale, dual_scale


def kkt_residuals(qp, x, y):
    """Stationarity, primal infeasibility and complementarity violations."""
    ax = qp.A @ x
    stat = np.abs(qp.P @ x + qp.q + qp.A.T @ y).max(initial=0.0)
    prim = np.maximum(np.maximum(qp.l - ax, ax - qp.u), 0).max(initial=0.0)
    with np.errstate(invalid="ignore"):
        # y < 0 only at a lower bound, y > 0 only at an upper bound
        comp = np.where(y < 0, -y * np.abs(ax - qp.l), y * np.abs(qp.u - ax))
    comp = np.where(np.isfinite(comp), comp, np.where(y == 0, 0.0, np.inf)).max(initial=0.0)
    return float(stat), float(prim), float(comp)


def _kkt_solve(qp, low, upp, delta):
    act = np.flatnonzero(low | upp)
    target = np.where(low, qp.l, qp.u)[act]
    n, k = qp.n, act.size
    Aa = qp.A[act]
    K = np.zeros((n + k, n + k))
    K[:n, :n] = qp.P + delta * np.eye(n)
    K[:n, n:] = Aa.T
    K[n:, :n] = Aa
    K[n:, n:] = -delta * np.eye(k)
    rhs = np.concatenate([-qp.q, target])
    try:
        lu = linalg.lu_factor(K, check_finite=False)
    except (linalg.LinAlgError, ValueError):
        return None
    sol = linalg.lu_solve(lu, rhs)
    # iterative refinement against the unregularised system
    K0 = K.copy()
    K0[:n, :n] -= delta * np.eye(n)
    K0[n:, n:] = 0
    for _ in range(5):
        sol = sol + linalg.lu_solve(lu, rhs - K0 @ sol)
    if not np.all(np.isfinite(sol)):
        return None
    yp = np.zeros(qp.m)
    yp[act] = sol[n:]
    return sol[:n], yp


def _polish(qp, x, z, y, delta=1e-9, rounds=10):
    """Re-solve the equality-constrained QP on the guessed active set.

    The guess is refined a few times (violated rows join, rows whose
    multiplier has the wrong sign leave); the candidate with the smallest
    KKT violation is returned."""
    eq = qp.l == qp.u
    low = ((z - qp.l < -y) | eq) & np.isfinite(qp.l)
    upp = (qp.u - z < y) & ~low & np.isfinite(qp.u)
    best, best_err = None, np.inf
    for _ in range(rounds):
        out = _kkt_solve(qp, low, upp, delta)
        if out is None:
            break
        xp, yp = out
        err = max(kkt_residuals(qp, xp, yp))
        if err < best_err:
            best, best_err = out, err
        ax = qp.A @ xp
        tol = 1e-9 * max(1.0, np.abs(ax).max(initial=0.0))
        new_low = (low & ((yp <= 0) | eq)) | (~upp & (ax < qp.l - tol))
        new_upp = (upp & (yp >= 0)) | (~new_low & (ax > qp.u + tol))
        if np.array_equal(new_low, low) and np.array_equal(new_upp, upp):
            break
        low, upp = new_low, new_upp
    return best


def _equilibrate(P, q, A, iters=10):
    """Ruiz scaling of the KKT matrix plus a cost scale, as in OSQP.

    Returns scaled (P, q, A) and the factors D (variables), E (rows), c (cost)."""
    n, m = len(q), A.shape[0]
    D, E = np.ones(n), np.ones(m)
    Ps, As, qs = P.copy(), A.copy(), q.copy()
    for _ in range(iters):
        col = np.maximum(np.abs(Ps).max(axis=0, initial=0.0), np.abs(As).max(axis=0, initial=0.0))
        row = np.abs(As).max(axis=1, initial=0.0)
        dx = 1.0 / np.sqrt(np.clip(col, 1e-4, 1e4))
        dz = 1.0 / np.sqrt(np.clip(row, 1e-4, 1e4))
        Ps = dx[:, None] * Ps * dx[None, :]
        As = dz[:, None] * As * dx[None, :]
        qs = dx * qs
        D *= dx
        E *= dz
    c = 1.0 / np.clip(max(np.abs(Ps).max(axis=0, initial=0.0).mean() if n else 0.0,
                          np.abs(qs).max(initial=0.0)), 1e-4, 1e4)
    return c * Ps, c * qs, As, D, E, c


def solve_qp(qp, tol=1e-4, max_iter=4000, rho=0.1, sigma=1e-6, alpha=1.6, x0=None, y0=None,
             polish=True, adapt_every=25, scaling=0):
    """Solve ``qp``; returns a :class:`QpResult` with status ``solved`` or ``max_iter``.

    Iterates on an equilibrated copy; residuals use the OSQP test on the
    original problem with equal absolute and relative tolerance. Once the
    test passes, the active-set polish is tried; if it fails the iteration
    continues toward tighter tolerances (within ``max_iter``) and retries."""
    _check_psd(qp.P)
    n, m = qp.n, qp.m
    if scaling:
        P, q, A, D, E, c = _equilibrate(qp.P, qp.q, qp.A, scaling)
    else:
        P, q, A, D, E, c = qp.P, qp.q, qp.A, np.ones(n), np.ones(m), 1.0
    l, u = E * qp.l, E * qp.u
    eq = np.isclose(qp.l, qp.u)
    x = np.zeros(n) if x0 is None else np.asarray(x0, dtype=np.float64) / D
    y = np.zeros(m) if y0 is None else np.asarray(y0, dtype=np.float64) * c / E
    z = np.clip(A @ x, l, u)

    def factor(rho_s):
        rvec = np.where(eq, 1e3 * rho_s, rho_s)
        M = P + sigma * np.eye(n) + A.T @ (rvec[:, None] * A)
        return rvec, linalg.cho_factor(M)

    def unscale(x, z, y):
        return D * x, z / E, E * y / c

    def try_polish(x, z, y):
        pol = _polish(qp, x, z, y)
        if pol is None:
            return None
        xp, yp = pol
        scale = max(1.0, np.abs(qp.q).max(initial=0.0), np.abs(qp.P @ xp).max(initial=0.0))
        stat, infeas, comp = kkt_residuals(qp, xp, yp)
        if stat <= 1e-8 * scale and infeas <= 1e-8 * scale and comp <= 1e-8 * scale:
            return xp, yp, infeas, stat
        return None

    rvec, fac = factor(rho)
    status, it = "max_iter", 0
    prim = dual = np.inf
    level = tol
    result = None
    for it in range(1, max_iter + 1):
        rhs = sigma * x - q + A.T @ (rvec * z - y)
        xt = linalg.cho_solve(fac, rhs)
        zt = A @ xt
        x_new = alpha * xt + (1 - alpha) * x
        zr = alpha * zt + (1 - alpha) * z
        z_new = np.clip(zr + y / rvec, l, u)
        y = y + rvec * (zr - z_new)
        x, z = x_new, z_new
        if it % 5 == 0 or it == max_iter:
            prim, dual, ps, ds = residuals(qp, *unscale(x, z, y))
            if prim <= level + level * ps and dual <= level + level * ds:
                if status != "solved":
                    status = "solved"
                    result = QpResult(*unscale(x, z, y)[::2], status, it, prim, dual)
                if not polish:
                    break
                pol = try_polish(*unscale(x, z, y))
                if pol is not None:
                    result = QpResult(pol[0], pol[1], status, it, pol[2], pol[3], polished=True)
                    break
                # keep iterating toward a tighter point whose active set polishes
                level *= 0.1
                if level < 1e-10:
                    break
            if adapt_every and it % adapt_every == 0 and m:
                sp, sd, sps, sds = residuals(QpProblem(P, q, A, l, u), x, z, y)
                ratio = np.sqrt((sp / max(sps, 1e-10)) / max(sd / max(sds, 1e-10), 1e-10))
                new_rho = float(np.clip(rho * ratio, 1e-6, 1e6))
                if new_rho > 5 * rho or new_rho < rho / 5:
                    rho = new_rho
                    rvec, fac = factor(rho)
    if result is None:
        xo, _, yo = unscale(x, z, y)
        result = QpResult(xo, yo, status, it, prim, dual)
    elif not result.polished:
        # unpolished: report the latest (most accurate) iterate
        xo, _, yo = unscale(x, z, y)
        result = QpResult(xo, yo, status, it, prim, dual)
    return result
