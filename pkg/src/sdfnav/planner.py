"""Sequential convex programming MPC for a unicycle in an SDF map.

The map is anything exposing ``query_smooth(points)`` and
``query_smooth_with_grad(points)``; :class:`AnalyticMap` wraps the ground truth.
"""

import time
from dataclasses import dataclass, field, replace

import numpy as np

from .qp import QpProblem, solve_qp
from .world import body_points_from_state, ground_truth_sdf, ground_truth_sdf_grad, unicycle_step, wrap_angle

NX, NU = 3, 2


class AnalyticMap:
    """Exact SDF of a world, presented through the learned-map interface."""

    records = ()

    def __init__(self, world):
        self.world = world

    def query(self, p):
        return ground_truth_sdf(self.world, np.atleast_2d(p))

    query_smooth = query

    def confidence(self, p):
        return np.ones(len(np.atleast_2d(p)))

    def query_with_confidence(self, p):
        v = self.query(p)
        return v, np.ones_like(v)

    def query_full(self, p):
        v = self.query(p)
        return v, np.ones_like(v), np.zeros(len(v), dtype=int)

    def selected_grad(self, p, k=None):
        return ground_truth_sdf_grad(self.world, np.atleast_2d(p))[1]

    def query_smooth_with_grad(self, p):
        return ground_truth_sdf_grad(self.world, np.atleast_2d(p))


@dataclass
class OcpSpec:
    x0: np.ndarray
    goal: np.ndarray
    T: int = 20
    dt: float = 0.25
    w: tuple = (1.0, 1.0, 0.1, 1e3)
    Q: tuple = (1.0, 1.0, 0.1)
    R: tuple = (0.1, 0.05)
    u_lower: tuple = (-0.5, -1.5)
    u_upper: tuple = (1.0, 1.5)
    rho_x: float = 1.0
    rho_u: float = 1.0
    eps: float = 1e-3
    max_iter: int = 30
    margin: float = 0.05
    backoff: float = 1e-4
    softmin: float = 0.0
    qp_tol: float = 1e-4
    qp_max_iter: int = 4000

    def __post_init__(self):
        self.x0 = np.asarray(self.x0, dtype=np.float64)
        self.goal = np.asarray(self.goal, dtype=np.float64)
        if self.T < 1:
            raise ValueError("horizon must be at least 1")
        if min(self.Q) <= 0 or min(self.R) <= 0:
            raise ValueError("Q and R must be positive definite")
        if self.rho_x <= 0 or self.rho_u <= 0 or self.w[3] < 0:
            raise ValueError("trust penalties must be positive and w4 non-negative")
        if not np.all(np.asarray(self.u_lower) < np.asarray(self.u_upper)):
            raise ValueError("empty control box")


@dataclass
class TrajectorySolution:
    X: np.ndarray
    U: np.ndarray
    costs: dict
    iterations: int
    converged: bool
    cost_history: list = field(default_factory=list)
    qp_failures: int = 0


def rollout(x0, U, dt):
    X = np.empty((len(U) + 1, NX))
    X[0] = x0
    for t, u in enumerate(U):
        X[t + 1] = unicycle_step(X[t], u, dt)
    return X


def linearize_dynamics(x, u, dt):
    """Jacobians (A, B) of the Euler unicycle step at (x, u)."""
    th, v = x[2], u[0]
    c, s = np.cos(th), np.sin(th)
    A = np.eye(NX)
    A[0, 2] = -v * s * dt
    A[1, 2] = v * c * dt
    B = np.array([[c * dt, 0.0], [s * dt, 0.0], [0.0, dt]])
    return A, B


def _body_theta_jac(theta, body):
    c, s = np.cos(theta), np.sin(theta)
    return np.stack([-s * body[:, 0] - c * body[:, 1], c * body[:, 0] - s * body[:, 1]], axis=1)


def softmin(vals, beta):
    """-log(sum exp(-beta v)) / beta along the last axis, with its weights."""
    m = vals.min(axis=-1, keepdims=True)
    e = np.exp(-beta * (vals - m))
    tot = e.sum(axis=-1, keepdims=True)
    return (m - np.log(tot) / beta)[..., 0], e / tot


def collision_distance(X, gmap, model, margin=0.0, dim=2, beta=0.0):
    """d(x_t) = min over body samples of (S_map(p_k) - r_k) - margin, for each row of X.

    ``beta > 0`` swaps the hard min for a softmin of that sharpness."""
    pts = np.concatenate([body_points_from_state(x, model, dim) for x in X])
    vals = np.asarray(gmap.query_smooth(pts), dtype=np.float64).reshape(len(X), model.n_body)
    vals = vals - model.body_radii
    if beta > 0:
        return softmin(vals, beta)[0] - margin
    return vals.min(axis=1) - margin


def linearize_collision(X, gmap, model, margin=0.0, dim=2):
    """Values d_t and state gradients (T, 3) of the collision distance.

    The body-sample minimum is a hard min; the gradient flows through the
    minimising sample (lowest index on ties)."""
    X = np.atleast_2d(X)
    K = model.n_body
    pts = np.concatenate([body_points_from_state(x, model, dim) for x in X])
    vals, grads = gmap.query_smooth_with_grad(pts)
    vals = np.asarray(vals, dtype=np.float64).reshape(len(X), K) - model.body_radii
    grads = np.asarray(grads, dtype=np.float64).reshape(len(X), K, -1)[..., :2]
    k = np.argmin(vals, axis=1)
    rows = np.arange(len(X))
    d = vals[rows, k] - margin
    g = grads[rows, k]
    dp_dth = np.stack([_body_theta_jac(x[2], model.body_points[[kk]])[0] for x, kk in zip(X, k)])
    jac = np.column_stack([g[:, 0], g[:, 1], (g * dp_dth).sum(axis=1)])
    return d, jac


def linearize_body(X, gmap, model, margin=0.0, dim=2):
    """Per-sample collision values (T, K), state gradients (T, K, 3) and
    rotational curvatures (T, K).

    min_k of the linearisations is the convex model of min_k of the samples,
    so the QP gets one row per sample instead of the minimiser alone."""
    X = np.atleast_2d(X)
    K = model.n_body
    pts = np.concatenate([body_points_from_state(x, model, dim) for x in X])
    vals, grads = gmap.query_smooth_with_grad(pts)
    vals = np.asarray(vals, dtype=np.float64).reshape(len(X), K) - model.body_radii - margin
    g = np.asarray(grads, dtype=np.float64).reshape(len(X), K, -1)[..., :2]
    b = model.body_points
    c, s = np.cos(X[:, 2])[:, None], np.sin(X[:, 2])[:, None]
    rb = np.stack([c * b[:, 0] - s * b[:, 1], s * b[:, 0] + c * b[:, 1]], axis=-1)
    drb = np.stack([-s * b[:, 0] - c * b[:, 1], c * b[:, 0] - s * b[:, 1]], axis=-1)
    jac = np.concatenate([g, (g * drb).sum(-1, keepdims=True)], axis=-1)
    return vals, jac, -(g * rb).sum(-1)


def cost_terms(X, U, spec, d=None):
    Q, R = np.asarray(spec.Q), np.asarray(spec.R)
    e = X - spec.goal
    c1 = float((e * e * Q).sum())
    c2 = float((U * U * R).sum())
    c3 = float(((U[1:] - U[:-1]) ** 2).sum())
    c4 = 0.0 if d is None else float(np.maximum(-d, 0.0).sum())
    w = spec.w
    total = w[0] * c1 + w[1] * c2 + w[2] * c3 + w[3] * c4
    return {"total": total, "c1": c1, "c2": c2, "c3": c3, "c4": c4}


def eval_cost(X, U, spec, gmap=None, model=None, dim=2):
    d = None if gmap is None else collision_distance(X, gmap, model, spec.margin, dim, spec.softmin)
    return cost_terms(X, U, spec, d)


def dynamics_curvature(X, U, lam, dt):
    """Dynamics Lagrangian Hessian over each (theta_t, v_t).

    ``lam`` holds the multipliers of the dynamics rows (T+1, 3) from the
    previous subproblem. The Euler step is bilinear in (theta, v), so each
    block is 2x2 and indefinite; :func:`assemble_qp` restores convexity."""
    blocks = np.zeros((len(U), 2, 2))
    for t in range(len(U)):
        th, v = X[t, 2], U[t, 0]
        c, s = np.cos(th), np.sin(th)
        lx, ly = lam[t, 0], lam[t, 1]
        h_tt = dt * v * (lx * c + ly * s)
        h_tv = dt * (lx * s - ly * c)
        blocks[t] = [[h_tt, h_tv], [h_tv, 0.0]]
    return blocks


def curvature_matrix(T1, dyn_blocks=None, state_blocks=None):
    """Dense (dx, du) curvature from per-step (theta_t, v_t) blocks and
    per-state 3x3 blocks."""
    nxv = NX * (T1 + 1)
    C = np.zeros((nxv + NU * T1, nxv + NU * T1))
    if dyn_blocks is not None:
        for t, H in enumerate(dyn_blocks):
            idx = [NX * t + 2, nxv + NU * t]
            C[np.ix_(idx, idx)] += H
    if state_blocks is not None:
        for t, H in enumerate(state_blocks):
            C[NX * t:NX * (t + 1), NX * t:NX * (t + 1)] += H
    return C


def map_hessian(gmap, pts, h=1e-3):
    """Spatial Hessian of the map's smooth SDF by central differences of its gradient."""
    pts = np.atleast_2d(pts)
    D = pts.shape[1]
    H = np.zeros((len(pts), D, D))
    for j in range(D):
        e = np.zeros(D)
        e[j] = h
        _, gp = gmap.query_smooth_with_grad(pts + e)
        _, gm = gmap.query_smooth_with_grad(pts - e)
        H[:, :, j] = (np.asarray(gp, dtype=np.float64) - np.asarray(gm, dtype=np.float64)) / (2 * h)
    return 0.5 * (H + H.transpose(0, 2, 1))


def collision_curvature(X, gmap, model, mu, theta_curv, dim=2):
    """Per-state 3x3 Hessian of sum_k mu_tk d_k(x_t).

    ``mu`` (T, K) are collision-row multipliers; only samples with nonzero
    multipliers are differentiated a second time."""
    T, K = mu.shape
    blocks = np.zeros((T, NX, NX))
    blocks[:, 2, 2] = (mu * theta_curv).sum(axis=1)
    tt, kk = np.nonzero(np.abs(mu) > 1e-12)
    if tt.size == 0:
        return blocks
    pts = np.stack([body_points_from_state(X[t], model, dim)[k] for t, k in zip(tt, kk)])
    Hs = map_hessian(gmap, pts)[:, :2, :2]
    b = model.body_points[kk]
    c, s = np.cos(X[tt, 2]), np.sin(X[tt, 2])
    drb = np.stack([-s * b[:, 0] - c * b[:, 1], c * b[:, 0] - s * b[:, 1]], axis=1)
    J = np.concatenate([np.broadcast_to(np.eye(2), (len(tt), 2, 2)), drb[:, :, None]], axis=2)
    contrib = mu[tt, kk][:, None, None] * np.einsum("nai,nab,nbj->nij", J, Hs, J)
    np.add.at(blocks, tt, contrib)
    return blocks


def _sensitivity(dyn_lin):
    """G with dx = G du for the linearised dynamics started at dx_0 = 0."""
    T1 = len(dyn_lin)
    G = np.zeros((NX * (T1 + 1), NU * T1))
    for t, (At, Bt) in enumerate(dyn_lin):
        r0, r1 = NX * t, NX * (t + 1)
        G[r1:r1 + NX] = At @ G[r0:r1]
        G[r1:r1 + NX, NU * t:NU * (t + 1)] += Bt
    return G


def _convexify(P, dyn_lin, nxv, nuv, rel_floor=1e-6):
    """Replace the (dx, du) block of P by a PSD form acting on du alone.

    With dx = G du the quadratic part equals du' (Z'PZ) du, Z = [G; I]. That
    reduced matrix has its eigenvalues clipped from below at a small floor
    (negative curvature is dropped, not mirrored) and replaces the du block;
    the dx block is zeroed."""
    nz = nxv + nuv
    Z = np.vstack([_sensitivity(dyn_lin), np.eye(nuv)])
    Hr = Z.T @ P[:nz, :nz] @ Z
    Hr = 0.5 * (Hr + Hr.T)
    lam, V = np.linalg.eigh(Hr)
    floor = rel_floor * max(1.0, np.abs(lam).max())
    lam = np.maximum(lam, floor)
    P[:nz, :nz] = 0.0
    P[nxv:nz, nxv:nz] = (V * lam) @ V.T


def assemble_qp(X, U, spec, dyn_lin, col_lin=None, curv=None):
    """Convex subproblem in (dx, du, s).

    ``dyn_lin`` is a list of (A_t, B_t); ``col_lin`` is (d_bar, grad) or None,
    with d_bar of shape (T+2,) or (T+2, K) and grad (T+2, 3) or (T+2, K, 3).
    ``curv`` optionally adds a Lagrangian curvature matrix over (dx, du)
    (see :func:`curvature_matrix`); P is then convexified. Slack variables
    are only emitted when collision terms are present and w4 > 0."""
    T1 = len(U)  # T + 1 controls
    if len(X) != T1 + 1 or len(dyn_lin) != T1:
        raise ValueError("trajectory and linearisation lengths disagree")
    nxv, nuv = NX * (T1 + 1), NU * T1
    use_slack = col_lin is not None and spec.w[3] > 0
    ns = (T1 + 1) if use_slack else 0
    n = nxv + nuv + ns
    sx, su, ss = slice(0, nxv), slice(nxv, nxv + nuv), slice(nxv + nuv, n)
    w1, w2, w3, w4 = spec.w
    Q, R = np.asarray(spec.Q), np.asarray(spec.R)

    P = np.zeros((n, n))
    q = np.zeros(n)
    const = 0.0
    e = (X - spec.goal).ravel()
    qd = np.tile(Q, T1 + 1)
    P[sx, sx] += np.diag(2 * w1 * qd)
    q[sx] += 2 * w1 * qd * e
    const += w1 * float(qd @ (e * e))
    ub = U.ravel()
    rd = np.tile(R, T1)
    P[su, su] += np.diag(2 * w2 * rd)
    q[su] += 2 * w2 * rd * ub
    const += w2 * float(rd @ (ub * ub))
    if T1 > 1:
        Dm = np.kron(np.diff(np.eye(T1), axis=0), np.eye(NU))
        DtD = Dm.T @ Dm
        P[su, su] += 2 * w3 * DtD
        q[su] += 2 * w3 * DtD @ ub
        const += w3 * float(ub @ DtD @ ub)

    if curv is not None:
        P[:nxv + nuv, :nxv + nuv] += curv
        _convexify(P, dyn_lin, nxv, nuv)
    # trust penalties go on after convexification so raising rho always shrinks the step
    P[sx, sx] += 2 * spec.rho_x * np.eye(nxv)
    P[su, su] += 2 * spec.rho_u * np.eye(nuv)
    rows_A, rows_l, rows_u = [], [], []
    # dx_0 = 0 and dx_{t+1} = A_t dx_t + B_t du_t
    E = np.zeros((NX, n))
    E[:, 0:NX] = np.eye(NX)
    rows_A.append(E)
    rows_l.append(np.zeros(NX))
    rows_u.append(np.zeros(NX))
    for t, (At, Bt) in enumerate(dyn_lin):
        E = np.zeros((NX, n))
        E[:, NX * (t + 1):NX * (t + 2)] = np.eye(NX)
        E[:, NX * t:NX * (t + 1)] = -At
        E[:, nxv + NU * t:nxv + NU * (t + 1)] = -Bt
        rows_A.append(E)
        rows_l.append(np.zeros(NX))
        rows_u.append(np.zeros(NX))
    # control box on u + du
    Bx = np.zeros((nuv, n))
    Bx[:, su] = np.eye(nuv)
    rows_A.append(Bx)
    rows_l.append(np.tile(spec.u_lower, T1) - ub)
    rows_u.append(np.tile(spec.u_upper, T1) - ub)
    if use_slack:
        d_bar, jac = col_lin
        q[ss] = w4
        S0 = np.zeros((ns, n))
        S0[:, ss] = np.eye(ns)
        rows_A.append(S0)
        rows_l.append(np.zeros(ns))
        rows_u.append(np.full(ns, np.inf))
        # s_t + grad_tk . dx_t >= -d_bar_tk, one row per body sample
        d_bar = np.asarray(d_bar).reshape(ns, -1)
        jac = np.asarray(jac).reshape(ns, d_bar.shape[1], NX)
        K = d_bar.shape[1]
        S1 = np.zeros((ns * K, n))
        for t in range(ns):
            S1[t * K:(t + 1) * K, nxv + nuv + t] = 1.0
            S1[t * K:(t + 1) * K, NX * t:NX * (t + 1)] = jac[t]
        rows_A.append(S1)
        rows_l.append(-d_bar.ravel())
        rows_u.append(np.full(ns * K, np.inf))
    layout = {"dx": sx, "du": su, "s": ss, "T1": T1}
    return QpProblem(P, q, np.vstack(rows_A), np.concatenate(rows_l), np.concatenate(rows_u), const, layout)


def zero_step(qp, col_lin=None):
    """The always-feasible point dx = 0, du = 0, s = max(-d_bar, 0)."""
    z = np.zeros(qp.n)
    if col_lin is not None and qp.layout["s"].stop > qp.layout["s"].start:
        d_bar = np.asarray(col_lin[0]).reshape(len(z[qp.layout["s"]]), -1)
        z[qp.layout["s"]] = np.maximum(-d_bar.min(axis=1), 0.0)
    return z


def pursuit_guess(x0, goal, T1, dt, lo, hi, clear=None, k_w=2.0, k_v=1.0):
    """Controls from a turn-then-drive pursuit law rolled out from ``x0``.

    Gets the first SCP iterate into the turning basin instead of the
    reversing one that the zero guess tends to fall into. ``clear(x)``, if
    given, is the collision distance; the guess stops rather than drive
    deeper into an obstacle."""
    lo, hi = np.asarray(lo), np.asarray(hi)
    U = np.zeros((T1, NU))
    x = np.asarray(x0, dtype=np.float64).copy()
    for t in range(T1):
        e = goal[:2] - x[:2]
        dist = np.hypot(*e)
        err = wrap_angle(np.arctan2(e[1], e[0]) - x[2]) if dist > 1e-9 else 0.0
        if dist < 0.05:
            err = goal[2] - x[2]
        v = k_v * dist * max(np.cos(err), 0.0) ** 2
        U[t] = np.clip([v, k_w * err], lo, hi)
        nxt = unicycle_step(x, U[t], dt)
        if clear is not None and U[t, 0] != 0.0:
            d_next = clear(nxt)
            if d_next < 0 and d_next < clear(x):
                U[t, 0] = np.clip(0.0, lo[0], hi[0])
                nxt = unicycle_step(x, U[t], dt)
        x = nxt
    return U


def scp_solve(spec, gmap=None, model=None, U0=None, dim=2, rho_growth=2.0, rho_decay=0.9, max_rejects=5,
              rho_floor=1e-3, second_order=True, fast_decay=0.1):
    """Sequential convex programming with trust penalties and true-cost acceptance.

    States are always re-rolled through the nonlinear dynamics, so every
    iterate is dynamically feasible. A step that raises the true cost is
    rejected and retried with doubled trust penalties."""
    T1 = spec.T + 1
    lo, hi = np.asarray(spec.u_lower), np.asarray(spec.u_upper)
    if U0 is None:
        clear = None
        if gmap is not None and model is not None:
            clear = lambda x: collision_distance(x[None], gmap, model, spec.margin, dim, spec.softmin)[0]
        U0 = pursuit_guess(spec.x0, spec.goal, T1, spec.dt, lo, hi, clear)
    U = np.clip(np.asarray(U0, dtype=np.float64), lo, hi)
    X = rollout(spec.x0, U, spec.dt)
    use_map = gmap is not None and model is not None
    cur = eval_cost(X, U, spec, gmap if use_map else None, model, dim)
    history = [cur["total"]]
    rho_x0 = spec.rho_x if rho_floor is None else rho_floor
    rho_u0 = spec.rho_u if rho_floor is None else rho_floor
    sp = replace(spec)
    converged, it, failures = False, 0, 0
    y_warm = None
    for it in range(1, spec.max_iter + 1):
        dyn = [linearize_dynamics(X[t], U[t], spec.dt) for t in range(T1)]
        col = hth = None
        if use_map:
            d_bar, jac, hth = linearize_body(X, gmap, model, spec.margin, dim)
            if spec.softmin > 0:
                # one smooth row per state; curvature of the softmin itself is left out
                d_bar, wts = softmin(d_bar, spec.softmin)
                jac = (wts[..., None] * jac).sum(axis=1)
                hth = None
            # rows ask for a sliver more than the margin so linearisation
            # error at active contacts does not show up as penetration
            col = (d_bar - spec.backoff, jac)
        curv = None
        if second_order and y_warm is not None:
            lam = y_warm[NX:NX * (T1 + 1)].reshape(T1, NX)
            state = None
            if col is not None and hth is not None and spec.w[3] > 0:
                # collision rows come last; their multipliers are <= 0
                mu = y_warm[-hth.size:].reshape(hth.shape)
                state = collision_curvature(X, gmap, model, mu, hth, dim)
            curv = curvature_matrix(T1, dynamics_curvature(X, U, lam, spec.dt), state)
        accepted = False
        for _ in range(max_rejects + 1):
            qp = assemble_qp(X, U, sp, dyn, col, curv)
            res = solve_qp(qp, tol=spec.qp_tol, max_iter=spec.qp_max_iter)
            if res.status != "solved":
                failures += 1
                break
            y_warm = res.y
            U_new = np.clip(U + res.x[qp.layout["du"]].reshape(T1, NU), lo, hi)
            X_new = rollout(spec.x0, U_new, spec.dt)
            step = np.linalg.norm(X_new - X) + np.linalg.norm(U_new - U)
            new = eval_cost(X_new, U_new, spec, gmap if use_map else None, model, dim)
            if new["total"] <= cur["total"] + 1e-12 * max(1.0, abs(cur["total"])):
                accepted = True
                dx, du = res.x[qp.layout["dx"]], res.x[qp.layout["du"]]
                model_new = qp.objective(res.x) - sp.rho_x * (dx @ dx) - sp.rho_u * (du @ du)
                pred = cur["total"] - model_new
                ratio = (cur["total"] - new["total"]) / pred if pred > 1e-12 else 1.0
                break
            if step < spec.eps:
                break
            sp = replace(sp, rho_x=sp.rho_x * rho_growth, rho_u=sp.rho_u * rho_growth)
        if res.status != "solved":
            break
        if accepted:
            X, U, cur = X_new, U_new, new
            history.append(cur["total"])
            f = fast_decay if ratio > 0.75 else (rho_decay if ratio > 0.25 else 1.0)
            sp = replace(sp, rho_x=max(sp.rho_x * f, rho_x0), rho_u=max(sp.rho_u * f, rho_u0))
        if step < spec.eps:
            converged = True
            break
    return TrajectorySolution(X, U, cur, it, converged, history, failures)


@dataclass
class MpcResult:
    u0: np.ndarray
    solution: TrajectorySolution
    fallback: bool
    solve_ms: float


def shift_controls(U, k=1):
    """Drop the first ``k`` controls and repeat the last one to keep the length."""
    k = min(k, len(U) - 1)
    return np.vstack([U[k:], np.repeat(U[-1:], k, axis=0)])


def goal_state(state, goal_xy):
    """Goal pose whose heading points from the robot to the goal, unwrapped
    next to the current heading."""
    bearing = np.arctan2(goal_xy[1] - state[1], goal_xy[0] - state[0])
    return np.array([goal_xy[0], goal_xy[1], state[2] + wrap_angle(bearing - state[2])])


def mpc_step(state, gmap, goal, model, warm=None, spec_kw=None, dim=2, c4_limit=0.05, shift=1):
    """Solve from ``state`` and return the first control.

    When SCP does not converge and the plan still predicts penetration
    beyond ``c4_limit`` the robot is told to stop."""
    spec_kw = dict(spec_kw or {})
    spec = OcpSpec(x0=np.asarray(state, dtype=np.float64), goal=np.asarray(goal, dtype=np.float64),
                   u_lower=tuple(model.u_lower), u_upper=tuple(model.u_upper), dt=model.dt, **spec_kw)
    U0 = None if warm is None else shift_controls(warm, shift)
    t0 = time.perf_counter()
    sol = scp_solve(spec, gmap, model, U0, dim)
    ms = 1e3 * (time.perf_counter() - t0)
    fallback = (not sol.converged) and sol.costs["c4"] > c4_limit
    u0 = np.zeros(NU) if fallback else np.clip(sol.U[0], model.u_lower, model.u_upper)
    return MpcResult(u0, sol, fallback, ms)
