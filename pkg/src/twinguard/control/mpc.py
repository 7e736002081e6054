"""Uncertainty-aware receding-horizon controller over the twin.

Margins are fixed before the solve: the MC-dropout covariance is propagated with the
last-frame Jacobians along the warm-start trajectory, and the smoothed stealth risk adds a
decaying back-off. The finite-horizon problem is then solved by sequential quadratic
programming on the exact first-order sensitivities of the recursive rollout.
"""

from dataclasses import dataclass, field

import numpy as np

from .qp import solve_qp

STATUSES = ("optimal", "rate-limited", "infeasible", "fallback")


def propagate_covariance(Sigma0, A_seq, Sigma_w, H):
    """Sigma(t) = Sigma0, Sigma(k+1) = A(k) Sigma(k) A(k)' + Sigma_w, each symmetrized.

    A_seq holds at least H-1 matrices (a single matrix is reused). Returns (H, d, d).
    """
    S = 0.5 * (np.asarray(Sigma0, dtype=np.float64) + np.asarray(Sigma0, dtype=np.float64).T)
    A_seq = np.asarray(A_seq, dtype=np.float64)
    if A_seq.ndim == 2:
        A_seq = np.repeat(A_seq[None], max(H - 1, 1), axis=0)
    if len(A_seq) < H - 1:
        raise ValueError(f"need {H - 1} Jacobians for horizon {H}, got {len(A_seq)}")
    W = np.asarray(Sigma_w, dtype=np.float64)
    out = np.empty((H,) + S.shape)
    out[0] = S
    for k in range(1, H):
        A = A_seq[k - 1]
        S = A @ S @ A.T + W
        S = 0.5 * (S + S.T)
        out[k] = S
    return out


def horizon_risk(zeta_t, lambda_d=0.1, H=15, zeta_min_factor=0.1):
    """max(zeta_t exp(-lambda_d (k - t)), zeta_min_factor zeta_t) for k = t..t+H-1."""
    if zeta_t < 0:
        raise ValueError("risk must be non-negative")
    k = np.arange(H)
    return np.maximum(zeta_t * np.exp(-lambda_d * k), zeta_min_factor * zeta_t)


def ema_smooth(prev, now, mu=0.2):
    if not 0 < mu <= 1:
        raise ValueError("mu must lie in (0, 1]")
    return (1.0 - mu) * prev + mu * now


@dataclass
class MarginResult:
    margins: np.ndarray      # (H, d_y)
    clipped: bool
    infeasible: bool


def safety_margins(Sigma_seq, risk, kappa=1.96, eta=0.5, e_bar=0.0, y_min=None, y_max=None,
                   clip_fraction=0.5, tube=None):
    """kappa sqrt(diag Sigma) + eta risk, floored at kappa sqrt(diag Sigma) + e_bar.

    An optional tube (H, d_y) of worst-case disturbance growth is added on top; it only
    raises the margins, so the floor still holds.

    With finite bounds the margin is clipped to clip_fraction of the half-range so the
    tightened set stays non-empty; `clipped` reports whether that cap was reached and
    `infeasible` whether even the floor exceeds the half-range.
    """
    Sigma_seq = np.asarray(Sigma_seq, dtype=np.float64)
    sd = np.sqrt(np.maximum(np.diagonal(Sigma_seq, axis1=1, axis2=2), 0.0))
    risk = np.asarray(risk, dtype=np.float64).reshape(-1, 1)
    base = kappa * sd
    m = np.maximum(base + eta * risk, base + e_bar)
    if tube is not None:
        m = m + np.asarray(tube, dtype=np.float64)
    clipped = infeasible = False
    if y_min is not None and y_max is not None:
        half = 0.5 * (np.asarray(y_max, dtype=np.float64) - np.asarray(y_min, dtype=np.float64))
        fin = np.isfinite(half)
        if np.any(fin):
            cap = clip_fraction * half[fin]
            floor = (base + e_bar)[:, fin]
            infeasible = bool(np.any(floor >= half[fin]))
            sub = m[:, fin]
            clipped = bool(np.any(sub > cap))
            m[:, fin] = np.minimum(sub, cap)
    return MarginResult(m, clipped, infeasible)


def rate_limit(u_star, u_prev, du_max):
    """Scale the step so its norm (scalar du_max) or every component (vector du_max) fits."""
    u_star = np.asarray(u_star, dtype=np.float64)
    u_prev = np.asarray(u_prev, dtype=np.float64)
    step = u_star - u_prev
    du = np.asarray(du_max, dtype=np.float64)
    if np.any(du <= 0):
        raise ValueError("du_max must be positive")
    if du.ndim == 0:
        nrm = np.linalg.norm(step)
        if nrm > du:
            return u_prev + step * (du / nrm), True
        return u_star.copy(), False
    with np.errstate(divide="ignore"):
        ratio = np.where(np.abs(step) > 0, du / np.abs(step), np.inf)
    s = min(1.0, float(ratio.min()))
    if s < 1.0:
        return u_prev + s * step, True
    return u_star.copy(), False


@dataclass
class ControllerConfig:
    Q: np.ndarray
    R: np.ndarray
    y_safe: np.ndarray
    u_safe: np.ndarray
    u_min: np.ndarray
    u_max: np.ndarray
    y_min: np.ndarray
    y_max: np.ndarray
    P: np.ndarray = None
    horizon: int = 15
    kappa: float = 1.96
    eta: float = 0.5
    omega: float = 2.0
    mu: float = 0.2
    lambda_d: float = 0.1
    zeta_min_factor: float = 0.1
    du_max: object = 0.2
    e_bar: float = 0.0
    Sigma_w: np.ndarray = None
    clip_fraction: float = 0.5
    max_iter: int = 15
    tol: float = 1e-6
    T_confirm: int = 60
    tau_recovery: float = 0.05
    T_val: int = 30
    fallback_factor: float = 3.0
    margin_tube: np.ndarray = None

    def __post_init__(self):
        for k in ("Q", "R", "y_safe", "u_safe", "u_min", "u_max", "y_min", "y_max"):
            setattr(self, k, np.asarray(getattr(self, k), dtype=np.float64))
        self.Q = np.atleast_2d(self.Q)
        self.R = np.atleast_2d(self.R)
        self.Q = 0.5 * (self.Q + self.Q.T)
        self.R = 0.5 * (self.R + self.R.T)
        if self.P is not None:
            self.P = np.atleast_2d(np.asarray(self.P, dtype=np.float64))
        d_y = len(self.y_safe)
        self.Sigma_w = np.zeros((d_y, d_y)) if self.Sigma_w is None else np.atleast_2d(np.asarray(self.Sigma_w, dtype=np.float64))
        if self.horizon < 1:
            raise ValueError("horizon must be >= 1")
        for name in ("Q", "R") + (("P",) if self.P is not None else ()):
            M = getattr(self, name)
            if np.min(np.linalg.eigvalsh(0.5 * (M + M.T))) < -1e-12:
                raise ValueError(f"{name} must be positive semidefinite")
        if np.any(self.u_min >= self.u_max) or np.any(self.y_min >= self.y_max):
            raise ValueError("bounds must satisfy min < max")

    @property
    def d_y(self):
        return len(self.y_safe)

    @property
    def d_u(self):
        return len(self.u_safe)


@dataclass
class ControlPlan:
    inputs: np.ndarray           # (H, d_u)
    predicted: np.ndarray        # (H, d_y), y_hat(t+1..t+H)
    covariances: np.ndarray      # (H, d_y, d_y), Sigma(t..t+H-1)
    margins: np.ndarray          # (H, d_y)
    risk: np.ndarray             # (H,)
    status: str
    iterations: int = 0
    margin_clipped: bool = False
    planned: np.ndarray = None   # first input before rate limiting
    info: dict = field(default_factory=dict)

    @property
    def u(self):
        return self.inputs[0]


# -- rollout and sensitivities -------------------------------------------------
def rollout(model, past, y0, U):
    """Recursive prediction. past is (tau-1, d_x) of full frames before t, y0 the state at t.

    Returns (predictions (H, d_y), contexts (H, tau, d_x)).
    """
    tau, d_y = model.tau, model.d_y
    H = len(U)
    frames = np.zeros((tau - 1 + H, model.d_x))
    frames[:tau - 1] = past[-(tau - 1):] if tau > 1 else frames[:0]
    ctxs = np.empty((H, tau, model.d_x))
    preds = np.empty((H, d_y))
    y = y0
    for k in range(H):
        frames[tau - 1 + k, :d_y] = y
        frames[tau - 1 + k, d_y:] = U[k]
        ctxs[k] = frames[k:k + tau]
        y = model.predict(ctxs[k])
        preds[k] = y
    return preds, ctxs


def sensitivities(model, ctxs, J=None):
    """S[k] = d y_hat(t+k+1) / d vec(U) through the whole rollout, shape (H, d_y, H d_u).

    Also returns the last-frame Jacobians A[k] = d y_hat(t+k+1) / d y(t+k).
    J may carry precomputed context Jacobians (H, d_y, tau, d_x).
    """
    H, tau = ctxs.shape[0], model.tau
    d_y, d_u = model.d_y, model.d_u
    J = model.jacobians_full(ctxs) if J is None else J
    n = H * d_u
    S = np.zeros((H + 1, d_y, n))                # S[s] for y_hat(t+s); S[0] = 0
    for k in range(H):
        # frame f of context k holds step s = k - (tau - 1) + f
        f_u = max(0, tau - 1 - k)                # first frame with a decision input
        s_u = k - (tau - 1) + f_u
        Ju = J[k, :, f_u:, d_y:]                 # (d_y, k - s_u + 1, d_u)
        acc = np.zeros((d_y, n))
        acc[:, s_u * d_u:(k + 1) * d_u] = Ju.reshape(d_y, -1)
        f_y = max(0, tau - k)                    # first frame with a predicted output
        if f_y < tau:
            s_y = k - (tau - 1) + f_y
            Jy = J[k, :, f_y:, :d_y].reshape(d_y, -1)
            acc += Jy @ S[s_y:k + 1].reshape(-1, n)
        S[k + 1] = acc
    return S[1:], J[:, :, -1, :d_y]


def lqr_input(y, cfg, K):
    return np.clip(cfg.u_safe - K @ (np.asarray(y) - cfg.y_safe), cfg.u_min, cfg.u_max)


def _constraints(cfg, yb, S, U, margins, terminal):
    """Rows of C delta >= b for the input box, tightened outputs and terminal sublevel set."""
    H, d_u = U.shape
    n = H * d_u
    Uf = U.ravel()
    I = np.eye(n)
    rows = [I, -I]
    rhs = [np.tile(cfg.u_min, H) - Uf, Uf - np.tile(cfg.u_max, H)]
    if H > 1:
        # yb[j-1] is y_hat(t+j) for j = 1..H-1 and margins[j] applies to it
        Sj, yj, mj = S[:H - 1], yb[:H - 1], margins[1:H]
        hi = np.flatnonzero(np.isfinite(cfg.y_max))
        lo = np.flatnonzero(np.isfinite(cfg.y_min))
        if len(hi):
            rows.append(-Sj[:, hi, :].reshape(-1, n))
            rhs.append((yj[:, hi] - (cfg.y_max[hi] - mj[:, hi])).ravel())
        if len(lo):
            rows.append(Sj[:, lo, :].reshape(-1, n))
            rhs.append((cfg.y_min[lo] + mj[:, lo] - yj[:, lo]).ravel())
    if terminal is not None and np.isfinite(terminal.c):
        e = yb[-1] - cfg.y_safe
        Pe = terminal.P @ e
        rows.append((-2.0 * Pe @ S[-1])[None])
        rhs.append(np.array([float(e @ Pe) - terminal.c]))
    return np.vstack(rows), np.concatenate(rhs)


def _cost_terms(cfg, P, yb, S, U, u_prev):
    H, d_u = U.shape
    n = H * d_u
    E = yb - cfg.y_safe                                   # (H, d_y)
    SQ = np.einsum("jan,ab->jbn", S, cfg.Q)               # Q S_j
    Hs = np.einsum("jan,jam->nm", S, SQ)
    g = np.einsum("jan,ja->n", SQ, E)
    SP = P @ S[-1]
    Hs += S[-1].T @ SP
    g += SP.T @ E[-1]
    D = np.eye(n) - np.eye(n, k=-d_u)
    Rb = np.kron(np.eye(H), cfg.R)
    du0 = D @ U.ravel()
    du0[:d_u] -= u_prev
    DR = D.T @ Rb
    Hs += DR @ D
    g += DR @ du0
    Hs = 2.0 * Hs
    g = 2.0 * g
    Hs = 0.5 * (Hs + Hs.T) + 1e-10 * np.eye(n) * max(1.0, np.trace(Hs) / n)
    return Hs, g


def plan_cost(cfg, P, preds, U, u_prev):
    H = len(U)
    c = 0.0
    for j in range(H):
        e = preds[j] - cfg.y_safe
        c += e @ cfg.Q @ e
    e = preds[-1] - cfg.y_safe
    c += e @ P @ e
    prev = u_prev
    for k in range(H):
        d = U[k] - prev
        c += d @ cfg.R @ d
        prev = U[k]
    return float(c)


def plan_feasible(cfg, preds, U, margins, terminal, tol=1e-6):
    """Check that an input plan and its predicted outputs satisfy every constraint."""
    if np.any(U < cfg.u_min - tol) or np.any(U > cfg.u_max + tol):
        return False
    for j in range(1, len(U)):
        y = preds[j - 1]
        if np.any(y > cfg.y_max - margins[j] + tol) or np.any(y < cfg.y_min + margins[j] - tol):
            return False
    if terminal is not None and np.isfinite(terminal.c):
        e = preds[-1] - cfg.y_safe
        if float(e @ terminal.P @ e) > terminal.c + tol * max(1.0, terminal.c):
            return False
    return True


def linearize(model, past, y0, U):
    """Rollout along U plus the context Jacobians of every step."""
    preds, ctxs = rollout(model, past, y0, U)
    return preds, ctxs, model.jacobians_full(ctxs)


def solve_mpc(model, past, y0, cfg, margins, terminal, warm_start, u_prev, Sigma_seq=None, risk=None,
              linearization=None):
    """SQP over the twin rollout. Returns a ControlPlan (rate limiting is applied by the caller).

    linearization optionally carries linearize() evaluated at the clipped warm start.
    """
    H, d_u = cfg.horizon, cfg.d_u
    P = cfg.P if cfg.P is not None else (terminal.P if terminal is not None else np.zeros_like(cfg.Q))
    U = np.clip(np.asarray(warm_start, dtype=np.float64).reshape(H, d_u), cfg.u_min, cfg.u_max)
    u_prev = np.asarray(u_prev, dtype=np.float64)
    Sigma_seq = np.zeros((H, cfg.d_y, cfg.d_y)) if Sigma_seq is None else Sigma_seq
    risk = np.zeros(H) if risk is None else risk
    status = "infeasible"
    iters = 0
    preds = None
    try:
        converged = False
        for iters in range(1, cfg.max_iter + 1):
            if iters == 1 and linearization is not None:
                preds, ctxs, J = linearization
            else:
                preds, ctxs, J = linearize(model, past, y0, U)
            S, _ = sensitivities(model, ctxs, J)
            Hs, g = _cost_terms(cfg, P, preds, S, U, u_prev)
            C, b = _constraints(cfg, preds, S, U, margins, terminal)
            res = solve_qp(Hs, g, C, b)
            if not res.ok:
                status = "infeasible"
                break
            step = res.x.reshape(H, d_u)
            U = np.clip(U + step, cfg.u_min, cfg.u_max)
            status = "optimal"
            if np.max(np.abs(step)) < cfg.tol:
                converged = True
                # first-order update of the last rollout, exact to O(tol^2)
                preds = preds + S @ step.ravel()
                break
        if status == "optimal":
            if not converged:
                preds, _ = rollout(model, past, y0, U)
            if not plan_feasible(cfg, preds, U, margins, terminal, tol=max(1e-6, 10 * cfg.tol)):
                status = "infeasible"
    except (np.linalg.LinAlgError, FloatingPointError, ValueError):
        status = "infeasible"
    if status != "optimal":
        K = terminal.K if terminal is not None else np.zeros((d_u, cfg.d_y))
        u_fb = lqr_input(y0, cfg, K)
        U = np.tile(u_fb, (H, 1))
        try:
            preds, _ = rollout(model, past, y0, U)
        except (FloatingPointError, ValueError):
            preds = np.tile(y0, (H, 1))
    return ControlPlan(U, preds, Sigma_seq, margins, risk, status, iters, planned=U[0].copy())


class ResilientController:
    """Stateful wrapper: risk smoothing, margin construction, warm starts, rate limiting."""

    def __init__(self, model, cfg, terminal):
        self.model = model
        self.cfg = cfg
        self.terminal = terminal
        self.reset()

    def reset(self, zeta0=0.0):
        self.zeta_bar = zeta0
        self.last = None

    def warm_start(self, u_prev):
        H = self.cfg.horizon
        if self.last is None or self.last.status not in ("optimal", "rate-limited"):
            return np.tile(np.asarray(u_prev, dtype=np.float64), (H, 1))
        tail = lqr_input(self.last.predicted[-1], self.cfg, self.terminal.K)
        return np.vstack([self.last.inputs[1:], tail[None]])

    def margins_for(self, past, y0, U0, Sigma0, zeta_bar):
        """Covariance propagation, risk profile and margins along the input plan U0."""
        cfg = self.cfg
        H = cfg.horizon
        risk = horizon_risk(zeta_bar, cfg.lambda_d, H, cfg.zeta_min_factor)
        lin = linearize(self.model, past, y0, U0)
        A_seq = lin[2][:H - 1, :, -1, :cfg.d_y]
        Sig = propagate_covariance(Sigma0, A_seq, cfg.Sigma_w, H)
        mr = safety_margins(Sig, risk, cfg.kappa, cfg.eta, cfg.e_bar, cfg.y_min, cfg.y_max, cfg.clip_fraction,
                            cfg.margin_tube)
        return mr, Sig, risk, lin

    def plan(self, past, y0, zeta_now, Sigma0, u_prev):
        cfg = self.cfg
        self.zeta_bar = ema_smooth(self.zeta_bar, zeta_now, cfg.mu)
        U0 = np.clip(self.warm_start(u_prev), cfg.u_min, cfg.u_max)
        mr, Sig, risk, lin = self.margins_for(past, y0, U0, Sigma0, self.zeta_bar)
        plan = solve_mpc(self.model, past, y0, cfg, mr.margins, self.terminal, U0, u_prev, Sig, risk,
                         linearization=lin)
        plan.margin_clipped = mr.clipped
        plan.info["margin_infeasible"] = mr.infeasible
        u, limited = rate_limit(plan.inputs[0], u_prev, cfg.du_max)
        u = np.clip(u, cfg.u_min, cfg.u_max)
        if limited and plan.status == "optimal":
            plan.status = "rate-limited"
        plan.inputs = plan.inputs.copy()
        plan.inputs[0] = u
        self.last = plan
        return plan
