"""Two-state linear benchmark for the feasibility and bounded-tracking properties."""

from dataclasses import dataclass, field

import numpy as np

from ..twin.model import LinearTwin
from .mpc import (ControllerConfig, ResilientController, plan_feasible, propagate_covariance, rollout,
                  safety_margins)
from .terminal import compute_terminal_ingredients


def disturbance_tube(A, w_bar, H):
    """tube[j] = sum_{i<j, i>=1} |A^i| w_bar 1: worst-case growth of a one-step error
    bounded by w_bar per component, propagated i steps. tube[0] = tube[1] = 0."""
    n = A.shape[0]
    tube = np.zeros((H, n))
    Ai = np.eye(n)
    for j in range(2, H):
        Ai = Ai @ A
        tube[j] = tube[j - 1] + np.abs(Ai).sum(axis=1) * w_bar
    return tube


@dataclass
class LinearBenchmark:
    """x+ = A x + B u + w with |w_i| <= w_bar, measured exactly, tracked to the origin.

    The controller margins are the propagated-covariance law floored at kappa sigma + e_bar
    plus a worst-case disturbance tube, and the terminal set is sized so that the shifted
    plan with its LQR tail stays admissible after any admissible disturbance.
    """

    A: np.ndarray = field(default_factory=lambda: np.array([[1.0, 0.30], [0.0, 0.70]]))
    B: np.ndarray = field(default_factory=lambda: np.array([[0.0], [0.30]]))
    w_bar: float = 0.01
    y_bound: float = 1.0
    u_bound: float = 3.0
    horizon: int = 10
    q: float = 1.0
    r: float = 3.0          # costly moves make the optimum lean on the output bounds
    tau: int = 2

    @property
    def e_bar(self):
        # the one-step prediction error is the disturbance, bounded in 2-norm
        return self.w_bar * np.sqrt(self.A.shape[0])

    def controller(self, du_max=10.0, tube=True):
        n, m = self.B.shape
        H = self.horizon
        Q = self.q * np.eye(n)
        R = self.r * np.eye(m)
        Sigma_w = np.eye(n) * self.w_bar ** 2 / 3.0
        tb = disturbance_tube(self.A, self.w_bar, H) if tube else None
        cfg = ControllerConfig(Q=Q, R=R, y_safe=np.zeros(n), u_safe=np.zeros(m),
                               u_min=-self.u_bound * np.ones(m), u_max=self.u_bound * np.ones(m),
                               y_min=-self.y_bound * np.ones(n), y_max=self.y_bound * np.ones(n),
                               horizon=H, e_bar=self.e_bar, Sigma_w=Sigma_w, du_max=du_max, margin_tube=tb)
        # error that reaches the last planned state: |A^(H-1) w| componentwise
        AH = np.linalg.matrix_power(self.A, H - 1)
        reach = np.abs(AH).sum(axis=1) * self.w_bar
        # largest margin the controller uses along the horizon at zero risk
        model = LinearTwin(self.A, self.B, tau=self.tau, e_bar=self.e_bar)
        Sig = propagate_covariance(np.zeros((n, n)), self.A, Sigma_w, H)
        m_max = safety_margins(Sig, np.zeros(H), cfg.kappa, cfg.eta, cfg.e_bar, tube=tb).margins.max(axis=0)
        probe = compute_terminal_ingredients(self.A, self.B, Q, R)
        y_t = self.y_bound - m_max - reach
        u_t = self.u_bound - np.abs(probe.K) @ reach
        if np.any(y_t <= 0) or np.any(u_t <= 0):
            raise ValueError("disturbance too large for the benchmark bounds")
        term = compute_terminal_ingredients(self.A, self.B, Q, R, -y_t, y_t, -u_t, u_t)
        # contraction margin of the terminal set must absorb the propagated error
        A_K = term.A_K
        Pi = np.linalg.inv(term.P)
        L = np.linalg.cholesky(term.P)
        rho = float(np.max(np.linalg.eigvals(Pi @ (A_K.T @ term.P @ A_K))).real)
        delta = float(np.linalg.norm(L.T @ (AH @ (self.w_bar * np.ones(n))), ord=2)) * np.sqrt(n)
        need = (delta / (rho ** -0.5 - 1.0)) ** 2 if rho < 1 else np.inf
        if need > term.c:
            raise ValueError(f"terminal set too small for the disturbance: need c >= {need:.3g}, have {term.c:.3g}")
        return ResilientController(model, cfg, term)

    def disturbance(self, rng):
        return rng.uniform(-self.w_bar, self.w_bar, self.A.shape[0])


def shifted_candidate(plan, ctl):
    """[u*(t+1), ..., u*(t+H-1), u_s - K (y_hat(t+H) - y_s)]."""
    cfg = ctl.cfg
    tail = cfg.u_safe - ctl.terminal.K @ (plan.predicted[-1] - cfg.y_safe)
    return np.vstack([plan.inputs[1:], tail[None]])


def _context(model, hist_y, hist_u):
    frames = [np.concatenate([y, u]) for y, u in zip(hist_y, hist_u)]
    need = model.tau - 1
    while len(frames) < need:
        frames.insert(0, frames[0])
    return np.array(frames[-need:]) if need else np.zeros((0, model.d_x))


def initial_state(bench, rng):
    """Half the episodes start anywhere in the box, half moving fast toward a bound, where
    the output constraints bind along the prediction."""
    n = bench.A.shape[0]
    if rng.random() < 0.5:
        return rng.uniform(-0.9, 0.9, n) * bench.y_bound
    x = np.concatenate([rng.uniform(0.3, 0.9, 1), rng.uniform(0.6, 0.9, n - 1)])
    return x * bench.y_bound * rng.choice([-1.0, 1.0])


def feasibility_episode(bench, seed, steps=15, ctl=None):
    """Closed loop from a random initial state. Whenever the plan at t is optimal, the shifted
    candidate is checked against the constraints at t+1.

    Returns (checks, violations).
    """
    ctl = bench.controller() if ctl is None else ctl
    ctl.reset()
    rng = np.random.default_rng(seed)
    n, m = bench.B.shape
    x = initial_state(bench, rng)
    u_prev = np.zeros(m)
    hist_y, hist_u = [x.copy()], [u_prev.copy()]
    Sigma0 = np.zeros((n, n))
    checks = violations = 0
    for _ in range(steps):
        past = _context(ctl.model, hist_y[:-1] or hist_y, hist_u[:-1] or hist_u)
        plan = ctl.plan(past, x, 0.0, Sigma0, u_prev)
        u = plan.inputs[0]
        x_next = bench.A @ x + bench.B @ u + bench.disturbance(rng)
        if plan.status == "optimal":
            cand = shifted_candidate(plan, ctl)
            hist_y2, hist_u2 = hist_y + [x_next], hist_u + [u]
            past2 = _context(ctl.model, hist_y2[:-1], hist_u2[:-1])
            mr, _, _, _ = ctl.margins_for(past2, x_next, cand, Sigma0, ctl.zeta_bar)
            preds, _ = rollout(ctl.model, past2, x_next, cand)
            checks += 1
            if not plan_feasible(ctl.cfg, preds, cand, mr.margins, ctl.terminal, tol=1e-9):
                violations += 1
        hist_y.append(x_next)
        hist_u.append(u)
        x, u_prev = x_next, u
    return checks, violations


def step_bias_tracking(bench, beta, seed=0, steps=150, onset=20, channel=0, ctl=None):
    """Closed loop where the controller sees y + beta e_channel from `onset` on.

    Returns (sup_t ||x(t) - y_safe||, trajectory).
    """
    ctl = bench.controller() if ctl is None else ctl
    ctl.reset()
    rng = np.random.default_rng(seed)
    n, m = bench.B.shape
    x = np.zeros(n)
    u_prev = np.zeros(m)
    hist_y, hist_u = [x.copy()], [u_prev.copy()]
    traj = [x.copy()]
    for t in range(steps):
        y = x.copy()
        if t >= onset:
            y[channel] += beta
        past = _context(ctl.model, hist_y[:-1] or hist_y, hist_u[:-1] or hist_u)
        plan = ctl.plan(past, y, 0.0, np.zeros((n, n)), u_prev)
        u = plan.inputs[0]
        x = bench.A @ x + bench.B @ u + bench.disturbance(rng)
        hist_y.append(y)
        hist_u.append(u)
        traj.append(x.copy())
        u_prev = u
    traj = np.array(traj)
    return float(np.max(np.linalg.norm(traj - ctl.cfg.y_safe, axis=1))), traj
