"""LQR terminal ingredients: Riccati gain, Lyapunov terminal cost and an invariant sublevel set."""

from dataclasses import dataclass

import numpy as np
from scipy.linalg import solve_discrete_lyapunov


@dataclass
class TerminalIngredients:
    K: np.ndarray          # (d_u, d_y), u = u_s - K (y - y_s)
    P: np.ndarray          # (d_y, d_y)
    c: float               # terminal set {x : x'Px <= c}
    riccati: np.ndarray = None
    iterations: int = 0
    certified: bool = True
    A_K: np.ndarray = None

    def contains(self, x, tol=1e-9):
        x = np.asarray(x, dtype=np.float64)
        return float(x @ self.P @ x) <= self.c * (1.0 + tol) + tol


def dare_fixed_point(A, B, Q, R, tol=1e-10, max_iter=10_000):
    """Iterate X <- A'XA - A'XB (R + B'XB)^-1 B'XA + Q from X = Q.

    Returns (X, K, iterations). Raises ValueError when the iteration diverges, stalls or
    settles on a non-stabilizing solution.
    """
    A = np.atleast_2d(np.asarray(A, dtype=np.float64))
    B = np.asarray(B, dtype=np.float64).reshape(A.shape[0], -1)
    Q = np.atleast_2d(np.asarray(Q, dtype=np.float64))
    R = np.atleast_2d(np.asarray(R, dtype=np.float64))
    X = Q.copy()
    for it in range(1, max_iter + 1):
        with np.errstate(over="ignore", invalid="ignore"):
            S = R + B.T @ X @ B
            Kx = np.linalg.solve(S, B.T @ X @ A)
            Xn = A.T @ X @ A - A.T @ X @ B @ Kx + Q
            Xn = 0.5 * (Xn + Xn.T)
        if not np.all(np.isfinite(Xn)):
            raise ValueError("unstabilizable pair: Riccati iteration diverged")
        res = np.max(np.abs(Xn - X))
        X = Xn
        if res < tol * max(1.0, np.max(np.abs(X))):
            break
    else:
        raise ValueError(f"unstabilizable pair: Riccati iteration did not converge in {max_iter} steps")
    K = np.linalg.solve(R + B.T @ X @ B, B.T @ X @ A)
    rho = np.max(np.abs(np.linalg.eigvals(A - B @ K)))
    if rho >= 1.0:
        raise ValueError(f"unstabilizable pair: closed-loop spectral radius {rho:.6f} >= 1")
    return X, K, it


def _box_faces(K, y_lo, y_hi, u_lo, u_hi):
    """Half-spaces a'x <= b (deviation coordinates) for the output and input boxes."""
    faces = []
    n = K.shape[1]
    for i in range(n):
        e = np.zeros(n)
        e[i] = 1.0
        if np.isfinite(y_hi[i]):
            faces.append((e, y_hi[i]))
        if np.isfinite(y_lo[i]):
            faces.append((-e, -y_lo[i]))
    for j in range(K.shape[0]):
        if np.isfinite(u_hi[j]):
            faces.append((-K[j], u_hi[j]))
        if np.isfinite(u_lo[j]):
            faces.append((K[j], -u_lo[j]))
    return faces


def sampled_invariance(P, A_K, K, c, y_lo, y_hi, u_lo, u_hi, n_samples=10_000, seed=0, tol=1e-9):
    """Check n_samples points on {x'Px = c}: the successor stays in the set and the output and
    input boxes hold. Returns (passed, number of failures)."""
    n = P.shape[0]
    rng = np.random.default_rng(seed)
    s = rng.standard_normal((n_samples, n))
    L = np.linalg.cholesky(P)
    # x = sqrt(c) L^-T s/|s| has x'Px = c
    s /= np.linalg.norm(s, axis=1, keepdims=True)
    X = np.sqrt(c) * np.linalg.solve(L.T, s.T).T
    Xn = X @ A_K.T
    v_next = np.einsum("ij,jk,ik->i", Xn, P, Xn)
    bad = v_next > c * (1.0 + tol) + tol
    U = -X @ K.T
    bad |= np.any(X > y_hi + tol, axis=1) | np.any(X < y_lo - tol, axis=1)
    bad |= np.any(U > u_hi + tol, axis=1) | np.any(U < u_lo - tol, axis=1)
    return not bad.any(), int(bad.sum())


def compute_terminal_ingredients(A, B, Q, R, y_lo=None, y_hi=None, u_lo=None, u_hi=None,
                                 n_samples=10_000, seed=0, bisect_steps=60):
    """K from the Riccati fixed point, P from A_K'PA_K - P = -Q - K'RK and the largest
    certified radius c.

    Bounds are in deviation coordinates (y - y_s, u - u_s). The starting radius is the
    analytic ellipsoid-in-polytope bound min b^2 / a'P^-1 a; it is then bisected downward
    until the sampled invariance check passes. Without bounds c is infinite.
    """
    A = np.atleast_2d(np.asarray(A, dtype=np.float64))
    B = np.asarray(B, dtype=np.float64).reshape(A.shape[0], -1)
    Q = np.atleast_2d(np.asarray(Q, dtype=np.float64))
    R = np.atleast_2d(np.asarray(R, dtype=np.float64))
    n, m = B.shape
    X, K, it = dare_fixed_point(A, B, Q, R)
    A_K = A - B @ K
    P = solve_discrete_lyapunov(A_K.T, Q + K.T @ R @ K)
    P = 0.5 * (P + P.T)
    if np.min(np.linalg.eigvalsh(P)) <= 0:
        # Q only semidefinite: regularize so the sublevel set is bounded
        P = P + 1e-9 * np.eye(n) * max(1.0, np.trace(P) / n)
    full = lambda v, k, s: np.full(k, s) if v is None else np.broadcast_to(np.asarray(v, dtype=np.float64), (k,))
    y_lo, y_hi = full(y_lo, n, -np.inf), full(y_hi, n, np.inf)
    u_lo, u_hi = full(u_lo, m, -np.inf), full(u_hi, m, np.inf)
    faces = _box_faces(K, y_lo, y_hi, u_lo, u_hi)
    Pinv = np.linalg.inv(P)
    c = np.inf
    for a, b in faces:
        if b <= 0:
            raise ValueError("the steady point must lie strictly inside the bounds")
        q = float(a @ Pinv @ a)
        if q > 0:
            c = min(c, b * b / q)
    ti = TerminalIngredients(K, P, float(c), X, it, A_K=A_K)
    if not np.isfinite(c):
        return ti
    ok, _ = sampled_invariance(P, A_K, K, c, y_lo, y_hi, u_lo, u_hi, n_samples, seed)
    if not ok:
        lo, hi = 0.0, c
        for _ in range(bisect_steps):
            mid = 0.5 * (lo + hi)
            if sampled_invariance(P, A_K, K, mid, y_lo, y_hi, u_lo, u_hi, n_samples, seed)[0]:
                lo = mid
            else:
                hi = mid
        c = lo
        ti.certified = c > 0
    ti.c = float(c)
    return ti
