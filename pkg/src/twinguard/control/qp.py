"""Strictly convex QP  min 0.5 x'Gx + a'x  s.t.  Cx >= b  by a dual active-set method.

The iteration starts from the unconstrained minimizer and adds the most violated
constraint at each major step while keeping the multipliers dual-feasible
(Goldfarb and Idnani's scheme). The active-set projections are recomputed from
scratch at every step, which is cheap at controller sizes and immune to update drift.
"""

from dataclasses import dataclass, field

import numpy as np


@dataclass
class QpResult:
    x: np.ndarray
    status: str                      # optimal | infeasible | max-iter
    active: list = field(default_factory=list)
    multipliers: np.ndarray = None
    iterations: int = 0

    @property
    def ok(self):
        return self.status == "optimal"


def solve_qp(G, a, C=None, b=None, tol=1e-10, max_iter=1000):
    G = np.atleast_2d(np.asarray(G, dtype=np.float64))
    a = np.asarray(a, dtype=np.float64).ravel()
    n = len(a)
    try:
        L = np.linalg.cholesky(0.5 * (G + G.T))
    except np.linalg.LinAlgError:
        raise ValueError("the Hessian must be positive definite")
    Li = np.linalg.inv(L)
    Gi = Li.T @ Li
    x = -Gi @ a
    if C is None or len(C) == 0:
        return QpResult(x, "optimal", [], np.zeros(0), 0)
    C = np.atleast_2d(np.asarray(C, dtype=np.float64))
    b = np.asarray(b, dtype=np.float64).ravel()
    scale = np.maximum(np.linalg.norm(C, axis=1), 1e-300)
    thr = tol * np.maximum(1.0, np.abs(b))
    A, u = [], np.zeros(0)
    it = 0
    while True:
        s = C @ x - b
        s[A] = 0.0
        viol = s / scale
        p = int(np.argmin(viol))
        if s[p] >= -thr[p]:
            return QpResult(x, "optimal", list(A), u, it)
        up = np.append(u, 0.0)
        while True:
            it += 1
            if it > max_iter:
                return QpResult(x, "max-iter", list(A), u, it)
            n_p = C[p]
            Gn = Gi @ n_p
            q = len(A)
            if q:
                N = C[A].T
                GiN = Gi @ N
                M = N.T @ GiN
                try:
                    r = np.linalg.solve(M, GiN.T @ n_p)
                except np.linalg.LinAlgError:
                    r = np.linalg.lstsq(M, GiN.T @ n_p, rcond=None)[0]
                z = Gn - GiN @ r
            else:
                r = np.zeros(0)
                z = Gn
            pos = np.flatnonzero(r > 1e-14)
            if len(pos):
                ratios = up[pos] / r[pos]
                j = int(np.argmin(ratios))
                t1, k = float(ratios[j]), int(pos[j])
            else:
                t1, k = np.inf, -1
            zn = float(z @ n_p)
            if q >= n or np.linalg.norm(z) <= 1e-10 * np.linalg.norm(Gn) or zn <= 0.0:
                if k < 0:
                    return QpResult(x, "infeasible", list(A), u, it)
                up[:q] -= t1 * r
                up[q] += t1
                del A[k]
                up = np.delete(up, k)
                continue
            t2 = -(float(n_p @ x) - b[p]) / zn
            t = min(t1, t2)
            x = x + t * z
            up[:q] -= t * r
            up[q] += t
            if t2 <= t1:
                A.append(p)
                u = up
                break
            del A[k]
            up = np.delete(up, k)
