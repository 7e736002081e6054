"""Mass-balance and Hazen-Williams consistency losses on predicted sensor sequences."""

from dataclasses import dataclass

import numpy as np

from ..plant.topology import HW_CONST, HW_DEXP, HW_EXP


@dataclass
class PhysicsMap:
    """Sensor indices entering the two physics terms.

    flow_net (n_bal, d_y): +1 on inflow sensors, -1 on outflow sensors of each balanced tank.
    The level coefficient is the cross-sectional area (volume per metre of level).
    """

    level_idx: np.ndarray
    area: np.ndarray
    flow_net: np.ndarray
    pipe_flow: np.ndarray
    pipe_press: np.ndarray
    pipe_coef: np.ndarray      # 10.67 L / (C^1.852 D^4.87)

    @classmethod
    def from_topology(cls, topo):
        d = topo.n_sensors
        lv, ar, rows = [], [], []
        for tid in topo.balanced_tanks():
            t = topo.tanks[topo.tank_index(tid)]
            lv.append(topo.level_sensor(tid))
            ar.append(t.area)
            r = np.zeros(d)
            for i in topo.inflow_pipes(tid):
                r[topo.flow_sensor(topo.pipes[i].id)] += 1.0
            for i in topo.outflow_pipes(tid):
                r[topo.flow_sensor(topo.pipes[i].id)] -= 1.0
            rows.append(r)
        pf, pp, pc = [], [], []
        for p in topo.pipes:
            fi, pi = topo.flow_sensor(p.id), topo.pressure_sensor(p.id)
            if fi is not None and pi is not None:
                pf.append(fi)
                pp.append(pi)
                pc.append(HW_CONST * p.length / (p.roughness ** HW_EXP * p.diameter ** HW_DEXP))
        return cls(np.array(lv, dtype=int), np.array(ar), np.array(rows).reshape(-1, d),
                   np.array(pf, dtype=int), np.array(pp, dtype=int), np.array(pc))


def physics_residuals(Y, topo_or_map, dt=1.0, return_grad=False):
    """Mean squared mass-balance and pipe-law residuals of a sequence.

    Y has shape (T, d_y) or (B, T, d_y) in native units, T >= 2. For every step
    t >= 1 the level derivative is the backward difference (Y[t] - Y[t-1]) / dt.
    Returns (L_mass, L_pipe) (arrays over the batch when batched) and, when asked,
    their gradients with respect to Y.
    """
    pm = topo_or_map if isinstance(topo_or_map, PhysicsMap) else PhysicsMap.from_topology(topo_or_map)
    Y = np.asarray(Y, dtype=np.float64)
    squeeze = Y.ndim == 2
    if squeeze:
        Y = Y[None]
    B, T, d = Y.shape
    if T < 2:
        raise ValueError("physics residuals need a sequence of length >= 2")
    n = T - 1
    cur, prev = Y[:, 1:, :], Y[:, :-1, :]
    # mass: sum(in) - sum(out) - area * dlevel/dt
    if len(pm.level_idx):
        net = cur @ pm.flow_net.T
        dlev = (cur[..., pm.level_idx] - prev[..., pm.level_idx]) / dt
        rm = net - pm.area * dlev
        L_mass = (rm ** 2).sum(axis=2).mean(axis=1)
    else:
        rm = np.zeros((B, n, 0))
        L_mass = np.zeros(B)
    # pipe: dP - 10.67 L Q^1.852 / (C^1.852 D^4.87), odd-symmetric in Q
    if len(pm.pipe_flow):
        q = cur[..., pm.pipe_flow]
        aq = np.abs(q)
        rp = cur[..., pm.pipe_press] - pm.pipe_coef * np.sign(q) * aq ** HW_EXP
        L_pipe = (rp ** 2).sum(axis=2).mean(axis=1)
    else:
        rp = np.zeros((B, n, 0))
        L_pipe = np.zeros(B)
    if not return_grad:
        return (float(L_mass[0]), float(L_pipe[0])) if squeeze else (L_mass, L_pipe)
    gm = np.zeros_like(Y)
    gp = np.zeros_like(Y)
    if len(pm.level_idx):
        w = 2.0 * rm / n
        gm[:, 1:, :] += w @ pm.flow_net
        gl = w * pm.area / dt
        np.add.at(gm, (slice(None), slice(1, None), pm.level_idx), -gl)
        np.add.at(gm, (slice(None), slice(0, -1), pm.level_idx), gl)
    if len(pm.pipe_flow):
        w = 2.0 * rp / n
        np.add.at(gp, (slice(None), slice(1, None), pm.pipe_press), w)
        dq = pm.pipe_coef * HW_EXP * aq ** (HW_EXP - 1)
        np.add.at(gp, (slice(None), slice(1, None), pm.pipe_flow), -w * dq)
    if squeeze:
        return float(L_mass[0]), float(L_pipe[0]), gm[0], gp[0]
    return L_mass, L_pipe, gm, gp


def adaptive_physics_weight(sigma_trace, alpha0, theta_thresh):
    """alpha0 * (1 + tanh(trace / theta)); lies in [alpha0, 2 alpha0)."""
    if not theta_thresh > 0:
        raise ValueError("theta_thresh must be positive")
    return alpha0 * (1.0 + np.tanh(np.asarray(sigma_trace) / theta_thresh))
