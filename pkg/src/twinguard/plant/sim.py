"""First-principles tank-network simulator, sensors and nominal controller."""

import copy
import csv
import math
from dataclasses import dataclass, field

import numpy as np

from .topology import SINK, SOURCE, hazen_williams, observe_values

U_TOL = 1e-9


@dataclass
class PlantState:
    levels: np.ndarray
    flows: np.ndarray          # mean pipe flow over the last sample interval [m^3/s]
    pressures: np.ndarray      # head loss per pipe [m]
    time: float = 0.0
    saturated: np.ndarray = None
    boundary_in: float = 0.0   # cumulative volume from the source [m^3]
    boundary_out: float = 0.0  # cumulative volume to the sink, spills included [m^3]
    spilled: float = 0.0

    def __post_init__(self):
        if self.saturated is None:
            self.saturated = np.zeros(len(self.levels), dtype=bool)

    def copy(self):
        return copy.deepcopy(self)


@dataclass
class SensorFrame:
    time: float
    values: np.ndarray
    u: np.ndarray
    label: int = 0             # 0 normal, 1 single-stage, 2 multi-stage
    dropped: np.ndarray = None

    def copy(self):
        return SensorFrame(self.time, self.values.copy(), self.u.copy(), self.label,
                           None if self.dropped is None else self.dropped.copy())


def initial_state(topo, levels=None):
    lv = np.array([t.initial_level for t in topo.tanks]) if levels is None else np.asarray(levels, dtype=np.float64).copy()
    flows = np.zeros(topo.n_pipes)
    return PlantState(lv, flows, np.zeros(topo.n_pipes))


class _Layout:
    """Static per-topology arrays used by the integrator inner loop."""

    def __init__(self, topo):
        tid = {t.id: i for i, t in enumerate(topo.tanks)}
        act = {a.id: j for j, a in enumerate(topo.actuators)}
        self.src = [tid.get(p.src, -1) for p in topo.pipes]
        self.dst = [tid.get(p.dst, -1) for p in topo.pipes]
        self.area = [t.area for t in topo.tanks]
        self.height = [t.height for t in topo.tanks]
        # per pipe: (mode, actuator index, coefficient)
        # mode 0 pump/forced, 1 valve on a tank, 2 gravity drain, 3 idle
        self.mode = []
        for p in topo.pipes:
            if p.actuator is not None:
                j = act[p.actuator]
                a = topo.actuators[j]
                if a.kind == "pump" or p.src not in tid:
                    self.mode.append((0, j, a.max_flow))
                else:
                    self.mode.append((1, j, a.max_flow / math.sqrt(topo.tanks[tid[p.src]].height)))
            elif p.src in tid:
                self.mode.append((2, -1, p.drain_coeff))
            else:
                self.mode.append((3, -1, 0.0))
        self.outs = [[i for i, s in enumerate(self.src) if s == k] for k in range(topo.n_tanks)]
        self.pipe_geom = [(p.length, p.diameter, p.roughness) for p in topo.pipes]


def _layout(topo):
    lay = getattr(topo, "_layout_cache", None)
    if lay is None:
        lay = _Layout(topo)
        topo._layout_cache = lay
    return lay


def _pipe_rates(levels, u, lay):
    q = []
    for mode, j, c in lay.mode:
        if mode == 0:
            q.append(u[j] * c)
        elif mode == 1:
            q.append(u[j] * c * math.sqrt(max(levels[lay.src[len(q)]], 0.0)))
        elif mode == 2:
            q.append(c * math.sqrt(max(levels[lay.src[len(q)]], 0.0)))
        else:
            q.append(0.0)
    return q


def integrate_step(state, u, topo, noise=None, dt=None, rng=None):
    """Advance the plant one sample with explicit Euler substeps.

    Outflows are scaled down when a tank cannot supply them; inflow into a full
    tank spills over and is booked as boundary outflow. Process noise enters the
    levels once per sample with variance (1 + gamma) * process_var.
    """
    dt = topo.dt if dt is None else dt
    if dt <= 0:
        raise ValueError("dt must be positive")
    u = np.asarray(u, dtype=np.float64)
    if u.shape != (topo.n_actuators,):
        raise ValueError(f"expected {topo.n_actuators} actuator commands, got shape {u.shape}")
    if np.any(u < -U_TOL) or np.any(u > 1 + U_TOL):
        raise ValueError(f"actuator command outside [0, 1]: {u}")
    u = [min(max(float(v), 0.0), 1.0) for v in u]
    lay = _layout(topo)
    n_sub = topo.substeps
    h = dt / n_sub
    nt, npipe = topo.n_tanks, topo.n_pipes
    levels = [float(v) for v in state.levels]
    flow_acc = [0.0] * npipe
    b_in, b_out, spilled = state.boundary_in, state.boundary_out, state.spilled
    saturated = [False] * nt
    for _ in range(n_sub):
        q = _pipe_rates(levels, u, lay)
        # limit outflows by the volume each tank holds
        for k in range(nt):
            outs = lay.outs[k]
            demand = sum(q[i] for i in outs) * h
            avail = levels[k] * lay.area[k]
            if demand > avail and demand > 0:
                f = max(avail, 0.0) / demand
                for i in outs:
                    q[i] *= f
        dv = [0.0] * nt
        for i in range(npipe):
            qi = q[i] * h
            s, d = lay.src[i], lay.dst[i]
            if s >= 0:
                dv[s] -= qi
            else:
                b_in += qi
            if d >= 0:
                dv[d] += qi
            else:
                b_out += qi
            flow_acc[i] += q[i]
        for k in range(nt):
            lv = levels[k] + dv[k] / lay.area[k]
            if lv > lay.height[k]:
                spill = (lv - lay.height[k]) * lay.area[k]
                spilled += spill
                b_out += spill
                lv = lay.height[k]
                saturated[k] = True
            elif lv < 0.0:
                lv = 0.0
                saturated[k] = True
            levels[k] = lv
    levels = np.array(levels)
    saturated = np.array(saturated)
    if noise is not None and rng is not None and np.any(noise.process_var > 0):
        height = np.array(lay.height)
        w = rng.standard_normal(nt) * np.sqrt((1.0 + noise.gamma) * noise.process_var)
        levels = levels + w
        saturated |= (levels > height) | (levels < 0)
        levels = np.clip(levels, 0.0, height)
    flows = np.array(flow_acc) / n_sub
    pressures = np.array([hazen_williams(flows[i], *lay.pipe_geom[i]) for i in range(npipe)])
    return PlantState(levels, flows, pressures, state.time + dt, saturated, b_in, b_out, spilled)


def observe(state, topo):
    """Noise-free observation h(X)."""
    return observe_values(topo, state.levels, state.flows)


def measure(state, topo, noise=None, rng=None, u=None, label=0):
    y = observe(state, topo)
    if noise is not None and rng is not None:
        y = y + rng.standard_normal(topo.n_sensors) * np.sqrt(noise.meas_var)
    u = np.zeros(topo.n_actuators) if u is None else np.asarray(u, dtype=np.float64).copy()
    return SensorFrame(state.time, y, u, label)


def nominal_control(frame, topo, setpoints=None, previous=None):
    """Hysteresis on-off loops for pumps, proportional trim for continuous valves."""
    values = frame.values if isinstance(frame, SensorFrame) else np.asarray(frame)
    sp = {t.id: t.setpoint for t in topo.tanks}
    if setpoints is not None:
        sp.update(dict(zip([t.id for t in topo.tanks], setpoints)))
    prev = np.zeros(topo.n_actuators) if previous is None else np.asarray(previous)
    u = np.zeros(topo.n_actuators)
    for j, a in enumerate(topo.actuators):
        si = topo.level_sensor(a.controls)
        level = values[si]
        target = sp[a.controls]
        if a.actuation == "on-off":
            if level < target - a.band:
                u[j] = 1.0
            elif level > target + a.band:
                u[j] = 0.0
            else:
                u[j] = 1.0 if prev[j] >= 0.5 else 0.0
        else:
            u[j] = np.clip(a.trim + a.gain * (target - level), 0.0, 1.0)
    return u


def validate_steady_state(sim, ref):
    """Per-channel NRMSE = RMSE / range(ref). Constant reference channels give NaN and a flag."""
    sim = np.asarray(sim, dtype=np.float64)
    ref = np.asarray(ref, dtype=np.float64)
    if sim.shape != ref.shape:
        raise ValueError(f"trajectory shapes differ: {sim.shape} vs {ref.shape}")
    if sim.ndim == 1:
        sim, ref = sim[:, None], ref[:, None]
    rmse = np.sqrt(np.mean((sim - ref) ** 2, axis=0))
    span = ref.max(axis=0) - ref.min(axis=0)
    flags = span == 0
    nrmse = np.where(flags, np.nan, rmse / np.where(flags, 1.0, span))
    return nrmse, flags


class Plant:
    """Simulator instance owning its state and two RNG streams (process, measurement)."""

    def __init__(self, topo, noise=None, levels=None, seed=None):
        self.topo = topo
        self.noise = noise
        seed = (noise.seed if noise is not None else 0) if seed is None else seed
        ss = np.random.SeedSequence(seed)
        p, m = ss.spawn(2)
        self.rng_process = np.random.default_rng(p)
        self.rng_measure = np.random.default_rng(m)
        self.state = initial_state(topo, levels)

    def step(self, u):
        self.state = integrate_step(self.state, u, self.topo, self.noise, rng=self.rng_process)
        return self.state

    def measure(self, u=None):
        return measure(self.state, self.topo, self.noise, self.rng_measure, u)

    def true_outputs(self):
        return observe(self.state, self.topo)

    def copy(self):
        return copy.deepcopy(self)


def simulate(topo, noise, steps, seed=0, levels=None, controller=None, rng_dither=None,
             dither=0.0):
    """Run the plant under nominal control; returns (Y measured [T, d_y], U [T, d_u], states).

    Row t holds the measurement at time t and the command applied over (t, t+1].
    `dither` in [0,1] randomly replaces commands with uniform draws to excite the dynamics.
    """
    plant = Plant(topo, noise, levels, seed)
    u = np.zeros(topo.n_actuators)
    Y = np.empty((steps, topo.n_sensors))
    U = np.empty((steps, topo.n_actuators))
    X = np.empty((steps, topo.n_tanks))
    for t in range(steps):
        frame = plant.measure(u)
        u = nominal_control(frame, topo, previous=u) if controller is None else controller(frame, u)
        if dither > 0 and rng_dither is not None:
            swap = rng_dither.random(topo.n_actuators) < dither
            u = np.where(swap, rng_dither.random(topo.n_actuators), u)
        Y[t] = frame.values
        U[t] = u
        X[t] = plant.state.levels
        plant.step(u)
    return Y, U, X


def export_csv(path, topo, times, Y, U, labels=None):
    labels = np.zeros(len(times), dtype=int) if labels is None else labels
    with open(path, "w", newline="") as f:
        w = csv.writer(f)
        w.writerow(["time"] + topo.sensor_ids + topo.actuator_ids + ["attack_label"])
        for t, y, u, lab in zip(times, Y, U, labels):
            w.writerow([repr(float(t))] + [repr(float(v)) for v in y] + [repr(float(v)) for v in u] + [int(lab)])
