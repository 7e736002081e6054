"""Closed-loop episodes: plant, injection, twin residuals, discrimination, control.

An attack episode is first run with the detector observing under nominal control. The
first gated alarm then forks two branches from the same plant state: the resilient
controller and a scripted shutdown. Both replay the identical pre-alarm history, so the
comparison is paired.
"""

from dataclasses import dataclass, field

import numpy as np

from ..ade.model import AdeEngine, stealth_risk
from ..attacks import inject_fdi
from ..control.mpc import ResilientController
from ..control.recovery import FAILSAFE as MON_FAILSAFE
from ..control.recovery import NOMINAL as MON_NOMINAL
from ..control.recovery import RecoveryMonitor, model_plant_discrepancy
from ..plant.sim import Plant, nominal_control
from .records import FAILSAFE, NOMINAL, OFFLINE, RESILIENT, EpisodeResult, find_excursions


@dataclass
class EpisodeConfig:
    gamma: float = 0.8               # confidence gate for switching to resilient mode
    gate_sigmas: float = 4.0         # innovation gate on the controller's measurement estimate
    gate_hold: int = 15              # steps a gated channel stays on the twin after the last exceedance
    n_mc: int = 30                   # dropout passes for the current-state covariance
    post_attack: int = 120           # observed steps after the attack ends
    normal_length: int = 1800
    resilient_cap: int = 600         # give up on recovery this long after the attack ends
    restart_delay: float = 3600.0
    recovery_band: float = 0.15      # |level - setpoint| for a restarted plant to count as recovered
    recovery_hold: int = 30
    shutdown_cap: int = 3000         # steps after restart before giving up
    level_jitter: float = 0.1        # initial levels drawn uniformly within setpoint +- jitter


@dataclass
class Pipeline:
    """Everything an episode needs; models are shared read-only between episodes."""

    topo: object
    noise: object
    twin: object
    ade_model: object
    mmd_ref: object
    tau_mmd: float
    ctl_cfg: object
    terminal: object
    gate_std: np.ndarray             # residual std per channel (innovation gate scale)
    cfg: EpisodeConfig = field(default_factory=EpisodeConfig)

    def __post_init__(self):
        d_y, d_u = self.topo.n_sensors, self.topo.n_actuators
        if self.twin.d_y != d_y or self.twin.d_u != d_u:
            raise ValueError(f"twin dimensions ({self.twin.d_y}, {self.twin.d_u}) do not match the plant ({d_y}, {d_u})")
        if self.ade_model.d_in != d_y:
            raise ValueError(f"discrimination engine expects {self.ade_model.d_in} residual channels, plant has {d_y}")
        if self.ctl_cfg.d_y != d_y or self.ctl_cfg.d_u != d_u:
            raise ValueError("controller dimensions do not match the plant")

    def engine(self):
        return AdeEngine(self.ade_model, self.mmd_ref, self.tau_mmd)

    def setpoints(self):
        return np.array([t.setpoint for t in self.topo.tanks])


def make_plant(topo, noise, seed, jitter=0.1):
    """Plant with per-episode noise streams and initial levels jittered around setpoint."""
    nz = type(noise)(noise.process_var, noise.meas_var, noise.gamma, seed)
    rng = np.random.default_rng([seed, 17])
    levels = np.array([t.setpoint for t in topo.tanks]) + rng.uniform(-jitter, jitter, topo.n_tanks)
    return Plant(topo, nz, levels, seed)


def episode_length(pipe, scenario):
    if scenario is None:
        return pipe.cfg.normal_length
    return int(np.ceil(scenario.end)) + pipe.cfg.post_attack


def new_plant(pipe, seed):
    return make_plant(pipe.topo, pipe.noise, seed, pipe.cfg.level_jitter)


# -- observed pass under nominal control -----------------------------------
@dataclass
class ObservedRun:
    y_meas: np.ndarray
    y_true: np.ndarray
    u: np.ndarray
    labels: np.ndarray
    residuals: np.ndarray            # row t is the residual at step tau + t
    det: dict                        # per-step detector outputs (full length)
    Z: np.ndarray                    # embeddings of every full residual window
    alarm: int | None                # first gated step


def simulate_nominal(topo, noise, scenario, steps, seed, jitter=0.1):
    """Measured outputs, true outputs, commands and labels under nominal control."""
    plant = make_plant(topo, noise, seed, jitter)
    Ym = np.empty((steps, topo.n_sensors))
    Yt = np.empty((steps, topo.n_sensors))
    U = np.empty((steps, topo.n_actuators))
    lab = np.zeros(steps, dtype=int)
    u = np.zeros(topo.n_actuators)
    for t in range(steps):
        Yt[t] = plant.true_outputs()
        fr = inject_fdi(plant.measure(u), scenario)
        u = nominal_control(fr, topo, previous=u)
        Ym[t], U[t], lab[t] = fr.values, u, fr.label
        plant.step(u)
    return Ym, Yt, U, lab


def simulate_controlled(twin, ctl_cfg, terminal, topo, noise, steps, seed, jitter=0.1, n_mc=30, scenario=None):
    """Operation with the resilient controller in the loop from the first step. An FDI
    scenario, if given, reaches the controller ungated (no detector in the loop)."""
    plant = make_plant(topo, noise, seed, jitter)
    tau = twin.tau
    ctl = ResilientController(twin, ctl_cfg, terminal)
    Ym = np.empty((steps, topo.n_sensors))
    Yt = np.empty((steps, topo.n_sensors))
    U = np.empty((steps, topo.n_actuators))
    lab = np.zeros(steps, dtype=int)
    u = np.zeros(topo.n_actuators)
    for t in range(steps):
        Yt[t] = plant.true_outputs()
        fr = inject_fdi(plant.measure(u), scenario)
        ym, lab[t] = fr.values, fr.label
        if t < tau:
            u = nominal_control(ym, topo, previous=u)
        else:
            ctx = np.concatenate([Ym[t - tau:t], U[t - tau:t]], axis=1)
            Sig0 = twin.predict_uncertain(ctx, n_mc, seed=int(seed) * 100_003 + t).cov
            u = ctl.plan(ctx[1:], ym, 0.0, Sig0, u).u
        Ym[t], U[t] = ym, u
        plant.step(u)
    return Ym, Yt, U, lab


def twin_residuals(twin, Ym, U, bs=2048):
    """Residual of y[t] against the one-step prediction from frames t-tau..t-1, t >= tau."""
    tau = twin.tau
    X = np.concatenate([Ym, U], axis=1)
    ctx = np.lib.stride_tricks.sliding_window_view(X, tau, axis=0)[:-1].transpose(0, 2, 1)
    pred = np.concatenate([twin.predict_batch(ctx[i:i + bs]) for i in range(0, len(ctx), bs)])
    return Ym[tau:] - pred


def gated(cls, conf, gamma):
    return cls != 0 and conf > gamma


def observe_episode(pipe, scenario, seed, steps=None):
    steps = episode_length(pipe, scenario) if steps is None else steps
    Ym, Yt, U, lab = simulate_nominal(pipe.topo, pipe.noise, scenario, steps, seed, pipe.cfg.level_jitter)
    R = twin_residuals(pipe.twin, Ym, U)
    eng = pipe.engine()
    out, Z = eng.run_batch(R)
    tau = pipe.twin.tau
    det = {k: np.concatenate([np.full((tau,) + v.shape[1:], v[0] if k != "statistic" else np.nan), v])
           for k, v in out.items()}
    det["probs"][:tau] = [1.0, 0.0, 0.0]
    det["raw"][:tau] = 0
    det["cls"][:tau] = 0
    det["confidence"][:tau] = 0.0
    hits = np.flatnonzero((det["cls"] != 0) & (det["confidence"] > pipe.cfg.gamma))
    alarm = int(hits[0]) if len(hits) else None
    return ObservedRun(Ym, Yt, U, lab, R, det, Z, alarm)


def observed_result(pipe, run, scenario, seed, episode_id):
    n = len(run.u)
    t = np.arange(n, dtype=np.float64)
    return EpisodeResult(
        episode_id, "observe", seed, t, run.labels.copy(), run.det["cls"].copy(), run.det["raw"].copy(),
        run.det["confidence"].copy(), np.zeros(n, dtype=int), np.full(n, np.nan), run.y_true.copy(), run.u.copy(),
        scenario=None if scenario is None else scenario.to_dict(),
        t_detect=None if run.alarm is None else float(run.alarm),
        excursions=_excursions(pipe, t, run.y_true, np.zeros(n, dtype=int)))


def _excursions(pipe, t, y_true, mode):
    lo, hi = pipe.topo.level_bounds()
    return find_excursions(t, y_true, lo, hi, pipe.topo.level_channels(), active=mode != OFFLINE)


# -- branches --------------------------------------------------------------
class _Trace:
    """Growable per-step record shared by both branches."""

    def __init__(self, run, t0):
        self.y_true = list(run.y_true[:t0])
        self.u = list(run.u[:t0])
        self.true_cls = list(run.labels[:t0])
        self.pred = list(run.det["cls"][:t0])
        self.raw = list(run.det["raw"][:t0])
        self.conf = list(run.det["confidence"][:t0])
        self.mode = [NOMINAL] * t0
        self.delta = [np.nan] * t0

    def add(self, y_true, u, label, pred, raw, conf, mode, delta):
        self.y_true.append(y_true)
        self.u.append(u)
        self.true_cls.append(label)
        self.pred.append(pred)
        self.raw.append(raw)
        self.conf.append(conf)
        self.mode.append(mode)
        self.delta.append(delta)

    def result(self, pipe, episode_id, policy, seed, scenario, **kw):
        n = len(self.u)
        t = np.arange(n, dtype=np.float64)
        mode = np.array(self.mode, dtype=int)
        yt = np.array(self.y_true)
        return EpisodeResult(episode_id, policy, seed, t, np.array(self.true_cls, dtype=int),
                             np.array(self.pred, dtype=int), np.array(self.raw, dtype=int),
                             np.array(self.conf, dtype=np.float64), mode, np.array(self.delta, dtype=np.float64),
                             yt, np.array(self.u), scenario=None if scenario is None else scenario.to_dict(),
                             excursions=_excursions(pipe, t, yt, mode), **kw)


def replay_plant(pipe, run, seed, t0):
    """Plant state at the start of step t0, reproduced by replaying the recorded commands."""
    plant = new_plant(pipe, seed)
    u = np.zeros(pipe.topo.n_actuators)
    for t in range(t0):
        plant.measure(u)
        u = run.u[t]
        plant.step(u)
    return plant, u


def _shutdown_tail(pipe, plant, scenario, trace, t_start, u_prev):
    """Inflows off and plant offline for the restart delay, then nominal restart until the
    true levels hold inside the recovery band. Returns (t_recover or None, recovered)."""
    cfg = pipe.cfg
    topo = pipe.topo
    lc = topo.level_channels()
    sp = pipe.setpoints()
    t_restart = t_start + int(np.ceil(cfg.restart_delay))
    t = t_start
    u = np.zeros(topo.n_actuators)
    held = 0
    while True:
        y_true = plant.true_outputs()
        fr = inject_fdi(plant.measure(u_prev), scenario)
        if t < t_restart:
            u, mode = np.zeros(topo.n_actuators), OFFLINE
        else:
            u, mode = nominal_control(fr, topo, previous=u_prev), NOMINAL
            held = held + 1 if np.all(np.abs(y_true[lc] - sp) <= cfg.recovery_band) else 0
        trace.add(y_true, u, fr.label, 0, 0, np.nan, mode, np.nan)
        plant.step(u)
        u_prev = u
        if held >= cfg.recovery_hold:
            return float(t), True
        if t >= t_restart + cfg.shutdown_cap:
            return None, False
        t += 1


def shutdown_branch(pipe, run, scenario, seed, episode_id):
    t0 = run.alarm
    plant, u_prev = replay_plant(pipe, run, seed, t0)
    trace = _Trace(run, t0)
    t_r, ok = _shutdown_tail(pipe, plant, scenario, trace, t0, u_prev)
    return trace.result(pipe, episode_id, "shutdown", seed, scenario, t_detect=float(t0), t_recover=t_r,
                        recovered=ok, restarted=True)


def resilient_branch(pipe, run, scenario, seed, episode_id):
    """Online pipeline from the first alarm: detector on measured residuals, controller on
    an innovation-gated estimate, two-stage recovery back to nominal control."""
    cfg = pipe.cfg
    twin = pipe.twin
    topo = pipe.topo
    tau = twin.tau
    t0 = run.alarm
    R_tail = run.residuals[:t0 - tau]
    eng = pipe.engine()
    eng.restore(R_tail, run.Z[:max(0, t0 - tau - pipe.ade_model.cfg.window + 1)])
    plant, u_prev = replay_plant(pipe, run, seed, t0)
    trace = _Trace(run, t0)
    ctl = ResilientController(twin, pipe.ctl_cfg, pipe.terminal)
    monitor = RecoveryMonitor.from_config(pipe.ctl_cfg)
    frames_m = [np.concatenate([run.y_meas[t], run.u[t]]) for t in range(t0 - tau, t0)]
    frames_c = [f.copy() for f in frames_m]
    hold = np.zeros(topo.n_sensors, dtype=int)
    mode = NOMINAL
    t_end = int(np.ceil(scenario.end)) if scenario is not None else t0
    t_recover, recovered, restarted = None, False, False
    status = {}
    t = t0
    while True:
        y_true = plant.true_outputs()
        fr = inject_fdi(plant.measure(u_prev), scenario)
        ym = fr.values
        r = ym - twin.predict(np.array(frames_m[-tau:]))
        p, _ = eng.step(r)
        ctx_c = np.array(frames_c[-tau:])
        y_hat = twin.predict(ctx_c)
        innov = np.abs(ym - y_hat) > cfg.gate_sigmas * pipe.gate_std
        # a channel is re-armed only while the detector still sees an attack; otherwise a
        # drifting twin estimate would keep its own innovation large and never hand back
        hold = np.where(innov & (p.cls != 0), cfg.gate_hold, np.maximum(hold - 1, 0))
        use_twin = (hold > 0) & (mode == RESILIENT)
        y_ctrl = np.where(use_twin, y_hat, ym)
        delta = model_plant_discrepancy(ym, y_hat)
        if mode == NOMINAL and gated(p.validated, p.confidence, cfg.gamma):
            mode = RESILIENT
            monitor.reset()
            ctl.reset(stealth_risk(p.p, pipe.ctl_cfg.omega))
            hold[:] = np.where(innov, cfg.gate_hold, 0)
            y_ctrl = np.where(hold > 0, y_hat, ym)
        elif mode == RESILIENT:
            m = monitor.update(p.validated, delta)
            if m == MON_NOMINAL:
                mode, t_recover = NOMINAL, float(t)
            elif m == MON_FAILSAFE:
                mode = FAILSAFE
        if mode == RESILIENT:
            Sig0 = twin.predict_uncertain(ctx_c, cfg.n_mc, seed=int(seed) * 100_003 + t).cov
            plan = ctl.plan(ctx_c[1:], y_ctrl, stealth_risk(p.p, pipe.ctl_cfg.omega), Sig0, u_prev)
            u = plan.u
            status[plan.status] = status.get(plan.status, 0) + 1
        elif mode == FAILSAFE:
            trace.add(y_true, np.zeros(topo.n_actuators), fr.label, p.validated, p.cls, p.confidence, FAILSAFE, delta)
            plant.step(np.zeros(topo.n_actuators))
            t_recover, recovered = _shutdown_tail(pipe, plant, scenario, trace, t + 1, np.zeros(topo.n_actuators))
            restarted = True
            break
        else:
            u = nominal_control(fr, topo, previous=u_prev)
            y_ctrl = ym
        trace.add(y_true, u, fr.label, p.validated, p.cls, p.confidence, mode, delta)
        frames_m.append(np.concatenate([ym, u]))
        frames_c.append(np.concatenate([y_ctrl, u]))
        frames_m, frames_c = frames_m[-tau:], frames_c[-tau:]
        plant.step(u)
        u_prev = u
        if mode == NOMINAL and t >= t_end:
            recovered = True
            break
        if t >= t_end + cfg.resilient_cap:
            t_recover = None
            break
        t += 1
    return trace.result(pipe, episode_id, "resilient", seed, scenario, t_detect=float(t0), t_recover=t_recover,
                        recovered=recovered, restarted=restarted, mpc_status=status)


def run_episode(pipe, scenario, seed, episode_id=0, policies=("resilient", "shutdown")):
    """Observed pass plus the requested closed-loop branches.

    Returns {"observe": EpisodeResult, policy: EpisodeResult or None}; branches are None
    when the detector never gates.
    """
    if scenario is not None:
        scenario.resolve(pipe.topo)
    run = observe_episode(pipe, scenario, seed)
    out = {"observe": observed_result(pipe, run, scenario, seed, episode_id)}
    for pol in policies:
        if run.alarm is None:
            out[pol] = None
        elif pol == "resilient":
            out[pol] = resilient_branch(pipe, run, scenario, seed, episode_id)
        elif pol == "shutdown":
            out[pol] = shutdown_branch(pipe, run, scenario, seed, episode_id)
        else:
            raise ValueError(f"unknown policy {pol}")
    return out
