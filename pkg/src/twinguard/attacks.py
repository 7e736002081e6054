"""False-data-injection scenarios, adversarial window perturbations and sensor dropout."""

from dataclasses import asdict, dataclass, field

import numpy as np

N, AS, AM = 0, 1, 2
CLASS_NAMES = ("N", "A_S", "A_M")
CLASS_CODES = {"N": N, "A_S": AS, "A_M": AM}

DURATION_AS = (60.0, 300.0)
DURATION_AM = (300.0, 900.0)


@dataclass
class AttackProfile:
    kind: str                    # bias | ramp | periodic
    magnitude: float
    period: float | None = None  # periodic only
    ramp_time: float | None = None

    def value(self, tau, span):
        """Injection at time tau since the target became active; span = active length."""
        if self.kind == "bias":
            return self.magnitude
        if self.kind == "ramp":
            rt = span if self.ramp_time is None else self.ramp_time
            return self.magnitude * min(1.0, tau / rt)
        if self.kind == "periodic":
            return self.magnitude * np.sin(2.0 * np.pi * tau / self.period)
        raise ValueError(f"unknown profile kind {self.kind}")

    def max_step(self, span):
        """Largest per-step change of the injection (dt = 1 s)."""
        if self.kind == "bias":
            return 0.0
        if self.kind == "ramp":
            rt = span if self.ramp_time is None else self.ramp_time
            return abs(self.magnitude) / rt
        return abs(self.magnitude) * 2.0 * np.pi / self.period


@dataclass
class AttackTarget:
    sensor: str
    profile: AttackProfile
    offset: float = 0.0          # stage delay after the scenario start
    index: int = -1              # resolved sensor column


@dataclass
class AttackScenario:
    cls: int
    targets: list
    start: float
    duration: float
    beta_low: float | None = None
    beta_high: float = np.inf
    name: str = ""

    def __post_init__(self):
        if self.cls not in (AS, AM):
            raise ValueError("scenario class must be A_S or A_M")
        bound = np.sqrt(sum(t.profile.magnitude ** 2 for t in self.targets))
        if bound > self.beta_high * (1 + 1e-12):
            raise ValueError(f"injection norm bound {bound:.4g} exceeds beta_high {self.beta_high:.4g}")

    @property
    def end(self):
        return self.start + self.duration

    def active(self, t):
        return self.start <= t < self.end

    def resolve(self, topo):
        ids = topo.sensor_ids
        for tg in self.targets:
            if tg.sensor not in ids:
                raise ValueError(f"attack target {tg.sensor} is not a sensor of this plant")
            tg.index = ids.index(tg.sensor)
        cells = subsystem_of(topo)
        spanned = {cells[tg.index] for tg in self.targets}
        if self.cls == AS and len(spanned) != 1:
            raise ValueError("single-stage scenario must target exactly one subsystem")
        if self.cls == AM and len(spanned) < 2:
            raise ValueError("multi-stage scenario must target at least two subsystems")
        return self

    def delta(self, t, n_sensors):
        d = np.zeros(n_sensors)
        if not self.active(t):
            return d
        for tg in self.targets:
            t0 = self.start + tg.offset
            if t >= t0:
                d[tg.index] += tg.profile.value(t - t0, self.end - t0)
        return d

    def to_dict(self):
        d = asdict(self)
        d["cls"] = CLASS_NAMES[self.cls]
        for tg in d["targets"]:
            tg.pop("index")
        if not np.isfinite(self.beta_high):
            d["beta_high"] = None
        return d

    @classmethod
    def from_dict(cls, d, topo=None):
        targets = [AttackTarget(t["sensor"], AttackProfile(**t["profile"]), t.get("offset", 0.0))
                   for t in d["targets"]]
        bh = d.get("beta_high")
        sc = cls(CLASS_CODES[d["cls"]] if isinstance(d["cls"], str) else int(d["cls"]),
                 targets, float(d["start"]), float(d["duration"]), d.get("beta_low"),
                 np.inf if bh is None else float(bh), d.get("name", ""))
        return sc.resolve(topo) if topo is not None else sc


def subsystem_of(topo):
    """Sensor index -> owning tank id."""
    owner = {}
    for tid, members in topo.subsystems().items():
        for i in members:
            owner[i] = tid
    return owner


def inject_fdi(frame, scenario, t=None, n_sensors=None):
    """Add the scenario's injection to a frame; untouched channels are left bit-identical."""
    t = frame.time if t is None else t
    out = frame.copy()
    if scenario is None or not scenario.active(t):
        return out
    for tg in scenario.targets:
        t0 = scenario.start + tg.offset
        if t >= t0:
            out.values[tg.index] = out.values[tg.index] + tg.profile.value(t - t0, scenario.end - t0)
    out.label = scenario.cls
    return out


@dataclass
class AttackGenConfig:
    start_range: tuple = (150.0, 300.0)
    duration_as: tuple = DURATION_AS
    duration_am: tuple = DURATION_AM
    level_periodic: tuple = (0.06, 0.15)     # amplitude [m]
    level_period: tuple = (20.0, 60.0)
    flow_magnitude: tuple = (0.002, 0.004)   # [m^3/s]
    pressure_magnitude: tuple = (0.10, 0.25) # [m]
    other_period: tuple = (20.0, 60.0)
    ramp_slope: tuple = (0.5, 1.0)           # fraction of beta_low per step
    level_cap: float = 0.3
    beta_high: float = 0.35
    stage_delay: tuple = (10.0, 40.0)        # sequential multi-stage spacing [s]
    p_sequential: float = 0.5


def default_beta_low(noise):
    """Per-sensor stealth bound: twice the measurement noise std."""
    return 2.0 * np.sqrt(noise.meas_var)


def _sample_profile(kind, sensor_idx, span, noise_std, cfg, rng):
    """Profile for one channel. Level channels accept only ramp and periodic shapes
    because a constant offset on a level is invisible to one-step residuals."""
    beta_low = 2.0 * noise_std[sensor_idx]
    if kind == "level":
        slope = rng.uniform(*cfg.ramp_slope) * beta_low
        if slope * span <= cfg.level_cap and rng.random() < 0.5:
            sign = rng.choice([-1.0, 1.0])
            return AttackProfile("ramp", sign * slope * span)
        return AttackProfile("periodic", rng.uniform(*cfg.level_periodic), period=rng.uniform(*cfg.level_period))
    lo, hi = cfg.flow_magnitude if kind == "flow" else cfg.pressure_magnitude
    shape = rng.choice(["bias", "ramp", "periodic"])
    m = rng.uniform(lo, hi) * rng.choice([-1.0, 1.0])
    if shape == "periodic":
        return AttackProfile("periodic", abs(m), period=rng.uniform(*cfg.other_period))
    if shape == "ramp":
        # reach full magnitude within the first third so the offset is sustained
        return AttackProfile("ramp", m, ramp_time=max(1.0, span * rng.uniform(0.1, 0.33)))
    return AttackProfile("bias", m)


def generate_scenario(kind, topo, seed, noise=None, cfg=None):
    """Sample a labelled scenario: target cell(s), profile shape, magnitude and timing."""
    cfg = AttackGenConfig() if cfg is None else cfg
    cls = CLASS_CODES[kind] if isinstance(kind, str) else int(kind)
    rng = np.random.default_rng(seed)
    cells = topo.subsystems()
    names = sorted(cells)
    noise_std = np.sqrt(noise.meas_var) if noise is not None else np.full(topo.n_sensors, 1e-3)
    kinds = topo.sensor_kinds()
    start = float(np.round(rng.uniform(*cfg.start_range)))
    if cls == AS:
        duration = float(np.round(rng.uniform(*cfg.duration_as)))
        cell = names[rng.integers(len(names))]
        k = 1 + int(rng.random() < 0.4)
        chans = rng.choice(cells[cell], size=min(k, len(cells[cell])), replace=False)
        offsets = [0.0] * len(chans)
    else:
        if len(names) < 2:
            raise ValueError("multi-stage scenarios need at least two subsystems")
        duration = float(np.round(rng.uniform(*cfg.duration_am)))
        k = int(rng.integers(2, len(names) + 1))
        picked = sorted(rng.choice(len(names), size=k, replace=False))
        chans = [int(rng.choice(cells[names[i]])) for i in picked]
        if rng.random() < cfg.p_sequential:
            gaps = rng.uniform(*cfg.stage_delay, size=k - 1)
            offsets = [0.0] + list(np.round(np.cumsum(gaps)))
        else:
            offsets = [0.0] * k
    targets = []
    for c, off in zip(chans, offsets):
        prof = _sample_profile(kinds[c], int(c), duration - off, noise_std, cfg, rng)
        targets.append(AttackTarget(topo.sensor_ids[int(c)], prof, float(off)))
    norm = np.sqrt(sum(t.profile.magnitude ** 2 for t in targets))
    if norm > cfg.beta_high:
        for t in targets:
            t.profile.magnitude *= cfg.beta_high / norm
    sc = AttackScenario(cls, targets, start, duration, beta_low=float(np.max(2.0 * noise_std)),
                        beta_high=cfg.beta_high, name=f"{CLASS_NAMES[cls]}-{seed}")
    return sc.resolve(topo)


def flow_cascade_scenario(topo, start=200.0, duration=600.0, magnitude=0.003, delay=30.0):
    """Sequential multi-stage bias on the downstream flow sensors (a named campaign case)."""
    flows = [s.id for s in topo.sensors if s.kind == "flow"][1:]
    targets = [AttackTarget(sid, AttackProfile("bias", magnitude), i * delay) for i, sid in enumerate(flows)]
    return AttackScenario(AM, targets, start, duration, name="flow-cascade").resolve(topo)


def step_bias_scenario(topo, sensor, magnitude, start, duration, cls=AS):
    return AttackScenario(cls, [AttackTarget(sensor, AttackProfile("bias", magnitude))],
                          start, duration, name=f"step-{sensor}-{magnitude}").resolve(topo)


# ---------------------------------------------------------------------------
# adversarial evasion on residual windows


def adversarial_perturb(window, grad_fn, epsilon, method="FGSM", steps=1, step_size=None):
    """Sign-gradient ascent on a classifier loss inside an l_inf ball.

    grad_fn(x) returns d loss / d x for the loss the attacker wants to increase.
    PGD takes `steps` signed steps of `step_size` (default epsilon / steps * 2.5,
    capped at epsilon) and projects back onto the ball after each.
    """
    if epsilon < 0:
        raise ValueError("epsilon must be >= 0")
    x0 = np.asarray(window, dtype=np.float64)
    if epsilon == 0:
        return x0.copy()
    method = method.upper()
    if method == "FGSM":
        g = grad_fn(x0)
        if not np.all(np.isfinite(g)):
            raise FloatingPointError("non-finite input gradient")
        return x0 + epsilon * np.sign(g)
    if method != "PGD":
        raise ValueError(f"unknown method {method}")
    if steps < 1:
        raise ValueError("PGD needs steps >= 1")
    alpha = min(epsilon, 2.5 * epsilon / steps) if step_size is None else step_size
    x = x0.copy()
    for _ in range(steps):
        g = grad_fn(x)
        if not np.all(np.isfinite(g)):
            raise FloatingPointError("non-finite input gradient")
        x = x + alpha * np.sign(g)
        x = x0 + np.clip(x - x0, -epsilon, epsilon)
    return x


# ---------------------------------------------------------------------------
# sensor dropout


@dataclass
class DropoutSpec:
    rate: float
    seed: int = 0
    fill: str = "forward"
    _rng: np.random.Generator = field(default=None, repr=False, compare=False)

    def __post_init__(self):
        if not 0.0 <= self.rate < 1.0 and self.rate != 1.0:
            raise ValueError("dropout rate must lie in [0, 1]")

    @property
    def rng(self):
        if self._rng is None:
            self._rng = np.random.default_rng(self.seed)
        return self._rng


def apply_sensor_dropout(frame, spec, last_valid):
    """Drop each sensor with probability rate and forward-fill from last_valid."""
    out = frame.copy()
    n = len(out.values)
    if spec is None or spec.rate == 0:
        out.dropped = np.zeros(n, dtype=bool)
        return out
    drop = spec.rng.random(n) < spec.rate
    ref = last_valid.values if hasattr(last_valid, "values") else np.asarray(last_valid)
    out.values = np.where(drop, ref, out.values)
    out.dropped = drop
    return out
