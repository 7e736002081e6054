"""Plant description: tanks, pipes, actuators and sensor wiring."""

from dataclasses import asdict, dataclass, field

import numpy as np

HW_CONST = 10.67
HW_EXP = 1.852
HW_DEXP = 4.87

SOURCE = "source"
SINK = "sink"

# acceptance bounds on steady-state fidelity, kept as documentation constants
NRMSE_BOUND_PRIMARY = 0.041
NRMSE_BOUND_SECONDARY = 0.053


def hazen_williams(q, length, diameter, c):
    """Head loss [m] over a pipe; odd-symmetric in q so reverse flow gives negative loss."""
    q = np.asarray(q, dtype=np.float64)
    return HW_CONST * length * np.sign(q) * np.abs(q) ** HW_EXP / (c ** HW_EXP * diameter ** HW_DEXP)


def hazen_williams_dq(q, length, diameter, c):
    q = np.asarray(q, dtype=np.float64)
    return HW_CONST * length * HW_EXP * np.abs(q) ** (HW_EXP - 1) / (c ** HW_EXP * diameter ** HW_DEXP)


@dataclass
class Tank:
    id: str
    area: float
    height: float
    level_min: float
    level_max: float
    initial_level: float = 1.0
    setpoint: float = 1.0

    @property
    def volume(self):
        """V_tank, the geometric capacity."""
        return self.area * self.height


@dataclass
class Pipe:
    id: str
    src: str
    dst: str
    length: float = 100.0
    diameter: float = 0.1
    roughness: float = 130.0
    actuator: str | None = None
    drain_coeff: float = 0.0     # gravity-orifice coefficient when unactuated


@dataclass
class Actuator:
    id: str
    kind: str                    # "pump" or "valve"
    max_flow: float
    actuation: str               # "on-off" or "continuous"
    pipe: str
    controls: str                # tank whose level the nominal loop regulates
    band: float = 0.1            # hysteresis half-width for on-off loops
    gain: float = 2.0            # proportional trim for continuous loops
    trim: float = 0.5            # continuous command at zero level error


@dataclass
class Sensor:
    id: str
    kind: str                    # "level", "flow" or "pressure"
    target: str                  # tank id for level, pipe id otherwise


@dataclass
class PlantTopology:
    tanks: list
    pipes: list
    actuators: list
    sensors: list
    dt: float = 1.0
    substeps: int = 10

    def __post_init__(self):
        self.validate()

    # -- lookups ---------------------------------------------------------
    @property
    def n_tanks(self):
        return len(self.tanks)

    @property
    def n_pipes(self):
        return len(self.pipes)

    @property
    def n_sensors(self):
        return len(self.sensors)

    @property
    def n_actuators(self):
        return len(self.actuators)

    @property
    def sensor_ids(self):
        return [s.id for s in self.sensors]

    @property
    def actuator_ids(self):
        return [a.id for a in self.actuators]

    def tank_index(self, tid):
        return [t.id for t in self.tanks].index(tid)

    def pipe_index(self, pid):
        return [p.id for p in self.pipes].index(pid)

    def sensor_index(self, sid):
        return self.sensor_ids.index(sid)

    def inflow_pipes(self, tid):
        return [i for i, p in enumerate(self.pipes) if p.dst == tid]

    def outflow_pipes(self, tid):
        return [i for i, p in enumerate(self.pipes) if p.src == tid]

    def level_sensor(self, tid):
        for i, s in enumerate(self.sensors):
            if s.kind == "level" and s.target == tid:
                return i
        return None

    def flow_sensor(self, pid):
        for i, s in enumerate(self.sensors):
            if s.kind == "flow" and s.target == pid:
                return i
        return None

    def pressure_sensor(self, pid):
        for i, s in enumerate(self.sensors):
            if s.kind == "pressure" and s.target == pid:
                return i
        return None

    def sensor_kinds(self):
        return np.array([s.kind for s in self.sensors])

    def level_channels(self):
        return np.array([i for i, s in enumerate(self.sensors) if s.kind == "level"])

    def level_bounds(self):
        """Per-sensor (min, max); infinite for non-level channels."""
        lo = np.full(self.n_sensors, -np.inf)
        hi = np.full(self.n_sensors, np.inf)
        for i, s in enumerate(self.sensors):
            if s.kind == "level":
                t = self.tanks[self.tank_index(s.target)]
                lo[i], hi[i] = t.level_min, t.level_max
        return lo, hi

    def subsystems(self):
        """Tank-cells: each tank with its level sensor and the sensors on its inlet pipes."""
        cells = {}
        for t in self.tanks:
            members = []
            li = self.level_sensor(t.id)
            if li is not None:
                members.append(li)
            for pi in self.inflow_pipes(t.id):
                for fn in (self.flow_sensor, self.pressure_sensor):
                    si = fn(self.pipes[pi].id)
                    if si is not None:
                        members.append(si)
            cells[t.id] = sorted(members)
        return cells

    def balanced_tanks(self):
        """Tanks whose every in/out pipe carries a flow sensor (mass balance is observable)."""
        out = []
        for t in self.tanks:
            pipes = self.inflow_pipes(t.id) + self.outflow_pipes(t.id)
            if pipes and self.level_sensor(t.id) is not None and all(
                    self.flow_sensor(self.pipes[i].id) is not None for i in pipes):
                out.append(t.id)
        return out

    # -- checks ----------------------------------------------------------
    def validate(self):
        tids = {t.id for t in self.tanks}
        pids = {p.id for p in self.pipes}
        aids = {a.id for a in self.actuators}
        for t in self.tanks:
            if not t.level_min < t.level_max:
                raise ValueError(f"tank {t.id}: level_min must be < level_max")
            if t.area <= 0 or t.height <= 0:
                raise ValueError(f"tank {t.id}: area and height must be positive")
        for p in self.pipes:
            for end in (p.src, p.dst):
                if end not in tids and end not in (SOURCE, SINK):
                    raise ValueError(f"pipe {p.id}: unknown endpoint {end}")
            if p.actuator is not None and p.actuator not in aids:
                raise ValueError(f"pipe {p.id}: unknown actuator {p.actuator}")
        for a in self.actuators:
            if a.pipe not in pids:
                raise ValueError(f"actuator {a.id}: unknown pipe {a.pipe}")
            if a.controls not in tids:
                raise ValueError(f"actuator {a.id}: unknown controlled tank {a.controls}")
            if a.kind not in ("pump", "valve") or a.actuation not in ("on-off", "continuous"):
                raise ValueError(f"actuator {a.id}: bad kind/actuation")
        for s in self.sensors:
            ok = (s.kind == "level" and s.target in tids) or (s.kind in ("flow", "pressure") and s.target in pids)
            if not ok:
                raise ValueError(f"sensor {s.id}: does not map to an existing state")
        # connectivity over tanks and the boundary nodes
        nodes = tids | {SOURCE, SINK}
        adj = {n: set() for n in nodes}
        for p in self.pipes:
            adj[p.src].add(p.dst)
            adj[p.dst].add(p.src)
        seen, stack = set(), [next(iter(tids))] if tids else []
        while stack:
            n = stack.pop()
            if n in seen:
                continue
            seen.add(n)
            stack.extend(adj[n] - seen)
        if not tids <= seen:
            raise ValueError("plant graph is not connected")

    # -- steady operating point -------------------------------------------
    def steady_point(self, setpoints=None):
        """Outputs and inputs at the balanced operating point with levels at setpoint.

        Assumes the default series layout: every pipe carries the drain flow of the
        last tank at its setpoint.
        """
        sp = np.array([t.setpoint for t in self.tanks]) if setpoints is None else np.asarray(setpoints)
        levels = sp.copy()
        drains = [p for p in self.pipes if p.actuator is None]
        q = sum(p.drain_coeff * np.sqrt(levels[self.tank_index(p.src)]) for p in drains)
        flows = np.full(self.n_pipes, q)
        u = np.zeros(self.n_actuators)
        for j, a in enumerate(self.actuators):
            pipe = self.pipes[self.pipe_index(a.pipe)]
            cap = a.max_flow
            if a.kind == "valve" and pipe.src in [t.id for t in self.tanks]:
                ti = self.tank_index(pipe.src)
                cap *= np.sqrt(levels[ti] / self.tanks[ti].height)
            u[j] = q / cap
        y = observe_values(self, levels, flows)
        return y, u

    def to_dict(self):
        return {
            "tanks": [asdict(t) for t in self.tanks],
            "pipes": [asdict(p) for p in self.pipes],
            "pumps": [asdict(a) for a in self.actuators],
            "sensors": [asdict(s) for s in self.sensors],
            "dt": self.dt,
            "substeps": self.substeps,
        }

    @classmethod
    def from_dict(cls, d):
        return cls(
            tanks=[Tank(**t) for t in d["tanks"]],
            pipes=[Pipe(**p) for p in d["pipes"]],
            actuators=[Actuator(**a) for a in d["pumps"]],
            sensors=[Sensor(**s) for s in d["sensors"]],
            dt=d.get("dt", 1.0),
            substeps=d.get("substeps", 10),
        )


def observe_values(topo, levels, flows):
    """Observation map h: levels, pipe flows and Hazen-Williams head losses to sensor vector."""
    y = np.empty(topo.n_sensors)
    for i, s in enumerate(topo.sensors):
        if s.kind == "level":
            y[i] = levels[topo.tank_index(s.target)]
        else:
            pi = topo.pipe_index(s.target)
            if s.kind == "flow":
                y[i] = flows[pi]
            else:
                p = topo.pipes[pi]
                y[i] = hazen_williams(flows[pi], p.length, p.diameter, p.roughness)
    return y


@dataclass
class NoiseConfig:
    """Diagonal process (per tank level) and measurement (per sensor) variances."""

    process_var: np.ndarray
    meas_var: np.ndarray
    gamma: float = 0.0
    seed: int = 0

    def __post_init__(self):
        self.process_var = np.asarray(self.process_var, dtype=np.float64)
        self.meas_var = np.asarray(self.meas_var, dtype=np.float64)
        if np.any(self.process_var < 0) or np.any(self.meas_var < 0):
            raise ValueError("variances must be >= 0")
        if not 0.0 <= self.gamma <= 0.5:
            raise ValueError("gamma_mismatch must lie in [0, 0.5]")

    @classmethod
    def zero(cls, topo, seed=0):
        return cls(np.zeros(topo.n_tanks), np.zeros(topo.n_sensors), 0.0, seed)

    @property
    def meas_std(self):
        return np.sqrt(self.meas_var)

    def to_dict(self):
        return {"process_var": self.process_var.tolist(), "meas_var": self.meas_var.tolist(),
                "gamma": self.gamma, "seed": self.seed}

    @classmethod
    def from_dict(cls, d):
        return cls(d["process_var"], d["meas_var"], d.get("gamma", 0.0), d.get("seed", 0))


def default_topology():
    """Three tanks in series: raw -> treatment -> distribution.

    P1 fills T1 from the source, P2 moves T1 to T2, continuous valve V1 lets T2
    into T3, and T3 drains to the consumer through an unmetered orifice.
    """
    tanks = [Tank(f"T{i}", area=1.0, height=2.0, level_min=0.2, level_max=1.8,
                  initial_level=1.0, setpoint=1.0) for i in (1, 2, 3)]
    pipes = [
        Pipe("p1", SOURCE, "T1", length=100.0, actuator="P1"),
        Pipe("p2", "T1", "T2", length=80.0, actuator="P2"),
        Pipe("p3", "T2", "T3", length=60.0, actuator="V1"),
        Pipe("p4", "T3", SINK, length=40.0, drain_coeff=0.006),
    ]
    actuators = [
        Actuator("P1", "pump", 0.012, "on-off", "p1", controls="T1", band=0.1),
        Actuator("P2", "pump", 0.012, "on-off", "p2", controls="T2", band=0.1),
        Actuator("V1", "valve", 0.016, "continuous", "p3", controls="T3", gain=2.0, trim=0.53),
    ]
    sensors = [Sensor(f"L{i}", "level", f"T{i}") for i in (1, 2, 3)]
    sensors += [Sensor(f"F{i}", "flow", f"p{i}") for i in (1, 2, 3)]
    sensors += [Sensor(f"DP{i}", "pressure", f"p{i}") for i in (1, 2, 3)]
    return PlantTopology(tanks, pipes, actuators, sensors)


DEFAULT_MEAS_STD = {"level": 2e-3, "flow": 5e-5, "pressure": 5e-3}
DEFAULT_PROCESS_STD = 5e-4


def default_noise(topo, seed=0, gamma=0.0, scale=1.0):
    meas = np.array([(scale * DEFAULT_MEAS_STD[s.kind]) ** 2 for s in topo.sensors])
    proc = np.full(topo.n_tanks, (scale * DEFAULT_PROCESS_STD) ** 2)
    return NoiseConfig(proc, meas, gamma, seed)
