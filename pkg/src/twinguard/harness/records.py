"""Per-episode records and the campaign-level metrics report."""

from dataclasses import asdict, dataclass, field

import numpy as np

NOMINAL, RESILIENT, FAILSAFE, OFFLINE = 0, 1, 2, 3
MODE_NAMES = ("nominal", "resilient", "failsafe", "offline")


@dataclass
class Excursion:
    channel: int
    start: float
    duration: float
    depth: float          # largest overshoot beyond the bound, as a fraction of the operating range


@dataclass
class EpisodeResult:
    """Step-aligned arrays; every array has one row per simulated step."""

    episode_id: int
    policy: str                      # observe | resilient | shutdown
    seed: int
    time: np.ndarray
    true_cls: np.ndarray
    pred_cls: np.ndarray             # validated class
    raw_cls: np.ndarray
    confidence: np.ndarray
    mode: np.ndarray
    delta_mp: np.ndarray             # nan where the discrepancy is not evaluated
    y_true: np.ndarray               # noise-free plant outputs
    u: np.ndarray
    scenario: dict | None = None
    t_detect: float | None = None
    t_recover: float | None = None
    recovered: bool = True
    restarted: bool = False
    excursions: list = field(default_factory=list)
    mpc_status: dict = field(default_factory=dict)

    def __post_init__(self):
        n = len(self.time)
        for name in ("true_cls", "pred_cls", "raw_cls", "confidence", "mode", "delta_mp", "y_true", "u"):
            if len(getattr(self, name)) != n:
                raise ValueError(f"record {name} has {len(getattr(self, name))} rows, expected {n}")

    def __len__(self):
        return len(self.time)

    @property
    def is_attack(self):
        return self.scenario is not None

    @property
    def attack_window(self):
        if self.scenario is None:
            return None
        s = float(self.scenario["start"])
        return s, s + float(self.scenario["duration"])


def find_excursions(time, y, lo, hi, channels, active=None):
    """Contiguous runs outside [lo, hi] per channel, with depth relative to hi - lo.

    Steps where `active` is False (plant deliberately offline) are not checked.
    """
    time = np.asarray(time, dtype=np.float64)
    out = []
    for c in channels:
        span = hi[c] - lo[c]
        over = np.maximum(np.maximum(y[:, c] - hi[c], lo[c] - y[:, c]), 0.0) / span
        bad = over > 0
        if active is not None:
            bad &= active
        if not bad.any():
            continue
        edges = np.diff(np.concatenate([[0], bad.astype(int), [0]]))
        starts, stops = np.flatnonzero(edges == 1), np.flatnonzero(edges == -1)
        for a, b in zip(starts, stops):
            out.append(Excursion(int(c), float(time[a]), float(b - a), float(over[a:b].max())))
    return out


@dataclass
class DisruptionCostParams:
    critical: np.ndarray             # sensor indices in I_crit
    weights: np.ndarray
    y_safe: np.ndarray               # full output vector of safe values
    c_prod: float = 1.0              # $/s
    c_restart: float = 1000.0        # $

    def __post_init__(self):
        self.critical = np.asarray(self.critical, dtype=int)
        self.weights = np.asarray(self.weights, dtype=np.float64)
        self.y_safe = np.asarray(self.y_safe, dtype=np.float64)
        if self.weights.shape != self.critical.shape:
            raise ValueError("one weight per critical sensor")
        if np.any(self.weights <= 0):
            raise ValueError("importance weights must be > 0")
        if self.c_prod < 0 or self.c_restart < 0:
            raise ValueError("costs must be >= 0")


@dataclass
class MetricsReport:
    detection: dict = field(default_factory=dict)
    resilience: dict = field(default_factory=dict)
    flags: list = field(default_factory=list)
    config: dict = field(default_factory=dict)

    def to_dict(self):
        return _plain(asdict(self))

    def check(self):
        """Invariant violations as messages: rates outside [0, 1], CIs missing their point."""
        bad = []
        for sec in (self.detection, self.resilience):
            for k, v in sec.items():
                if k.startswith("rate_") or k in ("far", "far_worst_hour", "miss_rate"):
                    if v is not None and not 0.0 <= v <= 1.0:
                        bad.append(f"{k}={v} outside [0, 1]")
                if k.endswith("_ci") and isinstance(v, dict) and v.get("ci") is not None:
                    lo, hi = v["ci"]
                    if not lo <= v["delta"] <= hi:
                        bad.append(f"{k} does not contain its point estimate")
        for cls in self.detection.get("per_class", {}).values():
            for m in ("precision", "recall", "f1"):
                if not 0.0 <= cls[m] <= 1.0:
                    bad.append(f"{m}={cls[m]} outside [0, 1]")
        return bad


def _plain(x):
    if isinstance(x, dict):
        return {str(k): _plain(v) for k, v in x.items()}
    if isinstance(x, (list, tuple)):
        return [_plain(v) for v in x]
    if isinstance(x, np.ndarray):
        return _plain(x.tolist())
    if isinstance(x, np.integer):
        return int(x)
    if isinstance(x, np.floating):
        return float(x)
    return x
