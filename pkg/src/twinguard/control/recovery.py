"""Two-stage return to nominal operation and the discrepancy-triggered failsafe."""

import numpy as np

RESILIENT, NOMINAL, FAILSAFE = "resilient", "nominal", "failsafe"


def model_plant_discrepancy(y_meas, y_ctrl, floor=1e-12):
    """||Y_meas - Y_ctrl|| / ||Y_meas||."""
    y_meas = np.asarray(y_meas, dtype=np.float64)
    return float(np.linalg.norm(y_meas - np.asarray(y_ctrl)) / max(np.linalg.norm(y_meas), floor))


class RecoveryMonitor:
    """Tracks the resilient phase.

    Stage 1 counts consecutive normal classifications up to T_confirm; stage 2 then needs
    T_val further consecutive samples with the discrepancy below tau_recovery. Any attack
    class resets both stages, a discrepancy at or above tau_recovery resets stage 2, and a
    discrepancy above fallback_factor * e_bar switches to the failsafe for good.
    """

    def __init__(self, T_confirm=60, T_val=30, tau_recovery=0.05, fallback_factor=3.0, e_bar=0.0):
        self.T_confirm = T_confirm
        self.T_val = T_val
        self.tau = tau_recovery
        self.factor = fallback_factor
        self.e_bar = e_bar
        self.reset()

    @classmethod
    def from_config(cls, cfg):
        return cls(cfg.T_confirm, cfg.T_val, cfg.tau_recovery, cfg.fallback_factor, cfg.e_bar)

    def reset(self):
        self.mode = RESILIENT
        self.n_normal = 0
        self.n_valid = 0

    def update(self, cls, delta):
        if self.mode != RESILIENT:
            return self.mode
        if delta > self.factor * self.e_bar:
            self.mode = FAILSAFE
            return self.mode
        if cls != 0:
            self.n_normal = self.n_valid = 0
            return self.mode
        self.n_normal += 1
        if self.n_normal <= self.T_confirm:
            return self.mode
        self.n_valid = self.n_valid + 1 if delta < self.tau else 0
        if self.n_valid >= self.T_val:
            self.mode = NOMINAL
        return self.mode


def recovery_and_fallback(classes, deltas, cfg=None, e_bar=None, **kw):
    """Replay a resilient phase from its first sample and return the resulting mode."""
    if cfg is not None:
        mon = RecoveryMonitor.from_config(cfg)
        if e_bar is not None:
            mon.e_bar = e_bar
    else:
        mon = RecoveryMonitor(e_bar=0.0 if e_bar is None else e_bar, **kw)
    mode = mon.mode
    for c, d in zip(classes, deltas):
        mode = mon.update(int(c), float(d))
        if mode != RESILIENT:
            break
    return mode
