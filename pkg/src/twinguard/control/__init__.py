"""Resilient receding-horizon control over the twin."""

from .benchmark import LinearBenchmark, disturbance_tube, feasibility_episode, shifted_candidate, step_bias_tracking
from .mpc import (ControlPlan, ControllerConfig, MarginResult, ResilientController, ema_smooth, horizon_risk,
                  linearize, lqr_input, plan_cost, plan_feasible, propagate_covariance, rate_limit, rollout,
                  safety_margins, sensitivities, solve_mpc)
from .qp import QpResult, solve_qp
from .recovery import FAILSAFE, NOMINAL, RESILIENT, RecoveryMonitor, model_plant_discrepancy, recovery_and_fallback
from .terminal import TerminalIngredients, compute_terminal_ingredients, dare_fixed_point, sampled_invariance

__all__ = [
    "LinearBenchmark", "disturbance_tube", "feasibility_episode", "shifted_candidate", "step_bias_tracking",
    "ControlPlan", "ControllerConfig", "MarginResult", "ResilientController", "ema_smooth", "horizon_risk",
    "linearize", "lqr_input", "plan_cost", "plan_feasible", "propagate_covariance", "rate_limit", "rollout",
    "safety_margins", "sensitivities", "solve_mpc", "QpResult", "solve_qp", "FAILSAFE", "NOMINAL", "RESILIENT",
    "RecoveryMonitor", "model_plant_discrepancy", "recovery_and_fallback", "TerminalIngredients",
    "compute_terminal_ingredients", "dare_fixed_point", "sampled_invariance",
]
