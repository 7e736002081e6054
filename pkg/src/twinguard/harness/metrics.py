"""Detection quality, disruption cost, recovery and safety-violation metrics."""

import numpy as np

from ..attacks import CLASS_NAMES
from .records import MetricsReport
from .stats import bootstrap_ci, clopper_pearson_upper

CRITICAL_DEPTH = 0.10
MINOR_DEPTH = 0.05
MINOR_DURATION = 5.0


def confusion_matrix(true, pred, n_classes=3):
    true = np.asarray(true, dtype=int)
    pred = np.asarray(pred, dtype=int)
    return np.bincount(true * n_classes + pred, minlength=n_classes ** 2).reshape(n_classes, n_classes)


def per_class_scores(cm):
    """One-vs-rest precision, recall and F1 from a confusion matrix (rows = truth).

    A class that is neither present nor predicted scores 1 (nothing to get wrong);
    an empty denominator otherwise scores 0.
    """
    out = {}
    for c in range(cm.shape[0]):
        tp = int(cm[c, c])
        fp = int(cm[:, c].sum() - tp)
        fn = int(cm[c, :].sum() - tp)
        if tp + fp + fn == 0:
            p = r = f = 1.0
        else:
            p = tp / (tp + fp) if tp + fp else 0.0
            r = tp / (tp + fn) if tp + fn else 0.0
            f = 2 * tp / (2 * tp + fp + fn)
        out[CLASS_NAMES[c]] = {"precision": p, "recall": r, "f1": f, "support": tp + fn}
    return out


def worst_hour_far(alarms, hour=3600):
    """Largest false-alarm fraction over consecutive blocks of `hour` normal samples."""
    alarms = np.asarray(alarms, dtype=np.float64)
    if len(alarms) == 0:
        return 0.0
    return float(max(alarms[i:i + hour].mean() for i in range(0, len(alarms), hour)))


def detection_delays(results):
    """(delays of detected attacks, number of missed attacks).

    The delay is the first step inside the attack window whose validated class equals
    the true class, minus the attack start.
    """
    delays, missed = [], 0
    for r in sorted(results, key=lambda r: r.episode_id):
        if not r.is_attack:
            continue
        s, e = r.attack_window
        inside = (r.time >= s) & (r.time < e)
        hit = np.flatnonzero(inside & (r.pred_cls == r.true_cls) & (r.true_cls != 0))
        if len(hit):
            delays.append(float(r.time[hit[0]] - s))
        else:
            missed += 1
    return delays, missed


def compute_detection_metrics(results, report=None):
    report = MetricsReport() if report is None else report
    results = sorted(results, key=lambda r: r.episode_id)
    true = np.concatenate([r.true_cls for r in results]) if results else np.zeros(0, int)
    pred = np.concatenate([r.pred_cls for r in results]) if results else np.zeros(0, int)
    cm = confusion_matrix(true, pred)
    scores = per_class_scores(cm)
    f_as, f_am = scores["A_S"]["f1"], scores["A_M"]["f1"]
    normal = true == 0
    alarms = pred[normal] != 0
    delays, missed = detection_delays(results)
    n_att = len(delays) + missed
    det = {
        "confusion": cm.tolist(),
        "per_class": scores,
        "macro_attack_f1": 0.5 * (f_as + f_am),
        "eps_disc": abs(f_as - f_am),
        "far": float(alarms.mean()) if len(alarms) else 0.0,
        "far_worst_hour": worst_hour_far(alarms),
        "n_normal_samples": int(normal.sum()),
        "n_attack_episodes": n_att,
        "mttd_mean": float(np.mean(delays)) if delays else None,
        "mttd_worst": float(np.max(delays)) if delays else None,
        "n_missed": missed,
        "miss_rate": missed / n_att if n_att else 0.0,
    }
    if n_att == 0:
        report.flags.append("no attack episodes: MTTD undefined")
    report.detection.update(det)
    return report


def disruption_cost(result, cost, t_start=None, t_end=None):
    """Weighted deviation integral over [t_d, t_r] plus production loss, plus the restart
    charge for runs that shut the plant down. Undetected runs cost nothing."""
    t0 = result.t_detect if t_start is None else t_start
    if t0 is None:
        return 0.0
    t1 = result.t_recover if t_end is None else t_end
    t1 = float(result.time[-1]) if t1 is None else t1
    sel = (result.time >= t0) & (result.time <= t1)
    dev = np.abs(result.y_true[sel][:, cost.critical] - cost.y_safe[cost.critical]) @ cost.weights
    integral = float(np.trapezoid(dev, result.time[sel])) if sel.sum() > 1 else 0.0
    total = integral + cost.c_prod * (t1 - t0)
    if result.restarted:
        total += cost.c_restart
    return total


def recovery_time(result):
    if result.t_detect is None:
        return None
    end = result.t_recover if result.t_recover is not None else float(result.time[-1])
    return end - result.t_detect


def classify_excursions(excursions):
    crit = [e for e in excursions if e.depth > CRITICAL_DEPTH]
    minor = [e for e in excursions if e.depth < MINOR_DEPTH and e.duration < MINOR_DURATION]
    return crit, minor


def _ci_dict(res):
    return {"delta": res.delta, "ci": list(res.ci), "significant": res.significant, "n": res.n}


def compute_resilience_metrics(resilient, shutdown, cost, report=None, alpha=0.05, n_boot=10_000, seed=0,
                               undetected=()):
    """Pair runs by episode id; normalize each resilient cost by its shutdown twin.

    `undetected` holds attack episodes that never raised an alarm (nominal control
    throughout); they carry no cost but their excursions count toward the violation rates.
    """
    report = MetricsReport() if report is None else report
    res = {r.episode_id: r for r in resilient}
    sd = {r.episode_id: r for r in shutdown}
    ids = sorted(res)
    paired = [i for i in ids if i in sd and sd[i].t_detect is not None]
    unpaired = [i for i in ids if i not in sd]
    if unpaired:
        report.flags.append(f"{len(unpaired)} resilient runs without a shutdown pair: cost reported unnormalized")
    d_res = np.array([disruption_cost(res[i], cost) for i in paired])
    d_sd = np.array([disruption_cost(sd[i], cost) for i in paired])
    rel = d_res / d_sd if len(paired) else np.zeros(0)
    sd_rel = d_sd / d_sd if len(paired) else np.zeros(0)
    rt_res = np.array([recovery_time(res[i]) for i in paired], dtype=np.float64)
    rt_sd = np.array([recovery_time(sd[i]) for i in paired], dtype=np.float64)
    runs = [res[i] for i in ids] + list(undetected)
    n_att = len(runs)
    crit_runs = minor_runs = 0
    n_crit = n_minor = 0
    for r in runs:
        c, m = classify_excursions(r.excursions)
        n_crit += len(c)
        n_minor += len(m)
        crit_runs += bool(c)
        minor_runs += bool(m)
    sd_crit = sum(bool(classify_excursions(sd[i].excursions)[0]) for i in ids if i in sd)
    out = {
        "n_attacks": n_att,
        "n_paired": len(paired),
        "n_undetected": len(undetected),
        "d_rel_resilient": float(rel.mean()) if len(rel) else None,
        "d_rel_shutdown": float(sd_rel.mean()) if len(sd_rel) else None,
        "d_resilient_mean": float(d_res.mean()) if len(d_res) else None,
        "d_shutdown_mean": float(d_sd.mean()) if len(d_sd) else None,
        "d_unnormalized": [float(disruption_cost(res[i], cost)) for i in unpaired],
        "recovery_resilient_mean": float(rt_res.mean()) if len(rt_res) else None,
        "recovery_shutdown_mean": float(rt_sd.mean()) if len(rt_sd) else None,
        "recovery_ratio": float(rt_res.mean() / rt_sd.mean()) if len(rt_res) else None,
        "n_unrecovered": sum(not res[i].recovered for i in ids),
        "n_failsafe": sum(res[i].restarted for i in ids),
        "critical_violations": n_crit,
        "minor_violations": n_minor,
        "rate_critical": crit_runs / n_att if n_att else 0.0,
        "rate_minor": minor_runs / n_att if n_att else 0.0,
        "critical_upper_bound": clopper_pearson_upper(crit_runs, n_att, alpha) if n_att else None,
        "shutdown_critical_runs": sd_crit,
        "alpha": alpha,
    }
    if len(paired) >= 2:
        out["d_rel_ci"] = _ci_dict(bootstrap_ci(rel, np.ones_like(rel), n_boot, seed))
        out["cost_diff_ci"] = _ci_dict(bootstrap_ci(d_res, d_sd, n_boot, seed + 1))
        out["recovery_diff_ci"] = _ci_dict(bootstrap_ci(rt_res, rt_sd, n_boot, seed + 2))
    report.resilience.update(out)
    return report
