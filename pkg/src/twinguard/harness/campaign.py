"""Seeded synthetic campaign: data generation, model training, calibration, evaluation."""

import json
import logging
import os
from dataclasses import asdict, dataclass, field, replace

import numpy as np

from ..ade.mmd import MmdReference
from ..ade.model import AdeConfig, AdeModel, ResidualStats
from ..ade.train import balance_classes, latent_mmd, train_ade, windows_from_stream
from ..attacks import AM, AS, generate_scenario
from ..control.mpc import ControllerConfig
from ..control.terminal import compute_terminal_ingredients
from ..plant.sim import simulate
from ..plant.topology import default_noise, default_topology
from ..twin.model import DtConfig, TcnTwin
from ..twin.train import concat_datasets, make_dataset, train_dt
from .episode import EpisodeConfig, Pipeline, run_episode, simulate_controlled, simulate_nominal, twin_residuals
from .metrics import compute_detection_metrics, compute_resilience_metrics
from .records import DisruptionCostParams, MetricsReport

log = logging.getLogger(__name__)

# disjoint seed blocks keep training, calibration and evaluation episodes apart
TRAIN_BLOCK, CALIB_BLOCK, EVAL_BLOCK = 1_000, 2_000, 3_000


@dataclass
class CampaignConfig:
    seed: int = 0
    n_as: int = 30
    n_am: int = 20
    n_normal: int = 5
    # twin
    dt_runs: int = 6
    dt_steps: int = 2500
    dt_dither: float = 0.3
    dt_hidden: int = 32
    dt_epochs: int = 30
    dt_patience: int = 8
    dt_lr: float = 2e-3
    # discrimination engine
    ade_as: int = 400
    ade_am: int = 300
    ade_normal: int = 8
    ade_normal_steps: int = 1500
    ade_controlled: int = 2          # attack-free episodes under the resilient controller
    ade_controlled_steps: int = 800
    ade_stride: int = 6
    ade_hidden: int = 32
    ade_epochs: int = 10
    ade_patience: int = 4
    ade_lr: float = 2e-3
    ade_beta: float = 0.1
    n_ref: int = 400
    n_null: int = 500
    alpha: float = 0.05
    # controller
    q_level: float = 10.0
    r_input: float = 1.0
    du_max: float = 0.3
    horizon: int = 15
    sqp_tol: float = 1e-4
    sqp_max_iter: int = 1             # real-time iteration: one SQP step per sample, warm-started
    # cost
    c_prod: float = 1.0
    c_restart: float = 1000.0
    episode: EpisodeConfig = field(default_factory=EpisodeConfig)

    @classmethod
    def from_dict(cls, d):
        d = dict(d)
        ep = EpisodeConfig(**d.pop("episode", {}))
        return cls(episode=ep, **d)

    def to_dict(self):
        return asdict(self)


def _seed(cfg, block, i):
    return int(cfg.seed) * 100_000 + block + i


# -- twin ------------------------------------------------------------------
def twin_dataset(cfg, topo, tau):
    parts, vparts = [], []
    for s in range(cfg.dt_runs):
        seed = _seed(cfg, TRAIN_BLOCK, s)
        r = np.random.default_rng(seed)
        lv = r.uniform(0.5, 1.5, topo.n_tanks)
        Y, U, _ = simulate(topo, default_noise(topo, seed=seed), cfg.dt_steps, seed=seed, levels=lv,
                           rng_dither=r, dither=cfg.dt_dither)
        (vparts if s == cfg.dt_runs - 1 else parts).append(make_dataset(Y, U, tau))
    return concat_datasets(parts), concat_datasets(vparts)


def train_twin(cfg, topo, verbose=False):
    dcfg = DtConfig(hidden=cfg.dt_hidden, epochs=cfg.dt_epochs, patience=cfg.dt_patience, lr=cfg.dt_lr,
                    seed=cfg.seed)
    tr, va = twin_dataset(cfg, topo, dcfg.tau)
    model, _ = train_dt(tr, va, topo, dcfg, verbose=verbose)
    return model


# -- discrimination engine -------------------------------------------------
def residual_stream(twin, topo, noise, scenario, steps, seed, controller=None):
    """Residuals and labels of one episode under nominal control, or under the resilient
    controller when `controller` = (ControllerConfig, TerminalIngredients) is given."""
    if controller is None:
        Ym, _, U, lab = simulate_nominal(topo, noise, scenario, steps, seed)
    else:
        if scenario is not None:
            raise ValueError("controlled streams are attack-free")
        Ym, _, U, lab = simulate_controlled(twin, *controller, topo, noise, steps, seed)
    return twin_residuals(twin, Ym, U), lab[twin.tau:]


def _scenarios(cfg, topo, noise, block, n_as, n_am):
    out = []
    for i in range(n_as):
        out.append(generate_scenario(AS, topo, _seed(cfg, block, i), noise))
    for i in range(n_am):
        out.append(generate_scenario(AM, topo, _seed(cfg, block, 500 + i), noise))
    return out


@dataclass
class AdeData:
    """Labelled windows with their source episode and a keep-always flag, plus the normal
    residual rows used for channel statistics."""
    X: np.ndarray
    y: np.ndarray
    group: np.ndarray
    always: np.ndarray
    normal_rows: np.ndarray


def ade_dataset(cfg, twin, topo, noise, block=TRAIN_BLOCK, n_as=None, n_am=None, n_normal=None, W=50):
    """Windows from attacked and normal nominal-control episodes and from attack-free runs
    under the resilient controller. Windows ending just after an attack keep their N label
    and, like the controlled windows, skip class balancing so the encoder learns where in
    the window the anomaly sits and what MPC operation looks like."""
    n_as = cfg.ade_as if n_as is None else n_as
    n_am = cfg.ade_am if n_am is None else n_am
    n_normal = cfg.ade_normal if n_normal is None else n_normal
    Xs, ys, gs, keep, normal_rows = [], [], [], [], []

    def add(X, y, always, g):
        Xs.append(X)
        ys.append(y)
        gs.append(np.full(len(y), g))
        keep.append(always)

    scen = _scenarios(cfg, topo, noise, block, n_as, n_am)
    for k, sc in enumerate(scen):
        steps = int(np.ceil(sc.end)) + 120
        R, lab = residual_stream(twin, topo, noise, sc, steps, _seed(cfg, block, 10_000 + k))
        X, y, ends = windows_from_stream(R, lab, W, stride=cfg.ade_stride)
        tail = np.array([y[i] == 0 and lab[ends[i] + 1 - W:ends[i] + 1].any() for i in range(len(y))], dtype=bool)
        add(X, y, tail, k)
        normal_rows.append(R[lab == 0])
    ctl = build_controller(cfg, twin, topo, noise)
    streams = [(cfg.ade_normal_steps, None)] * n_normal + [(cfg.ade_controlled_steps, ctl)] * cfg.ade_controlled
    for k, (steps, c) in enumerate(streams):
        R, lab = residual_stream(twin, topo, noise, None, steps, _seed(cfg, block, 20_000 + k), c)
        X, y, _ = windows_from_stream(R, lab, W, stride=cfg.ade_stride)
        add(X, y, np.full(len(y), c is not None), len(scen) + k)
        normal_rows.append(R)
    return AdeData(np.concatenate(Xs), np.concatenate(ys), np.concatenate(gs), np.concatenate(keep),
                   np.concatenate(normal_rows))


def train_detector(cfg, twin, topo, noise, beta=None, data=None, verbose=False):
    """Train on class-balanced windows; early stopping watches whole held-out episodes.
    Returns (model, residual stats)."""
    acfg = AdeConfig(hidden=cfg.ade_hidden, epochs=cfg.ade_epochs, patience=cfg.ade_patience, lr=cfg.ade_lr,
                     beta=cfg.ade_beta if beta is None else beta, seed=cfg.seed, n_ref=cfg.n_ref,
                     alpha=cfg.alpha)
    d = ade_dataset(cfg, twin, topo, noise, W=acfg.window) if data is None else data
    stats = ResidualStats.fit(d.normal_rows)
    rng = np.random.default_rng(_seed(cfg, TRAIN_BLOCK, 99))
    groups = np.unique(d.group)
    held = rng.choice(groups, size=max(1, len(groups) // 10), replace=False)
    val = np.isin(d.group, held)
    parts = {}
    for name, mask in (("tr", ~val), ("va", val)):
        free = np.flatnonzero(mask & ~d.always)
        Xb, yb = balance_classes(d.X[free], d.y[free], rng)
        fixed = np.flatnonzero(mask & d.always)
        parts[name] = (np.concatenate([Xb, d.X[fixed]]), np.concatenate([yb, d.y[fixed]]))
    # injection signs are symmetric, so a sign-flipped window is an equally valid sample
    X_tr, y_tr = parts["tr"]
    flip = np.where(rng.random(len(y_tr)) < 0.5, -1.0, 1.0)
    parts["tr"] = (X_tr * flip[:, None, None], y_tr)
    model, hist = train_ade(parts["tr"], parts["va"], acfg, stats=stats, verbose=verbose)
    model.train_info = {"epochs_run": len(hist), "n_train": len(parts["tr"][1]),
                        "best_val": min(h["val"] for h in hist)}
    return model, stats


def subset_episodes(data, groups):
    keep = np.isin(data.group, groups)
    return AdeData(data.X[keep], data.y[keep], data.group[keep], data.always[keep], data.normal_rows)


def mmd_ablation(cfg, twin, topo, noise, data, seeds=(0, 1, 2), fraction=0.3, epochs=6, hidden=16):
    """Latent MMD^2(A_S, A_M) with and without the MMD term on paired seeds.

    Each seed trains both variants on the same episode subset from the same initialization
    and scores them on attack windows of episodes neither saw. Returns {seed: (mmd_beta0,
    mmd_beta)} with beta = cfg.ade_beta.
    """
    groups = np.unique(data.group)
    out = {}
    for s in seeds:
        rng = np.random.default_rng(_seed(cfg, TRAIN_BLOCK, 300 + s))
        perm = rng.permutation(groups)
        n_tr = max(2, int(fraction * len(groups)))
        tr, te = subset_episodes(data, perm[:n_tr]), subset_episodes(data, perm[n_tr:])
        att = te.y != 0
        Xte, yte = te.X[att], te.y[att]
        pick = np.sort(rng.choice(len(yte), size=min(1500, len(yte)), replace=False))
        sub = replace(cfg, seed=s, ade_epochs=epochs, ade_hidden=hidden, ade_patience=epochs)
        vals = []
        for beta in (0.0, cfg.ade_beta):
            model, _ = train_detector(sub, twin, topo, noise, beta=beta, data=tr)
            vals.append(float(latent_mmd(model, Xte[pick], yte[pick])))
        out[s] = tuple(vals)
    return out


def calibrate_reference(cfg, model, twin, topo, noise):
    """Reference embeddings and the rejection threshold from held-out normal episodes.

    Normal operation under both nominal and resilient control enters the reference. The
    null is the runtime statistic itself: blocks of test_size consecutive embeddings from
    separate normal streams against the fixed reference, thresholded at 1 - alpha.
    """
    W, m = model.cfg.window, model.cfg.test_size
    Z_ref, Z_null = [], []
    ctl = build_controller(cfg, twin, topo, noise)
    for k in range(4):
        c = ctl if k % 2 else None
        steps = cfg.ade_controlled_steps if c else 1500
        R, _ = residual_stream(twin, topo, noise, None, steps, _seed(cfg, CALIB_BLOCK, k), c)
        win = np.lib.stride_tricks.sliding_window_view(R, W, axis=0).transpose(0, 2, 1)
        Z = model.encode(win)
        (Z_ref if k < 2 else Z_null).append(Z)
    Z_ref = np.concatenate(Z_ref)
    rng = np.random.default_rng(_seed(cfg, CALIB_BLOCK, 99))
    ref = MmdReference(Z_ref[np.sort(rng.choice(len(Z_ref), size=min(cfg.n_ref, len(Z_ref)), replace=False))])
    null = []
    for _ in range(cfg.n_null):
        Z = Z_null[int(rng.integers(len(Z_null)))]
        s = int(rng.integers(0, len(Z) - m + 1))
        null.append(ref.statistic(Z[s:s + m]))
    return ref, float(np.quantile(null, 1.0 - cfg.alpha))


# -- controller --------------------------------------------------------------
def build_controller(cfg, twin, topo, noise):
    y_s, u_s = topo.steady_point()
    ctx = np.tile(np.concatenate([y_s, u_s]), (twin.tau, 1))
    A, B = twin.jacobians(ctx)
    d_y = topo.n_sensors
    lc = topo.level_channels()
    q = np.zeros(d_y)
    q[lc] = cfg.q_level
    Q = np.diag(q)
    R = cfg.r_input * np.eye(topo.n_actuators)
    lo, hi = topo.level_bounds()
    Sw = np.zeros((d_y, d_y))
    Sw[lc, lc] = noise.process_var
    ccfg = ControllerConfig(Q=Q, R=R, y_safe=y_s, u_safe=u_s, u_min=np.zeros(topo.n_actuators),
                            u_max=np.ones(topo.n_actuators), y_min=lo, y_max=hi, horizon=cfg.horizon,
                            e_bar=twin.e_bar, Sigma_w=Sw, du_max=cfg.du_max, tol=cfg.sqp_tol,
                            max_iter=cfg.sqp_max_iter)
    half = np.where(np.isfinite(hi - lo), 0.5 * (hi - lo), np.inf)
    room = (1.0 - ccfg.clip_fraction) * half
    term = compute_terminal_ingredients(A, B, Q + 1e-6 * np.eye(d_y), R, y_lo=-room, y_hi=room,
                                        u_lo=-u_s, u_hi=1.0 - u_s, seed=cfg.seed)
    return ccfg, term


def cost_params(cfg, topo):
    y_s, _ = topo.steady_point()
    lc = topo.level_channels()
    return DisruptionCostParams(lc, np.ones(len(lc)), y_s, cfg.c_prod, cfg.c_restart)


# -- artifacts ---------------------------------------------------------------
@dataclass
class Artifacts:
    twin: object
    ade: object
    stats: object
    ref: object
    tau_mmd: float

    def save(self, outdir):
        os.makedirs(outdir, exist_ok=True)
        self.twin.save(os.path.join(outdir, "twin.bin"))
        self.ade.save(os.path.join(outdir, "ade.bin"))
        np.savez(os.path.join(outdir, "reference.npz"), Z=self.ref.Z, bandwidth=self.ref.bandwidth,
                 tau_mmd=self.tau_mmd, cov=self.stats.cov, mean=self.stats.mean)

    @classmethod
    def load(cls, outdir):
        twin = TcnTwin.load(os.path.join(outdir, "twin.bin"))
        ade = AdeModel.load(os.path.join(outdir, "ade.bin"))
        d = np.load(os.path.join(outdir, "reference.npz"))
        ref = MmdReference(d["Z"], float(d["bandwidth"]))
        return cls(twin, ade, ResidualStats(d["cov"], d["mean"]), ref, float(d["tau_mmd"]))


def train_all(cfg, topo=None, noise=None, verbose=False):
    topo = default_topology() if topo is None else topo
    noise = default_noise(topo, seed=cfg.seed) if noise is None else noise
    twin = train_twin(cfg, topo, verbose)
    ade, stats = train_detector(cfg, twin, topo, noise, verbose=verbose)
    ref, tau = calibrate_reference(cfg, ade, twin, topo, noise)
    return Artifacts(twin, ade, stats, ref, tau)


def make_pipeline(cfg, art, topo=None, noise=None):
    topo = default_topology() if topo is None else topo
    noise = default_noise(topo, seed=cfg.seed) if noise is None else noise
    ccfg, term = build_controller(cfg, art.twin, topo, noise)
    ep = EpisodeConfig(**asdict(cfg.episode))
    return Pipeline(topo, noise, art.twin, art.ade, art.ref, art.tau_mmd, ccfg, term, art.stats.std, ep)


def evaluation_scenarios(cfg, topo, noise):
    return _scenarios(cfg, topo, noise, EVAL_BLOCK, cfg.n_as, cfg.n_am)


def evaluate(cfg, art, topo=None, noise=None, progress=None):
    """Run the campaign and return (MetricsReport, per-episode results by policy)."""
    pipe = make_pipeline(cfg, art, topo, noise)
    scen = evaluation_scenarios(cfg, pipe.topo, pipe.noise)
    results = {"observe": [], "resilient": [], "shutdown": []}
    eid = 0
    for sc in scen:
        out = run_episode(pipe, sc, _seed(cfg, EVAL_BLOCK, 50_000 + eid), eid)
        for k, v in out.items():
            if v is not None:
                results[k].append(v)
        if progress:
            progress(eid, out)
        eid += 1
    for k in range(cfg.n_normal):
        out = run_episode(pipe, None, _seed(cfg, EVAL_BLOCK, 50_000 + eid), eid, policies=())
        results["observe"].append(out["observe"])
        eid += 1
    report = MetricsReport(config={"campaign": cfg.to_dict(), "tau_mmd": art.tau_mmd,
                                   "terminal_c": float(pipe.terminal.c), "e_bar": float(art.twin.e_bar)})
    compute_detection_metrics(results["observe"], report)
    attacked = [r for r in results["observe"] if r.is_attack]
    detected = {r.episode_id for r in results["resilient"]}
    compute_resilience_metrics(results["resilient"], results["shutdown"], cost_params(cfg, pipe.topo), report,
                               seed=cfg.seed, undetected=[r for r in attacked if r.episode_id not in detected])
    report.resilience["mpc_status"] = _merge_status(results["resilient"])
    report.flags.extend(report.check())
    return report, results


def _merge_status(runs):
    tot = {}
    for r in runs:
        for k, v in r.mpc_status.items():
            tot[k] = tot.get(k, 0) + v
    return dict(sorted(tot.items()))


def report_json(report):
    return json.dumps(report.to_dict(), sort_keys=True, indent=1)
