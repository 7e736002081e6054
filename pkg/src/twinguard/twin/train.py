"""Offline training of the twin on normal-operation trajectories."""

import logging

import numpy as np

from ..nn.optim import Adam, ReduceLROnPlateau
from .model import DtConfig, TcnTwin
from .physics import PhysicsMap, adaptive_physics_weight, physics_residuals

log = logging.getLogger(__name__)


def make_dataset(Y, U, tau):
    """Sliding (context, target) pairs from one trajectory.

    Context k covers frames t-tau..t-1 of [y, u] (u[t-1] is the command applied
    just before y[t] is sampled); the target is y[t].
    """
    X = np.concatenate([Y, U], axis=1)
    T = len(Y)
    idx = np.arange(tau, T)
    ctx = np.stack([X[t - tau:t] for t in idx])
    return ctx, Y[idx].copy()


def concat_datasets(parts):
    ctx = np.concatenate([p[0] for p in parts])
    tgt = np.concatenate([p[1] for p in parts])
    return ctx, tgt


def fit_normalization(model, ctx, tgt, floor=1e-8):
    flat = ctx.reshape(-1, ctx.shape[-1])
    model.x_mean = flat.mean(axis=0)
    model.x_std = np.maximum(flat.std(axis=0), floor)
    model.y_mean = tgt.mean(axis=0)
    model.y_std = np.maximum(tgt.std(axis=0), floor)


class PhysicsScales:
    """Characteristic flow and pressure magnitudes that make the physics terms unit-free."""

    def __init__(self, pm, y_std):
        flows = np.flatnonzero(np.abs(pm.flow_net).sum(axis=0)) if pm.flow_net.size else np.array([], int)
        self.flow = float(np.mean(y_std[flows])) if len(flows) else 1.0
        self.press = float(np.mean(y_std[pm.pipe_press])) if len(pm.pipe_press) else 1.0


def composite_loss(model, ctx, tgt, pm, scales, sigma2, lam, lambda_p, masks=None, dt=1.0):
    """Prediction term / sigma2 plus lam_i * (L_mass + lambda_p L_pipe) per sample, batch-averaged.

    lam is a scalar or per-sample array and is treated as a constant.
    Returns (loss, grads on effective weights).
    """
    xn = model.normalize(ctx)
    tn = (tgt - model.y_mean) / model.y_std
    out, fc = model.forward(xn, masks)
    B = len(ctx)
    diff = out - tn
    loss = float((diff ** 2).sum(axis=1).mean() / sigma2)
    g = 2.0 * diff / (B * sigma2)
    lam = np.broadcast_to(np.asarray(lam, dtype=np.float64), (B,))
    if np.any(lam > 0):
        y_hat = model.y_mean + model.y_std * out
        seq = np.stack([ctx[:, -1, :model.d_y], y_hat], axis=1)
        Lm, Lp, gm, gp = physics_residuals(seq, pm, dt, return_grad=True)
        phys = Lm / scales.flow ** 2 + lambda_p * Lp / scales.press ** 2
        loss += float((lam * phys).mean())
        gy = gm[:, 1, :] / scales.flow ** 2 + lambda_p * gp[:, 1, :] / scales.press ** 2
        g = g + (lam / B)[:, None] * gy * model.y_std
    grads, _ = model.backward(g, fc)
    return loss, grads


def _mean_loss(model, ctx, tgt, pm, scales, sigma2, lam, lambda_p, bs=2048):
    tot = 0.0
    for i in range(0, len(ctx), bs):
        l, _ = composite_loss(model, ctx[i:i + bs], tgt[i:i + bs], pm, scales, sigma2, lam, lambda_p)
        tot += l * len(ctx[i:i + bs])
    return tot / len(ctx)


def prediction_errors(model, ctx, tgt, bs=4096):
    pred = np.concatenate([model.predict_batch(ctx[i:i + bs]) for i in range(0, len(ctx), bs)])
    return tgt - pred


def train_dt(train, val, topo, cfg=None, d_u=None, verbose=False):
    """Train a TcnTwin with physics regularization, early stopping and a plateau schedule.

    train and val are (contexts, targets) pairs in native units from normal operation.
    Returns (model, history).
    """
    cfg = DtConfig() if cfg is None else cfg
    ctx, tgt = train
    vctx, vtgt = val
    d_y = tgt.shape[1]
    d_u = ctx.shape[2] - d_y if d_u is None else d_u
    rng = np.random.default_rng(cfg.seed)
    model = TcnTwin(d_y, d_u, cfg, rng=np.random.default_rng(rng.integers(2 ** 63)))
    fit_normalization(model, ctx, tgt)
    pm = PhysicsMap.from_topology(topo)
    scales = PhysicsScales(pm, model.y_std)
    opt = Adam(model.raw, lr=cfg.lr, weight_decay=cfg.weight_decay)
    sched = ReduceLROnPlateau(opt, factor=cfg.plateau_factor, patience=cfg.plateau_patience)
    n = len(ctx)
    history = []

    def run_epoch(sigma2, use_phys, theta):
        order = rng.permutation(n)
        total = 0.0
        for b in range(0, n, cfg.batch):
            sel = order[b:b + cfg.batch]
            model.refresh()
            masks = model.sample_masks(len(sel), rng) if cfg.keep_prob < 1 else None
            if use_phys and cfg.alpha0 > 0:
                if cfg.keep_prob < 1 and cfg.n_mc_train >= 2:
                    tr = model.mc_traces_norm(model.normalize(ctx[sel]), cfg.n_mc_train, rng)
                else:
                    tr = np.zeros(len(sel))
                lam = adaptive_physics_weight(tr, cfg.alpha0, theta)
            else:
                lam = 0.0
            loss, g = composite_loss(model, ctx[sel], tgt[sel], pm, scales, sigma2, lam, cfg.lambda_p, masks)
            if not np.isfinite(loss):
                raise FloatingPointError(f"non-finite training loss at batch {b // cfg.batch}, lr={opt.lr}")
            opt.step(model.raw_grads(g))
            total += loss * len(sel)
        model.refresh()
        return total / n

    # warm-up epoch: unregularized, unit-scaled; fixes sigma2_data and theta_thresh
    init_val = _mean_loss(model, vctx, vtgt, pm, scales, 1.0, 0.0, cfg.lambda_p)
    run_epoch(1.0, False, 1.0)
    res = prediction_errors(model, ctx, tgt) / model.y_std
    sigma2 = float(np.mean(res.var(axis=0)))
    if cfg.keep_prob < 1:
        sub = rng.choice(n, size=min(n, 2000), replace=False)
        tr = model.mc_traces_norm(model.normalize(ctx[sub]), max(cfg.n_mc_train, 2), rng)
        theta = float(np.median(tr))
    else:
        theta = 1.0
    theta = max(theta, 1e-12)
    model.theta_thresh = theta
    val_lam = cfg.alpha0
    best = _mean_loss(model, vctx, vtgt, pm, scales, sigma2, val_lam, cfg.lambda_p)
    best_state = ({k: v.copy() for k, v in model.raw.items()}, {k: v.copy() for k, v in model.sn_u.items()})
    history.append({"epoch": 0, "train": None, "val": best, "lr": opt.lr, "warmup": True})
    bad = 0
    for ep in range(1, cfg.epochs):
        tl = run_epoch(sigma2, True, theta)
        vl = _mean_loss(model, vctx, vtgt, pm, scales, sigma2, val_lam, cfg.lambda_p)
        if not np.isfinite(vl):
            raise FloatingPointError(f"non-finite validation loss at epoch {ep}")
        sched.step(vl)
        history.append({"epoch": ep, "train": tl, "val": vl, "lr": opt.lr})
        if verbose:
            log.info("dt epoch %d train %.5f val %.5f lr %.2e", ep, tl, vl, opt.lr)
        if vl < best:
            best = vl
            best_state = ({k: v.copy() for k, v in model.raw.items()}, {k: v.copy() for k, v in model.sn_u.items()})
            bad = 0
        else:
            bad += 1
            if bad >= cfg.patience:
                break
    for k, v in best_state[0].items():
        model.raw[k][...] = v
    model.sn_u = best_state[1]
    model.freeze()
    err = np.linalg.norm(prediction_errors(model, vctx, vtgt), axis=1)
    model.e_bar = float(np.quantile(err, 0.999))
    sub = vctx[np.linspace(0, len(vctx) - 1, min(len(vctx), 200)).astype(int)]
    model.L_f = model.estimate_lipschitz(sub).L_f
    model.sigma2_data = sigma2
    final_val = _mean_loss(model, vctx, vtgt, pm, scales, 1.0, 0.0, cfg.lambda_p)
    model.train_info = {"initial_val_mse": init_val, "final_val_mse": final_val, "best_val": best,
                        "sigma2_data": sigma2,
                        "theta_thresh": theta, "epochs_run": len(history)}
    return model, history
