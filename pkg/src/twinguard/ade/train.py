"""Labelled residual windows and MMD-regularized training of the discrimination engine."""

import copy
import logging
import warnings

import numpy as np

from ..nn.layers import softmax_xent
from ..nn.optim import Adam, CosineAnnealingLR
from .mmd import median_bandwidth, mmd2, mmd2_unbiased_grad
from .model import AdeConfig, AdeModel

log = logging.getLogger(__name__)


def windows_from_stream(R, labels, W, stride=1, min_attack_rows=5, start=None):
    """Windows of W residual rows ending at each eligible step, labelled by their end step.

    Attack-labelled windows with fewer than `min_attack_rows` attacked rows are skipped
    as ambiguous onsets.
    """
    R = np.asarray(R)
    labels = np.asarray(labels)
    first = W - 1 if start is None else max(W - 1, start)
    X, y, ends = [], [], []
    for t in range(first, len(R), stride):
        lab = int(labels[t])
        if lab != 0 and np.count_nonzero(labels[t + 1 - W:t + 1]) < min_attack_rows:
            continue
        X.append(R[t + 1 - W:t + 1])
        y.append(lab)
        ends.append(t)
    if not X:
        return np.zeros((0, W, R.shape[1])), np.zeros(0, dtype=int), np.zeros(0, dtype=int)
    return np.stack(X), np.array(y, dtype=int), np.array(ends)


def balance_classes(X, y, rng, cap=None):
    """Subsample every class to the size of the smallest non-empty class (or cap)."""
    counts = [np.count_nonzero(y == c) for c in range(3)]
    present = [c for c in counts if c > 0]
    k = min(present) if cap is None else min(min(present), cap)
    keep = []
    for c in range(3):
        idx = np.flatnonzero(y == c)
        if len(idx):
            keep.append(rng.choice(idx, size=min(k, len(idx)), replace=False))
    keep = np.sort(np.concatenate(keep))
    return X[keep], y[keep]


def ade_batch_loss(model, X, y, beta, mmd_sign, need_grads=True, head_only=False):
    """Cross-entropy plus mmd_sign * beta * MMD_u^2(Z_AS, Z_AM) on one batch."""
    z, cache = model.encode(X, return_cache=True)
    logits = model.logits(z)
    _, ce, g_logits = softmax_xent(logits, y)
    loss = ce
    gz = g_logits @ model.W_c.T
    ia, im = np.flatnonzero(y == 1), np.flatnonzero(y == 2)
    mmd_val = 0.0
    if beta > 0 and len(ia) >= 2 and len(im) >= 2:
        bw = median_bandwidth(z[np.concatenate([ia, im])])
        mmd_val, ga, gm = mmd2_unbiased_grad(z[ia], z[im], bw)
        loss += mmd_sign * beta * mmd_val
        gz[ia] += mmd_sign * beta * ga
        gz[im] += mmd_sign * beta * gm
    if not need_grads:
        return loss, ce, mmd_val, None
    grads = {"cls.W": z.T @ g_logits, "cls.b": g_logits.sum(axis=0)}
    if not head_only:
        g_enc, _ = model.encode_backward(gz, cache)
        grads.update(g_enc)
    return loss, ce, mmd_val, grads


def evaluate_ce(model, X, y, bs=512):
    tot = 0.0
    for i in range(0, len(X), bs):
        logits = model.logits(model.encode(X[i:i + bs]))
        _, ce, _ = softmax_xent(logits, y[i:i + bs])
        tot += ce * len(y[i:i + bs])
    return tot / max(len(X), 1)


def train_ade(train, val=None, cfg=None, freeze=None, init=None, stats=None, verbose=False):
    """Train (or fine-tune) the encoder and head.

    freeze="attack-layers" keeps the encoder fixed and updates only the classifier head.
    Returns (model, history).
    """
    cfg = AdeConfig() if cfg is None else cfg
    X, y = train
    rng = np.random.default_rng(cfg.seed)
    if np.count_nonzero(y == 1) == 0 or np.count_nonzero(y == 2) == 0:
        warnings.warn("an attack class is absent from the training set; MMD term disabled")
    if init is not None:
        model = copy.deepcopy(init)
        model.cfg = cfg
    else:
        model = AdeModel(X.shape[2], cfg, rng=np.random.default_rng(rng.integers(2 ** 63)), stats=stats)
    head_only = freeze == "attack-layers"
    params = model.params()
    names = model.head_names() if head_only else list(params)
    opt = Adam(params, lr=cfg.lr, weight_decay=cfg.weight_decay)
    sched = CosineAnnealingLR(opt, cfg.epochs)
    best, best_params, bad = np.inf, None, 0
    history = []
    n = len(X)
    for ep in range(cfg.epochs):
        order = rng.permutation(n)
        tot = 0.0
        for b in range(0, n, cfg.batch):
            sel = order[b:b + cfg.batch]
            loss, ce, mv, grads = ade_batch_loss(model, X[sel], y[sel], cfg.beta, cfg.mmd_sign,
                                                 head_only=head_only)
            if not np.isfinite(loss):
                raise FloatingPointError(f"non-finite ADE loss at epoch {ep}")
            opt.step(grads, names)
            tot += loss * len(sel)
        sched.step()
        vl = evaluate_ce(model, *val) if val is not None else tot / n
        history.append({"epoch": ep, "train": tot / n, "val": vl, "lr": opt.lr})
        if verbose:
            log.info("ade epoch %d train %.4f val %.4f", ep, tot / n, vl)
        if vl < best:
            best, bad = vl, 0
            best_params = {k: v.copy() for k, v in params.items()}
        else:
            bad += 1
            if bad >= cfg.patience:
                break
    for k, v in best_params.items():
        params[k][...] = v
    return model, history


def latent_mmd(model, X, y, estimator="unbiased"):
    """MMD^2 between the A_S and A_M embeddings at the pooled median bandwidth."""
    z = model.encode(X)
    za, zm = z[y == 1], z[y == 2]
    return mmd2(za, zm, median_bandwidth(np.vstack([za, zm])), estimator)
