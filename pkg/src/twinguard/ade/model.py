"""Bidirectional GRU encoder over residual windows with a three-class softmax head."""

from collections import deque
from dataclasses import asdict, dataclass

import numpy as np

from ..nn import serialize
from ..nn.layers import GruParams, gru_scan, gru_step, gru_step_backward, softmax, xavier_uniform


@dataclass
class AdeConfig:
    window: int = 50
    hidden: int = 64
    beta: float = 0.1
    gamma: float = 0.8
    n_perm: int = 200
    alpha: float = 0.05
    n_ref: int = 400
    test_size: int = 10
    lr: float = 5e-4
    batch: int = 32
    epochs: int = 150
    patience: int = 15
    weight_decay: float = 1e-4
    mmd_sign: float = -1.0     # -1 rewards separation of the two attack classes; +1 is the literal additive form
    compress: bool = True      # signed log1p of the standardized residuals
    seed: int = 0

    def __post_init__(self):
        if self.window < 2:
            raise ValueError("window must be >= 2")
        if not 0 < self.gamma < 1:
            raise ValueError("gamma must lie in (0, 1)")


@dataclass
class ResidualStats:
    """Residual covariance from normal training data; the diagonal standardizes encoder input."""

    cov: np.ndarray
    mean: np.ndarray

    @classmethod
    def fit(cls, R):
        R = np.asarray(R, dtype=np.float64)
        C = np.cov(R, rowvar=False)
        return cls(0.5 * (C + C.T), R.mean(axis=0))

    @property
    def std(self):
        return np.sqrt(np.maximum(np.diag(self.cov), 1e-24))


@dataclass
class ClassProbabilities:
    p: np.ndarray
    z: np.ndarray
    cls: int
    validated: int = 0
    statistic: float = float("nan")
    confidence: float = 0.0


class AdeModel:
    """z = [h_fwd(W), h_bwd(1)]; logits = z W_c + b_c."""

    def __init__(self, d_in, cfg=None, rng=None, stats=None):
        self.cfg = AdeConfig() if cfg is None else cfg
        self.d_in = d_in
        rng = np.random.default_rng(self.cfg.seed) if rng is None else rng
        H = self.cfg.hidden
        self.fwd = GruParams.init(d_in, H, rng)
        self.bwd = GruParams.init(d_in, H, rng)
        self.W_c = xavier_uniform((2 * H, 3), 2 * H, 3, rng)
        self.b_c = np.zeros(3)
        self.res_std = np.ones(d_in) if stats is None else stats.std

    # -- parameter dict view (shares arrays) --------------------------------
    def params(self):
        d = {}
        d.update(self.fwd.as_dict("fwd."))
        d.update(self.bwd.as_dict("bwd."))
        d["cls.W"] = self.W_c
        d["cls.b"] = self.b_c
        return d

    def head_names(self):
        return ["cls.W", "cls.b"]

    def standardize(self, windows):
        """Residuals in noise-std units, log-compressed so large injections do not saturate the gates."""
        x = np.asarray(windows, dtype=np.float64) / self.res_std
        if self.cfg.compress:
            x = np.sign(x) * np.log1p(np.abs(x))
        return x

    # -- forward/backward ------------------------------------------------
    def encode(self, windows, return_cache=False):
        """windows (B, W, d_in) or (W, d_in) of raw residuals -> z (B, 2H)."""
        x = self.standardize(windows)
        squeeze = x.ndim == 2
        if squeeze:
            x = x[None]
        if not return_cache:
            z = np.concatenate([gru_scan(x, self.fwd), gru_scan(x, self.bwd, reverse=True)], axis=1)
            return z[0] if squeeze else z
        B, W, _ = x.shape
        H = self.cfg.hidden
        hf = np.zeros((B, H))
        hb = np.zeros((B, H))
        cf, cb = [], []
        for t in range(W):
            hf, c = gru_step(hf, x[:, t], self.fwd, return_cache=True)
            cf.append(c)
        for t in reversed(range(W)):
            hb, c = gru_step(hb, x[:, t], self.bwd, return_cache=True)
            cb.append(c)
        z = np.concatenate([hf, hb], axis=1)
        if squeeze and not return_cache:
            return z[0]
        return (z, (x, cf, cb)) if return_cache else z

    def logits(self, z):
        return z @ self.W_c + self.b_c

    def probs(self, windows):
        return softmax(self.logits(self.encode(windows)))

    def encode_backward(self, gz, cache, need_input=False):
        x, cf, cb = cache
        H = self.cfg.hidden
        W = x.shape[1]
        gf = {k: np.zeros_like(v) for k, v in self.fwd.as_dict().items()}
        gb = {k: np.zeros_like(v) for k, v in self.bwd.as_dict().items()}
        gx = np.zeros_like(x) if need_input else None
        gh = gz[:, :H]
        for t in reversed(range(W)):
            gh, dx, g = gru_step_backward(gh, cf[t], self.fwd)
            for k, v in g.as_dict().items():
                gf[k] += v
            if need_input:
                gx[:, t] += dx
        gh = gz[:, H:]
        for i in reversed(range(W)):
            t = W - 1 - i
            gh, dx, g = gru_step_backward(gh, cb[i], self.bwd)
            for k, v in g.as_dict().items():
                gb[k] += v
            if need_input:
                gx[:, t] += dx
        grads = {"fwd." + k: v for k, v in gf.items()}
        grads.update({"bwd." + k: v for k, v in gb.items()})
        if need_input:
            if self.cfg.compress:
                gx = gx * np.exp(-np.abs(x))
            gx = gx / self.res_std
        return grads, gx

    def input_gradient(self, window, target):
        """d CE(target) / d window in raw residual units (for evasion attacks)."""
        z, cache = self.encode(np.asarray(window)[None], return_cache=True)
        p = softmax(self.logits(z))
        g = p.copy()
        g[0, target] -= 1.0
        gz = g @ self.W_c.T
        _, gx = self.encode_backward(gz, cache, need_input=True)
        return gx[0]

    # -- persistence -----------------------------------------------------
    def save(self, path):
        meta = {"kind": "ade", "d_in": self.d_in, "config": asdict(self.cfg), "res_std": self.res_std.tolist()}
        serialize.save(path, self.params(), meta)

    @classmethod
    def load(cls, path):
        tensors, meta = serialize.load(path)
        m = cls(meta["d_in"], AdeConfig(**meta["config"]))
        m.res_std = np.array(meta["res_std"])
        for name, arr in tensors.items():
            m.params()[name][...] = arr
        return m


def classify(z, model):
    """Softmax over the three logits; argmax ties resolve to the lowest index."""
    p = softmax(model.logits(np.asarray(z)))
    return ClassProbabilities(p, np.asarray(z), int(np.argmax(p)), confidence=float(p.max()))


def classify_validated(probs, reject):
    """Confirm a non-normal argmax only when the two-sample test rejects; otherwise
    suppress it to N with half the confidence. A normal argmax passes through."""
    c = int(np.argmax(probs))
    conf = float(probs[c])
    if c == 0:
        return 0, conf
    if reject:
        return c, conf
    return 0, 0.5 * conf


def stealth_risk(p, omega=2.0, eps0=1e-6):
    """(p_AS + omega p_AM) / (p_N + eps0)."""
    return float((p[1] + omega * p[2]) / (p[0] + eps0))


def build_window(stream, t, W):
    """Window of the W residuals ending at index t (inclusive), or None when not ready."""
    if t + 1 < W:
        return None
    return np.asarray(stream[t + 1 - W:t + 1])


class AdeEngine:
    """Online detector: sliding residual window, encoder, softmax head and MMD gate."""

    def __init__(self, model, reference, tau_mmd, cfg=None):
        self.model = model
        self.ref = reference
        self.tau_mmd = tau_mmd
        self.cfg = model.cfg if cfg is None else cfg
        self.buf = deque(maxlen=self.cfg.window)
        self.recent = deque(maxlen=self.cfg.test_size)

    def reset(self):
        self.buf.clear()
        self.recent.clear()

    def step(self, residual):
        self.buf.append(np.asarray(residual, dtype=np.float64))
        if len(self.buf) < self.cfg.window:
            return ClassProbabilities(np.array([1.0, 0.0, 0.0]), None, 0, 0, float("nan"), 0.0), False
        z = self.model.encode(np.array(self.buf))
        self.recent.append(z)
        p = softmax(self.model.logits(z))
        raw = int(np.argmax(p))
        stat = float("nan")
        reject = False
        if raw != 0 and len(self.recent) >= 2:
            stat = self.ref.statistic(np.array(self.recent))
            reject = stat > self.tau_mmd
        cls, conf = classify_validated(p, reject)
        return ClassProbabilities(p, z, raw, cls, stat, conf), True

    def run_batch(self, R, chunk=512):
        """Classify a whole residual stream from a cleared state in one pass.

        Matches step-by-step use: rows before the window fills are N with zero confidence.
        Returns a dict of per-row arrays (probs, raw, cls, confidence, statistic) and the
        embeddings of every full window; the engine is left holding the stream's tail.
        """
        R = np.asarray(R, dtype=np.float64)
        n, W, m = len(R), self.cfg.window, self.cfg.test_size
        probs = np.tile([1.0, 0.0, 0.0], (n, 1))
        raw = np.zeros(n, dtype=int)
        cls = np.zeros(n, dtype=int)
        conf = np.zeros(n)
        stat = np.full(n, np.nan)
        Z = np.zeros((0, 2 * self.cfg.hidden))
        if n >= W:
            ends = np.arange(W - 1, n)
            win = np.lib.stride_tricks.sliding_window_view(R, W, axis=0).transpose(0, 2, 1)
            Z = np.concatenate([self.model.encode(win[i:i + chunk]) for i in range(0, len(win), chunk)])
            P = softmax(self.model.logits(Z))
            probs[ends] = P
            raw[ends] = np.argmax(P, axis=1)
            for j, t in enumerate(ends):
                reject = False
                if raw[t] != 0 and j >= 1:
                    stat[t] = self.ref.statistic(Z[max(0, j + 1 - m):j + 1])
                    reject = stat[t] > self.tau_mmd
                cls[t], conf[t] = classify_validated(P[j], reject)
        self.restore(R, Z)
        return {"probs": probs, "raw": raw, "cls": cls, "confidence": conf, "statistic": stat}, Z

    def restore(self, R_hist, Z_hist):
        """Reset the buffers to the state after the given residual and embedding histories."""
        self.reset()
        for r in np.asarray(R_hist)[-self.cfg.window:]:
            self.buf.append(np.asarray(r, dtype=np.float64))
        for z in np.asarray(Z_hist)[-self.cfg.test_size:]:
            self.recent.append(np.asarray(z))
