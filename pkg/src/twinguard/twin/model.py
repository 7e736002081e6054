"""Temporal-convolution twin: forward, backward, MC-dropout uncertainty, Jacobians."""

from dataclasses import asdict, dataclass, field

import numpy as np

from ..nn import serialize
from ..nn.layers import (affine, affine_backward, dilated_causal_conv, dilated_causal_conv_backward,
                         dropout_mask, spectral_normalize, spectral_normalize_backward, xavier_uniform)


@dataclass
class DtConfig:
    tau: int = 10
    n_blocks: int = 4
    dilations: tuple = (1, 2, 4, 8)
    kernel: int = 3
    hidden: int = 128
    keep_prob: float = 0.9
    n_mc: int = 50
    alpha0: float = 0.05
    lambda_p: float = 0.02
    lr: float = 1e-3
    batch: int = 64
    epochs: int = 200
    patience: int = 20
    weight_decay: float = 1e-5
    plateau_patience: int = 5
    plateau_factor: float = 0.5
    n_mc_train: int = 4        # dropout passes per sample for the training-time trace
    sn_iterations: int = 1     # power iterations per step (vector persists)
    seed: int = 0

    def __post_init__(self):
        if self.tau < 2:
            raise ValueError("tau must be >= 2")
        if len(self.dilations) != self.n_blocks:
            raise ValueError("need one dilation per block")
        if self.alpha0 < 0 or self.lambda_p < 0:
            raise ValueError("physics weights must be >= 0")


@dataclass
class DtPrediction:
    mean: np.ndarray
    cov: np.ndarray
    samples: np.ndarray


@dataclass
class LipschitzEstimate:
    L_f: float
    norms: np.ndarray
    quantile: float = 1.0


def sample_covariance(samples):
    """Unbiased covariance of row samples, symmetrized."""
    S = np.asarray(samples, dtype=np.float64)
    # shifting by the first sample keeps identical samples at exactly zero
    X = S - S[0]
    d = X - X.mean(axis=0)
    C = d.T @ d / (S.shape[0] - 1)
    return 0.5 * (C + C.T)


def _power_norm(J, iterations=20, rng=None):
    """Largest singular value of J by power iteration on J^T J."""
    rng = np.random.default_rng(0) if rng is None else rng
    v = rng.standard_normal(J.shape[1])
    v /= np.linalg.norm(v)
    s = 0.0
    for _ in range(iterations):
        w = J.T @ (J @ v)
        nw = np.linalg.norm(w)
        if nw == 0:
            return 0.0
        v = w / nw
        s = np.linalg.norm(J @ v)
    return float(s)


class TwinBase:
    """Shared prediction API. Subclasses implement _forward_norm and _input_grad_norm."""

    d_y: int
    d_u: int
    tau: int

    # normalization of context channels [y, u] and of the target y
    x_mean: np.ndarray
    x_std: np.ndarray
    y_mean: np.ndarray
    y_std: np.ndarray
    e_bar: float = 0.0
    L_f: float = 0.0
    theta_thresh: float = 1.0

    @property
    def d_x(self):
        return self.d_y + self.d_u

    def _check_context(self, ctx):
        ctx = np.asarray(ctx, dtype=np.float64)
        if ctx.ndim == 2:
            ctx = ctx[None]
        if ctx.shape[1] < self.tau:
            raise ValueError(f"context has {ctx.shape[1]} frames, model needs tau={self.tau}")
        if ctx.shape[2] != self.d_x:
            raise ValueError(f"context has {ctx.shape[2]} channels, model expects {self.d_x}")
        return ctx[:, -self.tau:, :]

    def normalize(self, ctx):
        return (ctx - self.x_mean) / self.x_std

    def predict_batch(self, ctx):
        ctx = self._check_context(ctx)
        out = self._forward_norm(self.normalize(ctx))
        return self.y_mean + self.y_std * out

    def predict(self, ctx):
        """Deterministic one-step prediction in native units."""
        return self.predict_batch(ctx)[0]

    def jacobians_full(self, ctx):
        """d y_hat / d context in native units, shape (B, d_y, tau, d_x)."""
        ctx = self._check_context(ctx)
        Jn = self._input_jacobian_norm(self.normalize(ctx))
        return Jn * self.y_std[None, :, None, None] / self.x_std[None, None, None, :]

    def jacobians_batch(self, ctx):
        """A = d y_hat / d y_last, B = d y_hat / d u_last for each context."""
        J = self.jacobians_full(ctx)[:, :, -1, :]
        return J[:, :, :self.d_y], J[:, :, self.d_y:]

    def jacobians(self, ctx):
        A, B = self.jacobians_batch(ctx)
        return A[0], B[0]

    def estimate_lipschitz(self, contexts, iterations=20):
        """Max over contexts of the spectral norm of the normalized-coordinate input-output Jacobian."""
        ctx = self._check_context(contexts)
        Jn = self._input_jacobian_norm(self.normalize(ctx))
        rng = np.random.default_rng(0)
        norms = np.array([_power_norm(J.reshape(self.d_y, -1), iterations, rng) for J in Jn])
        return LipschitzEstimate(float(norms.max()), norms, 1.0)


class TcnTwin(TwinBase):
    """Stacked residual dilated-causal-conv blocks with a linear head on the last step.

    h0 = x W_in + b_in; h_l = h_{l-1} + drop(relu(conv_l(h_{l-1}) + b_l)); y = h_L[-1] W_fc + b_fc.
    Spectral normalization acts on W_in and every conv kernel.
    """

    def __init__(self, d_y, d_u, cfg=None, rng=None):
        self.cfg = DtConfig() if cfg is None else cfg
        self.d_y, self.d_u, self.tau = d_y, d_u, self.cfg.tau
        rng = np.random.default_rng(self.cfg.seed) if rng is None else rng
        H, K = self.cfg.hidden, self.cfg.kernel
        p = {"in.W": xavier_uniform((self.d_x, H), self.d_x, H, rng), "in.b": np.zeros(H)}
        for l in range(self.cfg.n_blocks):
            p[f"b{l}.W"] = xavier_uniform((K, H, H), K * H, K * H, rng)
            p[f"b{l}.b"] = np.zeros(H)
        p["fc.W"] = xavier_uniform((H, d_y), H, d_y, rng)
        p["fc.b"] = np.zeros(d_y)
        self.raw = p
        self.sn_names = ["in.W"] + [f"b{l}.W" for l in range(self.cfg.n_blocks)]
        self.sn_u = {k: rng.standard_normal(p[k].reshape(-1, p[k].shape[-1]).shape[0]) for k in self.sn_names}
        self.sn_cache = {}
        self.eff = {}
        self.x_mean = np.zeros(self.d_x)
        self.x_std = np.ones(self.d_x)
        self.y_mean = np.zeros(d_y)
        self.y_std = np.ones(d_y)
        self.refresh(20)

    # -- parameters ------------------------------------------------------
    def refresh(self, iterations=None):
        """Recompute effective (spectrally normalized) weights from the raw ones."""
        it = self.cfg.sn_iterations if iterations is None else iterations
        eff = dict(self.raw)
        for k in self.sn_names:
            Wn, sigma, u, v = spectral_normalize(self.raw[k], it, u=self.sn_u[k])
            self.sn_u[k] = u
            self.sn_cache[k] = (sigma, u, v)
            eff[k] = Wn
        self.eff = eff

    def raw_grads(self, eff_grads):
        g = dict(eff_grads)
        for k in self.sn_names:
            sigma, u, v = self.sn_cache[k]
            if sigma <= 1e-12:
                continue
            g[k] = spectral_normalize_backward(eff_grads[k], self.raw[k], sigma, u, v)
        return g

    # -- forward/backward in normalized coordinates --------------------------
    def forward(self, xn, masks=None):
        p = self.eff
        h = affine(xn, p["in.W"], p["in.b"])
        cache = [h]
        pre = []
        for l, d in enumerate(self.cfg.dilations):
            a = dilated_causal_conv(h, p[f"b{l}.W"], d, p[f"b{l}.b"])
            pre.append(a)
            r = np.maximum(a, 0.0)
            if masks is not None:
                r = r * masks[l]
            h = h + r
            cache.append(h)
        out = affine(h[:, -1, :], p["fc.W"], p["fc.b"])
        return out, (xn, cache, pre, masks)

    def backward(self, g_out, fcache, need_input=False, need_params=True):
        p = self.eff
        xn, cache, pre, masks = fcache
        grads = {}
        hL = cache[-1]
        if need_params:
            gh_last, grads["fc.W"], grads["fc.b"] = affine_backward(g_out, hL[:, -1, :], p["fc.W"])
        else:
            gh_last = g_out @ p["fc.W"].T
        gh = np.zeros_like(hL)
        gh[:, -1, :] = gh_last
        for l in reversed(range(self.cfg.n_blocks)):
            gr = gh * masks[l] if masks is not None else gh
            ga = gr * (pre[l] > 0)
            gx, gk, gbias = dilated_causal_conv_backward(
                ga, cache[l], p[f"b{l}.W"], self.cfg.dilations[l], need_kernel=need_params)
            if need_params:
                grads[f"b{l}.W"], grads[f"b{l}.b"] = gk, gbias
            gh = gh + gx
        if need_params:
            gxn, grads["in.W"], grads["in.b"] = affine_backward(gh, xn, p["in.W"])
        else:
            gxn = gh @ p["in.W"].T
        return grads, (gxn if need_input else None)

    # -- last-step inference ----------------------------------------------
    # The head reads only the final time step, so block l needs its output at the
    # positions reachable backwards from T-1 through the blocks above it.
    def _tail_plan(self, T):
        key = (T, self.cfg.kernel, tuple(self.cfg.dilations))
        plan = getattr(self, "_tail_cache", None)
        if plan is not None and plan[0] == key:
            return plan[1]
        K = self.cfg.kernel
        need = [None] * (self.cfg.n_blocks + 1)
        need[-1] = {T - 1}
        for l in reversed(range(self.cfg.n_blocks)):
            d = self.cfg.dilations[l]
            below = set(need[l + 1])
            for t in need[l + 1]:
                below.update(t - k * d for k in range(1, K) if t - k * d >= 0)
            need[l] = below
        steps = []
        for l in range(self.cfg.n_blocks):
            pos = np.array(sorted(need[l + 1]))
            d = self.cfg.dilations[l]
            # tap sources per position, oldest first; index T points at a zero pad row
            src = pos[:, None] - (K - 1 - np.arange(K))[None, :] * d
            src = np.where(src >= 0, src, T)
            steps.append((pos, src.ravel()))
        self._tail_cache = (key, steps)
        return steps

    def _tail_forward(self, xn):
        """Output of forward(xn) computed only where the last step depends on it."""
        p = self.eff
        B, T, _ = xn.shape
        K, H = self.cfg.kernel, self.cfg.hidden
        h = np.zeros((B, T + 1, H))
        h[:, :T] = xn @ p["in.W"] + p["in.b"]
        acts = []
        for l, (pos, src) in enumerate(self._tail_plan(T)):
            col = h[:, src, :].reshape(B * len(pos), K * H)
            a = (col @ p[f"b{l}.W"].reshape(K * H, H) + p[f"b{l}.b"]).reshape(B, len(pos), H)
            acts.append(a)
            h[:, pos, :] += np.maximum(a, 0.0)
        return h[:, T - 1, :] @ p["fc.W"] + p["fc.b"], acts

    def _forward_norm(self, xn):
        return self._tail_forward(xn)[0]

    def _input_jacobian_norm(self, xn):
        """d out / d xn for every output channel, shape (B, d_y, T, d_x)."""
        p = self.eff
        B, T, _ = xn.shape
        d = self.d_y
        K, H = self.cfg.kernel, self.cfg.hidden
        _, acts = self._tail_forward(xn)
        plan = self._tail_plan(T)
        gh = np.zeros((B, d, T + 1, H))
        gh[:, :, T - 1, :] = p["fc.W"].T[None]
        for l in reversed(range(self.cfg.n_blocks)):
            pos, src = plan[l]
            ga = gh[:, :, pos, :] * (acts[l] > 0)[:, None]
            gcol = (ga.reshape(-1, H) @ p[f"b{l}.W"].reshape(K * H, H).T).reshape(B, d, len(pos), K, H)
            taps = src.reshape(len(pos), K)
            for k in range(K):
                # sources are distinct within a tap except the pad row, which is discarded
                gh[:, :, taps[:, k], :] += gcol[:, :, :, k, :]
        gh = gh[:, :, :T]
        return gh @ p["in.W"].T

    def _input_grad_norm(self, xn, g_out):
        _, fc = self.forward(xn)
        return self.backward(g_out, fc, need_input=True)[1]

    def sample_masks(self, n, rng):
        H, T = self.cfg.hidden, self.tau
        return [dropout_mask((n, T, H), self.cfg.keep_prob, rng) for _ in range(self.cfg.n_blocks)]

    def predict_uncertain(self, ctx, n_mc=None, seed=0):
        """MC-dropout mean and unbiased covariance of the one-step prediction."""
        n_mc = self.cfg.n_mc if n_mc is None else n_mc
        if n_mc < 2:
            raise ValueError("n_mc must be >= 2")
        ctx = self._check_context(ctx)[:1]
        xn = np.repeat(self.normalize(ctx), n_mc, axis=0)
        rng = np.random.default_rng(seed)
        out, _ = self.forward(xn, self.sample_masks(n_mc, rng))
        S = self.y_mean + self.y_std * out
        return DtPrediction(S.mean(axis=0), sample_covariance(S), S)

    def mc_traces_norm(self, xn, n_mc, rng):
        """Per-sample trace of the MC-dropout covariance in normalized output units."""
        B = xn.shape[0]
        out, _ = self.forward(np.repeat(xn, n_mc, axis=0), self.sample_masks(B * n_mc, rng))
        out = out.reshape(B, n_mc, -1)
        return out.var(axis=1, ddof=1).sum(axis=1)

    # -- persistence -----------------------------------------------------
    def metadata(self):
        return {
            "kind": "tcn",
            "d_y": self.d_y, "d_u": self.d_u,
            "config": {k: (list(v) if isinstance(v, tuple) else v) for k, v in asdict(self.cfg).items()},
            "x_mean": self.x_mean.tolist(), "x_std": self.x_std.tolist(),
            "y_mean": self.y_mean.tolist(), "y_std": self.y_std.tolist(),
            "tau": self.tau, "theta_thresh": self.theta_thresh, "e_bar": self.e_bar, "L_f": self.L_f,
        }

    def save(self, path):
        serialize.save(path, self.eff, self.metadata())

    @classmethod
    def load(cls, path):
        tensors, meta = serialize.load(path)
        cfgd = dict(meta["config"])
        cfgd["dilations"] = tuple(cfgd["dilations"])
        m = cls(meta["d_y"], meta["d_u"], DtConfig(**cfgd))
        m.raw = dict(tensors)
        m.eff = dict(tensors)
        m.sn_names = []
        for k in ("x_mean", "x_std", "y_mean", "y_std"):
            setattr(m, k, np.array(meta[k]))
        m.theta_thresh, m.e_bar, m.L_f = meta["theta_thresh"], meta["e_bar"], meta["L_f"]
        return m

    def freeze(self):
        """Fix the effective weights with a well-converged normalization and drop SN."""
        self.refresh(20)
        self.raw = dict(self.eff)
        self.sn_names = []


class LinearTwin(TwinBase):
    """y_hat = A y_last + B u_last + c. Shares the twin API for benchmarks and tests."""

    def __init__(self, A, B, c=None, tau=2, e_bar=0.0, sigma_mc=None):
        self.A = np.asarray(A, dtype=np.float64)
        self.B = np.asarray(B, dtype=np.float64)
        self.d_y, self.d_u = self.B.shape
        self.c = np.zeros(self.d_y) if c is None else np.asarray(c, dtype=np.float64)
        self.tau = tau
        self.x_mean = np.zeros(self.d_x)
        self.x_std = np.ones(self.d_x)
        self.y_mean = np.zeros(self.d_y)
        self.y_std = np.ones(self.d_y)
        self.e_bar = e_bar
        self.sigma_mc = np.zeros((self.d_y, self.d_y)) if sigma_mc is None else np.asarray(sigma_mc)

    def _forward_norm(self, xn):
        last = xn[:, -1, :]
        return last[:, :self.d_y] @ self.A.T + last[:, self.d_y:] @ self.B.T + self.c

    def _input_jacobian_norm(self, xn):
        J = np.zeros((xn.shape[0], self.d_y) + xn.shape[1:])
        J[:, :, -1, :self.d_y] = self.A
        J[:, :, -1, self.d_y:] = self.B
        return J

    def predict_uncertain(self, ctx, n_mc=50, seed=0):
        m = self.predict(ctx)
        return DtPrediction(m, self.sigma_mc.copy(), np.tile(m, (2, 1)))
