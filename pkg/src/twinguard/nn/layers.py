"""Differentiable building blocks with hand-written backward passes.

All arrays are float64. Functions accept a leading batch axis where it is
natural; the single-sample shapes are the batch-free special case.
"""

from dataclasses import dataclass, field

import numpy as np
from scipy.special import expit


SIGMA_FLOOR = 1e-12


def _check(cond, msg):
    if not cond:
        raise ValueError(msg)


# ---------------------------------------------------------------------------
# parameter container


@dataclass
class LayerParams:
    """Named weight/bias pair with gradient buffers of matching shape."""

    name: str
    weights: np.ndarray
    bias: np.ndarray | None = None
    grad_weights: np.ndarray = field(init=False)
    grad_bias: np.ndarray | None = field(init=False)

    def __post_init__(self):
        self.weights = np.asarray(self.weights, dtype=np.float64)
        if self.bias is not None:
            self.bias = np.asarray(self.bias, dtype=np.float64)
        self.zero_grad()

    def zero_grad(self):
        self.grad_weights = np.zeros_like(self.weights)
        self.grad_bias = None if self.bias is None else np.zeros_like(self.bias)


def xavier_uniform(shape, fan_in, fan_out, rng):
    limit = np.sqrt(6.0 / (fan_in + fan_out))
    return rng.uniform(-limit, limit, size=shape)


# ---------------------------------------------------------------------------
# dilated causal convolution


def _as_batched(x, ndim):
    x = np.asarray(x, dtype=np.float64)
    if x.ndim == ndim - 1:
        return x[None], True
    return x, False


def dilated_causal_conv(x, kernel, dilation, bias=None):
    """Causal 1-D convolution.

    x: (T, C_in) or (B, T, C_in); kernel: (K, C_in, C_out).
    out[t] = sum_k x[t - (K-1-k)*dilation] @ kernel[k], with zeros before t=0.
    """
    kernel = np.asarray(kernel, dtype=np.float64)
    xb, squeeze = _as_batched(x, 3)
    _check(xb.ndim == 3, f"input must be (T, C_in) or (B, T, C_in), got shape {np.shape(x)}")
    _check(kernel.ndim == 3, f"kernel must be (K, C_in, C_out), got shape {kernel.shape}")
    _check(int(dilation) == dilation and dilation >= 1, f"dilation must be a positive int, got {dilation}")
    K, c_in, c_out = kernel.shape
    _check(xb.shape[2] == c_in,
           f"channel axis mismatch: input has C_in={xb.shape[2]}, kernel expects C_in={c_in}")
    B, T, _ = xb.shape
    col = _im2col(xb, K, dilation)
    out = (col.reshape(B * T, K * c_in) @ kernel.reshape(K * c_in, c_out)).reshape(B, T, c_out)
    if bias is not None:
        out += bias
    return out[0] if squeeze else out


def _im2col(xb, K, dilation):
    """(B, T, C) -> (B, T, K*C) holding the K causal taps of every step, oldest first."""
    B, T, C = xb.shape
    pad = (K - 1) * dilation
    col = np.zeros((B, T, K, C))
    for k in range(K):
        shift = pad - k * dilation
        if shift < T:
            col[:, shift:, k, :] = xb[:, :T - shift, :]
    return col.reshape(B, T, K * C)


def dilated_causal_conv_backward(grad_out, x, kernel, dilation, need_kernel=True):
    """Returns (grad_x, grad_kernel, grad_bias) for dilated_causal_conv.

    need_kernel=False skips the parameter gradients (returned as None).
    """
    kernel = np.asarray(kernel, dtype=np.float64)
    xb, squeeze = _as_batched(x, 3)
    gb, _ = _as_batched(grad_out, 3)
    K, c_in, c_out = kernel.shape
    B, T, _ = xb.shape
    pad = (K - 1) * dilation
    g2 = gb.reshape(B * T, c_out)
    gcol = (g2 @ kernel.reshape(K * c_in, c_out).T).reshape(B, T, K, c_in)
    gx = np.zeros_like(xb)
    for k in range(K):
        shift = pad - k * dilation
        if shift < T:
            gx[:, :T - shift, :] += gcol[:, shift:, k, :]
    if need_kernel:
        col = _im2col(xb, K, dilation)
        gk = (col.reshape(B * T, K * c_in).T @ g2).reshape(K, c_in, c_out)
        gbias = g2.sum(axis=0)
    else:
        gk = gbias = None
    return (gx[0] if squeeze else gx), gk, gbias


# ---------------------------------------------------------------------------
# affine map


def affine(x, W, b=None):
    """x @ W + b over the last axis of x."""
    x = np.asarray(x, dtype=np.float64)
    W = np.asarray(W, dtype=np.float64)
    _check(W.ndim == 2, f"W must be 2-D, got shape {W.shape}")
    _check(x.shape[-1] == W.shape[0],
           f"input axis mismatch: x has d_in={x.shape[-1]}, W expects d_in={W.shape[0]}")
    out = x @ W
    if b is not None:
        b = np.asarray(b, dtype=np.float64)
        _check(b.shape == (W.shape[1],),
               f"bias axis mismatch: b has shape {b.shape}, expected ({W.shape[1]},)")
        out = out + b
    return out


def affine_backward(grad_out, x, W):
    """Returns (grad_x, grad_W, grad_b)."""
    x = np.asarray(x, dtype=np.float64)
    x2 = x.reshape(-1, x.shape[-1])
    g2 = grad_out.reshape(-1, grad_out.shape[-1])
    return grad_out @ W.T, x2.T @ g2, g2.sum(axis=0)


# ---------------------------------------------------------------------------
# GRU cell (gate order r, z, n in the stacked weights)


def sigmoid(a):
    return expit(a)


@dataclass
class GruParams:
    """Stacked GRU weights: W_x (d_in, 3d_h), W_h (d_h, 3d_h), b_x, b_h (3d_h,)."""

    W_x: np.ndarray
    W_h: np.ndarray
    b_x: np.ndarray
    b_h: np.ndarray

    @property
    def hidden(self):
        return self.W_h.shape[0]

    @classmethod
    def init(cls, d_in, d_h, rng):
        W_x = xavier_uniform((d_in, 3 * d_h), d_in, d_h, rng)
        W_h = xavier_uniform((d_h, 3 * d_h), d_h, d_h, rng)
        return cls(W_x, W_h, np.zeros(3 * d_h), np.zeros(3 * d_h))

    @classmethod
    def zeros(cls, d_in, d_h):
        return cls(np.zeros((d_in, 3 * d_h)), np.zeros((d_h, 3 * d_h)),
                   np.zeros(3 * d_h), np.zeros(3 * d_h))

    def as_dict(self, prefix=""):
        return {prefix + "W_x": self.W_x, prefix + "W_h": self.W_h,
                prefix + "b_x": self.b_x, prefix + "b_h": self.b_h}


def gru_step(h_prev, x, p: GruParams, return_cache=False):
    """One GRU update.

    r = sig(x Wxr + bxr + h Whr + bhr)
    z = sig(x Wxz + bxz + h Whz + bhz)
    n = tanh(x Wxn + bxn + r * (h Whn + bhn))
    h' = (1 - z) * n + z * h
    """
    h_prev = np.asarray(h_prev, dtype=np.float64)
    x = np.asarray(x, dtype=np.float64)
    d_h = p.hidden
    _check(h_prev.shape[-1] == d_h, f"hidden axis mismatch: h has {h_prev.shape[-1]}, params expect {d_h}")
    _check(x.shape[-1] == p.W_x.shape[0], f"input axis mismatch: x has {x.shape[-1]}, params expect {p.W_x.shape[0]}")
    gx = x @ p.W_x + p.b_x
    gh = h_prev @ p.W_h + p.b_h
    r = sigmoid(gx[..., :d_h] + gh[..., :d_h])
    z = sigmoid(gx[..., d_h:2 * d_h] + gh[..., d_h:2 * d_h])
    hn = gh[..., 2 * d_h:]
    n = np.tanh(gx[..., 2 * d_h:] + r * hn)
    h = (1.0 - z) * n + z * h_prev
    if not np.isfinite(h).all():
        # non-finite inputs propagate into h; name the first gate that broke
        for gate, val in (("reset", r), ("update", z), ("candidate", n), ("hidden", h)):
            if not np.isfinite(val).all():
                raise FloatingPointError(f"non-finite value in GRU {gate} gate")
    if return_cache:
        return h, (h_prev, x, r, z, n, hn)
    return h


def gru_scan(x_seq, p: GruParams, reverse=False):
    """Final hidden state of a GRU run over x_seq (B, T, d_in) from h = 0, no cache.

    Same arithmetic as repeated gru_step with the input projections batched up front.
    """
    B, T, _ = x_seq.shape
    d_h = p.hidden
    GX = x_seq @ p.W_x + p.b_x
    h = np.zeros((B, d_h))
    order = range(T - 1, -1, -1) if reverse else range(T)
    for t in order:
        gx = GX[:, t]
        gh = h @ p.W_h + p.b_h
        rz = expit(gx[:, :2 * d_h] + gh[:, :2 * d_h])
        r, z = rz[:, :d_h], rz[:, d_h:]
        n = np.tanh(gx[:, 2 * d_h:] + r * gh[:, 2 * d_h:])
        h = (1.0 - z) * n + z * h
    if not np.isfinite(h).all():
        raise FloatingPointError("non-finite value in GRU hidden state")
    return h


def gru_step_backward(grad_h, cache, p: GruParams):
    """Returns (grad_h_prev, grad_x, GruParams of gradients)."""
    h_prev, x, r, z, n, hn = cache
    dz = grad_h * (h_prev - n)
    dn = grad_h * (1.0 - z)
    dh_prev = grad_h * z
    da_n = dn * (1.0 - n * n)
    dr = da_n * hn
    da_r = dr * r * (1.0 - r)
    da_z = dz * z * (1.0 - z)
    dgx = np.concatenate([da_r, da_z, da_n], axis=-1)
    dgh = np.concatenate([da_r, da_z, da_n * r], axis=-1)
    x2 = x.reshape(-1, x.shape[-1])
    h2 = h_prev.reshape(-1, h_prev.shape[-1])
    gx2 = dgx.reshape(-1, dgx.shape[-1])
    gh2 = dgh.reshape(-1, dgh.shape[-1])
    grads = GruParams(x2.T @ gx2, h2.T @ gh2, gx2.sum(axis=0), gh2.sum(axis=0))
    dx = dgx @ p.W_x.T
    dh_prev = dh_prev + dgh @ p.W_h.T
    return dh_prev, dx, grads


# ---------------------------------------------------------------------------
# dropout


@dataclass
class DropoutMask:
    """Inverted-dropout mask with entries in {0, 1/keep_prob}."""

    seed: int
    keep_prob: float
    mask: np.ndarray

    @classmethod
    def sample(cls, shape, keep_prob, seed):
        if not keep_prob > 0:
            raise ValueError(f"keep_prob must be > 0, got {keep_prob}")
        if keep_prob > 1:
            raise ValueError(f"keep_prob must be <= 1, got {keep_prob}")
        rng = np.random.default_rng(seed)
        return cls(seed, keep_prob, dropout_mask(shape, keep_prob, rng))


def dropout_mask(shape, keep_prob, rng):
    if not keep_prob > 0:
        raise ValueError(f"keep_prob must be > 0, got {keep_prob}")
    if keep_prob >= 1.0:
        return np.ones(shape)
    keep = rng.random(shape) < keep_prob
    return keep / keep_prob


def mc_dropout_apply(x, mask):
    m = mask.mask if isinstance(mask, DropoutMask) else mask
    if isinstance(mask, DropoutMask) and not mask.keep_prob > 0:
        raise ValueError(f"keep_prob must be > 0, got {mask.keep_prob}")
    _check(np.shape(x) == np.shape(m), f"mask shape {np.shape(m)} does not match input shape {np.shape(x)}")
    return x * m


# ---------------------------------------------------------------------------
# softmax and cross-entropy


def softmax(logits):
    a = logits - logits.max(axis=-1, keepdims=True)
    e = np.exp(a)
    return e / e.sum(axis=-1, keepdims=True)


def softmax_xent(logits, target):
    """Stable softmax and cross-entropy.

    logits (n,) with int target, or (B, n) with int array target (mean loss).
    Returns (probs, loss, grad_logits).
    """
    logits = np.asarray(logits, dtype=np.float64)
    n = logits.shape[-1]
    _check(n >= 2, f"need at least 2 classes, got {n}")
    target = np.asarray(target)
    if np.any(target < 0) or np.any(target >= n):
        raise ValueError(f"target out of range [0, {n})")
    a = logits - logits.max(axis=-1, keepdims=True)
    lse = np.log(np.exp(a).sum(axis=-1, keepdims=True))
    logp = a - lse
    probs = np.exp(logp)
    onehot = np.zeros_like(logits)
    if logits.ndim == 1:
        onehot[int(target)] = 1.0
        return probs, float(-logp[int(target)]), probs - onehot
    B = logits.shape[0]
    onehot[np.arange(B), target] = 1.0
    loss = float(-logp[np.arange(B), target].mean())
    return probs, loss, (probs - onehot) / B


# ---------------------------------------------------------------------------
# spectral normalization


def spectral_normalize(W, iterations=20, u=None, rng=None):
    """Power-iteration spectral normalization.

    W is treated as a matrix (conv kernels are reshaped to (K*C_in, C_out)).
    Returns (W_norm, sigma, u, v); pass u back in on the next call to keep the
    power-iteration vector persistent.
    """
    W = np.asarray(W, dtype=np.float64)
    _check(iterations >= 1, "iterations must be >= 1")
    M = W.reshape(-1, W.shape[-1]) if W.ndim != 2 else W
    m, n = M.shape
    if u is None:
        rng = rng if rng is not None else np.random.default_rng(0)
        u = rng.standard_normal(m)
    u = u / max(np.linalg.norm(u), SIGMA_FLOOR)
    v = np.zeros(n)
    for _ in range(iterations):
        v = M.T @ u
        nv = np.linalg.norm(v)
        if nv < SIGMA_FLOOR:
            return W.copy(), SIGMA_FLOOR, u, v
        v /= nv
        u = M @ v
        nu = np.linalg.norm(u)
        if nu < SIGMA_FLOOR:
            return W.copy(), SIGMA_FLOOR, u, v
        u /= nu
    sigma = float(u @ M @ v)
    if sigma < SIGMA_FLOOR:
        return W.copy(), SIGMA_FLOOR, u, v
    return W / sigma, sigma, u, v


def spectral_normalize_backward(grad_norm, W, sigma, u, v):
    """Gradient through W -> W/sigma(W) with sigma = u' W v, u and v held fixed."""
    M = W.reshape(-1, W.shape[-1])
    G = grad_norm.reshape(M.shape)
    g = G / sigma - (np.sum(G * M) / sigma ** 2) * np.outer(u, v)
    return g.reshape(W.shape)


def relu(a):
    return np.maximum(a, 0.0)
