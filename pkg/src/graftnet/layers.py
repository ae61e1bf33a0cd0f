"""Differentiable layer ops: conv, batch norm, ReLU, pooling, dense, loss.

Conventions:
  * activations are NCHW, feature vectors are (N, D)
  * conv weights are (out_channels, in_channels, K, K), cross-correlation
    (no kernel flip), output spatial size floor((H + 2p - K) / s) + 1
  * every op validates shapes and rejects non-finite inputs at the boundary
"""

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from .tensor import Tensor, Parameter, as_tensor, make_op
from .validation import ensure_finite


def _unwrap(x, name):
    t = as_tensor(x, name)
    return t, t.data


# ---------------------------------------------------------------------------
# convolution


def conv2d(x, w, b, stride=1, padding=0):
    """2-D cross-correlation with bias.

    x: (N, C, H, W), w: (O, C, K, K), b: (O,). Differentiable w.r.t. all three.
    """
    xt, xd = _unwrap(x, "conv2d input")
    wt, wd = _unwrap(w, "conv2d weight")
    bt, bd = _unwrap(b, "conv2d bias")
    if xd.ndim != 4 or wd.ndim != 4:
        raise ValueError(f"conv2d: need 4-d input and weight, got {xd.shape} and {wd.shape}")
    n, c, h, wdt = xd.shape
    o, i, k, k2 = wd.shape
    if k != k2:
        raise ValueError(f"conv2d: kernel must be square, got {wd.shape}")
    if c != i:
        raise ValueError(f"conv2d: input has {c} channels (shape {xd.shape}) but weight expects {i} (shape {wd.shape})")
    if bd.shape != (o,):
        raise ValueError(f"conv2d: bias shape {bd.shape} does not match {o} output channels")
    if stride < 1 or padding < 0:
        raise ValueError(f"conv2d: invalid stride={stride} / padding={padding}")
    if h + 2 * padding < k or wdt + 2 * padding < k:
        raise ValueError(
            f"conv2d: kernel {k}x{k} does not fit padded input {h + 2 * padding}x{wdt + 2 * padding}"
        )

    xp = np.pad(xd, ((0, 0), (0, 0), (padding, padding), (padding, padding))) if padding else xd
    win = sliding_window_view(xp, (k, k), axis=(2, 3))[:, :, ::stride, ::stride]
    oh, ow = win.shape[2], win.shape[3]
    cols = win.transpose(0, 2, 3, 1, 4, 5).reshape(n * oh * ow, c * k * k)
    wmat = wd.reshape(o, c * k * k)
    out = (cols @ wmat.T + bd).reshape(n, oh, ow, o).transpose(0, 3, 1, 2)
    out = np.ascontiguousarray(out)

    def grad_fn(g):
        gm = g.transpose(0, 2, 3, 1).reshape(n * oh * ow, o)
        if wt.requires_grad:
            wt.accumulate_grad((gm.T @ cols).reshape(wd.shape))
        if bt.requires_grad:
            bt.accumulate_grad(gm.sum(axis=0))
        if xt.requires_grad:
            dcols = gm @ wmat
            dwin = dcols.reshape(n, oh, ow, c, k, k).transpose(0, 3, 1, 2, 4, 5)
            hp, wp = h + 2 * padding, wdt + 2 * padding
            dxp = np.zeros((n, c, hp, wp), dtype=xd.dtype)
            for ki in range(k):
                for kj in range(k):
                    dxp[:, :, ki:ki + stride * oh:stride, kj:kj + stride * ow:stride] += dwin[..., ki, kj]
            xt.accumulate_grad(dxp[:, :, padding:padding + h, padding:padding + wdt] if padding else dxp)

    return make_op(out, (xt, wt, bt), grad_fn)


# ---------------------------------------------------------------------------
# batch normalization


class BatchNormState:
    """Per-channel affine parameters plus running statistics.

    ``stats_frozen`` pins the layer to its running statistics even in train
    mode; used for frozen trunk prefixes so they act as fixed feature
    extractors.
    """

    def __init__(self, channels, name, epsilon=1e-5, momentum=0.1, dtype=np.float32):
        if not 0.0 < momentum < 1.0:
            raise ValueError(f"batch norm momentum must be in (0,1), got {momentum}")
        self.gamma = Parameter(np.ones(channels, dtype=dtype), name=f"{name}/gamma")
        self.beta = Parameter(np.zeros(channels, dtype=dtype), name=f"{name}/beta")
        self.running_mean = np.zeros(channels, dtype=dtype)
        self.running_var = np.ones(channels, dtype=dtype)
        self.epsilon = epsilon
        self.momentum = momentum
        self.stats_frozen = False
        self.name = name

    @property
    def channels(self):
        return self.gamma.data.shape[0]


def batch_norm(x, state, mode="train"):
    """Normalize per channel; ``train`` uses batch stats and updates the
    running ones by exponential moving average, ``infer`` uses running stats only.
    """
    if mode not in ("train", "infer"):
        raise ValueError(f"batch_norm: mode must be 'train' or 'infer', got {mode!r}")
    xt, xd = _unwrap(x, "batch_norm input")
    if xd.ndim != 4:
        raise ValueError(f"batch_norm: expected NCHW input, got shape {xd.shape}")
    c = xd.shape[1]
    if c != state.channels:
        raise ValueError(f"batch_norm: input has {c} channels, state has {state.channels}")
    gamma, beta = state.gamma, state.beta
    g = gamma.data.reshape(1, c, 1, 1)
    eps = state.epsilon

    use_batch_stats = mode == "train" and not state.stats_frozen
    if use_batch_stats:
        mean = xd.mean(axis=(0, 2, 3))
        var = xd.var(axis=(0, 2, 3))
        m = state.momentum
        state.running_mean = ((1.0 - m) * state.running_mean + m * mean).astype(state.running_mean.dtype)
        state.running_var = ((1.0 - m) * state.running_var + m * var).astype(state.running_var.dtype)
    else:
        mean = state.running_mean.astype(xd.dtype)
        var = state.running_var.astype(xd.dtype)

    inv_std = 1.0 / np.sqrt(var + eps)
    xhat = (xd - mean.reshape(1, c, 1, 1)) * inv_std.reshape(1, c, 1, 1)
    out = xhat * g + beta.data.reshape(1, c, 1, 1)

    def grad_fn(gy):
        if gamma.requires_grad:
            gamma.accumulate_grad((gy * xhat).sum(axis=(0, 2, 3)))
        if beta.requires_grad:
            beta.accumulate_grad(gy.sum(axis=(0, 2, 3)))
        if xt.requires_grad:
            dxhat = gy * g
            if use_batch_stats:
                m_count = xd.shape[0] * xd.shape[2] * xd.shape[3]
                ivs = inv_std.reshape(1, c, 1, 1)
                sum_dxhat = dxhat.sum(axis=(0, 2, 3), keepdims=True)
                sum_dxhat_xhat = (dxhat * xhat).sum(axis=(0, 2, 3), keepdims=True)
                dx = (dxhat - sum_dxhat / m_count - xhat * sum_dxhat_xhat / m_count) * ivs
            else:
                dx = dxhat * inv_std.reshape(1, c, 1, 1)
            xt.accumulate_grad(dx)

    return make_op(out, (xt, gamma, beta), grad_fn)


# ---------------------------------------------------------------------------
# elementwise / pooling


def relu(x):
    """Elementwise max(0, x); subgradient 0 at exactly 0."""
    xt, xd = _unwrap(x, "relu input")
    mask = xd > 0
    out = np.where(mask, xd, xd.dtype.type(0))

    def grad_fn(g):
        xt.accumulate_grad(g * mask)

    return make_op(out, (xt,), grad_fn)


def global_avg_pool(x):
    """Per-channel spatial mean: (N, C, H, W) -> (N, C)."""
    xt, xd = _unwrap(x, "global_avg_pool input")
    if xd.ndim != 4:
        raise ValueError(f"global_avg_pool: expected NCHW input, got shape {xd.shape}")
    n, c, h, w = xd.shape
    out = xd.mean(axis=(2, 3))

    def grad_fn(g):
        xt.accumulate_grad(np.broadcast_to(g[:, :, None, None], xd.shape) / (h * w))

    return make_op(out, (xt,), grad_fn)


def bilinear_pool(x, norm_eps=1e-12):
    """Spatially averaged outer product with signed sqrt and L2 normalization.

    (N, C, H, W) -> (N, C*C). Zero input maps to the zero vector instead of
    NaN. Output rows have L2 norm 1 (or 0 for all-zero rows).
    """
    xt, xd = _unwrap(x, "bilinear_pool input")
    if xd.ndim != 4:
        raise ValueError(f"bilinear_pool: expected NCHW input, got shape {xd.shape}")
    n, c, h, w = xd.shape
    hw = h * w
    z = np.einsum("nchw,ndhw->ncd", xd, xd) / hw
    zf = z.reshape(n, c * c)
    abs_z = np.abs(zf)
    y = np.sign(zf) * np.sqrt(abs_z)
    r = np.sqrt((y * y).sum(axis=1, keepdims=True))
    safe_r = np.where(r > norm_eps, r, 1.0)
    out = np.where(r > norm_eps, y / safe_r, 0.0).astype(xd.dtype)

    def grad_fn(g):
        # through L2 normalization
        live = (r > norm_eps)
        dy = np.where(live, (g - out * (g * out).sum(axis=1, keepdims=True)) / safe_r, 0.0)
        # through signed sqrt; slope pinned to 0 at z == 0
        sqrt_abs = np.sqrt(np.where(abs_z > 0, abs_z, 1.0))
        dz = np.where(abs_z > 0, dy * 0.5 / sqrt_abs, 0.0).reshape(n, c, c)
        dsym = dz + dz.transpose(0, 2, 1)
        xt.accumulate_grad(np.einsum("ncd,ndhw->nchw", dsym, xd) / hw)

    return make_op(out, (xt,), grad_fn)


# ---------------------------------------------------------------------------
# dense / loss


def dense(v, w, b):
    """Affine map per row: (N, D) @ (K, D)^T + (K,) -> (N, K)."""
    vt, vd = _unwrap(v, "dense input")
    wt, wd = _unwrap(w, "dense weight")
    bt, bd = _unwrap(b, "dense bias")
    if vd.ndim != 2 or wd.ndim != 2:
        raise ValueError(f"dense: need 2-d input and weight, got {vd.shape} and {wd.shape}")
    if vd.shape[1] != wd.shape[1]:
        raise ValueError(f"dense: input features {vd.shape} do not match weight {wd.shape}")
    if bd.shape != (wd.shape[0],):
        raise ValueError(f"dense: bias shape {bd.shape} does not match weight {wd.shape}")
    out = vd @ wd.T + bd

    def grad_fn(g):
        if wt.requires_grad:
            wt.accumulate_grad(g.T @ vd)
        if bt.requires_grad:
            bt.accumulate_grad(g.sum(axis=0))
        if vt.requires_grad:
            vt.accumulate_grad(g @ wd)

    return make_op(out, (vt, wt, bt), grad_fn)


def softmax(logits):
    """Row-wise softmax of a plain array (no graph). Numerically stable."""
    z = logits - logits.max(axis=-1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=-1, keepdims=True)


def softmax_cross_entropy(logits, labels):
    """Mean over the batch of -log softmax(logits)[label].

    Gradient w.r.t. logits is (softmax - onehot) / N.
    """
    lt, ld = _unwrap(logits, "softmax_cross_entropy logits")
    if ld.ndim != 2:
        raise ValueError(f"softmax_cross_entropy: expected (N, K) logits, got shape {ld.shape}")
    n, k = ld.shape
    labels = np.asarray(labels)
    if labels.shape != (n,):
        raise ValueError(f"softmax_cross_entropy: expected {n} labels, got shape {labels.shape}")
    if labels.dtype.kind not in "iu":
        raise ValueError("softmax_cross_entropy: labels must be integer class indices")
    if labels.min() < 0 or labels.max() >= k:
        raise ValueError(f"softmax_cross_entropy: label out of range [0, {k}): {labels.min()}..{labels.max()}")

    shifted = ld - ld.max(axis=1, keepdims=True)
    log_z = np.log(np.exp(shifted).sum(axis=1, keepdims=True))
    log_probs = shifted - log_z
    loss = -log_probs[np.arange(n), labels].mean(dtype=ld.dtype)
    probs = np.exp(log_probs)

    def grad_fn(g):
        d = probs.copy()
        d[np.arange(n), labels] -= 1.0
        lt.accumulate_grad(g * d / n)

    return make_op(np.asarray(loss, dtype=ld.dtype), (lt,), grad_fn)


# ---------------------------------------------------------------------------
# initialization


def he_uniform(rng, shape, fan_in, dtype=np.float32):
    """He-uniform draw: U(-sqrt(6/fan_in), +sqrt(6/fan_in))."""
    limit = np.sqrt(6.0 / fan_in)
    return rng.uniform(-limit, limit, size=shape).astype(dtype)
