"""Minimal CNN kernels, Huber loss, Adam and spectrum metrics in NumPy.

Image tensors are stored channel-last, ``(batch, height, width, channels)``,
so that the 3x3 patch gather for convolution is a single strided copy.
Every kernel computes in the dtype of its input: float32 for training,
float64 when checking gradients against finite differences.

Forward functions return ``(output, cache)``; the matching backward takes
the upstream gradient and that cache.
"""

from __future__ import annotations

import math

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from .errors import NumericError, UsageError

LEAKY_SLOPE = 0.01
BN_MOMENTUM = 0.9
BN_EPS = 1e-5
ADAM_EPS = 1e-8


def check_finite(x: np.ndarray, where: str) -> np.ndarray:
    if not np.isfinite(x).all():
        raise NumericError(f"non-finite values after {where}")
    return x


# --- convolution -----------------------------------------------------------


def conv2d_forward(x, w, b, pad=1):
    """Stride-1 cross-correlation with zero padding.

    x: (N, H, W, C); w: (F, C, k, k); b: (F,). Returns (N, H', W', F).

    For multi-channel input the padded batch is flattened to rows of C
    values; tap (i, j) of every output pixel then sits a fixed row offset
    ``i * Wp + j`` away, so the convolution is k*k matmuls on contiguous
    slices. Rows that straddle an image edge produce junk outputs that are
    sliced away. Single-channel input uses an explicit patch matrix instead.
    """
    n, h, wd, c = x.shape
    f, cw, kh, kw = w.shape
    if cw != c:
        raise UsageError(f"conv expects {cw} input channels, got {c}")
    xp = np.pad(x, ((0, 0), (pad, pad), (pad, pad), (0, 0))) if pad else x
    hp, wp = xp.shape[1], xp.shape[2]
    ho, wo = hp - kh + 1, wp - kw + 1
    if c * kh * kw <= 32:
        cols = np.empty((n, ho, wo, kh, kw, c), dtype=x.dtype)
        for i in range(kh):
            for j in range(kw):
                cols[:, :, :, i, j, :] = xp[:, i : i + ho, j : j + wo, :]
        cols = cols.reshape(n * ho * wo, kh * kw * c)
        out = cols @ w.transpose(0, 2, 3, 1).reshape(f, kh * kw * c).T
        out += b
        return out.reshape(n, ho, wo, f), ("cols", cols, x.shape, w, pad)
    xf = xp.reshape(-1, c)
    rows = xf.shape[0] - (kh - 1) * wp - (kw - 1)
    full = np.empty((xf.shape[0], f), dtype=x.dtype)
    acc = full[:rows]
    tmp = np.empty_like(acc)
    # (kh, kw, C, F): contiguous per-tap matrices keep matmul on BLAS
    wt = np.ascontiguousarray(w.transpose(2, 3, 1, 0))
    for k, (i, j) in enumerate((i, j) for i in range(kh) for j in range(kw)):
        off = i * wp + j
        dst = acc if k == 0 else tmp
        np.matmul(xf[off : off + rows], wt[i, j], out=dst)
        if k:
            acc += tmp
    out = full.reshape(n, hp, wp, f)[:, :ho, :wo, :] + b
    return out, ("shift", xp, x.shape, w, pad)


def conv2d_backward(dout, cache, need_input_grad=True):
    """Returns (dx, dw, db); dx is None when ``need_input_grad`` is False."""
    method, saved, x_shape, w, pad = cache
    n, h, wd, c = x_shape
    f, _, kh, kw = w.shape
    _, ho, wo, _ = dout.shape
    db = dout.reshape(-1, f).sum(axis=0)
    if method == "cols":
        cols = saved
        dmat = dout.reshape(-1, f)
        dw = (dmat.T @ cols).reshape(f, kh, kw, c).transpose(0, 3, 1, 2)
        if not need_input_grad:
            return None, dw, db
        wmat = w.transpose(0, 2, 3, 1).reshape(f, kh * kw * c)
        dcols = (dmat @ wmat).reshape(n, ho, wo, kh, kw, c)
        dxp = np.zeros((n, h + 2 * pad, wd + 2 * pad, c), dtype=dout.dtype)
        for i in range(kh):
            for j in range(kw):
                dxp[:, i : i + ho, j : j + wo, :] += dcols[:, :, :, i, j, :]
        dx = dxp[:, pad : pad + h, pad : pad + wd, :] if pad else dxp
        return dx, dw, db

    xp = saved
    hp, wp = xp.shape[1], xp.shape[2]
    xf = xp.reshape(-1, c)
    rows = xf.shape[0] - (kh - 1) * wp - (kw - 1)
    # output gradient on the padded grid, zero at the junk positions
    g = np.zeros((n, hp, wp, f), dtype=dout.dtype)
    g[:, :ho, :wo, :] = dout
    g = g.reshape(-1, f)[:rows]
    dw = np.empty(w.shape, dtype=dout.dtype)
    taps = [(i, j) for i in range(kh) for j in range(kw)]
    for i, j in taps:
        off = i * wp + j
        dw[:, :, i, j] = g.T @ xf[off : off + rows]
    if not need_input_grad:
        return None, dw, db
    dxf = np.zeros((xf.shape[0], c), dtype=dout.dtype)
    tmp = np.empty((rows, c), dtype=dout.dtype)
    wt = np.ascontiguousarray(w.transpose(2, 3, 0, 1))
    for i, j in taps:
        off = i * wp + j
        np.matmul(g, wt[i, j], out=tmp)
        dxf[off : off + rows] += tmp
    dx = dxf.reshape(n, hp, wp, c)[:, pad : pad + h, pad : pad + wd, :]
    return dx, dw, db


# --- batch normalization ---------------------------------------------------


def batchnorm_forward(x, gamma, beta, running_mean, running_var, train=True,
                      momentum=BN_MOMENTUM, eps=BN_EPS):
    """Normalize over every axis but the last (channels / features).

    In train mode the running statistics are updated in place:
    ``running = momentum * running + (1 - momentum) * batch``.
    """
    axes = tuple(range(x.ndim - 1))
    if train:
        count = x.size // x.shape[-1]
        if x.shape[0] < 2:
            raise UsageError("batch norm in train mode needs a batch of at least 2")
        mean = x.mean(axis=axes)
        xc = x - mean
        var = np.mean(xc * xc, axis=axes)
        inv_std = 1.0 / np.sqrt(var + eps)
        xhat = xc * inv_std
        unbiased = var * (count / max(count - 1, 1))
        running_mean *= momentum
        running_mean += (1.0 - momentum) * mean
        running_var *= momentum
        running_var += (1.0 - momentum) * unbiased
        cache = (xhat, inv_std, gamma)
    else:
        inv_std = 1.0 / np.sqrt(running_var + eps)
        xhat = (x - running_mean) * inv_std
        cache = None
    out = xhat * gamma + beta
    return out.astype(x.dtype, copy=False), cache


def batchnorm_backward(dout, cache):
    if cache is None:
        raise UsageError("batch norm backward needs a train-mode forward pass")
    xhat, inv_std, gamma = cache
    axes = tuple(range(dout.ndim - 1))
    dbeta = dout.sum(axis=axes)
    dgamma = (dout * xhat).sum(axis=axes)
    dxhat = dout * gamma
    dx = inv_std * (dxhat - dxhat.mean(axis=axes) - xhat * (dxhat * xhat).mean(axis=axes))
    return dx.astype(dout.dtype, copy=False), dgamma, dbeta


# --- activations and pooling -------------------------------------------------


def leaky_relu_forward(x, slope=LEAKY_SLOPE):
    scale = np.where(x > 0, x.dtype.type(1), x.dtype.type(slope))
    return x * scale, scale


def leaky_relu_backward(dout, cache):
    return dout * cache


def maxpool2d_forward(x, window=2, stride=2):
    """2x2 stride-2 max pool on (N, H, W, C); H and W must be even."""
    if window != 2 or stride != 2:
        raise UsageError("only 2x2 stride-2 pooling is supported")
    n, h, w, c = x.shape
    if h % 2 or w % 2:
        raise UsageError(f"pool window 2 does not divide {h}x{w}")
    q = (x[:, 0::2, 0::2], x[:, 0::2, 1::2], x[:, 1::2, 0::2], x[:, 1::2, 1::2])
    out = np.maximum(np.maximum(q[0], q[1]), np.maximum(q[2], q[3]))
    # one-hot argmax masks; ties go to the first quadrant in scan order so
    # each output gradient is routed to exactly one input
    taken = q[0] == out
    masks = [taken]
    for k in (1, 2):
        m = (q[k] == out) & ~taken
        taken = taken | m
        masks.append(m)
    masks.append(~taken)
    return out, (masks, x.shape)


def maxpool2d_backward(dout, cache):
    masks, x_shape = cache
    dx = np.empty(x_shape, dtype=dout.dtype)
    for m, (r, s) in zip(masks, ((0, 0), (0, 1), (1, 0), (1, 1))):
        np.multiply(dout, m, out=dx[:, r::2, s::2])
    return dx


# --- fully connected -------------------------------------------------------


def linear_forward(x, w, b):
    """y = x W^T + b with w of shape (out, in)."""
    if x.shape[-1] != w.shape[1]:
        raise UsageError(f"linear expects {w.shape[1]} features, got {x.shape[-1]}")
    return x @ w.T + b, (x, w)


def linear_backward(dout, cache):
    x, w = cache
    return dout @ w, dout.T @ x, dout.sum(axis=0)


# --- loss and metrics --------------------------------------------------------


def huber_loss(pred, target, delta):
    """Mean Huber loss over all elements and its gradient w.r.t. ``pred``.

    Quadratic branch ``e**2 / 2`` for ``|e| <= delta``, linear branch
    ``delta * |e| - delta**2 / 2`` beyond; the mean runs over every element
    (batch x spectrum points), so the gradient carries a ``1/N`` factor.
    """
    if delta <= 0:
        raise UsageError(f"Huber delta must be positive, got {delta}")
    pred = np.asarray(pred)
    target = np.asarray(target)
    if pred.shape != target.shape:
        raise UsageError(f"shape mismatch: {pred.shape} vs {target.shape}")
    e = pred - target
    a = np.abs(e)
    inside = a <= delta
    per = np.where(inside, 0.5 * e * e, delta * a - 0.5 * delta * delta)
    n = e.size
    loss = float(np.sum(per, dtype=np.float64) / n)
    grad = np.where(inside, e, delta * np.sign(e)) / e.dtype.type(n)
    return loss, grad.astype(pred.dtype, copy=False)


def cosine_similarity(a, b):
    """Row-wise cosine similarity of two (batch, features) arrays."""
    a = np.atleast_2d(np.asarray(a, dtype=np.float64))
    b = np.atleast_2d(np.asarray(b, dtype=np.float64))
    denom = np.linalg.norm(a, axis=1) * np.linalg.norm(b, axis=1)
    if np.any(denom == 0):
        raise NumericError("cosine similarity of a zero vector is undefined")
    return np.sum(a * b, axis=1) / denom


def metrics(pred, target) -> tuple[float, float, float]:
    """(mse, mae, cs): element means, and per-sample CS averaged over the batch."""
    pred = np.asarray(pred, dtype=np.float64)
    target = np.asarray(target, dtype=np.float64)
    e = pred - target
    return (
        float(np.mean(e * e)),
        float(np.mean(np.abs(e))),
        float(np.mean(cosine_similarity(pred, target))),
    )


# --- optimizer ---------------------------------------------------------------


class Adam:
    """Bias-corrected Adam over a dict of named parameter arrays."""

    def __init__(self, lr=1e-4, beta1=0.5, beta2=0.999, eps=ADAM_EPS):
        self.lr, self.beta1, self.beta2, self.eps = lr, beta1, beta2, eps
        self.t = 0
        self.m: dict[str, np.ndarray] = {}
        self.v: dict[str, np.ndarray] = {}

    def step(self, params: dict, grads: dict) -> None:
        """Update ``params`` in place."""
        self.t += 1
        b1, b2 = self.beta1, self.beta2
        corr1 = 1.0 - b1**self.t
        corr2 = 1.0 - b2**self.t
        for name, p in params.items():
            g = grads[name]
            if name not in self.m:
                self.m[name] = np.zeros_like(p)
                self.v[name] = np.zeros_like(p)
            m, v = self.m[name], self.v[name]
            m *= b1
            m += (1.0 - b1) * g
            v *= b2
            v += (1.0 - b2) * (g * g)
            step = (self.lr / corr1) * m / (np.sqrt(v / corr2) + self.eps)
            p -= step.astype(p.dtype, copy=False)

    def state_dict(self) -> dict:
        return {
            "t": self.t,
            "lr": self.lr,
            "beta1": self.beta1,
            "beta2": self.beta2,
            "eps": self.eps,
            "m": {k: v.copy() for k, v in self.m.items()},
            "v": {k: v.copy() for k, v in self.v.items()},
        }

    @classmethod
    def from_state(cls, state: dict) -> "Adam":
        opt = cls(state["lr"], state["beta1"], state["beta2"], state["eps"])
        opt.t = int(state["t"])
        opt.m = {k: np.array(v) for k, v in state["m"].items()}
        opt.v = {k: np.array(v) for k, v in state["v"].items()}
        return opt


def adam_step(params: dict, grads: dict, state: Adam) -> Adam:
    state.step(params, grads)
    return state


# --- layers ------------------------------------------------------------------


def kaiming_uniform(rng, shape, fan_in, dtype, slope=LEAKY_SLOPE):
    gain = math.sqrt(2.0 / (1.0 + slope * slope))
    bound = gain * math.sqrt(3.0 / fan_in)
    return rng.uniform(-bound, bound, size=shape).astype(dtype)


class Layer:
    """Base: named parameters, matching gradients, optional buffers."""

    def __init__(self):
        self.params: dict[str, np.ndarray] = {}
        self.grads: dict[str, np.ndarray] = {}
        self.buffers: dict[str, np.ndarray] = {}
        self._cache = None

    def zero_grad(self):
        for k, p in self.params.items():
            self.grads[k] = np.zeros_like(p)


class Conv2d(Layer):
    def __init__(self, in_ch, out_ch, rng, dtype=np.float32, kernel=3):
        super().__init__()
        fan_in = in_ch * kernel * kernel
        self.params["weight"] = kaiming_uniform(rng, (out_ch, in_ch, kernel, kernel), fan_in, dtype)
        self.params["bias"] = np.zeros(out_ch, dtype=dtype)
        self.pad = kernel // 2
        self.zero_grad()

    def forward(self, x, train=True):
        out, cache = conv2d_forward(x, self.params["weight"], self.params["bias"], self.pad)
        self._cache = cache if train else None
        return out

    def backward(self, dout, need_input_grad=True):
        dx, dw, db = conv2d_backward(dout, self._cache, need_input_grad)
        self.grads["weight"] += dw
        self.grads["bias"] += db
        return dx


class BatchNorm(Layer):
    def __init__(self, channels, dtype=np.float32):
        super().__init__()
        self.params["gamma"] = np.ones(channels, dtype=dtype)
        self.params["beta"] = np.zeros(channels, dtype=dtype)
        self.buffers["running_mean"] = np.zeros(channels, dtype=dtype)
        self.buffers["running_var"] = np.ones(channels, dtype=dtype)
        self.zero_grad()

    def forward(self, x, train=True):
        out, self._cache = batchnorm_forward(
            x,
            self.params["gamma"],
            self.params["beta"],
            self.buffers["running_mean"],
            self.buffers["running_var"],
            train,
        )
        return out

    def backward(self, dout):
        dx, dgamma, dbeta = batchnorm_backward(dout, self._cache)
        self.grads["gamma"] += dgamma
        self.grads["beta"] += dbeta
        return dx


class LeakyReLU(Layer):
    def __init__(self, slope=LEAKY_SLOPE):
        super().__init__()
        self.slope = slope

    def forward(self, x, train=True):
        out, self._cache = leaky_relu_forward(x, self.slope)
        return out

    def backward(self, dout):
        return leaky_relu_backward(dout, self._cache)


class MaxPool2d(Layer):
    def forward(self, x, train=True):
        out, self._cache = maxpool2d_forward(x)
        return out

    def backward(self, dout):
        return maxpool2d_backward(dout, self._cache)


class Linear(Layer):
    def __init__(self, in_features, out_features, rng, dtype=np.float32):
        super().__init__()
        self.params["weight"] = kaiming_uniform(rng, (out_features, in_features), in_features, dtype)
        self.params["bias"] = np.zeros(out_features, dtype=dtype)
        self.zero_grad()

    def forward(self, x, train=True):
        out, self._cache = linear_forward(x, self.params["weight"], self.params["bias"])
        return out

    def backward(self, dout):
        dx, dw, db = linear_backward(dout, self._cache)
        self.grads["weight"] += dw
        self.grads["bias"] += db
        return dx


# --- gradient checking -------------------------------------------------------


def numerical_gradient(f, x, h=1e-3, indices=None):
    """Central differences of scalar ``f()`` w.r.t. array ``x``, perturbed in place.

    ``indices`` restricts the check to selected flat positions; the other
    entries of the result are left at zero.
    """
    grad = np.zeros_like(x, dtype=np.float64)
    flat = x.reshape(-1)
    gflat = grad.reshape(-1)
    for i in range(flat.size) if indices is None else indices:
        old = flat[i]
        flat[i] = old + h
        plus = f()
        flat[i] = old - h
        minus = f()
        flat[i] = old
        gflat[i] = (plus - minus) / (2 * h)
    return grad


def numerical_gradient_piecewise(f, x, signature, h=1e-3, indices=None):
    """Central differences that skip coordinates where ``f`` changes branch.

    ``signature()`` describes the active piece of a piecewise-smooth ``f``
    (activation signs, pooling winners) after the latest ``f()`` call. A
    coordinate is kept only if ``x + h`` and ``x - h`` land on the same
    piece as ``x``. Returns ``(grad, kept)`` with ``kept`` a boolean mask.
    """
    f()
    base = signature()
    grad = np.zeros_like(x, dtype=np.float64)
    kept = np.zeros(x.shape, dtype=bool)
    flat, gflat, kflat = x.reshape(-1), grad.reshape(-1), kept.reshape(-1)
    for i in range(flat.size) if indices is None else indices:
        old = flat[i]
        flat[i] = old + h
        plus = f()
        same = signature() == base
        flat[i] = old - h
        minus = f()
        same = same and signature() == base
        flat[i] = old
        gflat[i] = (plus - minus) / (2 * h)
        kflat[i] = same
    return grad, kept


def relative_error(analytic, numeric, floor=1e-8) -> float:
    """Largest elementwise ``|a - n| / max(|a|, |n|, floor)``."""
    a = np.asarray(analytic, dtype=np.float64)
    n = np.asarray(numeric, dtype=np.float64)
    denom = np.maximum(np.maximum(np.abs(a), np.abs(n)), floor)
    return float(np.max(np.abs(a - n) / denom)) if a.size else 0.0
