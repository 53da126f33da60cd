"""Minimal differentiable engine for 1D convolutional networks.

Tensors are plain float64 numpy arrays laid out as (batch, channels, length)
or (batch, features). Each operation comes as a pair of pure functions
``*_forward`` / ``*_backward`` that exchange an explicit cache, and a thin
stateful :class:`Layer` wrapper that owns parameters and the last cache.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

DECAY_GROUPS = ("conv_weight", "dense_weight", "batchnorm_gain", "bias")


class ShapeError(ValueError):
    """Raised when tensor shapes are inconsistent with an operation."""


class CacheError(RuntimeError):
    """Raised when backward is called without a matching forward."""


@dataclass(eq=False)
class Parameter:
    """A trainable array with its gradient and Adam moment buffers."""

    name: str
    value: np.ndarray
    decay_group: str
    grad: np.ndarray = field(init=False)
    adam_m: np.ndarray = field(init=False)
    adam_v: np.ndarray = field(init=False)

    def __post_init__(self):
        if self.decay_group not in DECAY_GROUPS:
            raise ValueError(f"unknown decay group {self.decay_group!r}")
        self.value = np.asarray(self.value, dtype=np.float64)
        self.grad = np.zeros_like(self.value)
        self.adam_m = np.zeros_like(self.value)
        self.adam_v = np.zeros_like(self.value)

    def zero_grad(self):
        self.grad[...] = 0.0


def _as3d(x, name="x"):
    x = np.asarray(x, dtype=np.float64)
    if x.ndim != 3:
        raise ShapeError(f"{name} must be (batch, channels, length), got shape {x.shape}")
    return x


# ---------------------------------------------------------------------------
# convolution


def conv1d_forward(x, w, b, stride=1):
    """Valid (unpadded) 1D cross-correlation.

    ``out[n, co, t] = b[co] + sum_{ci, k} x[n, ci, t*stride + k] * w[co, ci, k]``
    """
    x = _as3d(x)
    w = np.asarray(w, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if w.ndim != 3:
        raise ShapeError(f"w must be (out_channels, in_channels, kernel), got shape {w.shape}")
    if stride < 1:
        raise ValueError("stride must be >= 1")
    n, cin, length = x.shape
    cout, wcin, k = w.shape
    if wcin != cin:
        raise ShapeError(f"in_channels mismatch: x has {cin}, w expects {wcin}")
    if b.shape != (cout,):
        raise ShapeError(f"out_channels mismatch: w has {cout}, b has shape {b.shape}")
    if k > length:
        raise ShapeError(f"kernel exceeds input length ({k} > {length})")
    cols = sliding_window_view(x, k, axis=2)[:, :, ::stride, :]  # (n, cin, lout, k)
    lout = cols.shape[2]
    cols = cols.transpose(0, 2, 1, 3).reshape(n * lout, cin * k)
    out = cols @ w.reshape(cout, cin * k).T + b
    out = out.reshape(n, lout, cout).transpose(0, 2, 1)
    cache = {"cols": cols, "w": w, "x_shape": x.shape, "stride": stride}
    return np.ascontiguousarray(out), cache


def conv1d_backward(cache, grad_out):
    if not cache or "cols" not in cache:
        raise CacheError("conv1d_backward needs the cache of a forward call")
    cols, w, (n, cin, length), stride = cache["cols"], cache["w"], cache["x_shape"], cache["stride"]
    cout, _, k = w.shape
    lout = cols.shape[0] // n
    grad_out = np.asarray(grad_out, dtype=np.float64)
    if grad_out.shape != (n, cout, lout):
        raise ShapeError(f"grad_out shape {grad_out.shape} != forward output {(n, cout, lout)}")
    g = grad_out.transpose(0, 2, 1).reshape(n * lout, cout)
    grad_w = (g.T @ cols).reshape(cout, cin, k)
    grad_b = g.sum(axis=0)
    gcols = (g @ w.reshape(cout, cin * k)).reshape(n, lout, cin, k)
    grad_x = np.zeros((n, cin, length))
    span = stride * (lout - 1) + 1
    for j in range(k):
        grad_x[:, :, j : j + span : stride] += gcols[:, :, :, j].transpose(0, 2, 1)
    return grad_x, grad_w, grad_b


# ---------------------------------------------------------------------------
# pooling


def maxpool1d_forward(x, kernel=2, stride=2):
    """Max pooling; inputs shorter than the window pass through unchanged."""
    x = _as3d(x)
    if kernel < 1 or stride < 1:
        raise ValueError("kernel and stride must be >= 1")
    if x.shape[2] < kernel:
        return x.copy(), {"passthrough": True, "x_shape": x.shape}
    if kernel == stride:
        lout = x.shape[2] // kernel
        win = x[:, :, : lout * kernel].reshape(x.shape[0], x.shape[1], lout, kernel)
        if kernel == 2:
            second = win[..., 1] > win[..., 0]  # ties go to the first position
            cache = {"passthrough": False, "second": second, "x_shape": x.shape, "kernel": 2, "stride": 2}
            return np.where(second, win[..., 1], win[..., 0]), cache
    else:
        win = sliding_window_view(x, kernel, axis=2)[:, :, ::stride, :]
    arg = win.argmax(axis=3)  # first maximum on ties
    out = np.take_along_axis(win, arg[..., None], axis=3)[..., 0]
    cache = {"passthrough": False, "arg": arg, "x_shape": x.shape, "kernel": kernel, "stride": stride}
    return out, cache


def maxpool1d_backward(cache, grad_out):
    if not cache or "x_shape" not in cache:
        raise CacheError("maxpool1d_backward needs the cache of a forward call")
    if cache["passthrough"]:
        return np.array(grad_out, dtype=np.float64)
    if "second" in cache:
        second = cache["second"]
        n, c, length = cache["x_shape"]
        lout = second.shape[2]
        grad_x = np.zeros((n, c, length))
        pairs = grad_x[:, :, : 2 * lout].reshape(n, c, lout, 2)
        pairs[..., 0] = np.where(second, 0.0, grad_out)
        pairs[..., 1] = np.where(second, grad_out, 0.0)
        return grad_x
    arg, stride, kernel = cache["arg"], cache["stride"], cache["kernel"]
    grad_x = np.zeros(cache["x_shape"])
    lout = arg.shape[2]
    if kernel == stride:
        n, c, _ = grad_x.shape
        blocks = grad_x[:, :, : lout * kernel].reshape(n, c, lout, kernel)
        np.put_along_axis(blocks, arg[..., None], np.asarray(grad_out)[..., None], axis=3)
        return grad_x
    span = stride * (lout - 1) + 1
    for j in range(kernel):
        grad_x[:, :, j : j + span : stride] += np.where(arg == j, grad_out, 0.0)
    return grad_x


def global_avg_pool_forward(x):
    x = _as3d(x)
    if x.shape[2] < 1:
        raise ShapeError("global average pooling needs length >= 1")
    return x.mean(axis=2), {"x_shape": x.shape}


def global_avg_pool_backward(cache, grad_out):
    n, c, length = cache["x_shape"]
    return np.broadcast_to(np.asarray(grad_out)[:, :, None] / length, (n, c, length)).copy()


# ---------------------------------------------------------------------------
# normalization


def _channel_sum(a):
    # summing the contiguous length axis first is much faster than axis=(0, 2)
    return a.sum(axis=0) if a.ndim == 2 else a.sum(axis=2).sum(axis=0)


def batchnorm_forward(x, gamma, beta, running_mean, running_var, eps=1e-5, momentum=0.9, train=True):
    """Batch normalization over every axis except the channel axis 1.

    In train mode the running statistics arrays are updated in place as
    ``running = momentum * running + (1 - momentum) * batch`` and the batch
    variance uses the biased 1/N estimator.
    """
    x = np.asarray(x, dtype=np.float64)
    if x.ndim not in (2, 3):
        raise ShapeError(f"batchnorm expects 2D or 3D input, got shape {x.shape}")
    if eps < 0:
        raise ValueError("eps must be non-negative")
    bshape = (1, -1) if x.ndim == 2 else (1, -1, 1)
    if gamma.shape[0] != x.shape[1]:
        raise ShapeError(f"channels mismatch: x has {x.shape[1]}, gamma has {gamma.shape[0]}")
    if train:
        count = x.size // x.shape[1]
        if count < 2:
            raise ShapeError("batchnorm in train mode needs at least 2 values per channel")
        mean = _channel_sum(x) / count
        centered = x - mean.reshape(bshape)
        var = _channel_sum(centered * centered) / count
        if eps == 0 and np.any(var == 0):
            raise FloatingPointError("zero batch variance with eps=0")
        running_mean *= momentum
        running_mean += (1 - momentum) * mean
        running_var *= momentum
        running_var += (1 - momentum) * var
    else:
        mean, var = running_mean, running_var
        centered = x - mean.reshape(bshape)
    inv_std = 1.0 / np.sqrt(var + eps)
    xhat = centered
    xhat *= inv_std.reshape(bshape)
    out = xhat * gamma.reshape(bshape)
    out += beta.reshape(bshape)
    cache = {"xhat": xhat, "inv_std": inv_std, "gamma": gamma, "bshape": bshape, "train": train}
    return out, cache


def batchnorm_backward(cache, grad_out):
    if not cache or "xhat" not in cache:
        raise CacheError("batchnorm_backward needs the cache of a forward call")
    xhat, inv_std, gamma, bshape = (cache[k] for k in ("xhat", "inv_std", "gamma", "bshape"))
    grad_out = np.asarray(grad_out, dtype=np.float64)
    grad_gamma = _channel_sum(grad_out * xhat)
    grad_beta = _channel_sum(grad_out)
    scale = (gamma * inv_std).reshape(bshape)
    if not cache["train"]:
        return grad_out * scale, grad_gamma, grad_beta
    count = xhat.size // xhat.shape[1]
    # d/dx of gamma * xhat with batch statistics
    grad_x = xhat * (-grad_gamma / count).reshape(bshape)
    grad_x += grad_out
    grad_x -= (grad_beta / count).reshape(bshape)
    grad_x *= scale
    return grad_x, grad_gamma, grad_beta


# ---------------------------------------------------------------------------
# elementwise and affine


def relu_forward(x):
    x = np.asarray(x, dtype=np.float64)
    mask = x > 0
    return np.maximum(x, 0.0), {"mask": mask}


def relu_backward(cache, grad_out):
    return grad_out * cache["mask"]


def _check_rate(p):
    if not 0.0 <= p < 1.0:
        raise ValueError(f"dropout rate must be in [0, 1), got {p}")


def dropout_forward(x, p, train, rng=None, mask=None):
    """Inverted dropout: survivors are scaled by 1/(1-p); eval mode is identity.

    A precomputed ``mask`` (already scaled) may be supplied to freeze the
    random draw, e.g. for gradient checks.
    """
    _check_rate(p)
    x = np.asarray(x, dtype=np.float64)
    if not train or p == 0.0:
        return x.copy(), {"mask": None}
    if mask is None:
        if rng is None:
            raise ValueError("dropout in train mode needs an rng")
        mask = (rng.random(x.shape) >= p) / (1.0 - p)
    return x * mask, {"mask": mask}


def dropout_backward(cache, grad_out):
    if cache["mask"] is None:
        return np.array(grad_out, dtype=np.float64)
    return grad_out * cache["mask"]


def dense_forward(x, w, b):
    """Affine map ``x @ w.T + b`` with ``w`` of shape (out_features, in_features)."""
    x = np.asarray(x, dtype=np.float64)
    if x.ndim != 2:
        raise ShapeError(f"dense expects (batch, features), got shape {x.shape}")
    if w.shape[1] != x.shape[1]:
        raise ShapeError(f"in_features mismatch: x has {x.shape[1]}, w expects {w.shape[1]}")
    return x @ w.T + b, {"x": x, "w": w}


def dense_backward(cache, grad_out):
    x, w = cache["x"], cache["w"]
    return grad_out @ w, grad_out.T @ x, grad_out.sum(axis=0)


def flatten_forward(x):
    x = np.asarray(x, dtype=np.float64)
    return x.reshape(x.shape[0], -1), {"x_shape": x.shape}


def flatten_backward(cache, grad_out):
    return np.asarray(grad_out).reshape(cache["x_shape"])


def concat_forward(xs):
    """Concatenate (batch, features) arrays along the feature axis."""
    widths = [a.shape[1] for a in xs]
    return np.concatenate(xs, axis=1), {"widths": widths}


def concat_backward(cache, grad_out):
    bounds = np.cumsum(cache["widths"])[:-1]
    return np.split(grad_out, bounds, axis=1)


def softmax(logits):
    z = logits - logits.max(axis=1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=1, keepdims=True)


def softmax_cross_entropy(logits, labels):
    """Mean binary softmax cross-entropy and its gradient w.r.t. the logits."""
    logits = np.asarray(logits, dtype=np.float64)
    labels = np.asarray(labels)
    if logits.ndim != 2 or logits.shape[1] != 2:
        raise ShapeError(f"expected logits of shape (batch, 2), got {logits.shape}")
    if labels.shape != (logits.shape[0],):
        raise ShapeError(f"labels shape {labels.shape} does not match batch {logits.shape[0]}")
    if not np.all((labels == 0) | (labels == 1)):
        raise ValueError("labels must be 0 or 1")
    labels = labels.astype(np.int64)
    n = logits.shape[0]
    z = logits - logits.max(axis=1, keepdims=True)
    log_norm = np.log(np.exp(z).sum(axis=1))
    logp = z[np.arange(n), labels] - log_norm
    loss = float(-logp.mean())
    grad = softmax(logits)
    grad[np.arange(n), labels] -= 1.0
    return loss, grad / n


# ---------------------------------------------------------------------------
# stateful layers


def he_uniform(rng, shape, fan_in):
    limit = np.sqrt(6.0 / fan_in)
    return rng.uniform(-limit, limit, size=shape)


class Layer:
    """Base class; subclasses set ``kind`` and implement forward/backward."""

    kind = "layer"

    def __init__(self):
        self.params: list[Parameter] = []
        self.cache = None

    def forward(self, x, train=False, rng=None):
        raise NotImplementedError

    def backward(self, grad_out):
        raise NotImplementedError

    def _need_cache(self):
        if self.cache is None:
            raise CacheError(f"{self.kind}: backward called before forward")
        cache, self.cache = self.cache, None
        return cache


class Conv1d(Layer):
    kind = "conv1d"

    def __init__(self, in_channels, out_channels, kernel, stride=1, rng=None, name="conv"):
        super().__init__()
        if kernel < 1 or stride < 1:
            raise ValueError("kernel size and stride must be >= 1")
        rng = rng if rng is not None else np.random.default_rng(0)
        self.kernel, self.stride = kernel, stride
        fan_in = in_channels * kernel
        self.w = Parameter(f"{name}.w", he_uniform(rng, (out_channels, in_channels, kernel), fan_in), "conv_weight")
        self.b = Parameter(f"{name}.b", np.zeros(out_channels), "bias")
        self.params = [self.w, self.b]

    def forward(self, x, train=False, rng=None):
        out, self.cache = conv1d_forward(x, self.w.value, self.b.value, self.stride)
        return out

    def backward(self, grad_out):
        gx, gw, gb = conv1d_backward(self._need_cache(), grad_out)
        self.w.grad += gw
        self.b.grad += gb
        return gx


class BatchNorm(Layer):
    kind = "batchnorm"

    def __init__(self, channels, eps=1e-5, momentum=0.9, name="bn"):
        super().__init__()
        if eps <= 0:
            raise ValueError("batchnorm eps must be > 0")
        self.eps, self.momentum = eps, momentum
        self.gamma = Parameter(f"{name}.gamma", np.ones(channels), "batchnorm_gain")
        self.beta = Parameter(f"{name}.beta", np.zeros(channels), "bias")
        self.running_mean = np.zeros(channels)
        self.running_var = np.ones(channels)
        self.params = [self.gamma, self.beta]
        self.name = name

    def forward(self, x, train=False, rng=None):
        out, self.cache = batchnorm_forward(
            x, self.gamma.value, self.beta.value, self.running_mean, self.running_var,
            self.eps, self.momentum, train,
        )
        return out

    def backward(self, grad_out):
        gx, gg, gb = batchnorm_backward(self._need_cache(), grad_out)
        self.gamma.grad += gg
        self.beta.grad += gb
        return gx


class ReLU(Layer):
    kind = "relu"

    def forward(self, x, train=False, rng=None):
        out, self.cache = relu_forward(x)
        return out

    def backward(self, grad_out):
        return relu_backward(self._need_cache(), grad_out)


class MaxPool1d(Layer):
    kind = "maxpool"

    def __init__(self, kernel=2, stride=2):
        super().__init__()
        if kernel < 1 or stride < 1:
            raise ValueError("pool kernel and stride must be >= 1")
        self.kernel, self.stride = kernel, stride

    def forward(self, x, train=False, rng=None):
        out, self.cache = maxpool1d_forward(x, self.kernel, self.stride)
        return out

    def backward(self, grad_out):
        return maxpool1d_backward(self._need_cache(), grad_out)


class GlobalAvgPool(Layer):
    kind = "globalavgpool"

    def forward(self, x, train=False, rng=None):
        out, self.cache = global_avg_pool_forward(x)
        return out

    def backward(self, grad_out):
        return global_avg_pool_backward(self._need_cache(), grad_out)


class Dropout(Layer):
    kind = "dropout"

    def __init__(self, p):
        super().__init__()
        _check_rate(p)
        self.p = p
        self.frozen_mask = None

    def forward(self, x, train=False, rng=None):
        out, self.cache = dropout_forward(x, self.p, train, rng, mask=self.frozen_mask)
        return out

    def backward(self, grad_out):
        return dropout_backward(self._need_cache(), grad_out)


class Dense(Layer):
    kind = "dense"

    def __init__(self, in_features, out_features, rng=None, name="dense"):
        super().__init__()
        rng = rng if rng is not None else np.random.default_rng(0)
        self.w = Parameter(f"{name}.w", he_uniform(rng, (out_features, in_features), in_features), "dense_weight")
        self.b = Parameter(f"{name}.b", np.zeros(out_features), "bias")
        self.params = [self.w, self.b]

    def forward(self, x, train=False, rng=None):
        out, self.cache = dense_forward(x, self.w.value, self.b.value)
        return out

    def backward(self, grad_out):
        gx, gw, gb = dense_backward(self._need_cache(), grad_out)
        self.w.grad += gw
        self.b.grad += gb
        return gx


class Flatten(Layer):
    kind = "flatten"

    def forward(self, x, train=False, rng=None):
        out, self.cache = flatten_forward(x)
        return out

    def backward(self, grad_out):
        return flatten_backward(self._need_cache(), grad_out)


class Sequential(Layer):
    kind = "sequential"

    def __init__(self, layers):
        super().__init__()
        self.layers = list(layers)
        self.params = [p for layer in self.layers for p in layer.params]

    def forward(self, x, train=False, rng=None):
        for layer in self.layers:
            x = layer.forward(x, train, rng)
        return x

    def backward(self, grad_out):
        for layer in reversed(self.layers):
            grad_out = layer.backward(grad_out)
        return grad_out


def iter_layers(layer):
    """Depth-first iteration over a layer and any sublayers it holds."""
    yield layer
    for child in getattr(layer, "layers", ()):
        yield from iter_layers(child)


# ---------------------------------------------------------------------------
# gradient checking


def _rel_err(a, b):
    return np.abs(a - b) / np.maximum(np.maximum(np.abs(a), np.abs(b)), 1e-8)


def grad_check(layer: Layer, x, seed=0, h=1e-5, train=True):
    """Max relative error between analytic and central-difference gradients.

    The scalar objective is ``sum(layer(x) * r)`` for a fixed random ``r``.
    Dropout masks are frozen and batchnorm running statistics are restored,
    so every probe sees the same function.
    """
    rng = np.random.default_rng(seed)
    x = np.array(x, dtype=np.float64)
    layers = list(iter_layers(layer))
    bn_state = [(l.running_mean.copy(), l.running_var.copy()) for l in layers if isinstance(l, BatchNorm)]
    dropouts = [l for l in layers if isinstance(l, Dropout)]
    saved_masks = [d.frozen_mask for d in dropouts]

    def restore_bn():
        for l, (m, v) in zip((l for l in layers if isinstance(l, BatchNorm)), bn_state):
            l.running_mean[...] = m
            l.running_var[...] = v

    # record one set of dropout masks and freeze them
    mask_rng = np.random.default_rng(seed + 1)
    for d in dropouts:
        d.frozen_mask = None
        d.cache = None
    out = layer.forward(x.copy(), train, mask_rng)
    for d in dropouts:
        if d.cache is not None and d.cache["mask"] is not None:
            d.frozen_mask = d.cache["mask"]
    restore_bn()
    r = rng.standard_normal(out.shape)

    def objective():
        val = float(np.sum(layer.forward(x, train, mask_rng) * r))
        restore_bn()
        return val

    try:
        for p in layer.params:
            p.zero_grad()
        layer.forward(x, train, mask_rng)
        restore_bn()
        grad_x = layer.backward(r)
        worst = 0.0
        targets = [(x, grad_x)] + [(p.value, p.grad.copy()) for p in layer.params]
        for arr, analytic in targets:
            numeric = np.zeros_like(arr)
            flat, nflat = arr.reshape(-1), numeric.reshape(-1)
            for i in range(flat.size):
                orig = flat[i]
                flat[i] = orig + h
                fp = objective()
                flat[i] = orig - h
                fm = objective()
                flat[i] = orig
                nflat[i] = (fp - fm) / (2 * h)
            worst = max(worst, float(np.max(_rel_err(analytic, numeric))))
        return worst
    finally:
        for d, m in zip(dropouts, saved_masks):
            d.frozen_mask = m
