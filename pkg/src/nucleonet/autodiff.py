"""Dense tensor layers with hand-written backward passes.

Tensors are plain ``numpy.ndarray`` values. Layers process minibatches with a
leading batch axis (``N, C, H, W`` for images, ``N, D`` for vectors); the
module-level functional helpers also accept single unbatched samples.

Every layer follows the same small contract::

    out = layer.forward(x, training=..., rng=...)
    dx = layer.backward(dout)      # fills layer.grads, same keys/shapes as params
"""

from __future__ import annotations

from typing import Callable, Iterable, Mapping, Sequence

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from .errors import ConfigError, NumericalError


def glorot_uniform(shape, fan_in, fan_out, rng, dtype=np.float64):
    limit = np.sqrt(6.0 / (fan_in + fan_out))
    return rng.uniform(-limit, limit, size=shape).astype(dtype)


def as_generator(rng_state) -> np.random.Generator:
    """Turn an int seed, seed sequence or Generator into a Generator."""
    if isinstance(rng_state, np.random.Generator):
        return rng_state
    return np.random.default_rng(rng_state)


# ---------------------------------------------------------------------------
# im2col helpers
# ---------------------------------------------------------------------------


def im2col(x: np.ndarray, k: int) -> np.ndarray:
    """(N, C, H, W) -> (N*oh*ow, k*k*C) patch matrix for a valid k x k conv.

    Patch entries are ordered (dy, dx, channel) so the channel axis stays
    innermost; this keeps both the gather and the scatter-add contiguous.
    """
    n, c, h, w = x.shape
    oh, ow = h - k + 1, w - k + 1
    nhwc = np.ascontiguousarray(x.transpose(0, 2, 3, 1))
    win = sliding_window_view(nhwc, (k, k), axis=(1, 2))  # N, oh, ow, C, k, k
    return np.ascontiguousarray(win.transpose(0, 1, 2, 4, 5, 3)).reshape(n * oh * ow, k * k * c)


def col2im(cols: np.ndarray, x_shape, k: int) -> np.ndarray:
    """Adjoint of :func:`im2col`: scatter-add patch gradients back to the input."""
    n, c, h, w = x_shape
    oh, ow = h - k + 1, w - k + 1
    cols = cols.reshape(n, oh, ow, k, k, c)
    dx = np.zeros((n, h, w, c), dtype=cols.dtype)
    for dy in range(k):
        for dx_ in range(k):
            dx[:, dy:dy + oh, dx_:dx_ + ow, :] += cols[:, :, :, dy, dx_, :]
    return dx.transpose(0, 3, 1, 2)


def conv_output_shape(in_shape, in_ch, out_ch, k, pad=0, name=""):
    c, h, w = in_shape
    name = name or "conv"
    if c != in_ch:
        raise ConfigError(f"{name}: input has {c} channels, kernel expects {in_ch}")
    oh, ow = h + 2 * pad - k + 1, w + 2 * pad - k + 1
    if oh < 1 or ow < 1:
        raise ConfigError(f"{name}: input {h}x{w} smaller than kernel {k} (pad {pad})")
    return (out_ch, oh, ow)


# ---------------------------------------------------------------------------
# Layers
# ---------------------------------------------------------------------------


class Layer:
    """Base class. Stateless layers simply keep ``params`` empty."""

    def __init__(self, name: str = ""):
        self.name = name
        self.params: dict[str, np.ndarray] = {}
        self.grads: dict[str, np.ndarray] = {}

    def forward(self, x, training=False, rng=None):
        raise NotImplementedError

    def backward(self, dout):
        raise NotImplementedError

    def __repr__(self):
        shapes = {k: v.shape for k, v in self.params.items()}
        return f"{type(self).__name__}({self.name!r}, {shapes})"


class Conv2D(Layer):
    """Stride-1 convolution with optional symmetric zero padding.

    kernel: [out_ch, in_ch, k, k], bias: [out_ch].
    """

    def __init__(self, in_ch, out_ch, k, pad=0, name="", rng=None, dtype=np.float64):
        super().__init__(name)
        rng = as_generator(rng)
        self.in_ch, self.out_ch, self.k, self.pad = in_ch, out_ch, k, pad
        self.params["kernel"] = glorot_uniform(
            (out_ch, in_ch, k, k), in_ch * k * k, out_ch * k * k, rng, dtype
        )
        self.params["bias"] = np.zeros(out_ch, dtype=dtype)
        self._cache = None

    def output_shape(self, in_shape):
        return conv_output_shape(in_shape, self.in_ch, self.out_ch, self.k, self.pad, self.name)

    def _kernel_matrix(self):
        # [out, in, k, k] -> [out, k*k*in], matching the im2col patch order
        return self.params["kernel"].transpose(0, 2, 3, 1).reshape(self.out_ch, -1)

    def forward(self, x, training=False, rng=None):
        n = x.shape[0]
        _, oh, ow = self.output_shape(x.shape[1:])
        if self.pad:
            p = self.pad
            x = np.pad(x, ((0, 0), (0, 0), (p, p), (p, p)))
        cols = im2col(x, self.k)
        out = cols @ self._kernel_matrix().T + self.params["bias"]
        self._cache = (cols, x.shape)
        return out.reshape(n, oh, ow, self.out_ch).transpose(0, 3, 1, 2)

    def backward(self, dout):
        cols, xp_shape = self._cache
        d2 = dout.transpose(0, 2, 3, 1).reshape(-1, self.out_ch)
        self.grads["bias"] = d2.sum(axis=0)
        k = self.k
        dk = (d2.T @ cols).reshape(self.out_ch, k, k, self.in_ch)
        self.grads["kernel"] = np.ascontiguousarray(dk.transpose(0, 3, 1, 2))
        dcols = d2 @ self._kernel_matrix()
        dx = col2im(dcols, xp_shape, self.k)
        if self.pad:
            p = self.pad
            dx = dx[:, :, p:-p, p:-p]
        return dx


class MaxPool2(Layer):
    """2x2 max pooling, stride 2, floor semantics for odd extents.

    Gradient goes to the first maximum of each window in row-major order.
    """

    def __init__(self, name=""):
        super().__init__(name)
        self._cache = None

    @staticmethod
    def output_shape(in_shape):
        c, h, w = in_shape
        if h < 2 or w < 2:
            raise ConfigError(f"maxpool2 needs H, W >= 2, got {h}x{w}")
        return (c, h // 2, w // 2)

    def forward(self, x, training=False, rng=None):
        n, c, h, w = x.shape
        _, oh, ow = self.output_shape(x.shape[1:])
        win = x[:, :, : 2 * oh, : 2 * ow].reshape(n, c, oh, 2, ow, 2)
        win = win.transpose(0, 1, 2, 4, 3, 5).reshape(n, c, oh, ow, 4)
        idx = win.argmax(axis=-1)
        self._cache = (idx, x.shape)
        return np.take_along_axis(win, idx[..., None], axis=-1)[..., 0]

    def backward(self, dout):
        idx, x_shape = self._cache
        n, c, h, w = x_shape
        oh, ow = dout.shape[2:]
        dwin = np.zeros((n, c, oh, ow, 4), dtype=dout.dtype)
        np.put_along_axis(dwin, idx[..., None], dout[..., None], axis=-1)
        dwin = dwin.reshape(n, c, oh, ow, 2, 2).transpose(0, 1, 2, 4, 3, 5)
        dx = np.zeros(x_shape, dtype=dout.dtype)
        dx[:, :, : 2 * oh, : 2 * ow] = dwin.reshape(n, c, 2 * oh, 2 * ow)
        return dx


class Upsample2(Layer):
    """Nearest-neighbour 2x upsampling (decoder counterpart of MaxPool2)."""

    @staticmethod
    def output_shape(in_shape):
        c, h, w = in_shape
        return (c, 2 * h, 2 * w)

    def forward(self, x, training=False, rng=None):
        return x.repeat(2, axis=2).repeat(2, axis=3)

    def backward(self, dout):
        n, c, h, w = dout.shape
        return dout.reshape(n, c, h // 2, 2, w // 2, 2).sum(axis=(3, 5))


class Flatten(Layer):
    def __init__(self, name=""):
        super().__init__(name)
        self._shape = None

    def forward(self, x, training=False, rng=None):
        self._shape = x.shape
        return x.reshape(x.shape[0], -1)

    def backward(self, dout):
        return dout.reshape(self._shape)


class Dense(Layer):
    """Fully connected layer, weight: [out_dim, in_dim], bias: [out_dim]."""

    def __init__(self, in_dim, out_dim, name="", rng=None, dtype=np.float64):
        super().__init__(name)
        rng = as_generator(rng)
        self.in_dim, self.out_dim = in_dim, out_dim
        self.params["weight"] = glorot_uniform((out_dim, in_dim), in_dim, out_dim, rng, dtype)
        self.params["bias"] = np.zeros(out_dim, dtype=dtype)
        self._x = None

    def forward(self, x, training=False, rng=None):
        if x.shape[-1] != self.in_dim:
            raise ConfigError(
                f"{self.name or 'dense'}: input length {x.shape[-1]} != weight columns {self.in_dim}"
            )
        self._x = x
        return x @ self.params["weight"].T + self.params["bias"]

    def backward(self, dout):
        self.grads["weight"] = dout.T @ self._x
        self.grads["bias"] = dout.sum(axis=0)
        return dout @ self.params["weight"]


class ReLU(Layer):
    def __init__(self, name=""):
        super().__init__(name)
        self._mask = None

    def forward(self, x, training=False, rng=None):
        self._mask = x > 0
        return np.where(self._mask, x, 0.0).astype(x.dtype, copy=False)

    def backward(self, dout):
        return dout * self._mask


class Sigmoid(Layer):
    def __init__(self, name=""):
        super().__init__(name)
        self._out = None

    def forward(self, x, training=False, rng=None):
        self._out = sigmoid(x)
        return self._out

    def backward(self, dout):
        s = self._out
        return dout * s * (1.0 - s)


class Softmax(Layer):
    """Softmax over the last axis."""

    def __init__(self, name=""):
        super().__init__(name)
        self._out = None

    def forward(self, x, training=False, rng=None):
        self._out = softmax(x)
        return self._out

    def backward(self, dout):
        p = self._out
        return p * (dout - (dout * p).sum(axis=-1, keepdims=True))


class Dropout(Layer):
    """Inverted dropout: survivors are scaled by 1/(1-p) at train time."""

    def __init__(self, p, name=""):
        super().__init__(name)
        if not 0.0 <= p < 1.0:
            raise ConfigError(f"dropout probability must be in [0, 1), got {p}")
        self.p = p
        self._scale = None

    def forward(self, x, training=False, rng=None):
        if not training or self.p == 0.0:
            self._scale = None
            return x
        if rng is None:
            raise ConfigError("dropout in training mode needs an rng")
        keep = as_generator(rng).random(x.shape) >= self.p
        self._scale = keep.astype(x.dtype) / (1.0 - self.p)
        return x * self._scale

    def backward(self, dout):
        return dout if self._scale is None else dout * self._scale


class Concat(Layer):
    """Joins vector batches along the feature axis; backward splits at the same offsets."""

    def __init__(self, name=""):
        super().__init__(name)
        self._sizes: list[int] = []

    def forward(self, parts, training=False, rng=None):
        parts = list(parts)
        for p in parts:
            if p.ndim != 2:
                raise ConfigError(f"concat parts must be (N, D) batches, got shape {p.shape}")
        self._sizes = [p.shape[1] for p in parts]
        return np.concatenate(parts, axis=1)

    def backward(self, dout):
        offsets = np.cumsum(self._sizes)[:-1]
        return np.split(dout, offsets, axis=1)


class Sequential(Layer):
    """Chains layers; parameters are exposed as ``"<layer>.<param>"``."""

    def __init__(self, layers: Iterable[Layer], name=""):
        super().__init__(name)
        self.layers = list(layers)

    def forward(self, x, training=False, rng=None):
        for layer in self.layers:
            x = layer.forward(x, training=training, rng=rng)
        return x

    def forward_trace(self, x):
        """Eval-mode forward returning every intermediate activation."""
        acts = []
        for layer in self.layers:
            x = layer.forward(x)
            acts.append((layer, x))
        return acts

    def backward(self, dout):
        for layer in reversed(self.layers):
            dout = layer.backward(dout)
        return dout

    def named_params(self):
        for layer in self.layers:
            for k, v in layer.params.items():
                yield f"{layer.name}.{k}", v

    def named_grads(self):
        for layer in self.layers:
            for k, v in layer.grads.items():
                yield f"{layer.name}.{k}", v


# ---------------------------------------------------------------------------
# Functional forms (single samples or batches)
# ---------------------------------------------------------------------------


def _batched(x, ndim):
    x = np.asarray(x)
    return (x[None], True) if x.ndim == ndim else (x, False)


def conv2d_forward(x, params: Mapping[str, np.ndarray]) -> np.ndarray:
    """Valid stride-1 convolution of a [C,H,W] (or batched) input."""
    kernel, bias = np.asarray(params["kernel"]), np.asarray(params["bias"])
    f, c, k, k2 = kernel.shape
    if k != k2:
        raise ConfigError(f"kernel must be square, got {k}x{k2}")
    xb, single = _batched(x, 3)
    layer = Conv2D(c, f, k, dtype=kernel.dtype, rng=0)
    layer.params.update(kernel=kernel, bias=bias)
    out = layer.forward(xb)
    return out[0] if single else out


def maxpool2(x) -> np.ndarray:
    xb, single = _batched(x, 3)
    out = MaxPool2().forward(xb)
    return out[0] if single else out


def dense_forward(x, params: Mapping[str, np.ndarray]) -> np.ndarray:
    weight, bias = np.asarray(params["weight"]), np.asarray(params["bias"])
    xb, single = _batched(x, 1)
    layer = Dense(weight.shape[1], weight.shape[0], rng=0, dtype=weight.dtype)
    layer.params.update(weight=weight, bias=bias)
    out = layer.forward(xb)
    return out[0] if single else out


def relu(x):
    x = np.asarray(x)
    return np.maximum(x, 0.0).astype(x.dtype, copy=False) if x.dtype.kind == "f" else np.maximum(x, 0)


def sigmoid(x):
    x = np.asarray(x, dtype=np.result_type(x, np.float32))
    out = np.empty_like(x)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    e = np.exp(x[~pos])
    out[~pos] = e / (1.0 + e)
    return out


def softmax(x):
    """Softmax over the last axis, max-subtracted for stability."""
    x = np.asarray(x, dtype=np.result_type(x, np.float32))
    z = np.exp(x - x.max(axis=-1, keepdims=True))
    return z / z.sum(axis=-1, keepdims=True)


def dropout(x, p, rng_state=None, training=True):
    if not 0.0 <= p < 1.0:
        raise ConfigError(f"dropout probability must be in [0, 1), got {p}")
    x = np.asarray(x)
    if not training or p == 0.0:
        return x
    keep = as_generator(rng_state).random(x.shape) >= p
    return x * keep / (1.0 - p)


def concat(parts: Sequence[np.ndarray]) -> np.ndarray:
    parts = [np.asarray(p) for p in parts]
    for p in parts:
        if p.ndim != 1:
            raise ConfigError(f"concat expects vectors, got shape {p.shape}")
    return np.concatenate(parts)


# ---------------------------------------------------------------------------
# Gradient checking
# ---------------------------------------------------------------------------


def finite_diff_check(
    loss_and_grads: Callable[[], tuple[float, Mapping[str, np.ndarray]]],
    arrays: Mapping[str, np.ndarray],
    epsilon: float = 1e-5,
    per_array: bool = False,
):
    """Compare analytic gradients with central differences.

    ``loss_and_grads()`` evaluates the graph on the *current* contents of
    ``arrays`` (parameters and inputs alike, perturbed in place here) and
    returns ``(loss, {name: dloss/darray})``. The relative error of each
    entry is ``|a - n| / max(|a|, |n|, 1e-8)``; the maximum is returned
    (or a per-array dict when ``per_array`` is set).
    """
    loss, grads = loss_and_grads()
    if np.ndim(loss) != 0:
        raise ConfigError(f"graph must evaluate to a scalar loss, got shape {np.shape(loss)}")
    analytic = {k: np.array(grads[k], dtype=np.float64) for k in arrays}
    errors = {}
    for name, arr in arrays.items():
        flat = arr.reshape(-1)
        if not np.shares_memory(flat, arr):
            raise ConfigError(f"array {name!r} must be contiguous to perturb in place")
        numeric = np.empty(flat.size)
        for i in range(flat.size):
            orig = flat[i]
            flat[i] = orig + epsilon
            up = float(loss_and_grads()[0])
            flat[i] = orig - epsilon
            down = float(loss_and_grads()[0])
            flat[i] = orig
            numeric[i] = (up - down) / (2.0 * epsilon)
        a = analytic[name].reshape(-1)
        if not (np.all(np.isfinite(a)) and np.all(np.isfinite(numeric))):
            raise NumericalError(f"non-finite gradient for {name!r}")
        denom = np.maximum(np.maximum(np.abs(a), np.abs(numeric)), 1e-8)
        errors[name] = float(np.max(np.abs(a - numeric) / denom)) if a.size else 0.0
    if per_array:
        return errors
    return max(errors.values(), default=0.0)


def check_layer(layer: Layer, x: np.ndarray, seed=0, epsilon=1e-5, training=False) -> float:
    """Gradient-check one layer against a fixed random upstream weighting."""
    upstream = np.random.default_rng(seed).standard_normal(
        np.shape(layer.forward(x, training=training, rng=seed))
    )
    arrays = {"input": x, **{f"param.{k}": v for k, v in layer.params.items()}}

    def loss_and_grads():
        out = layer.forward(x, training=training, rng=seed)
        loss = float(np.sum(out * upstream))
        dx = layer.backward(upstream)
        grads = {"input": dx, **{f"param.{k}": g for k, g in layer.grads.items()}}
        return loss, grads

    return finite_diff_check(loss_and_grads, arrays, epsilon)
