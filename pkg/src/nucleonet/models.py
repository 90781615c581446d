"""Network builders: the Default/W/WF/WFM classifiers and the convolutional autoencoder."""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field, replace
from typing import Optional

import numpy as np

from .autodiff import (
    Concat,
    Conv2D,
    Dense,
    Dropout,
    Flatten,
    Layer,
    MaxPool2,
    ReLU,
    Sequential,
    Sigmoid,
    Softmax,
    Upsample2,
    as_generator,
    conv_output_shape,
)
from .errors import ConfigError

VARIANTS = ("default", "w", "wf", "wfm")
FLAT_VARIANTS = ("default", "w", "wf")
CONV_NAMES = tuple(f"conv{i}" for i in range(1, 7))


@dataclass(frozen=True)
class ModelSpec:
    """Everything needed to rebuild a network.

    The conv stack is six valid convolutions with a 2x2 max-pool after the
    third and the sixth. ``feedback_dim`` defaults to the width of the
    network's own prediction vector so a second training cycle can feed the
    first cycle's probabilities back in.
    """

    variant: str = "default"
    input_shape: tuple = (3, 32, 32)
    n_attr: int = 10
    n_shape: int = 6
    shared_labels: int = 1
    injected_dim: int = 0
    feedback_dim: Optional[int] = None
    conv_channels: tuple = (80, 80, 120, 100, 140, 140)
    conv_kernels: tuple = (3, 3, 3, 3, 3, 3)
    trunk_dims: tuple = (400, 100)
    inject_hidden: int = 1000
    post_hidden: int = 100
    head_hidden: int = 100
    dropout: float = 0.05

    def __post_init__(self):
        for name in ("input_shape", "conv_channels", "conv_kernels", "trunk_dims"):
            object.__setattr__(self, name, tuple(int(v) for v in getattr(self, name)))
        if self.feedback_dim is None:
            object.__setattr__(self, "feedback_dim", self.output_dim)

    # -- derived sizes ----------------------------------------------------

    @property
    def is_multitask(self) -> bool:
        return self.variant == "wfm"

    @property
    def n_flat(self) -> int:
        """Distinct labels when attributes and shapes share one sigmoid layer."""
        return self.n_attr + self.n_shape - self.shared_labels

    @property
    def output_dim(self) -> int:
        return self.n_attr + self.n_shape if self.is_multitask else self.n_flat

    @property
    def concat_width(self) -> int:
        return self.trunk_dims[-1] + self.feedback_dim + self.injected_dim

    # -- validation ---------------------------------------------------------

    def validate(self) -> "ModelSpec":
        if self.variant not in VARIANTS:
            raise ConfigError(f"variant must be one of {VARIANTS}, got {self.variant!r}")
        if self.variant in ("wf", "wfm") and self.injected_dim <= 0:
            raise ConfigError(f"variant {self.variant} requires injected_dim > 0")
        if self.variant in ("default", "w") and self.injected_dim != 0:
            raise ConfigError(f"variant {self.variant} takes no injected features (injected_dim must be 0)")
        if self.is_multitask and self.n_shape < 2:
            raise ConfigError(f"wfm needs n_shape >= 2, got {self.n_shape}")
        if len(self.conv_channels) != 6 or len(self.conv_kernels) != 6:
            raise ConfigError("conv stack must list exactly six channel counts and six kernel sizes")
        if len(self.input_shape) != 3:
            raise ConfigError(f"input_shape must be [C, H, W], got {self.input_shape}")
        if not 0 <= self.shared_labels <= min(self.n_attr, self.n_shape):
            raise ConfigError("shared_labels must not exceed n_attr or n_shape")
        if self.feedback_dim < 0:
            raise ConfigError("feedback_dim must be >= 0")
        if not 0.0 <= self.dropout < 1.0:
            raise ConfigError(f"dropout must be in [0, 1), got {self.dropout}")
        if min(self.conv_channels + self.conv_kernels + self.trunk_dims) < 1:
            raise ConfigError("layer extents must be positive")
        self.conv_trace()  # raises on a shape that does not chain
        return self

    def conv_trace(self):
        """(name, output shape) for every conv/pool layer in order."""
        shape = tuple(self.input_shape)
        trace = []
        in_ch = shape[0]
        for i, (ch, k) in enumerate(zip(self.conv_channels, self.conv_kernels)):
            shape = conv_output_shape(shape, in_ch, ch, k, name=CONV_NAMES[i])
            trace.append((CONV_NAMES[i], shape))
            in_ch = ch
            if i in (2, 5):
                shape = MaxPool2.output_shape(shape)
                trace.append((f"pool{1 if i == 2 else 2}", shape))
        return trace

    @property
    def flat_features(self) -> int:
        return int(np.prod(self.conv_trace()[-1][1]))

    # -- helpers ------------------------------------------------------------

    def scaled(self, divisor: int, scale_dense: bool = False) -> "ModelSpec":
        """Copy with every conv filter count (and optionally dense width) divided."""
        div = lambda v: max(1, int(round(v / divisor)))
        kw = dict(conv_channels=tuple(div(c) for c in self.conv_channels))
        if scale_dense:
            kw.update(
                trunk_dims=tuple(div(v) for v in self.trunk_dims),
                inject_hidden=div(self.inject_hidden),
                post_hidden=div(self.post_hidden),
                head_hidden=div(self.head_hidden),
            )
        return replace(self, **kw)

    def to_dict(self) -> dict:
        d = asdict(self)
        for k, v in d.items():
            if isinstance(v, tuple):
                d[k] = list(v)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "ModelSpec":
        known = {f for f in cls.__dataclass_fields__}
        unknown = set(d) - known
        if unknown:
            raise ConfigError(f"unknown ModelSpec keys: {sorted(unknown)}")
        return cls(**d)

    def canonical_text(self) -> str:
        return json.dumps(self.to_dict(), sort_keys=True, separators=(",", ":"))


def default_spec(variant="default", injected_dim=None, **kw) -> ModelSpec:
    """Spec for a variant with the project's label universe (10 attributes, 6 shapes)."""
    if injected_dim is None:
        injected_dim = 128 if variant in ("wf", "wfm") else 0
    return ModelSpec(variant=variant, injected_dim=injected_dim, **kw).validate()


# ---------------------------------------------------------------------------
# Classifier
# ---------------------------------------------------------------------------


@dataclass
class PredictionVector:
    """Per-image scores split into the attribute block and the shape block.

    ``raw`` is what the network emits (and what is fed back in cycle two).
    For flat variants the shape block is assembled from the shape sigmoid
    outputs plus the shared label(s); for WFM it is the softmax simplex.
    """

    attributes: np.ndarray
    shapes: np.ndarray
    raw: np.ndarray = field(repr=False, default=None)


class CNN:
    """Conv trunk -> FC -> concat(trunk, feedback[, injected]) -> head(s)."""

    def __init__(self, spec: ModelSpec, rng=0, dtype=np.float64):
        self.spec = spec.validate()
        self.dtype = np.dtype(dtype)
        rng = as_generator(rng)
        s = spec
        layers: list[Layer] = [Dropout(s.dropout, name="dropout")]
        in_ch = s.input_shape[0]
        for i, (ch, k) in enumerate(zip(s.conv_channels, s.conv_kernels)):
            layers += [Conv2D(in_ch, ch, k, name=CONV_NAMES[i], rng=rng, dtype=dtype), ReLU()]
            in_ch = ch
            if i in (2, 5):
                layers.append(MaxPool2(name=f"pool{1 if i == 2 else 2}"))
        layers.append(Flatten())
        width = s.flat_features
        for j, h in enumerate(s.trunk_dims, start=1):
            layers += [Dense(width, h, name=f"fc{j}", rng=rng, dtype=dtype), ReLU()]
            width = h
        self.trunk = Sequential(layers, name="trunk")
        self.concat = Concat(name="concat")

        post: list[Layer] = []
        width = s.concat_width
        if s.injected_dim > 0:
            post += [Dense(width, s.inject_hidden, name="inject", rng=rng, dtype=dtype), ReLU()]
            width = s.inject_hidden
        post += [Dense(width, s.post_hidden, name="post", rng=rng, dtype=dtype), ReLU()]
        self.post = Sequential(post, name="post")

        if s.is_multitask:
            self.heads = {
                "attr": Sequential(
                    [
                        Dense(s.post_hidden, s.head_hidden, name="attr_hidden", rng=rng, dtype=dtype),
                        ReLU(),
                        Dense(s.head_hidden, s.n_attr, name="attr_out", rng=rng, dtype=dtype),
                        Sigmoid(),
                    ]
                ),
                "shape": Sequential(
                    [
                        Dense(s.post_hidden, s.head_hidden, name="shape_hidden", rng=rng, dtype=dtype),
                        ReLU(),
                        Dense(s.head_hidden, s.n_shape, name="shape_out", rng=rng, dtype=dtype),
                        Softmax(),
                    ]
                ),
            }
        else:
            self.heads = {
                "flat": Sequential([Dense(s.post_hidden, s.n_flat, name="out", rng=rng, dtype=dtype), Sigmoid()])
            }
        # standardization of injected features; identity until fitted
        self.buffers = {
            "inject_mean": np.zeros(s.injected_dim, dtype=dtype),
            "inject_std": np.ones(s.injected_dim, dtype=dtype),
        }

    # -- parameters -----------------------------------------------------------

    def _blocks(self):
        yield self.trunk
        yield self.post
        yield from self.heads.values()

    def params(self) -> dict[str, np.ndarray]:
        out = {}
        for block in self._blocks():
            out.update(block.named_params())
        return out

    def grads(self) -> dict[str, np.ndarray]:
        out = {}
        for block in self._blocks():
            out.update(block.named_grads())
        return out

    def state(self) -> dict[str, np.ndarray]:
        """Parameters plus non-trainable buffers, as stored in checkpoints."""
        return {**self.params(), **self.buffers}

    def load_state(self, state: dict[str, np.ndarray]):
        mine = self.state()
        missing = set(mine) - set(state)
        if missing:
            raise ConfigError(f"checkpoint lacks tensors: {sorted(missing)}")
        for name, arr in mine.items():
            src = np.asarray(state[name])
            if src.shape != arr.shape:
                raise ConfigError(f"{name}: checkpoint shape {src.shape} != model shape {arr.shape}")
            arr[...] = src
        return self

    def fit_injection_stats(self, features: np.ndarray):
        """Per-dimension mean/std from training-split features."""
        features = np.asarray(features, dtype=np.float64)
        std = features.std(axis=0)
        self.buffers["inject_mean"][...] = features.mean(axis=0)
        self.buffers["inject_std"][...] = np.where(std > 1e-12, std, 1.0)

    # -- forward/backward -----------------------------------------------------

    def forward(self, images, feedback, injected=None, training=False, rng=None):
        s = self.spec
        images = np.asarray(images, dtype=self.dtype)
        if images.ndim != 4 or tuple(images.shape[1:]) != tuple(s.input_shape):
            raise ConfigError(f"expected images of shape (N, {', '.join(map(str, s.input_shape))}), got {images.shape}")
        n = images.shape[0]
        feedback = np.asarray(feedback, dtype=self.dtype).reshape(n, -1)
        if feedback.shape[1] != s.feedback_dim:
            raise ConfigError(f"feedback has {feedback.shape[1]} entries, spec expects {s.feedback_dim}")
        parts = [self.trunk.forward(images, training=training, rng=rng), feedback]
        if s.injected_dim > 0:
            if injected is None:
                raise ConfigError(f"variant {s.variant} needs injected features (dim {s.injected_dim})")
            injected = np.asarray(injected, dtype=self.dtype).reshape(n, -1)
            if injected.shape[1] != s.injected_dim:
                raise ConfigError(f"injected features have dim {injected.shape[1]}, spec expects {s.injected_dim}")
            parts.append((injected - self.buffers["inject_mean"]) / self.buffers["inject_std"])
        h = self.post.forward(self.concat.forward(parts), training=training, rng=rng)
        return {k: head.forward(h, training=training, rng=rng) for k, head in self.heads.items()}

    def backward(self, dout: dict[str, np.ndarray]):
        """Backpropagate output gradients; returns input gradients
        ``(d_images, d_feedback, d_injected_raw)``."""
        dh = None
        for k, head in self.heads.items():
            g = head.backward(dout[k])
            dh = g if dh is None else dh + g
        dparts = self.concat.backward(self.post.backward(dh))
        d_images = self.trunk.backward(dparts[0])
        d_inj = dparts[2] / self.buffers["inject_std"] if len(dparts) > 2 else None
        return d_images, dparts[1], d_inj

    def to_prediction(self, out: dict[str, np.ndarray]) -> PredictionVector:
        s = self.spec
        if s.is_multitask:
            raw = np.concatenate([out["attr"], out["shape"]], axis=1)
            return PredictionVector(attributes=out["attr"], shapes=out["shape"], raw=raw)
        flat = out["flat"]
        attrs = flat[:, : s.n_attr]
        shapes = np.concatenate(
            [flat[:, s.n_attr:], flat[:, s.n_attr - s.shared_labels: s.n_attr]], axis=1
        )
        return PredictionVector(attributes=attrs, shapes=shapes, raw=flat)


def build_cnn(spec: ModelSpec, rng=0, dtype=np.float64) -> CNN:
    return CNN(spec, rng=rng, dtype=dtype)


def predict(net: CNN, images, injected=None, feedback=None, batch_size=256) -> PredictionVector:
    """Eval-mode prediction; ``feedback=None`` means the zero (cycle-one) slot."""
    images = np.asarray(images)
    if images.ndim == 3:
        images = images[None]
    n = images.shape[0]
    if feedback is None:
        feedback = np.zeros((n, net.spec.feedback_dim), dtype=net.dtype)
    feedback = np.asarray(feedback).reshape(n, -1)
    if injected is not None:
        injected = np.asarray(injected).reshape(n, -1)
    elif net.spec.injected_dim > 0:
        raise ConfigError(f"variant {net.spec.variant} needs injected features")
    preds = []
    for lo in range(0, n, batch_size):
        hi = min(n, lo + batch_size)
        out = net.forward(
            images[lo:hi], feedback[lo:hi], None if injected is None else injected[lo:hi], training=False
        )
        preds.append(net.to_prediction(out))
    return PredictionVector(
        attributes=np.concatenate([p.attributes for p in preds]),
        shapes=np.concatenate([p.shapes for p in preds]),
        raw=np.concatenate([p.raw for p in preds]),
    )


def combine_predictions(wf_out: PredictionVector, wfm_out: PredictionVector) -> PredictionVector:
    """Attributes from the flat WF network, shapes from the multi-task WFM network."""
    if wf_out.attributes.shape != wfm_out.attributes.shape or wf_out.shapes.shape != wfm_out.shapes.shape:
        raise ConfigError(
            "label universes differ: "
            f"attrs {wf_out.attributes.shape} vs {wfm_out.attributes.shape}, "
            f"shapes {wf_out.shapes.shape} vs {wfm_out.shapes.shape}"
        )
    return PredictionVector(
        attributes=wf_out.attributes.copy(),
        shapes=wfm_out.shapes.copy(),
        raw=np.concatenate([wf_out.attributes, wfm_out.shapes], axis=1),
    )


# ---------------------------------------------------------------------------
# Autoencoder
# ---------------------------------------------------------------------------


def _stage_pads(start, target, kernels, final):
    """Zero-padding per conv so a stride-1 stage maps ``start`` to ``target``.

    Each conv grows the extent by ``2p - k + 1``. Intermediate stages may
    round the target up by one to fix parity; the final stage must hit it.
    """
    base = start - sum(k - 1 for k in kernels)
    need = target - base
    if need % 2:
        if final:
            raise ConfigError(f"decoder cannot map {start} -> {target} with kernels {kernels}")
        need += 1
    if need < 0:
        if final:
            raise ConfigError(f"decoder cannot shrink {start} -> {target} with kernels {kernels}")
        need = 0
    total = need // 2
    n = len(kernels)
    return [total // n + (1 if i < total % n else 0) for i in range(n)]


class CAE:
    """Encoder = the classifier's conv/pool stack; decoder mirrors it in reverse
    with nearest-neighbour upsampling and padded convolutions, ending in a
    linear conv that reconstructs the input channels."""

    def __init__(self, spec: ModelSpec, rng=0, dtype=np.float64):
        spec.validate()
        self.spec = spec
        self.dtype = np.dtype(dtype)
        rng = as_generator(rng)
        chans, kernels = spec.conv_channels, spec.conv_kernels
        c_in, h, w = spec.input_shape
        if h != w:
            raise ConfigError("autoencoder expects square inputs")
        enc: list[Layer] = []
        prev = c_in
        for i, (ch, k) in enumerate(zip(chans, kernels)):
            enc += [Conv2D(prev, ch, k, name=CONV_NAMES[i], rng=rng, dtype=dtype), ReLU()]
            prev = ch
            if i in (2, 5):
                enc.append(MaxPool2(name=f"pool{1 if i == 2 else 2}"))
        self.encoder = Sequential(enc, name="encoder")

        trace = dict(spec.conv_trace())
        stage_in = [h, trace["pool1"][1]]  # spatial extent entering each encoder stage
        size = trace["pool2"][1]
        all_in = (c_in,) + chans[:-1]
        dec: list[Layer] = []
        idx = 1
        for stage, (lo, final) in enumerate(((3, False), (0, True))):
            convs = list(range(lo + 2, lo - 1, -1))  # mirror: 6,5,4 then 3,2,1
            size *= 2
            dec.append(Upsample2(name=f"up{stage + 1}"))
            pads = _stage_pads(size, stage_in[1 - stage], [kernels[j] for j in convs], final)
            for j, p in zip(convs, pads):
                out_ch = all_in[j]
                dec.append(Conv2D(chans[j], out_ch, kernels[j], pad=p, name=f"deconv{idx}", rng=rng, dtype=dtype))
                size = size + 2 * p - kernels[j] + 1
                if not (final and j == 0):
                    dec.append(ReLU())
                idx += 1
        self.decoder = Sequential(dec, name="decoder")
        if size != h:
            raise ConfigError(f"autoencoder round trip gives {size}x{size}, expected {h}x{h}")

    def params(self):
        return {**dict(self.encoder.named_params()), **dict(self.decoder.named_params())}

    def grads(self):
        return {**dict(self.encoder.named_grads()), **dict(self.decoder.named_grads())}

    def state(self):
        return self.params()

    def load_state(self, state):
        for name, arr in self.params().items():
            if name not in state:
                raise ConfigError(f"checkpoint lacks tensor {name}")
            src = np.asarray(state[name])
            if src.shape != arr.shape:
                raise ConfigError(f"{name}: checkpoint shape {src.shape} != model shape {arr.shape}")
            arr[...] = src
        return self

    def encode(self, x):
        return self.encoder.forward(np.asarray(x, dtype=self.dtype))

    def forward(self, x, training=False, rng=None):
        return self.decoder.forward(self.encode(x))

    def backward(self, drecon):
        return self.encoder.backward(self.decoder.backward(drecon))


def build_cae(spec: ModelSpec, rng=0, dtype=np.float64) -> CAE:
    return CAE(spec, rng=rng, dtype=dtype)


def transfer_weights(cae, cnn: CNN) -> CNN:
    """Copy the six encoder conv layers into the classifier.

    ``cae`` may be a :class:`CAE` or a name->tensor mapping (e.g. a loaded
    checkpoint's parameters). Dense and head layers are left untouched.
    """
    src = cae.params() if hasattr(cae, "params") and callable(cae.params) else dict(cae)
    dst = cnn.params()
    for name in CONV_NAMES:
        for part in ("kernel", "bias"):
            key = f"{name}.{part}"
            if key not in src:
                raise ConfigError(f"{name}: autoencoder has no {part}")
            if np.shape(src[key]) != dst[key].shape:
                raise ConfigError(
                    f"{name}: autoencoder {part} shape {np.shape(src[key])} != classifier {dst[key].shape}"
                )
            dst[key][...] = src[key]
    return cnn
