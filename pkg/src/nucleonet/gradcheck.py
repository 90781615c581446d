"""Finite-difference checks for every layer, loss and full network variant."""

from __future__ import annotations

import numpy as np

from .autodiff import (
    Concat,
    Conv2D,
    Dense,
    Dropout,
    Flatten,
    MaxPool2,
    ReLU,
    Sigmoid,
    Softmax,
    Upsample2,
    check_layer,
    finite_diff_check,
)
from .losses import WeightMatrixSpec, bce_multilabel, ce_singlelabel, combined_loss, wmse
from .models import CAE, CNN, VARIANTS, ModelSpec

TOLERANCE = 1e-4
# Whole networks have input entries with gradients near 1e-7; at the default
# step the central difference's roundoff (about 1e-16 * |loss| / eps) is then
# a visible fraction of the entry, so network checks use a somewhat larger
# step, and biases are moved off zero so few units sit near a ReLU kink.
MODEL_EPSILON = 3e-5
SMALL_KERNELS = (3, 1, 1, 2, 1, 1)


def small_spec(variant: str) -> ModelSpec:
    """8x8 inputs, filter counts and dense widths divided by ten."""
    injected = 12 if variant in ("wf", "wfm") else 0
    return ModelSpec(
        variant=variant, input_shape=(3, 8, 8), injected_dim=injected, conv_kernels=SMALL_KERNELS
    ).scaled(10, scale_dense=True).validate()


def _layer_cases(rng):
    def img(*shape):
        return rng.standard_normal(shape)

    return [
        ("conv", Conv2D(3, 4, 3, rng=1), img(2, 3, 6, 6), False),
        ("conv_padded", Conv2D(3, 4, 3, pad=2, rng=2), img(2, 3, 5, 5), False),
        ("maxpool2", MaxPool2(), img(2, 3, 5, 6), False),
        ("upsample2", Upsample2(), img(2, 3, 3, 3), False),
        ("flatten", Flatten(), img(2, 3, 2, 2), False),
        ("dense", Dense(7, 5, rng=3), img(4, 7), False),
        ("relu", ReLU(), img(4, 7), False),
        ("sigmoid", Sigmoid(), img(4, 7), False),
        ("softmax", Softmax(), img(4, 7), False),
        ("dropout", Dropout(0.3), img(4, 7), True),
    ]


def _concat_case(rng):
    layer = Concat()
    a, b = rng.standard_normal((3, 4)), rng.standard_normal((3, 2))
    up = rng.standard_normal((3, 6))

    def lg():
        out = layer.forward([a, b])
        da, db = layer.backward(up)
        return float(np.sum(out * up)), {"a": da, "b": db}

    return finite_diff_check(lg, {"a": a, "b": b})


def _loss_cases(rng):
    x = rng.random((2, 3, 8, 8))
    r = rng.random((2, 3, 8, 8))
    ws = WeightMatrixSpec(8, 4, 5.0)
    p = rng.uniform(0.05, 0.95, (4, 6))
    y = (rng.random((4, 6)) < 0.5).astype(np.int64)
    logits = rng.standard_normal((4, 5))
    t = rng.integers(0, 5, 4)
    soft = Softmax()

    def wmse_lg():
        loss, g = wmse(x, r, ws)
        return loss, {"r": g}

    def bce_lg():
        loss, g = bce_multilabel(p, y)
        return loss, {"p": g}

    def ce_lg():
        q = soft.forward(logits)
        loss, g = ce_singlelabel(q, t)
        return loss, {"logits": soft.backward(g)}

    def combined_lg():
        q = soft.forward(logits)
        l_ml, g_ml = bce_multilabel(p, y)
        l_sl, g_sl = ce_singlelabel(q, t)
        mt = combined_loss(l_ml, l_sl, 0.6, g_ml, g_sl)
        return mt.total, {"p": mt.grad_ml, "logits": soft.backward(mt.grad_sl)}

    return [
        ("loss.wmse", finite_diff_check(wmse_lg, {"r": r})),
        ("loss.bce", finite_diff_check(bce_lg, {"p": p})),
        ("loss.ce", finite_diff_check(ce_lg, {"logits": logits})),
        ("loss.combined", finite_diff_check(combined_lg, {"p": p, "logits": logits})),
    ]


def _jitter_biases(params, rng):
    # zero-initialized biases put padded or all-zero patches exactly on the
    # ReLU kink, where central differences are meaningless
    for name, arr in params.items():
        if name.endswith(".bias"):
            arr[...] = rng.uniform(0.5, 1.0, arr.shape)


def check_variant(variant: str, seed=0) -> float:
    """Whole-network check (parameters and all three inputs) with its training loss."""
    from .training import Targets, batch_loss

    spec = small_spec(variant)
    net = CNN(spec, rng=seed, dtype=np.float64)
    rng = np.random.default_rng(seed + 1)
    _jitter_biases(net.params(), rng)
    n = 3
    images = rng.random((n, *spec.input_shape))
    feedback = rng.random((n, spec.feedback_dim))
    injected = rng.standard_normal((n, spec.injected_dim)) if spec.injected_dim else None
    shapes = np.array([0, 2, 5])
    attrs = (rng.random((n, spec.n_attr)) < 0.4).astype(np.int64)
    attrs[:, -1] = shapes == 5
    targets = Targets(attrs, shapes)
    arrays = {"images": images, "feedback": feedback, **net.params()}
    if injected is not None:
        net.fit_injection_stats(rng.standard_normal((8, spec.injected_dim)))
        arrays["injected"] = injected

    def lg():
        out = net.forward(images, feedback, injected, training=True, rng=seed)
        loss, dout = batch_loss(net, out, targets, 0.6)
        d_img, d_fb, d_inj = net.backward(dout)
        grads = {"images": d_img, "feedback": d_fb, **net.grads()}
        if injected is not None:
            grads["injected"] = d_inj
        return loss, grads

    return finite_diff_check(lg, arrays, epsilon=MODEL_EPSILON)


def check_cae(seed=0) -> float:
    spec = small_spec("default")
    cae = CAE(spec, rng=seed, dtype=np.float64)
    rng = np.random.default_rng(seed + 1)
    _jitter_biases(cae.params(), rng)
    x = rng.random((2, *spec.input_shape))
    ws = WeightMatrixSpec(8, 4, 5.0)

    def lg():
        loss, g = wmse(x, cae.forward(x), ws)
        cae.backward(g)
        return loss, cae.grads()

    return finite_diff_check(lg, cae.params(), epsilon=MODEL_EPSILON)


def run_all(seed=0):
    """List of (check name, max relative error)."""
    rng = np.random.default_rng(seed)
    results = []
    for name, layer, x, training in _layer_cases(rng):
        results.append((f"layer.{name}", check_layer(layer, x, seed=seed, training=training)))
    results.append(("layer.concat", _concat_case(rng)))
    results += _loss_cases(rng)
    for v in VARIANTS:
        results.append((f"model.{v}", check_variant(v, seed)))
    results.append(("model.cae", check_cae(seed)))
    return results
