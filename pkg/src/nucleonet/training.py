"""Optimizer, learning-rate schedule, CAE pretraining and two-cycle training."""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path
from typing import Optional

import numpy as np

from .checkpoint import Checkpoint, cae_checkpoint
from .errors import ConfigError, DataError, NumericalError
from .losses import WeightMatrixSpec, bce_multilabel, ce_singlelabel, combined_loss, wmse
from .models import CAE, CNN, FLAT_VARIANTS, VARIANTS, ModelSpec, predict

DEFAULT_LR = {"default": 5e-4, "w": 5e-4, "wf": 1e-4, "wfm": 1e-4}


# ---------------------------------------------------------------------------
# SGD with momentum
# ---------------------------------------------------------------------------


@dataclass
class OptimizerState:
    velocity: dict
    learning_rate: float
    momentum: float = 0.975

    def __post_init__(self):
        if not self.learning_rate > 0:
            raise ConfigError(f"learning rate must be positive, got {self.learning_rate}")
        if not 0.0 <= self.momentum < 1.0:
            raise ConfigError(f"momentum must be in [0, 1), got {self.momentum}")

    @classmethod
    def for_params(cls, params: dict, learning_rate: float, momentum: float = 0.975):
        return cls({k: np.zeros_like(v) for k, v in params.items()}, learning_rate, momentum)


def sgd_momentum_step(params: dict, grads: dict, state: OptimizerState, epoch=None, batch=None):
    """Classical momentum, in place: ``v <- mu*v - lr*g``, ``p <- p + v``."""
    where = f" (epoch {epoch}, batch {batch})" if epoch is not None else ""
    for name, p in params.items():
        g = grads[name]
        if g.shape != p.shape:
            raise ConfigError(f"{name}: gradient shape {g.shape} != parameter shape {p.shape}")
        if not np.all(np.isfinite(g)):
            raise NumericalError(f"non-finite gradient in {name}{where}")
        v = state.velocity.setdefault(name, np.zeros_like(p))
        v *= state.momentum
        v -= state.learning_rate * g
        p += v
    return params, state


class SGDMomentum:
    """Stateful wrapper that binds an optimizer state to one parameter dict."""

    def __init__(self, params: dict, learning_rate: float, momentum: float = 0.975):
        self.params = params
        self.state = OptimizerState.for_params(params, learning_rate, momentum)

    @property
    def learning_rate(self):
        return self.state.learning_rate

    @learning_rate.setter
    def learning_rate(self, value):
        if not value > 0:
            raise ConfigError(f"learning rate must be positive, got {value}")
        self.state.learning_rate = value

    def step(self, grads: dict, epoch=None, batch=None):
        sgd_momentum_step(self.params, grads, self.state, epoch, batch)


# ---------------------------------------------------------------------------
# Configuration
# ---------------------------------------------------------------------------


@dataclass
class ExperimentConfig:
    seed: int = 0
    split_fraction: float = 400 / 2078
    rounds: int = 5
    cae_epochs: int = 30
    cycle_epochs: int = 50
    lr: dict = field(default_factory=lambda: dict(DEFAULT_LR))
    cae_lr: float = 4e-6
    momentum: float = 0.975
    lr_decay: dict = field(default_factory=lambda: {"default": False, "w": False, "wf": False, "wfm": True})
    decay_every: int = 50
    decay_factor: float = 0.1
    w: float = 5.0
    c: int = 20
    m: float = 0.6
    batch_size: int = 32
    dtype: str = "float32"
    crop: int = 32
    feature_dim: int = 128
    filter_divisor: int = 1
    use_cae: bool = True

    def __post_init__(self):
        self.lr = {**DEFAULT_LR, **self.lr}
        self.lr_decay = {v: bool(self.lr_decay.get(v, v == "wfm")) for v in VARIANTS}

    def validate(self) -> "ExperimentConfig":
        if not 0.0 < self.split_fraction < 1.0:
            raise ConfigError(f"split_fraction must be in (0, 1), got {self.split_fraction}")
        for v, rate in self.lr.items():
            if v not in VARIANTS:
                raise ConfigError(f"lr: unknown variant {v!r}")
            if not rate > 0:
                raise ConfigError(f"lr.{v} must be positive, got {rate}")
        if not self.cae_lr > 0:
            raise ConfigError(f"cae_lr must be positive, got {self.cae_lr}")
        if not 0.0 <= self.momentum < 1.0:
            raise ConfigError(f"momentum must be in [0, 1), got {self.momentum}")
        if not 0.0 < self.decay_factor <= 1.0 or self.decay_every < 1:
            raise ConfigError("decay_factor must be in (0, 1] and decay_every >= 1")
        if not 0.0 <= self.m <= 1.0:
            raise ConfigError(f"m must be in [0, 1], got {self.m}")
        for name in ("rounds", "batch_size", "crop", "feature_dim", "filter_divisor"):
            if getattr(self, name) < 1:
                raise ConfigError(f"{name} must be >= 1")
        for name in ("cae_epochs", "cycle_epochs"):
            if getattr(self, name) < 0:
                raise ConfigError(f"{name} must be >= 0")
        if self.dtype not in ("float32", "float64"):
            raise ConfigError(f"dtype must be float32 or float64, got {self.dtype!r}")
        if self.seed < 0:
            raise ConfigError("seed must be non-negative")
        WeightMatrixSpec(self.crop, self.c, self.w)
        return self

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "ExperimentConfig":
        known = {f.name for f in fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise ConfigError(f"unknown config keys: {sorted(unknown)}")
        return cls(**d).validate()

    def cae_weight(self, variant: str) -> WeightMatrixSpec:
        """The default network pretrains with plain MSE; the others with WMSE."""
        return WeightMatrixSpec(self.crop, self.c, 1.0 if variant == "default" else self.w)

    def model_spec(self, variant: str) -> ModelSpec:
        injected = self.feature_dim if variant in ("wf", "wfm") else 0
        spec = ModelSpec(variant=variant, input_shape=(3, self.crop, self.crop), injected_dim=injected)
        if self.filter_divisor > 1:
            spec = spec.scaled(self.filter_divisor)
        return spec.validate()


def lr_schedule(epoch: int, config: ExperimentConfig, variant: str = "wfm") -> float:
    """Step decay by ``decay_factor`` every ``decay_every`` epochs when enabled."""
    if epoch < 0:
        raise ConfigError(f"epoch must be >= 0, got {epoch}")
    base = config.lr[variant]
    if not config.lr_decay.get(variant, False):
        return base
    return base * config.decay_factor ** (epoch // config.decay_every)


# ---------------------------------------------------------------------------
# Splitting
# ---------------------------------------------------------------------------


def split_dataset(manifest, seed: int, fraction: float, round_index: int = 0):
    """Seeded permutation; the last ceil(fraction * N) indices form the test set."""
    n = manifest if isinstance(manifest, (int, np.integer)) else len(manifest)
    if n < 2:
        raise DataError(f"need at least 2 records to split, got {n}")
    if not 0.0 < fraction < 1.0:
        raise ConfigError(f"split fraction must be in (0, 1), got {fraction}")
    n_test = min(n - 1, max(1, math.ceil(fraction * n - 1e-9)))
    perm = np.random.default_rng([seed, round_index]).permutation(n)
    return np.sort(perm[: n - n_test]), np.sort(perm[n - n_test:])


# ---------------------------------------------------------------------------
# Training loops
# ---------------------------------------------------------------------------


class EpochLog:
    """Tab-separated per-epoch log, flushed after every line."""

    def __init__(self, path=None):
        self.rows = []
        self._fh = None
        if path is not None:
            Path(path).parent.mkdir(parents=True, exist_ok=True)
            self._fh = open(path, "w")
            self._fh.write("epoch\tcycle\tlr\ttrain_loss\n")
            self._fh.flush()

    def write(self, epoch, cycle, lr, loss):
        self.rows.append((epoch, cycle, lr, loss))
        if self._fh:
            self._fh.write(f"{epoch}\t{cycle}\t{lr:.10g}\t{loss:.10g}\n")
            self._fh.flush()

    def close(self):
        if self._fh:
            self._fh.close()
            self._fh = None


def _check_loss(loss, what, epoch, batch):
    if not math.isfinite(loss):
        raise NumericalError(f"{what} loss is {loss} at epoch {epoch}, batch {batch}")


def pretrain_cae(images, spec: ModelSpec, config: ExperimentConfig, weight: WeightMatrixSpec,
                 round_index: int = 0, log_path=None, cae: Optional[CAE] = None):
    """Minimize the (weighted) reconstruction loss over minibatches.

    Returns ``(checkpoint, per-epoch mean losses)``. Initialization and batch
    order depend only on ``(seed, round_index)``, so runs with different
    ``weight`` differ in nothing but the loss.
    """
    images = np.asarray(images)
    if images.shape[0] == 0:
        raise DataError("cannot pretrain an autoencoder on an empty image set")
    dtype = np.dtype(config.dtype)
    images = images.astype(dtype, copy=False)
    if cae is None:
        cae = CAE(spec, rng=np.random.default_rng([config.seed, round_index, 101]), dtype=dtype)
    opt = SGDMomentum(cae.params(), config.cae_lr, config.momentum)
    log = EpochLog(log_path)
    losses = []
    n, bs = images.shape[0], config.batch_size
    try:
        for epoch in range(config.cae_epochs):
            order = np.random.default_rng([config.seed, round_index, 0, epoch]).permutation(n)
            total = 0.0
            for b, lo in enumerate(range(0, n, bs)):
                x = images[order[lo:lo + bs]]
                recon = cae.forward(x, training=True)
                loss, grad = wmse(x, recon, weight)
                _check_loss(loss, "reconstruction", epoch, b)
                cae.backward(grad.astype(dtype, copy=False))
                opt.step(cae.grads(), epoch, b)
                total += loss * x.shape[0]
            losses.append(total / n)
            log.write(epoch, 0, opt.learning_rate, losses[-1])
    finally:
        log.close()
    meta = {"epochs": config.cae_epochs, "w": weight.w, "c": weight.c, "seed": config.seed, "round": round_index}
    return cae_checkpoint(cae, meta), losses


@dataclass
class Targets:
    """Per-image supervision: 10 attribute flags and the shape class index."""

    attributes: np.ndarray
    shapes: np.ndarray

    def flat(self, spec: ModelSpec) -> np.ndarray:
        """Flat sigmoid targets: attributes then one-hot over the unshared shapes."""
        n = self.attributes.shape[0]
        n_own = spec.n_shape - spec.shared_labels
        onehot = np.zeros((n, spec.n_shape), dtype=np.int8)
        onehot[np.arange(n), self.shapes] = 1
        return np.concatenate([self.attributes, onehot[:, :n_own]], axis=1)

    def subset(self, idx):
        return Targets(self.attributes[idx], self.shapes[idx])

    @classmethod
    def from_manifest(cls, manifest):
        return cls(manifest.attribute_matrix(), manifest.shape_indices())


def batch_loss(net: CNN, out: dict, targets: Targets, m: float):
    """Loss value and output gradients for one batch."""
    spec = net.spec
    if spec.is_multitask:
        l_ml, g_ml = bce_multilabel(out["attr"], targets.attributes)
        l_sl, g_sl = ce_singlelabel(out["shape"], targets.shapes)
        mt = combined_loss(l_ml, l_sl, m, g_ml, g_sl)
        return mt.total, {"attr": mt.grad_ml, "shape": mt.grad_sl}
    loss, g = bce_multilabel(out["flat"], targets.flat(spec))
    return loss, {"flat": g}


def _run_cycle(net, opt, images, targets, feedback, injected, config, variant, cycle,
               epoch_offset, round_index, log):
    n, bs = images.shape[0], config.batch_size
    losses = []
    for e in range(config.cycle_epochs):
        epoch = epoch_offset + e
        opt.learning_rate = lr_schedule(epoch, config, variant)
        rng = np.random.default_rng([config.seed, round_index, cycle, epoch])
        order = rng.permutation(n)
        total = 0.0
        for b, lo in enumerate(range(0, n, bs)):
            idx = order[lo:lo + bs]
            out = net.forward(
                images[idx], feedback[idx], None if injected is None else injected[idx], training=True, rng=rng
            )
            loss, dout = batch_loss(net, out, targets.subset(idx), config.m)
            _check_loss(loss, "training", epoch, b)
            net.backward(dout)
            opt.step(net.grads(), epoch, b)
            total += loss * len(idx)
        losses.append(total / n)
        log.write(epoch, cycle, opt.learning_rate, losses[-1])
    return losses


@dataclass
class TrainResult:
    checkpoint: Checkpoint
    cycle1_losses: list
    cycle2_losses: list
    feedback: np.ndarray


def train_two_cycle(images, targets: Targets, net: CNN, config: ExperimentConfig, injected=None,
                    round_index: int = 0, log_path=None) -> TrainResult:
    """Cycle one with a zero feedback slot, then cycle two with frozen
    cycle-one probabilities, continuing from the cycle-one weights."""
    spec = net.spec
    variant = spec.variant
    images = np.asarray(images, dtype=net.dtype)
    n = images.shape[0]
    if n == 0:
        raise DataError("no training images")
    if targets.attributes.shape[0] != n or targets.shapes.shape[0] != n:
        raise DataError(f"{n} images but {targets.attributes.shape[0]} label rows")
    if spec.feedback_dim != spec.output_dim:
        raise ConfigError(
            f"feedback_dim {spec.feedback_dim} must equal the prediction width {spec.output_dim} for two-cycle training"
        )
    if spec.injected_dim > 0:
        if injected is None:
            raise ConfigError(f"variant {variant} needs injected features")
        injected = np.asarray(injected, dtype=net.dtype)
        net.fit_injection_stats(injected)
    else:
        injected = None

    opt = SGDMomentum(net.params(), config.lr[variant], config.momentum)
    log = EpochLog(log_path)
    try:
        zeros = np.zeros((n, spec.feedback_dim), dtype=net.dtype)
        c1 = _run_cycle(net, opt, images, targets, zeros, injected, config, variant, 1, 0, round_index, log)
        cycle1_state = {f"cycle1.{k}": v.copy() for k, v in net.state().items()}
        feedback = predict(net, images, injected).raw.astype(net.dtype)
        feedback.flags.writeable = False
        c2 = _run_cycle(
            net, opt, images, targets, feedback, injected, config, variant, 2, config.cycle_epochs, round_index, log
        )
    finally:
        log.close()
    tensors = {**cycle1_state, **{f"cycle2.{k}": v.copy() for k, v in net.state().items()}}
    meta = {
        "variant": variant,
        "round": round_index,
        "seed": config.seed,
        "cycle_epochs": config.cycle_epochs,
        "final_loss": [c1[-1] if c1 else None, c2[-1] if c2 else None],
    }
    return TrainResult(Checkpoint(spec, tensors, meta, "two_cycle"), c1, c2, feedback)


def predict_two_cycle(ckpt: Checkpoint, images, injected=None, batch_size=256):
    """Cycle-one network fills the feedback slot of the cycle-two network."""
    from .checkpoint import restore_cnn

    if ckpt.kind != "two_cycle":
        raise DataError(f"expected a two-cycle checkpoint, got kind {ckpt.kind!r}")
    first = restore_cnn(ckpt, prefix="cycle1.")
    second = restore_cnn(ckpt, prefix="cycle2.")
    fb = predict(first, images, injected, batch_size=batch_size).raw
    return predict(second, images, injected, feedback=fb, batch_size=batch_size)


def build_classifier(variant: str, config: ExperimentConfig, round_index: int = 0, cae_ckpt=None) -> CNN:
    from .models import transfer_weights

    if variant not in VARIANTS:
        raise ConfigError(f"variant must be one of {VARIANTS}, got {variant!r}")
    spec = config.model_spec(variant)
    net = CNN(spec, rng=np.random.default_rng([config.seed, round_index, 202]), dtype=np.dtype(config.dtype))
    if cae_ckpt is not None:
        transfer_weights(cae_ckpt.tensors, net)
    return net


__all__ = [
    "DEFAULT_LR",
    "FLAT_VARIANTS",
    "ExperimentConfig",
    "OptimizerState",
    "SGDMomentum",
    "Targets",
    "TrainResult",
    "build_classifier",
    "lr_schedule",
    "predict_two_cycle",
    "pretrain_cae",
    "sgd_momentum_step",
    "split_dataset",
    "train_two_cycle",
]
