"""SGD with momentum and coupled L2 decay, plateau learning-rate schedule,
and the one-epoch training loop.
"""

from __future__ import annotations

from dataclasses import dataclass, replace

import numpy as np

from .errors import InputError, ParameterError, StateError
from .layers import softmax_log_loss
from .network import backward, forward


@dataclass(frozen=True)
class SgdConfig:
    lr0: float = 0.1
    momentum: float = 0.9
    weight_decay: float = 1e-3
    batch_size: int = 256
    lr_factor: float = 0.1
    patience: int = 1
    min_lr: float = 1e-5
    improvement_epsilon: float = 1e-4
    # L2 decay normally skips biases; flip to include them.
    weight_decay_biases: bool = False

    def __post_init__(self):
        if self.lr0 <= 0:
            raise ParameterError(f"lr0 must be > 0, got {self.lr0}")
        if not 0.0 <= self.momentum < 1.0:
            raise ParameterError(f"momentum must be in [0, 1), got {self.momentum}")
        if not 0.0 < self.lr_factor < 1.0:
            raise ParameterError(f"lr_factor must be in (0, 1), got {self.lr_factor}")
        if self.batch_size < 1:
            raise ParameterError(f"batch_size must be >= 1, got {self.batch_size}")
        if self.patience < 1:
            raise ParameterError(f"patience must be >= 1, got {self.patience}")
        if self.weight_decay < 0:
            raise ParameterError(f"weight_decay must be >= 0, got {self.weight_decay}")
        if self.min_lr < 0:
            raise ParameterError(f"min_lr must be >= 0, got {self.min_lr}")
        if self.improvement_epsilon < 0:
            raise ParameterError(
                f"improvement_epsilon must be >= 0, got {self.improvement_epsilon}")


@dataclass(frozen=True)
class OptState:
    """Velocity tensors for the trainable parameters plus schedule bookkeeping."""

    velocity: dict
    lr: float
    best_accuracy: float = float("-inf")
    epochs_since_improvement: int = 0
    epoch: int = 0


def init_state(params, mask, cfg: SgdConfig) -> OptState:
    """Zero velocities mirroring every trainable tensor; lr starts at lr0."""
    velocity = {}
    for name, tensors in params.items():
        if mask.get(name):
            velocity[name] = {t: np.zeros_like(a) for t, a in tensors.items()}
    return OptState(velocity=velocity, lr=cfg.lr0)


def sgd_step(params, grads, mask, state: OptState, cfg: SgdConfig):
    """One update: v <- mu*v - lr*(g + lambda*w); w <- w + v.

    Decay applies to weights only unless cfg.weight_decay_biases is set.
    Frozen tensors are passed through as the same objects, so they stay
    bit-identical no matter how many steps run.
    """
    trainable = {name for name in params if mask.get(name)}
    if set(grads) != trainable:
        raise StateError(
            f"gradients cover {sorted(grads)}, trainable layers are {sorted(trainable)}")
    lr = state.lr
    mu = cfg.momentum
    new_params, new_velocity = {}, {}
    for name, tensors in params.items():
        if name not in trainable:
            new_params[name] = tensors
            continue
        upd_t, upd_v = {}, {}
        for tname, w in tensors.items():
            g = grads[name].get(tname)
            if g is None:
                raise StateError(f"layer {name!r}: missing gradient for {tname!r}")
            lam = cfg.weight_decay if (tname == "weight" or cfg.weight_decay_biases) else 0.0
            v = mu * state.velocity[name][tname] - lr * (g + lam * w)
            upd_v[tname] = v
            upd_t[tname] = w + v
        new_params[name] = upd_t
        new_velocity[name] = upd_v
    return new_params, replace(state, velocity=new_velocity)


def plateau_update(state: OptState, epoch_val_accuracy: float, cfg: SgdConfig) -> OptState:
    """Divide lr by 1/lr_factor after `patience` epochs without improvement.

    Improvement means accuracy > best + improvement_epsilon. The lr never
    increases and never drops below min_lr.
    """
    if epoch_val_accuracy > state.best_accuracy + cfg.improvement_epsilon:
        return replace(state, best_accuracy=epoch_val_accuracy, epochs_since_improvement=0)
    stalled = state.epochs_since_improvement + 1
    if stalled >= cfg.patience:
        return replace(state, lr=max(state.lr * cfg.lr_factor, cfg.min_lr),
                       epochs_since_improvement=0)
    return replace(state, epochs_since_improvement=stalled)


def train_epoch(spec, params, mask, state: OptState, cfg: SgdConfig, train_batches, rng):
    """One pass over the batch stream: forward, loss, backward, sgd_step.

    Returns (params', state', mean per-example loss). The final short batch is
    processed like any other; the mean weights batches by true example count.
    """
    total_loss = 0.0
    total_n = 0
    for x, labels in train_batches:
        scores, caches = forward(spec, params, x, "train", rng)
        loss, _, _ = softmax_log_loss(scores, labels)
        grads = backward(spec, params, caches, labels, mask)
        params, state = sgd_step(params, grads, mask, state, cfg)
        n = x.shape[0]
        total_loss += loss * n
        total_n += n
    if total_n == 0:
        raise InputError("train_epoch received an empty batch stream")
    return params, replace(state, epoch=state.epoch + 1), total_loss / total_n
