"""Adam optimization and the early-stopping training loop."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from ..errors import DataError, ParameterError
from .model import Model, ModelSpec, bce_loss, build_model, forward_batch, loss_and_gradients


@dataclass(frozen=True)
class TrainConfig:
    learning_rate: float = 1e-4
    adam_beta1: float = 0.9
    adam_beta2: float = 0.999
    adam_eps: float = 1e-8
    batch_size: int = 16
    max_epochs: int = 2500
    patience: int = 50
    seed: int = 0

    def __post_init__(self):
        if not (0.0 < self.adam_beta1 < 1.0 and 0.0 < self.adam_beta2 < 1.0):
            raise ParameterError("adam betas must lie in (0, 1)")
        if self.max_epochs < 1:
            raise ParameterError("max_epochs must be >= 1")
        if self.batch_size < 1 or self.patience < 1:
            raise ParameterError("batch_size and patience must be positive")


@dataclass
class AdamState:
    m: dict[str, np.ndarray] = field(default_factory=dict)
    v: dict[str, np.ndarray] = field(default_factory=dict)
    t: int = 0


def adam_step(params: dict[str, np.ndarray], grads: dict[str, np.ndarray],
              state: AdamState, config: TrainConfig):
    """One bias-corrected Adam update; params and state update in place and
    are returned for convenience."""
    b1, b2, eps = config.adam_beta1, config.adam_beta2, config.adam_eps
    state.t += 1
    t = state.t
    for k, g in grads.items():
        if k not in state.m:
            state.m[k] = np.zeros_like(params[k], dtype=np.float64)
            state.v[k] = np.zeros_like(params[k], dtype=np.float64)
        m, v = state.m[k], state.v[k]
        m *= b1
        m += (1.0 - b1) * g
        v *= b2
        v += (1.0 - b2) * np.square(g, dtype=np.float64)
        m_hat = m / (1.0 - b1 ** t)
        v_hat = v / (1.0 - b2 ** t)
        params[k] -= (config.learning_rate * m_hat / (np.sqrt(v_hat) + eps)).astype(params[k].dtype)
    return params, state


class EarlyStopper:
    """Patience counter over validation losses.

    update() returns True when training should stop: `patience` consecutive
    epochs without strict improvement over the best loss seen.
    """

    def __init__(self, patience: int):
        if patience < 1:
            raise ParameterError("patience must be >= 1")
        self.patience = patience
        self.best_loss = float("inf")
        self.best_epoch = 0
        self.since_best = 0

    def update(self, epoch: int, val_loss: float) -> bool:
        if val_loss < self.best_loss:
            self.best_loss = val_loss
            self.best_epoch = epoch
            self.since_best = 0
            return False
        self.since_best += 1
        return self.since_best >= self.patience


@dataclass
class TrainHistory:
    epochs: list[dict] = field(default_factory=list)
    stopped_epoch: int = 0
    best_epoch: int = 0
    best_val_loss: float = float("inf")

    def to_csv(self) -> str:
        lines = ["epoch,train_loss,val_loss"]
        for e in self.epochs:
            lines.append(f"{e['epoch']},{e['train_loss']!r},{e['val_loss']!r}")
        return "\n".join(lines) + "\n"


def _epoch_losses(model: Model, x: np.ndarray, y: np.ndarray, chunk: int = 256) -> float:
    total = 0.0
    for lo in range(0, len(x), chunk):
        probs, _, _ = forward_batch(model, x[lo : lo + chunk])
        total += bce_loss(probs, y[lo : lo + chunk]) * len(probs)
    return total / len(x)


def train_with_early_stopping(spec: ModelSpec,
                              train_set: tuple[np.ndarray, np.ndarray],
                              val_set: tuple[np.ndarray, np.ndarray],
                              config: TrainConfig,
                              l1_strength: float = 0.0):
    """Minibatch Adam training, stopping after `patience` epochs without
    validation-loss improvement and restoring the best parameters.

    All randomness (init, shuffling) flows from config.seed, so identical
    inputs give bitwise-identical models. Optional L1 on weight matrices
    (not biases) is added to the training gradients only.
    """
    x_train, y_train = train_set
    x_val, y_val = val_set
    if len(x_train) == 0 or len(x_val) == 0:
        raise DataError("training and validation sets must be non-empty")
    x_train = np.asarray(x_train, dtype=np.float32)
    x_val = np.asarray(x_val, dtype=np.float32)
    y_train = np.asarray(y_train, dtype=np.float32).reshape(-1)
    y_val = np.asarray(y_val, dtype=np.float32).reshape(-1)

    model = build_model(spec, seed=config.seed)
    shuffle_rng = np.random.default_rng([config.seed, 1])
    state = AdamState()
    history = TrainHistory()
    stopper = EarlyStopper(config.patience)
    best_params = model.copy_params()

    for epoch in range(1, config.max_epochs + 1):
        order = shuffle_rng.permutation(len(x_train))
        train_total = 0.0
        for lo in range(0, len(order), config.batch_size):
            idx = order[lo : lo + config.batch_size]
            xb, yb = x_train[idx], y_train[idx]
            probs, grads = loss_and_gradients(model, xb, yb)
            if l1_strength > 0.0:
                for k in grads:
                    if k.endswith(".w"):
                        grads[k] = grads[k] + l1_strength * np.sign(model.params[k])
            adam_step(model.params, grads, state, config)
            train_total += bce_loss(probs, yb) * len(idx)
        train_loss = train_total / len(order)
        val_loss = _epoch_losses(model, x_val, y_val)
        history.epochs.append({"epoch": epoch, "train_loss": train_loss, "val_loss": val_loss})
        improved = val_loss < stopper.best_loss
        stop = stopper.update(epoch, val_loss)
        if improved:
            best_params = model.copy_params()
        if stop:
            break
    history.best_epoch = stopper.best_epoch
    history.best_val_loss = stopper.best_loss
    history.stopped_epoch = history.epochs[-1]["epoch"]
    model.params = best_params
    return model, history
