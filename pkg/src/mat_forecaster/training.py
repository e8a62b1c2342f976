"""Training loop and evaluation: mini-batch Adam on the teacher-forced squared
error, per-epoch validation, early stopping, and MSE/MAE scoring of
autoregressive predictions (de-normalized to original units by default).
"""

from __future__ import annotations

import time
from dataclasses import dataclass, field

import numpy as np

from .errors import ConfigError, DataError, DimensionError, NumericError, TrainingError
from .numerics import AdamState, Tensor, adam_step, backward, zero_grads


@dataclass
class TrainConfig:
    batch_size: int = 16
    lr: float = 1e-4
    max_epochs: int = 10
    patience: int = 3
    seed: int = 0
    teacher_forcing: bool = True

    def validate(self):
        if self.batch_size < 1:
            raise ConfigError("batch_size must be >= 1")
        if self.max_epochs < 1:
            raise ConfigError("max_epochs must be >= 1")
        if not (0 <= self.patience <= self.max_epochs):
            raise ConfigError("patience must lie in [0, max_epochs]")
        if self.lr < 0:
            raise ConfigError("lr must be >= 0")
        return self


@dataclass
class Metrics:
    mse: float
    mae: float
    n: int


@dataclass
class EpochStats:
    epoch: int
    train_loss: float
    val_mse: float
    seconds: float


@dataclass
class TrainHistory:
    epochs: list = field(default_factory=list)
    best_epoch: int = -1

    def best_val_mse(self):
        return self.epochs[self.best_epoch].val_mse

    def to_rows(self):
        return [(e.epoch, e.train_loss, e.val_mse, e.seconds) for e in self.epochs]

    def write_csv(self, path):
        with open(path, "w", encoding="utf-8") as f:
            f.write("epoch,train_loss,val_mse,seconds\n")
            for epoch, loss, val, sec in self.to_rows():
                f.write(f"{epoch},{loss:.10g},{val:.10g},{sec:.3f}\n")


def mse_loss(pred, target):
    """Batch loss: mean over samples of the per-sample mean squared horizon error.

    For predictions shaped [m x T'] (trailing singleton channels are fine)
    this equals sum((pred - target)^2) / (m * T'), i.e. the plain mean over
    every scored entry.
    """
    pred = pred if isinstance(pred, Tensor) else Tensor(pred)
    target = target if isinstance(target, Tensor) else Tensor(target)
    if pred.shape != target.shape:
        raise DimensionError(f"loss shapes differ: {pred.shape} vs {target.shape}")
    diff = pred - target
    return (diff * diff).mean()


def predictions_and_targets(model, samples, normalizer=None, denormalize=True):
    """Autoregressive predictions and ground truth as [N x T'] arrays."""
    if not samples:
        raise DataError("cannot evaluate an empty split")
    preds = model.predict_batch(samples)
    actual = np.stack([np.asarray(s.y_future, dtype=np.float64) for s in samples])
    preds = preds.astype(np.float64)
    if normalizer is not None and denormalize:
        preds = normalizer.denormalize_target(preds)
        actual = normalizer.denormalize_target(actual)
    return preds, actual


def evaluate(model, samples, normalizer=None, denormalize=True) -> Metrics:
    """MSE/MAE over every horizon timepoint of every sample."""
    preds, actual = predictions_and_targets(model, samples, normalizer, denormalize)
    err = preds - actual
    n = err.size
    return Metrics(mse=float(np.mean(err**2)), mae=float(np.mean(np.abs(err))), n=n)


def per_step_metrics(model, samples, normalizer=None, denormalize=True):
    """[(step, Metrics)] for each horizon position, 1-based steps."""
    preds, actual = predictions_and_targets(model, samples, normalizer, denormalize)
    err = preds - actual
    out = []
    for k in range(err.shape[1]):
        col = err[:, k]
        out.append((k + 1, Metrics(mse=float(np.mean(col**2)),
                                   mae=float(np.mean(np.abs(col))), n=col.size)))
    return out


def train(model, train_samples, val_samples, config: TrainConfig, normalizer=None,
          denormalize_val=True):
    """Mini-batch Adam with early stopping on validation MSE.

    Batches are drawn with a fresh seeded permutation each epoch; the last
    short batch is kept. Stops once validation MSE has failed to improve for
    `patience` consecutive epochs (patience 0 stops after the first epoch).
    Returns (best-validation params, history); the live model is left holding
    the best parameters as well.
    """
    config.validate()
    if not train_samples:
        raise DataError("training split is empty")
    if not val_samples:
        raise DataError("validation split is empty")
    params = model.params.trainable()
    state = AdamState(lr=config.lr)
    history = TrainHistory()
    best_params = model.params.clone()
    best_val = float("inf")
    wait = 0
    dropout_on = getattr(model.config, "dropout", 0.0) > 0.0
    for epoch in range(config.max_epochs):
        t0 = time.perf_counter()
        order = np.random.default_rng([config.seed, epoch]).permutation(len(train_samples))
        total, count = 0.0, 0
        for bi, start in enumerate(range(0, len(order), config.batch_size)):
            batch = [train_samples[i] for i in order[start:start + config.batch_size]]
            rng = np.random.default_rng([config.seed, epoch, bi]) if dropout_on else None
            try:
                pred = model.forward_batch(batch, teacher_forcing=config.teacher_forcing,
                                           rng=rng)
                target = Tensor(np.stack(
                    [np.asarray(s.y_future, dtype=np.float32) for s in batch])[..., None])
                loss = mse_loss(pred, target)
                loss_val = float(loss.data)
                backward(loss)
            except NumericError as e:
                raise TrainingError(
                    f"training diverged at epoch {epoch}, batch {bi}: {e}",
                    epoch=epoch, batch=bi) from e
            grads = [p.grad if p.grad is not None else np.zeros_like(p.data) for p in params]
            adam_step(params, grads, state)
            zero_grads(params)
            total += loss_val * len(batch)
            count += len(batch)
        val = evaluate(model, val_samples, normalizer, denormalize_val)
        history.epochs.append(EpochStats(epoch=epoch, train_loss=total / count,
                                         val_mse=val.mse,
                                         seconds=time.perf_counter() - t0))
        if val.mse < best_val:
            best_val = val.mse
            best_params = model.params.clone()
            history.best_epoch = epoch
            wait = 0
        else:
            wait += 1
        if wait >= config.patience:
            break
    model.params.load_values(best_params)
    return best_params, history
