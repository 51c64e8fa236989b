"""Adam updates and the seeded mini-batch training loop."""
from __future__ import annotations

import csv
import logging
from dataclasses import asdict, dataclass
from pathlib import Path
from typing import Callable, Sequence

import numpy as np

from .model import ClassifierModel, loss_gradients_probs, predict

__all__ = ["TrainConfig", "TrainingError", "adam_step", "train", "one_hot", "write_history_csv"]

logger = logging.getLogger(__name__)


class TrainingError(RuntimeError):
    pass


@dataclass
class TrainConfig:
    batch_size: int = 128
    epochs: int = 200
    learning_rate: float = 1e-3
    adam_beta1: float = 0.9
    adam_beta2: float = 0.999
    adam_eps: float = 1e-8
    seed: int = 0
    checkpoint_every: int = 0
    checkpoint_dir: str | None = None

    def __post_init__(self):
        if self.batch_size < 1:
            raise ValueError("batch_size must be >= 1")
        if self.epochs < 1:
            raise ValueError("epochs must be >= 1")
        if not self.learning_rate > 0:
            raise ValueError("learning_rate must be positive")


def one_hot(labels, k: int) -> np.ndarray:
    labels = np.asarray(labels, dtype=np.int64)
    out = np.zeros((labels.size, k))
    out[np.arange(labels.size), labels] = 1.0
    return out


def adam_step(model: ClassifierModel, grads: dict[str, np.ndarray], config: TrainConfig, t: int) -> ClassifierModel:
    """In-place bias-corrected Adam update for step ``t`` (1-based)."""
    if t < 1:
        raise ValueError("Adam step counter starts at 1")
    b1, b2 = config.adam_beta1, config.adam_beta2
    lr_t = config.learning_rate * np.sqrt(1.0 - b2 ** t) / (1.0 - b1 ** t)
    for key, g in grads.items():
        p = model.param(key)
        m = model.opt_m.get(key)
        if m is None:
            m = model.opt_m[key] = np.zeros_like(p)
            model.opt_v[key] = np.zeros_like(p)
        v = model.opt_v[key]
        m *= b1
        m += (1.0 - b1) * g
        v *= b2
        v += (1.0 - b2) * g * g
        # eps is scaled so the step equals lr * m_hat / (sqrt(v_hat) + eps) exactly
        p -= lr_t * m / (np.sqrt(v) + config.adam_eps * np.sqrt(1.0 - b2 ** t))
    model.opt_t = t
    return model


def train(model: ClassifierModel, train_images, train_labels, config: TrainConfig,
          callbacks: Sequence[Callable] = (), val_images=None, val_labels=None):
    """Mini-batch training; resumes from ``model.epochs_done``.

    Epoch ``e`` shuffles with ``default_rng([seed, e])`` and batch ``b`` draws
    its dropout masks from ``default_rng([seed, e, b])``, so a run resumed from
    a checkpoint continues bit-for-bit.  A callback returning True stops
    training after the current epoch.
    """
    from .checkpoint import save_model

    x = np.asarray(train_images, dtype=np.float64)
    y = np.asarray(train_labels, dtype=np.int64)
    if len(x) == 0:
        raise TrainingError("empty training set")
    k = model.num_classes
    if y.min() < 0 or y.max() >= k:
        raise TrainingError(f"labels must lie in 0..{k - 1}")
    targets = one_hot(y, k)
    history = []
    for epoch in range(model.epochs_done, config.epochs):
        order = np.random.default_rng([config.seed, epoch]).permutation(len(x))
        total_loss = 0.0
        correct = 0
        for b, start in enumerate(range(0, len(x), config.batch_size)):
            idx = order[start:start + config.batch_size]
            rng = np.random.default_rng([config.seed, epoch, b])
            loss, grads, probs = loss_gradients_probs(model, x[idx], targets[idx], training=True, rng=rng)
            if not np.isfinite(loss):
                raise TrainingError(f"non-finite loss at epoch {epoch + 1}, batch {b + 1}")
            adam_step(model, grads, config, model.opt_t + 1)
            total_loss += loss * len(idx)
            correct += int((probs.argmax(axis=1) == y[idx]).sum())
        model.epochs_done = epoch + 1
        record = {"epoch": epoch + 1, "loss": total_loss / len(x), "train_acc": correct / len(x)}
        if val_images is not None:
            pred, _ = predict(model, val_images)
            record["val_acc"] = float(np.mean(pred == np.asarray(val_labels)))
        history.append(record)
        logger.info("epoch %d loss %.5f acc %.4f", record["epoch"], record["loss"], record["train_acc"])
        if config.checkpoint_every and config.checkpoint_dir and model.epochs_done % config.checkpoint_every == 0:
            ckpt_dir = Path(config.checkpoint_dir)
            ckpt_dir.mkdir(parents=True, exist_ok=True)
            save_model(model, ckpt_dir / f"epoch_{model.epochs_done:04d}.fdnn")
        if any(cb(epoch + 1, record, model) for cb in callbacks):
            break
    return model, history


def write_history_csv(history, path) -> Path:
    path = Path(path)
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["epoch", "loss", "train_acc", "val_acc"])
        for r in history:
            val = r.get("val_acc")
            w.writerow([r["epoch"], repr(r["loss"]), repr(r["train_acc"]), "" if val is None else repr(val)])
    return path


def stop_at_accuracy(threshold: float):
    """Callback: stop once the epoch's training accuracy reaches ``threshold``."""

    def cb(epoch, record, model):
        return record["train_acc"] >= threshold

    return cb


def _config_dict(config: TrainConfig) -> dict:
    return asdict(config)
