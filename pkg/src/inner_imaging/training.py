"""SGD with Nesterov momentum, step learning-rate schedule, and the epoch loop."""

from __future__ import annotations

import json
import time
from dataclasses import asdict, dataclass
from pathlib import Path
from typing import Callable

import numpy as np

from .nn import Module
from .tensor import NonFiniteError, Tensor, cross_entropy, no_grad

__all__ = [
    "TrainConfig",
    "TrainingAborted",
    "SGD",
    "lr_at",
    "train_step",
    "evaluate",
    "Trainer",
]


class TrainingAborted(RuntimeError):
    def __init__(self, message: str, checkpoint: str | None = None):
        super().__init__(message if checkpoint is None else f"{message} (last good checkpoint: {checkpoint})")
        self.checkpoint = checkpoint


@dataclass(frozen=True)
class TrainConfig:
    epochs: int = 400
    batch_size: int = 128
    base_lr: float = 0.1
    momentum: float = 0.9
    nesterov: bool = True
    lr_drops: tuple[float, ...] = (0.5, 0.75, 0.9)
    weight_decay: float = 5e-4
    seed: int = 0
    augment: str = "flip_translate"

    def __post_init__(self):
        drops = tuple(self.lr_drops)
        if any(not 0 < f < 1 for f in drops) or any(b <= a for a, b in zip(drops, drops[1:])):
            raise ValueError(f"lr drop fractions must be strictly increasing in (0,1), got {drops}")
        if self.epochs < 1 or self.batch_size < 1:
            raise ValueError("epochs and batch_size must be positive")

    def to_dict(self) -> dict:
        d = asdict(self)
        d["lr_drops"] = list(self.lr_drops)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "TrainConfig":
        d = dict(d)
        d["lr_drops"] = tuple(d["lr_drops"])
        return cls(**d)


def lr_at(config: TrainConfig, epoch: int) -> float:
    """Base rate divided by 10 for every drop point already reached."""
    if not 0 <= epoch < config.epochs:
        raise ValueError(f"epoch {epoch} outside [0, {config.epochs})")
    k = sum(1 for f in config.lr_drops if epoch >= int(np.floor(f * config.epochs)))
    return config.base_lr * 10.0 ** (-k)


class SGD:
    """``v = mu*v + g + wd*p``; Nesterov steps along ``g + wd*p + mu*v``."""

    def __init__(self, params, lr: float = 0.1, momentum: float = 0.9, nesterov: bool = True, weight_decay: float = 0.0):
        self.params = list(params)
        self.lr, self.momentum, self.nesterov, self.weight_decay = lr, momentum, nesterov, weight_decay
        self.velocity = [np.zeros_like(p.data) for p in self.params]

    def step(self) -> None:
        for p, v in zip(self.params, self.velocity):
            if p.grad is None:
                continue
            g = p.grad
            if self.weight_decay and getattr(p, "decay", True):
                g = g + self.weight_decay * p.data
            if self.momentum:
                v *= self.momentum
                v += g
                g = g + self.momentum * v if self.nesterov else v
            p.data -= self.lr * g

    def zero_grad(self) -> None:
        for p in self.params:
            p.grad = None

    def state(self) -> list[np.ndarray]:
        return self.velocity

    def load_state(self, velocity: list[np.ndarray]) -> None:
        if len(velocity) != len(self.velocity):
            raise ValueError("optimizer state does not match the parameter list")
        for dst, src in zip(self.velocity, velocity):
            dst[...] = src


def train_step(net: Module, images: np.ndarray, labels: np.ndarray, optimizer: SGD) -> tuple[float, np.ndarray]:
    """One forward/backward/update; returns the loss and the batch logits."""
    net.train()
    optimizer.zero_grad()
    logits = net(Tensor(images))
    loss = cross_entropy(logits, labels)
    value = float(loss.data)
    if not np.isfinite(value):
        raise TrainingAborted(f"non-finite training loss {value}")
    loss.backward()
    optimizer.step()
    return value, logits.data


def predict(logits: np.ndarray) -> np.ndarray:
    # np.argmax returns the first maximum, so ties go to the lowest class index
    return np.argmax(logits, axis=1)


def evaluate(net: Module, images: np.ndarray, labels: np.ndarray, batch_size: int = 256) -> dict:
    """Top-1 accuracy and mean cross-entropy in eval mode."""
    if len(labels) == 0:
        raise ValueError("cannot evaluate on an empty dataset")
    net.eval()
    correct, total_loss = 0, 0.0
    with no_grad():
        for lo in range(0, len(labels), batch_size):
            x, y = images[lo:lo + batch_size], labels[lo:lo + batch_size]
            logits = net(Tensor(x))
            total_loss += float(cross_entropy(logits, y).data) * len(y)
            correct += int(np.sum(predict(logits.data) == y))
    return {"accuracy": correct / len(labels), "loss": total_loss / len(labels)}


class Trainer:
    """Epoch loop with a seeded shuffle/augmentation stream and resumable state.

    ``augment`` is a callable ``(batch, rng) -> batch``. After each epoch the
    ``on_epoch_end`` callback receives the trainer, e.g. to write a checkpoint.
    """

    def __init__(
        self,
        net: Module,
        config: TrainConfig,
        train_data: tuple[np.ndarray, np.ndarray],
        val_data: tuple[np.ndarray, np.ndarray] | None = None,
        augment: Callable[[np.ndarray, np.random.Generator], np.ndarray] | None = None,
        log_path: str | Path | None = None,
        on_epoch_end: Callable[["Trainer"], None] | None = None,
    ):
        self.net, self.config = net, config
        self.train_data, self.val_data = train_data, val_data
        self.augment = augment
        self.log_path = Path(log_path) if log_path else None
        self.on_epoch_end = on_epoch_end
        self.optimizer = SGD(
            net.parameters(), config.base_lr, config.momentum, config.nesterov, config.weight_decay
        )
        self.rng = np.random.default_rng(config.seed)
        self.epoch = 0
        self.history: list[dict] = []
        self.last_checkpoint: str | None = None

    def run_epoch(self) -> dict:
        cfg = self.config
        lr = lr_at(cfg, self.epoch)
        self.optimizer.lr = lr
        images, labels = self.train_data
        start = time.perf_counter()
        order = self.rng.permutation(len(labels))
        losses, correct = 0.0, 0
        for lo in range(0, len(order), cfg.batch_size):
            idx = order[lo:lo + cfg.batch_size]
            x = images[idx]
            if self.augment is not None:
                x = self.augment(x, self.rng)
            try:
                loss, logits = train_step(self.net, x, labels[idx], self.optimizer)
            except (TrainingAborted, NonFiniteError) as exc:
                msg = exc.args[0] if isinstance(exc, TrainingAborted) else str(exc)
                raise TrainingAborted(msg, self.last_checkpoint) from None
            losses += loss * len(idx)
            correct += int(np.sum(np.argmax(logits, axis=1) == labels[idx]))
        record = {
            "epoch": self.epoch,
            "lr": lr,
            "train_loss": losses / len(labels),
            "train_acc": correct / len(labels),
        }
        if self.val_data is not None:
            m = evaluate(self.net, *self.val_data)
            record["val_loss"], record["val_acc"] = m["loss"], m["accuracy"]
        else:
            record["val_loss"] = record["val_acc"] = None
        record["wall_ms"] = round((time.perf_counter() - start) * 1000.0, 3)
        self.epoch += 1
        self.history.append(record)
        if self.log_path is not None:
            with open(self.log_path, "a") as fh:
                fh.write(json.dumps(record) + "\n")
        if self.on_epoch_end is not None:
            self.on_epoch_end(self)
        return record

    def fit(self, until: int | None = None) -> list[dict]:
        stop = self.config.epochs if until is None else min(until, self.config.epochs)
        while self.epoch < stop:
            self.run_epoch()
        return self.history
