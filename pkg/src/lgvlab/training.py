"""SGD training and LGV weight collection."""
from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Iterator

import numpy as np

from .data import Dataset
from .model import (Batch, InvalidArgument, ModelSpec, accuracy, check_weights, init_weights,
                    loss, loss_and_grad)


class TrainingDiverged(ArithmeticError):
    def __init__(self, epoch: int, value: float):
        super().__init__(f"training diverged at epoch {epoch} (loss={value})")
        self.epoch = epoch
        self.value = value


@dataclass(frozen=True)
class TrainConfig:
    epochs: int = 30
    lr: float = 0.1
    schedule: str = "constant"  # "constant" or "step"
    decay_factor: float = 0.1
    decay_every: int = 10
    momentum: float = 0.9
    batch_size: int = 32
    weight_decay: float = 1e-4
    seed: int = 0

    def __post_init__(self):
        if self.epochs < 1:
            raise InvalidArgument("epochs must be >= 1")
        if not 0 <= self.momentum < 1:
            raise InvalidArgument("momentum must lie in [0, 1)")
        if self.batch_size < 1:
            raise InvalidArgument("batch_size must be >= 1")
        if self.weight_decay < 0:
            raise InvalidArgument("weight_decay must be >= 0")
        if self.lr < 0:
            raise InvalidArgument("lr must be >= 0")
        if self.schedule not in ("constant", "step"):
            raise InvalidArgument(f"unknown lr schedule {self.schedule!r}")

    def lr_at(self, epoch: int) -> float:
        if self.schedule == "constant":
            return self.lr
        return self.lr * self.decay_factor ** (epoch // self.decay_every)


@dataclass(eq=False)
class WeightCollection:
    """K weight vectors of one model spec, stored as a (K, p) matrix in order."""
    spec: ModelSpec
    weights: np.ndarray
    meta: dict = field(default_factory=dict)

    def __post_init__(self):
        w = np.atleast_2d(np.asarray(self.weights, dtype=np.float64))
        if w.ndim != 2 or w.shape[0] < 1:
            raise InvalidArgument("a weight collection needs at least one vector")
        if w.shape[1] != self.spec.n_params:
            raise InvalidArgument(
                f"collection vectors have length {w.shape[1]}, spec expects {self.spec.n_params}")
        if not np.all(np.isfinite(w)):
            raise InvalidArgument("weight collection contains non-finite values")
        self.weights = w

    def __len__(self):
        return self.weights.shape[0]

    def __iter__(self):
        return iter(self.weights)

    def __getitem__(self, k):
        return self.weights[k]

    @classmethod
    def single(cls, spec, w, **meta) -> "WeightCollection":
        return cls(spec, check_weights(spec, w)[None, :], dict(meta))


def steps_per_epoch(n_train: int, batch_size: int) -> int:
    return math.ceil(n_train / batch_size)


def _sgd(spec: ModelSpec, train: Batch, w: np.ndarray, *, lr_at, epochs: int, momentum: float,
         batch_size: int, weight_decay: float, seed: int) -> Iterator[tuple[int, np.ndarray]]:
    """Yield (epoch, w) after every SGD step; the momentum buffer is never reset."""
    rng = np.random.default_rng(seed)
    w = np.array(w, dtype=np.float64)
    buf = np.zeros_like(w)
    n = len(train)
    for epoch in range(epochs):
        lr = lr_at(epoch)
        order = rng.permutation(n)
        for start in range(0, n, batch_size):
            mb = train.subset(order[start:start + batch_size])
            value, g = loss_and_grad(spec, w, mb)
            if not np.isfinite(value) or not np.all(np.isfinite(g)):
                raise TrainingDiverged(epoch, value)
            buf = momentum * buf + g
            w = w - lr * (buf + weight_decay * w)
            if not np.all(np.isfinite(w)):
                raise TrainingDiverged(epoch, float("nan"))
            yield epoch, w


def train(spec: ModelSpec, data: Dataset, cfg: TrainConfig, w_init=None,
          log: list | None = None) -> np.ndarray:
    """Minibatch SGD with momentum; returns the final weights.

    When ``log`` is a list, one dict per epoch (epoch, train_loss,
    val_accuracy) is appended to it.
    """
    w = init_weights(spec, cfg.seed) if w_init is None else check_weights(spec, w_init).copy()
    spe = steps_per_epoch(len(data.train), cfg.batch_size)
    step = 0
    for epoch, w in _sgd(spec, data.train, w, lr_at=cfg.lr_at, epochs=cfg.epochs,
                         momentum=cfg.momentum, batch_size=cfg.batch_size,
                         weight_decay=cfg.weight_decay, seed=cfg.seed):
        step += 1
        if log is not None and step % spe == 0:
            log.append({"epoch": epoch + 1, "train_loss": loss(spec, w, data.train),
                        "val_accuracy": accuracy(spec, w, data.val)})
    return w


def collect_lgv(spec: ModelSpec, data: Dataset, w0, n_epochs: int = 10, K: int = 40,
                lr: float = 0.05, momentum: float = 0.9, seed: int = 0, *,
                batch_size: int = 32, weight_decay: float = 1e-4) -> WeightCollection:
    """Constant learning-rate SGD from ``w0``, snapshotting K times at equal step intervals.

    The total budget is n_epochs * ceil(n_train / batch_size) steps; snapshot
    i (1-based) is taken after floor(i * total / K) steps.
    """
    if K < 1 or n_epochs < 1 or not lr > 0:
        raise InvalidArgument("collect_lgv needs K >= 1, n_epochs >= 1 and lr > 0")
    w0 = check_weights(spec, w0)
    total = n_epochs * steps_per_epoch(len(data.train), batch_size)
    boundaries = [(i * total) // K for i in range(1, K + 1)]
    snaps = []
    # duplicate boundaries (K > total) repeat the same snapshot
    pending = iter(boundaries)
    nxt = next(pending)
    while nxt == 0:
        snaps.append(w0.copy())
        nxt = next(pending, None)
    step = 0
    for _, w in _sgd(spec, data.train, w0, lr_at=lambda _e: lr, epochs=n_epochs,
                     momentum=momentum, batch_size=batch_size, weight_decay=weight_decay,
                     seed=seed):
        step += 1
        while nxt is not None and step == nxt:
            snaps.append(w.copy())
            nxt = next(pending, None)
    meta = {"lr": lr, "epochs": n_epochs, "samples_per_epoch": K / n_epochs,
            "momentum": momentum, "batch_size": batch_size, "weight_decay": weight_decay,
            "seed": seed, "steps": total}
    return WeightCollection(spec, np.stack(snaps), meta)


def swa(coll: WeightCollection) -> np.ndarray:
    """Coordinate-wise mean of the collected weights."""
    if coll.weights.shape[1] != coll.spec.n_params:
        raise InvalidArgument("collection does not match its model spec")
    return coll.weights.mean(axis=0)
