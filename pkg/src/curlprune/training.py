"""Supervised training and evaluation loops shared by the teacher and the fine-tuning arms."""

from __future__ import annotations

import json
import logging
from dataclasses import dataclass

import numpy as np

from . import tensor as T
from .augment import hflip, mixup, one_hot
from .data import Dataset, iterate_batches, normalize
from .nn import NetworkGraph
from .schedule import WarmupCosine
from .tensor import Tensor

logger = logging.getLogger(__name__)


def soft_cross_entropy(logits: Tensor, targets) -> Tensor:
    """Mean over rows of -sum(targets * log_softmax(logits))."""
    t = Tensor(np.asarray(targets), dtype=logits.dtype)
    n = logits.shape[0]
    return T.mul(T.sum_(T.mul(T.log_softmax(logits), t)), Tensor(np.array(-1.0 / n), dtype=logits.dtype))


def predict_logits(net: NetworkGraph, images: np.ndarray, batch_size: int = 128) -> np.ndarray:
    out = []
    with T.no_grad():
        for s in range(0, len(images), batch_size):
            out.append(net.forward(Tensor(images[s:s + batch_size], dtype=net.fc.weight.dtype), False).data)
    if not out:
        return np.zeros((0, net.class_count), dtype=np.float32)
    return np.concatenate(out)


def accuracy(net: NetworkGraph, dataset: Dataset, norm) -> float:
    """Top-1 accuracy in percent (eval mode)."""
    if len(dataset) == 0:
        return float("nan")
    logits = predict_logits(net, normalize(dataset.images, *norm))
    return 100.0 * float(np.mean(logits.argmax(axis=1) == dataset.labels))


@dataclass
class TrainConfig:
    epochs: int = 30
    lr: float = 0.05
    warmup_epochs: int = 5
    batch_size: int = 32
    momentum: float = 0.9
    weight_decay: float = 1e-4
    mixup_alpha: float = 1.0  # 0 disables mixup
    flip: bool = True
    seed: int = 0


class MetricsLog:
    """Append-only line-delimited JSON; also kept in memory."""

    def __init__(self, path=None):
        self.path = path
        self.rows: list[dict] = []

    def write(self, **row):
        self.rows.append(row)
        if self.path is not None:
            with open(self.path, "a", encoding="utf-8") as fh:
                fh.write(json.dumps(row, sort_keys=True) + "\n")
        logger.info("%s", row)


def train_supervised(net: NetworkGraph, train: Dataset, cfg: TrainConfig, norm, eval_set: Dataset | None = None,
                     log: MetricsLog | None = None, phase: str = "train") -> MetricsLog:
    """Cross-entropy training with optional mixup, warmup + cosine schedule, momentum SGD."""
    log = log if log is not None else MetricsLog()
    rng = np.random.default_rng([cfg.seed, 101])
    steps = len(list(iterate_batches(len(train), cfg.batch_size)))
    sched = WarmupCosine.for_epochs(cfg.lr, cfg.epochs, steps, cfg.warmup_epochs)
    params = [p for p in net.parameters() if p.trainable]
    x_all = normalize(train.images, *norm)
    y_all = one_hot(train.labels, train.class_count)
    step = 0
    for epoch in range(cfg.epochs):
        total, seen = 0.0, 0
        for idx in iterate_batches(len(train), cfg.batch_size, rng):
            x, y = x_all[idx], y_all[idx]
            if cfg.flip:
                x = hflip(x, rng)
            if cfg.mixup_alpha > 0:
                perm = rng.permutation(len(idx))
                m = mixup(x, y, x[perm], y[perm], cfg.mixup_alpha, rng)
                x, y = m.x, m.y
            loss = soft_cross_entropy(net.forward(Tensor(x), training=True), y)
            T.backward(loss)
            T.sgd_step(params, sched(step), cfg.momentum, cfg.weight_decay)
            step += 1
            total += float(loss.data) * len(idx)
            seen += len(idx)
        row = {"phase": phase, "epoch": epoch, "split": "train", "loss": total / max(seen, 1)}
        if eval_set is not None and (epoch == cfg.epochs - 1):
            row["accuracy"] = accuracy(net, eval_set, norm)
        log.write(**row)
    return log
