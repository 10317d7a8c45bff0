"""Supervised baseline: the conv trunk with a sigmoid head, trained on BCE."""

from __future__ import annotations

import csv
import io
import logging
from dataclasses import dataclass
from pathlib import Path
from typing import Callable, Sequence

import numpy as np

from . import autodiff as ad
from .errors import DivergenceError
from .models import SdlNetwork, decide
from .phantom import Split
from .rl import EvalResult

log = logging.getLogger(__name__)

SDL_METRICS_HEADER = ("epoch", "loss", "train_accuracy")


@dataclass(frozen=True)
class SdlTrainConfig:
    epochs: int = 100
    batch: int = 24
    lr: float = 1e-4
    seed: int = 0

    def __post_init__(self):
        if self.epochs < 1:
            raise ValueError("epochs must be at least 1")


@dataclass
class EpochRow:
    epoch: int
    loss: float
    train_accuracy: float


@dataclass
class SdlResult:
    net: SdlNetwork
    history: list[EpochRow]


def train_sdl(train: Split, config: SdlTrainConfig = SdlTrainConfig(), net: SdlNetwork | None = None,
              on_epoch: Callable[[EpochRow], None] | None = None) -> SdlResult:
    """Mini-batch Adam on BCE; a fresh shuffle each epoch, partial last batch kept.

    ``loss`` per epoch is the sample-weighted mean batch loss seen during the
    epoch; ``train_accuracy`` comes from a clean pass after the epoch's updates.
    """
    if len(train) == 0:
        raise ValueError("training split is empty")
    rng = np.random.default_rng(config.seed)
    if net is None:
        net = SdlNetwork(train.volumes.shape[1:], seed=config.seed)
    opt = ad.AdamState(lr=config.lr)
    history = []
    n = len(train)
    for epoch in range(1, config.epochs + 1):
        order = rng.permutation(n)
        total = 0.0
        for lo in range(0, n, config.batch):
            idx = order[lo:lo + config.batch]
            net.zero_grad()
            loss = ad.bce_loss(net.forward(train.volumes[idx]), train.labels[idx])
            if not np.isfinite(loss.item()):
                raise DivergenceError(f"non-finite BCE loss at epoch {epoch}")
            loss.backward()
            ad.adam_step(net.params, opt)
            total += loss.item() * len(idx)
        acc = predict_sdl(net, train).accuracy
        row = EpochRow(epoch, total / n, acc)
        history.append(row)
        log.debug("epoch %d loss %.5f train acc %.3f", epoch, row.loss, acc)
        if on_epoch is not None:
            on_epoch(row)
    return SdlResult(net, history)


def predict_sdl(net: SdlNetwork, split: Split, chunk: int = 32) -> EvalResult:
    if len(split) == 0:
        raise ValueError("split is empty")
    probs = np.concatenate([net.probabilities(split.volumes[lo:lo + chunk])
                            for lo in range(0, len(split), chunk)])
    return EvalResult(list(split.ids), split.labels.copy(), decide(probs))


def sdl_metrics_csv(rows: Sequence[EpochRow]) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(SDL_METRICS_HEADER)
    for r in rows:
        w.writerow([r.epoch, repr(r.loss), repr(r.train_accuracy)])
    return buf.getvalue()


def write_sdl_metrics_csv(rows: Sequence[EpochRow], path: str | Path) -> None:
    Path(path).write_text(sdl_metrics_csv(rows))
