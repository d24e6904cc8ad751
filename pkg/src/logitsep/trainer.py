"""Minibatch SGD with a learning-rate grid, selected by validation accuracy."""

from __future__ import annotations

import csv
import logging
import math
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path
from typing import Optional, Sequence

import numpy as np

from . import autodiff as ad
from .data import BatchSampler, Dataset
from .errors import DomainError, NumericalError, TrainingDiverged, UsageError
from .losses import LogitMatrix, LossConfig, loss_dispatch
from .network import MlpModel, batchnorm_update, forward_all, forward_tape, init_mlp, save_model
from .pols import separation

log = logging.getLogger(__name__)

DEFAULT_LR_GRID = (1.0, 0.1, 0.01, 0.001)


@dataclass
class TrainConfig:
    loss: LossConfig = field(default_factory=LossConfig)
    batch_size: int = 64
    steps: int = 100_000
    learning_rates: tuple[float, ...] = DEFAULT_LR_GRID
    seed: int = 0
    hidden: tuple[int, ...] = (500, 500)
    checkpoint: Optional[str] = None
    log_every: int = 100
    probe_size: int = 256

    def __post_init__(self):
        if isinstance(self.loss, dict):
            self.loss = LossConfig.from_dict(self.loss)
        self.learning_rates = tuple(float(v) for v in self.learning_rates)
        self.hidden = tuple(int(h) for h in self.hidden)
        if self.steps < 1:
            raise DomainError(f"steps must be >= 1, got {self.steps}")
        if self.batch_size < 1:
            raise DomainError(f"batch size must be >= 1, got {self.batch_size}")
        if not self.learning_rates or any(not lr > 0 for lr in self.learning_rates):
            raise DomainError("learning rates must be a non-empty list of positive numbers")
        if self.log_every < 1 or self.probe_size < 1:
            raise DomainError("log_every and probe_size must be positive")

    def to_dict(self) -> dict:
        out = asdict(self)
        out["loss"] = self.loss.to_dict()
        out["learning_rates"] = list(self.learning_rates)
        out["hidden"] = list(self.hidden)
        return out


@dataclass
class TrainHistory:
    steps: list[int] = field(default_factory=list)
    loss: list[float] = field(default_factory=list)
    val_acc: list[float] = field(default_factory=list)
    probe_margin: list[float] = field(default_factory=list)

    def append(self, step: int, loss: float, val_acc: float, probe_margin: float) -> None:
        if self.steps and step <= self.steps[-1]:
            raise ValueError("history steps must be strictly increasing")
        self.steps.append(step)
        self.loss.append(loss)
        self.val_acc.append(val_acc)
        self.probe_margin.append(probe_margin)

    def rows(self):
        return zip(self.steps, self.loss, self.val_acc, self.probe_margin)

    def to_csv(self, path) -> None:
        with open(path, "w", newline="") as fh:
            writer = csv.writer(fh)
            writer.writerow(["step", "loss", "val_acc", "probe_margin"])
            for step, loss, acc, margin in self.rows():
                writer.writerow([step, repr(loss), repr(acc), repr(margin)])


def accuracy(model: MlpModel, dataset: Dataset, kernel: str = "blas") -> float:
    logits = forward_all(model, dataset.features, "inference", kernel)
    return float(np.mean(np.argmax(logits, axis=1) == dataset.labels))


def probe_margin(model: MlpModel, dataset: Dataset, kernel: str = "blas") -> float:
    logits = forward_all(model, dataset.features, "inference", kernel)
    return separation(LogitMatrix(logits, dataset.labels)).margin


def _seeds(seed: int) -> tuple[int, int, int, int]:
    children = np.random.SeedSequence(seed).generate_state(4)
    return tuple(int(c) for c in children)


def train(
    config: TrainConfig,
    train_set: Dataset,
    val_set: Dataset,
    lr: Optional[float] = None,
) -> tuple[MlpModel, TrainHistory]:
    """Vanilla SGD (no momentum, no weight decay) for ``config.steps`` steps.

    Batch losses see each sampled minibatch as their batch.  Raises
    :class:`TrainingDiverged` as soon as the loss or the forward pass stops
    being finite.
    """
    if lr is None:
        if len(config.learning_rates) != 1:
            raise UsageError("train() needs an explicit lr when the config lists several; use grid_search()")
        lr = config.learning_rates[0]
    if train_set.k != val_set.k:
        raise DomainError(f"train set has {train_set.k} classes but validation set has {val_set.k}")
    if val_set.d != train_set.d:
        raise DomainError("train and validation feature widths differ")

    init_seed, batch_seed, probe_seed, mc_seed = _seeds(config.seed)
    model = init_mlp(train_set.d, config.hidden, train_set.k, init_seed)
    sampler = BatchSampler(train_set.n, config.batch_size, batch_seed)
    probe_idx = np.sort(
        np.random.default_rng(probe_seed).choice(train_set.n, min(config.probe_size, train_set.n), replace=False)
    )
    probe = train_set.subset(probe_idx)
    history = TrainHistory()
    params = model.parameters()
    last_finite: Optional[float] = None

    for step in range(1, config.steps + 1):
        idx = sampler.next_batch()
        loss_config = config.loss
        if loss_config.kind == "nce" and loss_config.nce_mode == "monte_carlo":
            loss_config = replace(loss_config, mc_seed=(mc_seed + step) % 2**63)
        tape = ad.Tape()
        try:
            fw = forward_tape(model, train_set.features[idx], tape)
            lv = loss_dispatch(loss_config, LogitMatrix(fw.logits.data, train_set.labels[idx]))
        except (NumericalError, DomainError) as exc:
            raise TrainingDiverged(step, last_finite) from exc
        if not math.isfinite(lv.value):
            raise TrainingDiverged(step, last_finite)
        last_finite = lv.value

        if lv.grad.any():
            root = ad.reduce_sum(fw.logits * lv.grad)
            grads = tape.backward(root)
            for p, t in zip(params, fw.params):
                p -= lr * grads[t].reshape(p.shape)
            if not all(np.isfinite(p).all() for p in params):
                raise TrainingDiverged(step, last_finite)
        for bn, (mean, var) in zip(model.norms, fw.batch_stats):
            batchnorm_update(bn, mean, var)

        if step % config.log_every == 0 or step == config.steps:
            try:
                acc = accuracy(model, val_set)
                margin = probe_margin(model, probe)
            except (NumericalError, FloatingPointError) as exc:
                raise TrainingDiverged(step, last_finite) from exc
            history.append(step, lv.value, acc, margin)
            log.debug("step %d loss %.6g val_acc %.4f margin %.4g", step, lv.value, acc, margin)

    model.meta.update({"loss": config.loss.to_dict(), "lr": lr, "train": config.to_dict()})
    return model, history


@dataclass
class RunSummary:
    lr: float
    val_acc: Optional[float]
    diverged: bool
    error: Optional[str] = None
    final_loss: Optional[float] = None
    history: Optional[TrainHistory] = None

    def to_dict(self) -> dict:
        return {
            "lr": self.lr,
            "val_acc": self.val_acc,
            "diverged": self.diverged,
            "error": self.error,
            "final_loss": self.final_loss,
        }


@dataclass
class GridResult:
    model: MlpModel
    lr: float
    history: TrainHistory
    runs: list[RunSummary]


class GridSearchFailed(NumericalError):
    def __init__(self, runs: Sequence[RunSummary]):
        self.runs = list(runs)
        detail = "; ".join(f"lr={r.lr}: {r.error}" for r in runs)
        super().__init__(f"every learning rate diverged ({detail})")


def grid_search(config: TrainConfig, train_set: Dataset, val_set: Dataset) -> GridResult:
    """Train once per learning rate; keep the best validation accuracy (ties go to the smaller rate)."""
    runs: list[RunSummary] = []
    best: Optional[tuple[float, float, MlpModel, TrainHistory]] = None
    for lr in config.learning_rates:
        try:
            model, history = train(config, train_set, val_set, lr)
        except TrainingDiverged as exc:
            log.info("lr=%g diverged: %s", lr, exc)
            runs.append(RunSummary(lr, None, True, str(exc), exc.last_finite_loss))
            continue
        acc = accuracy(model, val_set)
        runs.append(RunSummary(lr, acc, False, None, history.loss[-1], history))
        if best is None or acc > best[0] or (acc == best[0] and lr < best[1]):
            best = (acc, lr, model, history)
    if best is None:
        raise GridSearchFailed(runs)
    _, lr, model, history = best
    model.meta["grid"] = [r.to_dict() for r in runs]
    if config.checkpoint:
        save_model(Path(config.checkpoint), model)
    return GridResult(model, lr, history, runs)
