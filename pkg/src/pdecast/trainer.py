"""One-step supervised training with MSE loss and a step-decay schedule.

Each epoch shuffles with a seeded generator, walks minibatches through the
batched forward/backward pass, updates with Adam (or plain SGD), and
re-projects the implicit constraint immediately after every optimizer
step, so the stability hypothesis holds at any point the model could be
evaluated.  The returned model is the best-validation checkpoint.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import NamedTuple

import numpy as np

from .core_math import SeededRng
from .network import ForecastNet, backward_batch, forward_batch, parameters, project_weights
from .pde_data import TrajectoryDataset

ADAM_BETA1 = 0.9
ADAM_BETA2 = 0.999
ADAM_EPS = 1e-8

OPTIMIZERS = ("adam", "sgd")


class DivergedTrainingError(RuntimeError):
    """Training loss became non-finite; .history holds the epochs completed."""

    def __init__(self, message, history):
        super().__init__(message)
        self.history = history


@dataclass
class TrainConfig:
    epochs: int
    initial_lr: float = 0.01
    decay: float = 0.9
    step_size: int = 10
    batch_size: int = 32
    xavier_gain: float = 1.0
    delta: float = 0.01
    seed: int = 0
    optimizer: str = "adam"

    def __post_init__(self):
        if self.epochs < 0:
            raise ValueError("epochs must be >= 0")
        if self.initial_lr <= 0:
            raise ValueError("initial_lr must be > 0")
        if not 0 < self.decay <= 1:
            raise ValueError("decay must lie in (0, 1]")
        if self.step_size < 1:
            raise ValueError("step_size must be >= 1")
        if self.batch_size < 1:
            raise ValueError("batch_size must be >= 1")
        if self.optimizer not in OPTIMIZERS:
            raise ValueError(f"unknown optimizer {self.optimizer!r}")


@dataclass
class TrainHistory:
    train_mse: list = field(default_factory=list)
    val_mse: list = field(default_factory=list)
    lr: list = field(default_factory=list)
    clip_counts: list = field(default_factory=list)
    best_epoch: int = -1
    best_val: float = np.inf

    def __len__(self) -> int:
        return len(self.train_mse)


class EvalResult(NamedTuple):
    mse: float
    relative_error_pct: float


def lr_at(cfg: TrainConfig, epoch: int) -> float:
    """Step-decay schedule: initial_lr * decay^(epoch // step_size)."""
    if epoch < 0:
        raise ValueError("epoch must be >= 0")
    return cfg.initial_lr * cfg.decay ** (epoch // cfg.step_size)


def evaluate(net: ForecastNet, dataset: TrajectoryDataset) -> EvalResult:
    """Mean squared error and mean L2 relative error (percent) over a dataset."""
    if len(dataset) == 0:
        raise ValueError("cannot evaluate on an empty dataset")
    if dataset.grid_size != net.grid_size:
        raise ValueError("dataset grid does not match model grid")
    pred, _ = forward_batch(net, dataset.u0_matrix())
    true = dataset.u1_matrix()
    diff = pred - true
    mse = float(np.mean(diff**2))
    rel = float(
        100.0
        * np.mean(np.linalg.norm(diff, axis=0) / np.linalg.norm(true, axis=0))
    )
    return EvalResult(mse, rel)


class _Adam:
    def __init__(self, params):
        self.m = {name: np.zeros_like(a) for name, a in params}
        self.v = {name: np.zeros_like(a) for name, a in params}
        self.t = 0

    def step(self, params, grads, lr):
        self.t += 1
        correct1 = 1.0 - ADAM_BETA1**self.t
        correct2 = 1.0 - ADAM_BETA2**self.t
        for name, array in params:
            g = grads[name]
            m = self.m[name]
            v = self.v[name]
            m *= ADAM_BETA1
            m += (1.0 - ADAM_BETA1) * g
            v *= ADAM_BETA2
            v += (1.0 - ADAM_BETA2) * g * g
            array -= lr * (m / correct1) / (np.sqrt(v / correct2) + ADAM_EPS)


class _Sgd:
    def step(self, params, grads, lr):
        for name, array in params:
            array -= lr * grads[name]


def train(
    net: ForecastNet,
    train_set: TrajectoryDataset,
    val_set: TrajectoryDataset,
    cfg: TrainConfig,
) -> TrainHistory:
    """Run the full training loop in place; returns the per-epoch history.

    The net ends at the parameters of the best-validation epoch.  Raises
    DivergedTrainingError (carrying the partial history) if the loss ever
    leaves the finite range.
    """
    if train_set.grid_size != net.grid_size or val_set.grid_size != net.grid_size:
        raise ValueError("dataset grid does not match model grid")
    u0_all = train_set.u0_matrix()
    u1_all = train_set.u1_matrix()
    grid, n_samples = u0_all.shape

    params = parameters(net)
    optimizer = _Adam(params) if cfg.optimizer == "adam" else _Sgd()
    shuffle_gen = SeededRng(cfg.seed).child(0xD5).generator()

    history = TrainHistory()
    best_snapshot = {name: a.copy() for name, a in params}
    implicit = net.kind == "implicit_relu"

    for epoch in range(cfg.epochs):
        lr = lr_at(cfg, epoch)
        perm = shuffle_gen.permutation(n_samples)
        loss_sum = 0.0
        clip_count = 0
        for start in range(0, n_samples, cfg.batch_size):
            batch = perm[start : start + cfg.batch_size]
            inputs = u0_all[:, batch]
            targets = u1_all[:, batch]
            with np.errstate(over="ignore", invalid="ignore"):
                out, trace = forward_batch(net, inputs)
                diff = out - targets
                loss = float(np.mean(diff**2))
            if not np.isfinite(loss):
                raise DivergedTrainingError(
                    f"training loss became non-finite at epoch {epoch}", history
                )
            loss_sum += loss * batch.size
            d_out = (2.0 / (grid * batch.size)) * diff
            grads, _ = backward_batch(net, trace, d_out)
            optimizer.step(params, grads, lr)
            if implicit:
                clip_count += project_weights(net, cfg.delta)
        val = evaluate(net, val_set)
        history.train_mse.append(loss_sum / n_samples)
        history.val_mse.append(val.mse)
        history.lr.append(lr)
        history.clip_counts.append(clip_count)
        if val.mse < history.best_val:
            history.best_val = val.mse
            history.best_epoch = epoch
            best_snapshot = {name: a.copy() for name, a in params}

    for name, array in params:
        array[...] = best_snapshot[name]
    return history
