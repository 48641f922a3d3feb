"""SGD training harness and backdoor evaluation metrics."""

from __future__ import annotations

import csv
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .errors import DivergenceError
from .fisher import grad_trace_fim
from .nn import Batch, loss_and_grad, loss_ce, predict


@dataclass(frozen=True)
class TrainConfig:
    lr: float = 0.01
    momentum: float = 0.9
    weight_decay: float = 5e-4
    epochs: int = 60
    batch_size: int = 64
    lr_decay_factor: float = 0.1
    lr_decay_period: int = 40
    seed: int = 0
    adaptive_eta_F: float = 0.0
    trace_grad_period: int = 10

    def __post_init__(self):
        if self.lr <= 0:
            raise ValueError("lr must be positive")
        if not 0.0 <= self.momentum < 1.0:
            raise ValueError("momentum must lie in [0, 1)")
        if self.epochs < 0:
            raise ValueError("epochs must be nonnegative")
        if self.batch_size < 1 or self.lr_decay_period < 1 or self.trace_grad_period < 1:
            raise ValueError("batch_size, lr_decay_period and trace_grad_period must be positive")
        if self.adaptive_eta_F < 0 or self.weight_decay < 0:
            raise ValueError("penalty weights must be nonnegative")

    def lr_at(self, epoch):
        return self.lr * self.lr_decay_factor ** (epoch // self.lr_decay_period)


def epoch_order(seed, epoch, n):
    return np.random.default_rng([seed, epoch]).permutation(n)


def sgd(theta, n_samples, cfg, step_grad, on_epoch=None):
    """Minibatch SGD with heavy-ball momentum and L2 weight decay.

    ``step_grad(theta, idx, iteration)`` returns ``(loss, gradient)`` for the
    minibatch ``idx``.  Update: ``v <- mu v + g + wd theta``,
    ``theta <- theta - lr v``.  ``on_epoch(epoch, theta, mean_loss)`` may
    return a row for the trace.
    """
    theta = np.array(theta, dtype=np.float64, copy=True)
    velocity = np.zeros_like(theta)
    rows = []
    it = 0
    for epoch in range(cfg.epochs):
        lr = cfg.lr_at(epoch)
        order = epoch_order(cfg.seed, epoch, n_samples)
        losses = []
        for start in range(0, n_samples, cfg.batch_size):
            idx = order[start : start + cfg.batch_size]
            loss, g = step_grad(theta, idx, it)
            if not np.isfinite(loss) or not np.all(np.isfinite(g)):
                raise DivergenceError("loss or gradient became non-finite", epoch=epoch)
            if cfg.weight_decay:
                g = g + cfg.weight_decay * theta
            velocity = cfg.momentum * velocity + g
            theta = theta - lr * velocity
            losses.append(loss)
            it += 1
        if not np.all(np.isfinite(theta)):
            raise DivergenceError("parameters became non-finite", epoch=epoch)
        if on_epoch is not None:
            row = on_epoch(epoch, theta, float(np.mean(losses)))
            if row is not None:
                rows.append(row)
    return theta, rows


def _batch(ds):
    return ds if isinstance(ds, Batch) else Batch(ds.inputs, ds.labels)


def train(model, dataset, cfg, test=None, poisoned_test=None):
    """Train ``model`` on ``dataset``; returns ``(trained_model, trace)``.

    ``trace`` holds one dict per epoch with train loss/accuracy and, when the
    evaluation sets are attached, clean test accuracy and ASR.  With
    ``cfg.adaptive_eta_F > 0`` every ``trace_grad_period``-th step also
    descends ``adaptive_eta_F * Tr(F)`` of the minibatch.
    """
    data = _batch(dataset)
    if len(data) == 0:
        raise ValueError("empty training set")

    def step_grad(theta, idx, it):
        m = model.with_params(theta)
        b = data.subset(idx)
        loss, g = loss_and_grad(m, b)
        if cfg.adaptive_eta_F and it % cfg.trace_grad_period == 0:
            g = g + cfg.adaptive_eta_F * grad_trace_fim(m, b)
        return loss, g

    def on_epoch(epoch, theta, _):
        m = model.with_params(theta)
        row = {
            "epoch": epoch,
            "train_loss": loss_ce(m, data),
            "train_acc": float(np.mean(predict(m, data.inputs) == data.labels)),
        }
        if test is not None:
            row["test_acc"] = evaluate_acc(m, test)
        if poisoned_test is not None:
            row["asr"] = evaluate_asr(m, *poisoned_test)
        return row

    theta, trace = sgd(model.theta, len(data), cfg, step_grad, on_epoch)
    return model.with_params(theta), trace


def fine_tune(model, val_set, cfg):
    """Plain cross-entropy fine-tuning on a clean set (no penalties)."""
    return train(model, val_set, cfg)


@dataclass(frozen=True)
class Metrics:
    acc: float
    asr: float
    lcr: float

    def __post_init__(self):
        for name in ("acc", "asr", "lcr"):
            if not 0.0 <= getattr(self, name) <= 1.0:
                raise ValueError(f"{name} outside [0, 1]")


def _inputs(ds):
    return ds.inputs


def evaluate_acc(model, clean_test):
    if len(clean_test.labels) == 0:
        raise ValueError("empty evaluation set")
    return float(np.mean(predict(model, _inputs(clean_test)) == clean_test.labels))


def evaluate_asr(model, poisoned_test, bookkeeping):
    """Fraction of triggered samples predicted as the attacker's label."""
    if len(bookkeeping.assigned) == 0:
        raise ValueError("no eligible poisoned samples")
    return float(np.mean(predict(model, _inputs(poisoned_test)) == bookkeeping.assigned))


def evaluate_lcr(model, poisoned_test, bookkeeping):
    """Fraction of triggered samples predicted as their true label."""
    if len(bookkeeping.original) == 0:
        raise ValueError("no eligible poisoned samples")
    return float(np.mean(predict(model, _inputs(poisoned_test)) == bookkeeping.original))


def evaluate(model, clean_test, poisoned_test, bookkeeping):
    return Metrics(
        evaluate_acc(model, clean_test),
        evaluate_asr(model, poisoned_test, bookkeeping),
        evaluate_lcr(model, poisoned_test, bookkeeping),
    )


TRACE_COLUMNS = ("epoch", "train_loss", "train_acc", "test_acc", "asr")


def write_trace_csv(trace, path, columns=TRACE_COLUMNS):
    present = [c for c in columns if any(c in row for row in trace)] or list(columns[:3])
    with Path(path).open("w", newline="") as fh:
        writer = csv.DictWriter(fh, fieldnames=present, extrasaction="ignore")
        writer.writeheader()
        writer.writerows(trace)
    return path
