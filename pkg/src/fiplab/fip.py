"""Fisher-guided purification of a backdoored model.

The fine-tuning objective on a clean validation set is

    CE(theta) + eta_F * Tr(F)(theta) + (eta_r / 2) * L_r(theta)

where ``L_r`` anchors parameters to the starting point ``theta_bar`` in
proportion to their Fisher importance ``F_bar`` (both frozen at the start).
The Tr(F) gradient is expensive and is applied only on every
``trace_grad_period``-th iteration; other iterations omit the term.
"""

from __future__ import annotations

import csv
import time
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .errors import FipLabError
from .fisher import _batch_of, fim_diag, grad_trace_fim, lr_penalty, trace_fim
from .nn import loss_and_grad, loss_ce, params_checksum
from .train import TrainConfig, sgd


@dataclass(frozen=True)
class FipConfig:
    eta_F: float = 0.001
    eta_r: float = 5.0
    lr: float = 0.01
    epochs: int = 50
    lr_decay_factor: float = 0.1
    lr_decay_period: int = 40
    trace_grad_period: int = 10
    batch_size: int = 1
    seed: int = 0
    momentum: float = 0.9
    weight_decay: float = 0.0

    def __post_init__(self):
        if self.eta_F < 0 or self.eta_r < 0:
            raise ValueError("eta_F and eta_r must be nonnegative")
        if self.trace_grad_period < 1:
            raise ValueError("trace_grad_period must be at least 1")
        self.train_config()  # shared range checks

    def train_config(self):
        """The plain SGD schedule; used for vanilla fine-tuning with the same seed."""
        return TrainConfig(
            lr=self.lr,
            momentum=self.momentum,
            weight_decay=self.weight_decay,
            epochs=self.epochs,
            batch_size=self.batch_size,
            lr_decay_factor=self.lr_decay_factor,
            lr_decay_period=self.lr_decay_period,
            seed=self.seed,
        )


TRACE_COLUMNS = ("iteration", "ce", "trace_fim", "l_r", "objective", "distance")


@dataclass
class PurifyTrace:
    rows: list
    fisher: object
    seconds: float = 0.0

    def column(self, name):
        return np.array([row[name] for row in self.rows])

    def to_csv(self, path):
        with Path(path).open("w", newline="") as fh:
            writer = csv.DictWriter(fh, fieldnames=TRACE_COLUMNS, extrasaction="ignore")
            writer.writeheader()
            writer.writerows(self.rows)
        return path


def objective_row(model, val, theta_bar, fisher, cfg, iteration):
    """Full-validation-set breakdown of the objective at ``model``."""
    ce = loss_ce(model, val)
    tr = trace_fim(model, val)
    l_r, _ = lr_penalty(model.theta, theta_bar, fisher)
    return {
        "iteration": iteration,
        "ce": ce,
        "trace_fim": tr,
        "l_r": l_r,
        "objective": ce + cfg.eta_F * tr + 0.5 * cfg.eta_r * l_r,
        "distance": float(np.linalg.norm(model.theta - theta_bar)),
    }


def _iterations_per_epoch(n, batch_size):
    return -(-n // batch_size)


def fip_purify(model, val_set, cfg=FipConfig(), log=True):
    """Purify ``model`` on the clean ``val_set``; returns ``(model, PurifyTrace)``.

    With ``eta_F = eta_r = 0`` the update sequence is exactly that of
    :func:`fiplab.train.fine_tune` with ``cfg.train_config()``.
    """
    val = _batch_of(val_set)
    theta_bar = np.array(model.theta, copy=True)
    theta_bar.setflags(write=False)
    fisher = fim_diag(model, val)
    anchor_sum = params_checksum(theta_bar)
    fisher_sum = params_checksum(fisher.values)
    per_epoch = _iterations_per_epoch(len(val), cfg.batch_size)

    def step_grad(theta, idx, it):
        m = model.with_params(theta)
        b = val.subset(idx)
        loss, g = loss_and_grad(m, b)
        if cfg.eta_F and it % cfg.trace_grad_period == 0:
            g = g + cfg.eta_F * grad_trace_fim(m, b)
        if cfg.eta_r:
            g = g + cfg.eta_r * fisher.values * (theta - theta_bar)
        return loss, g

    rows = [objective_row(model, val, theta_bar, fisher, cfg, 0)] if log else []

    def on_epoch(epoch, theta, _):
        if log:
            return objective_row(model.with_params(theta), val, theta_bar, fisher, cfg, (epoch + 1) * per_epoch)
        return None

    start = time.perf_counter()
    theta, epoch_rows = sgd(model.theta, len(val), cfg.train_config(), step_grad, on_epoch)
    seconds = time.perf_counter() - start
    if params_checksum(theta_bar) != anchor_sum or params_checksum(fisher.values) != fisher_sum:
        raise FipLabError("anchor or Fisher snapshot changed during purification")
    return model.with_params(theta), PurifyTrace(rows + epoch_rows, fisher, seconds)
