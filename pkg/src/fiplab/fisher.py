"""Fisher-information quantities used by the purification objective.

``F = E[g g^T]`` with ``g`` the gradient of the log-likelihood of the
labelled class.  Only its diagonal and its trace are ever formed.
"""

from __future__ import annotations

import hashlib
import json
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .errors import NumericalError, ShapeError
from .nn import Batch, fd_step, params_checksum, per_sample_loglik_grads


def _batch_of(data):
    if isinstance(data, Batch):
        return data
    if hasattr(data, "inputs") and hasattr(data, "labels"):
        return Batch(data.inputs, data.labels)
    return Batch(*data)


def _data_checksum(batch):
    h = hashlib.sha256(np.ascontiguousarray(batch.inputs, dtype="<f8").tobytes())
    h.update(np.ascontiguousarray(batch.labels, dtype="<i8").tobytes())
    return h.hexdigest()


@dataclass(frozen=True, eq=False)
class FisherDiagonal:
    values: np.ndarray
    model_checksum: str = ""
    data_checksum: str = ""
    sample_count: int = 0

    def __post_init__(self):
        values = np.array(self.values, dtype=np.float64, copy=True).reshape(-1)
        if np.any(values < 0):
            raise ValueError("Fisher diagonal has negative entries")
        values.setflags(write=False)
        object.__setattr__(self, "values", values)

    def __len__(self):
        return self.values.shape[0]

    @property
    def trace(self):
        return float(self.values.sum())

    def save(self, path):
        """Write raw little-endian float64 values plus a ``.json`` sidecar."""
        path = Path(path)
        path.write_bytes(np.ascontiguousarray(self.values, dtype="<f8").tobytes())
        sidecar = {
            "length": len(self),
            "model_checksum": self.model_checksum,
            "data_checksum": self.data_checksum,
            "sample_count": self.sample_count,
            "values_checksum": params_checksum(self.values),
        }
        path.with_suffix(path.suffix + ".json").write_text(json.dumps(sidecar, indent=2))
        return path

    @classmethod
    def load(cls, path):
        path = Path(path)
        meta = json.loads(path.with_suffix(path.suffix + ".json").read_text())
        values = np.frombuffer(path.read_bytes(), dtype="<f8").astype(np.float64)
        if values.shape[0] != meta["length"] or params_checksum(values) != meta["values_checksum"]:
            raise ValueError(f"{path}: Fisher payload does not match its sidecar")
        return cls(values, meta["model_checksum"], meta["data_checksum"], meta["sample_count"])


def fim_diag(model, val_set):
    """Diagonal empirical Fisher: mean of squared per-sample log-likelihood gradients."""
    batch = _batch_of(val_set)
    g = per_sample_loglik_grads(model, batch)
    values = np.mean(g * g, axis=0)
    return FisherDiagonal(values, model.checksum(), _data_checksum(batch), len(batch))


def trace_fim(model, batch):
    """Tr(F) on ``batch``; defined as the sum of ``fim_diag`` so the two agree exactly."""
    return float(fim_diag(model, batch).values.sum())


def grad_trace_fim(model, batch):
    """Gradient of Tr(F) w.r.t. the parameters.

    Uses ``grad ||g_s||^2 = 2 H_s g_s`` per sample, each Hessian-vector
    product by central differences of that sample's gradient.
    """
    batch = _batch_of(batch)
    theta = model.theta
    g = per_sample_loglik_grads(model, batch)
    eps = np.array([fd_step(theta, row) for row in g])
    step = eps[:, None] * g
    gp = per_sample_loglik_grads(model, batch, thetas=theta + step)
    gm = per_sample_loglik_grads(model, batch, thetas=theta - step)
    # 2 * (gp - gm) / (2 eps), averaged over samples
    out = np.mean((gp - gm) / eps[:, None], axis=0)
    if not np.all(np.isfinite(out)):
        raise NumericalError("non-finite Tr(F) gradient")
    return out


def lr_penalty(theta, theta_bar, fisher):
    """Fisher-weighted anchor ``sum_i F_i (theta_i - theta_bar_i)^2`` and its gradient."""
    f = fisher.values if isinstance(fisher, FisherDiagonal) else np.asarray(fisher, dtype=np.float64)
    theta = np.asarray(theta, dtype=np.float64)
    theta_bar = np.asarray(theta_bar, dtype=np.float64)
    if not theta.shape == theta_bar.shape == f.shape:
        raise ShapeError(f"length mismatch: theta {theta.shape}, anchor {theta_bar.shape}, fisher {f.shape}")
    d = theta - theta_bar
    return float(np.dot(f, d * d)), 2.0 * f * d
