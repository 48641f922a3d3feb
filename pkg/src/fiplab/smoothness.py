"""Matrix-free loss-Hessian diagnostics.

Every estimator takes either ``(model, batch)``, in which case the operator is
the cross-entropy Hessian applied through :func:`fiplab.nn.hvp`, or an
explicit symmetric operator (ndarray or ``scipy.sparse.linalg.LinearOperator``)
with ``batch=None``.  The batch must carry ground-truth labels.
"""

from __future__ import annotations

import csv
import json
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np
from scipy.sparse.linalg import LinearOperator, aslinearoperator

from .errors import OracleSizeError
from .nn import Batch, MlpModel, hvp

ORACLE_MAX_PARAMS = 500


def hessian_operator(model, batch, method="fd"):
    batch = batch if isinstance(batch, Batch) else Batch(batch.inputs, batch.labels)
    n = model.n_params
    return LinearOperator((n, n), matvec=lambda v: hvp(model, batch, np.ravel(v), method=method), dtype=np.float64)


def _operator(model, batch, method="fd"):
    if isinstance(model, MlpModel):
        if batch is None:
            raise ValueError("a model needs a batch")
        return hessian_operator(model, batch, method)
    return aslinearoperator(np.asarray(model, dtype=np.float64) if not isinstance(model, LinearOperator) else model)


def probe_rng(seed, probe):
    """Independent stream per probe so serial and parallel runs agree."""
    return np.random.default_rng([int(seed), int(probe)])


def rademacher(rng, n):
    return rng.integers(0, 2, size=n).astype(np.float64) * 2.0 - 1.0


def lambda_max(model, batch=None, iters=100, tol=1e-6, seed=0, method="fd"):
    """Dominant-magnitude Hessian eigenvalue by power iteration.

    Returns ``(value, vector, residual)``; ``value`` is the signed Rayleigh
    quotient at the final unit vector (take ``abs`` for the spectral norm) and
    ``residual = ||Hv - rho v|| / max(|rho|, 1)``.  Running out of iterations
    is not an error: the caller compares ``residual`` with ``tol``.
    """
    op = _operator(model, batch, method)
    n = op.shape[0]
    v = probe_rng(seed, 0).standard_normal(n)
    v /= np.linalg.norm(v)
    rho, residual = 0.0, np.inf
    for _ in range(max(int(iters), 1)):
        w = op.matvec(v)
        rho = float(v @ w)
        residual = float(np.linalg.norm(w - rho * v) / max(abs(rho), 1.0))
        if residual <= tol:
            break
        norm = np.linalg.norm(w)
        if norm == 0.0:
            break
        v = w / norm
    return rho, v, residual


def trace_hutchinson(model, batch=None, probes=100, seed=0, method="fd"):
    """Hutchinson trace estimate with Rademacher probes; returns ``(trace, stderr)``."""
    if probes < 1:
        raise ValueError("need at least one probe")
    op = _operator(model, batch, method)
    n = op.shape[0]
    samples = np.empty(probes)
    for i in range(probes):
        z = rademacher(probe_rng(seed, i), n)
        samples[i] = z @ op.matvec(z)
    stderr = float(samples.std(ddof=1) / np.sqrt(probes)) if probes > 1 else float("nan")
    return float(samples.mean()), stderr


def dense_hessian_oracle(model, batch=None, max_params=ORACLE_MAX_PARAMS, method="fd"):
    """Explicit Hessian, one basis vector per column; returns ``(H_sym, symmetry_defect)``."""
    op = _operator(model, batch, method)
    n = op.shape[0]
    if n > max_params:
        raise OracleSizeError(f"{n} parameters exceeds the dense-oracle guard of {max_params}")
    a = np.empty((n, n))
    basis = np.zeros(n)
    for j in range(n):
        basis[j] = 1.0
        a[:, j] = op.matvec(basis)
        basis[j] = 0.0
    scale = np.linalg.norm(a)
    defect = float(np.linalg.norm(a - a.T) / scale) if scale > 0 else 0.0
    return 0.5 * (a + a.T), defect


@dataclass
class SpectralDensity:
    nodes: np.ndarray
    weights: np.ndarray  # sums to 1 over all probes
    probe_of_node: np.ndarray
    dim: int
    truncated: list = field(default_factory=list)  # probe indices hit by Lanczos breakdown

    def pairs(self):
        return list(zip(self.nodes.tolist(), self.weights.tolist()))

    def trace_estimate(self):
        """First moment scaled by the dimension; equals Hutchinson on the same probes."""
        return float(np.dot(self.nodes, self.weights) * self.dim)

    def to_csv(self, path):
        with Path(path).open("w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["node", "weight"])
            w.writerows(self.pairs())
        return path


def lanczos(op, v0, steps, breakdown_tol=1e-10):
    """Lanczos tridiagonalization with full reorthogonalization.

    Returns ``(alpha, beta, broke_down)`` where ``beta`` holds the
    off-diagonal entries of the (possibly truncated) tridiagonal matrix.
    """
    op = aslinearoperator(op)
    n = op.shape[0]
    steps = min(int(steps), n)
    q = np.zeros((steps, n))
    q[0] = v0 / np.linalg.norm(v0)
    alpha, beta = [], []
    for j in range(steps):
        w = op.matvec(q[j])
        a = float(q[j] @ w)
        alpha.append(a)
        w = w - a * q[j] - (beta[-1] * q[j - 1] if j > 0 else 0.0)
        w -= q[: j + 1].T @ (q[: j + 1] @ w)
        w -= q[: j + 1].T @ (q[: j + 1] @ w)
        if j == steps - 1:
            break
        b = float(np.linalg.norm(w))
        if b <= breakdown_tol * max(1.0, abs(a)):
            return np.array(alpha), np.array(beta), True
        beta.append(b)
        q[j + 1] = w / b
    return np.array(alpha), np.array(beta), False


def spectral_density(model, batch=None, lanczos_steps=30, probes=10, seed=0, method="fd"):
    """Stochastic Lanczos quadrature over Rademacher starting vectors."""
    if lanczos_steps < 2:
        raise ValueError("lanczos_steps must be at least 2")
    op = _operator(model, batch, method)
    n = op.shape[0]
    nodes, weights, owner, truncated = [], [], [], []
    for i in range(probes):
        z = rademacher(probe_rng(seed, i), n)
        alpha, beta, broke = lanczos(op, z, lanczos_steps)
        if broke:
            truncated.append(i)
        t = np.diag(alpha) + np.diag(beta, 1) + np.diag(beta, -1)
        evals, evecs = np.linalg.eigh(t)
        nodes.append(evals)
        weights.append(evecs[0] ** 2 / probes)
        owner.append(np.full(evals.shape[0], i))
    return SpectralDensity(np.concatenate(nodes), np.concatenate(weights), np.concatenate(owner), n, truncated)


@dataclass
class SmoothnessReport:
    lambda_max: float
    lambda_max_signed: float
    trace: float
    trace_stderr: float
    probes: int
    power_iters: int
    residual: float
    seed: int
    label_mode: str = "ground-truth"
    batch_size: int = 0

    def to_dict(self):
        return asdict(self)

    def to_json(self, path=None):
        text = json.dumps(self.to_dict(), indent=2)
        if path is not None:
            Path(path).write_text(text)
        return text


@dataclass(frozen=True)
class AnalysisConfig:
    power_iters: int = 100
    tol: float = 1e-4
    probes: int = 50
    seed: int = 0
    lanczos_steps: int = 30
    density_probes: int = 5
    equal_rtol: float = 1e-9


def analyze(model, batch, cfg=AnalysisConfig()):
    rho, _, residual = lambda_max(model, batch, cfg.power_iters, cfg.tol, cfg.seed)
    tr, se = trace_hutchinson(model, batch, cfg.probes, cfg.seed)
    return SmoothnessReport(abs(rho), rho, tr, se, cfg.probes, cfg.power_iters, residual, cfg.seed, batch_size=len(batch))


@dataclass
class Comparison:
    a: SmoothnessReport
    b: SmoothnessReport
    lambda_ratio: float
    trace_ratio: float
    verdict: str  # SHARPER (b over a), EQUAL, or NOT_SHARPER


def compare(model_a, model_b, batch, cfg=AnalysisConfig()):
    """Is ``model_b`` at a sharper minimum than ``model_a`` on ``batch``?"""
    ra, rb = analyze(model_a, batch, cfg), analyze(model_b, batch, cfg)
    lam = rb.lambda_max / ra.lambda_max if ra.lambda_max else np.inf
    tr = rb.trace / ra.trace if ra.trace else np.inf
    if abs(lam - 1.0) <= cfg.equal_rtol and abs(tr - 1.0) <= cfg.equal_rtol:
        verdict = "EQUAL"
    elif rb.lambda_max > ra.lambda_max and rb.trace > ra.trace:
        verdict = "SHARPER"
    else:
        verdict = "NOT_SHARPER"
    return Comparison(ra, rb, float(lam), float(tr), verdict)
