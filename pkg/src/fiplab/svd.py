"""Thin SVD by one-sided (Hestenes) Jacobi and per-layer spectral shifts.

Columns of the working matrix are rotated pairwise until every pair is
numerically orthogonal; the column norms are then the singular values.
Pairs are visited in round-robin (tournament) order so that each round
rotates ``n/2`` disjoint pairs at once with array operations.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import ShapeError, SvdConvergenceError

JACOBI_TOL = 1e-14
JACOBI_MAX_SWEEPS = 30


def _tournament(n):
    """Round-robin schedule: ``n - 1`` rounds (``n`` even) of disjoint pairs."""
    players = list(range(n))
    rounds = []
    for _ in range(n - 1):
        half = n // 2
        p = np.array(players[:half])
        q = np.array(players[half:][::-1])
        rounds.append((np.minimum(p, q), np.maximum(p, q)))
        players = [players[0], players[-1]] + players[1:-1]
    return rounds


def _jacobi_tall(a, tol, max_sweeps):
    """One-sided Jacobi on a tall matrix (m >= n); returns (A V, V, off, sweeps)."""
    m, n = a.shape
    work = np.array(a, dtype=np.float64, copy=True)
    v = np.eye(n)
    if n == 1:
        return work, v, 0.0, 0
    pad = n % 2
    if pad:
        work = np.hstack([work, np.zeros((m, 1))])
        v = np.pad(v, ((0, 1), (0, 1)))
    rounds = _tournament(n + pad)
    off = np.inf
    for sweep in range(1, max_sweeps + 1):
        off = 0.0
        for p, q in rounds:
            ap, aq = work[:, p], work[:, q]
            alpha = np.einsum("ij,ij->j", ap, ap)
            beta = np.einsum("ij,ij->j", aq, aq)
            gamma = np.einsum("ij,ij->j", ap, aq)
            scale = np.sqrt(alpha * beta)
            with np.errstate(divide="ignore", invalid="ignore"):
                rel = np.where(scale > 0, np.abs(gamma) / scale, 0.0)
            off = max(off, float(rel.max(initial=0.0)))
            hit = rel > tol
            if not hit.any():
                continue
            p, q = p[hit], q[hit]
            alpha, beta, gamma = alpha[hit], beta[hit], gamma[hit]
            zeta = (beta - alpha) / (2.0 * gamma)
            t = np.where(zeta >= 0, 1.0, -1.0) / (np.abs(zeta) + np.sqrt(1.0 + zeta * zeta))
            c = 1.0 / np.sqrt(1.0 + t * t)
            s = c * t
            ap, aq = work[:, p], work[:, q]
            work[:, p] = c * ap - s * aq
            work[:, q] = s * ap + c * aq
            vp, vq = v[:, p], v[:, q]
            v[:, p] = c * vp - s * vq
            v[:, q] = s * vp + c * vq
        if off <= tol:
            return work[:m, :n], v[:n, :n], off, sweep
    raise SvdConvergenceError(off, max_sweeps)


def _complete_basis(u, valid):
    """Replace the columns of ``u`` not flagged ``valid`` by an orthonormal complement."""
    m, r = u.shape
    keep = u[:, valid]
    missing = int(np.count_nonzero(~valid))
    if missing == 0:
        return u
    extra = []
    basis = keep
    for i in range(m):
        e = np.zeros(m)
        e[i] = 1.0
        for _ in range(2):
            e -= basis @ (basis.T @ e)
        norm = np.linalg.norm(e)
        if norm > 1e-8:
            e /= norm
            extra.append(e)
            basis = np.column_stack([basis, e])
            if len(extra) == missing:
                break
    out = u.copy()
    out[:, ~valid] = np.column_stack(extra)
    return out


def jacobi_svd(a, tol=JACOBI_TOL, max_sweeps=JACOBI_MAX_SWEEPS):
    """Thin SVD ``a = U diag(s) V^T`` with ``r = min(M, N)`` components.

    Singular values are descending and nonnegative.  Each left singular
    vector is signed so that its largest-magnitude entry is positive, with the
    matching right vector flipped alongside.  Columns belonging to (numerically)
    zero singular values are completed to an orthonormal set.
    """
    a = np.asarray(a, dtype=np.float64)
    if a.ndim != 2 or 0 in a.shape:
        raise ShapeError(f"expected a nonempty matrix, got shape {a.shape}")
    if not np.all(np.isfinite(a)):
        raise ShapeError("matrix has non-finite entries")
    transpose = a.shape[0] < a.shape[1]
    tall = a.T if transpose else a
    av, right, _, _ = _jacobi_tall(tall, tol, max_sweeps)
    s = np.linalg.norm(av, axis=0)
    order = np.argsort(-s, kind="stable")
    s, av, right = s[order], av[:, order], right[:, order]
    cutoff = max(tall.shape) * np.finfo(np.float64).eps * (s[0] if s.size else 0.0)
    valid = s > cutoff
    left = np.zeros_like(av)
    left[:, valid] = av[:, valid] / s[valid]
    left = _complete_basis(left, valid)
    u, v = (right, left) if transpose else (left, right)
    idx = np.argmax(np.abs(u), axis=0)
    flip = np.where(u[idx, np.arange(u.shape[1])] < 0, -1.0, 1.0)
    return u * flip, s, v * flip


@dataclass(frozen=True, eq=False)
class LayerSpectralDecomposition:
    """Frozen factors of one weight matrix ``W = U diag(sigma) V^T``; ``W`` is (M, N)."""

    u: np.ndarray
    sigma: np.ndarray
    v: np.ndarray
    bias: np.ndarray

    @property
    def rank(self):
        return self.sigma.shape[0]

    @property
    def shape(self):
        return (self.u.shape[0], self.v.shape[0])

    def shifted(self, delta):
        delta = np.asarray(delta, dtype=np.float64)
        if delta.shape != self.sigma.shape:
            raise ShapeError(f"shift has shape {delta.shape}, expected {self.sigma.shape}")
        return np.maximum(self.sigma + delta, 0.0)

    def weight(self, delta=None):
        s = self.sigma if delta is None else self.shifted(delta)
        return (self.u * s) @ self.v.T

    def gate(self, delta):
        """1 where the shifted singular value is strictly positive; 0 at or below the clamp."""
        return (self.sigma + np.asarray(delta) > 0).astype(np.float64)


def svd_decompose(model, tol=JACOBI_TOL, max_sweeps=JACOBI_MAX_SWEEPS):
    """One decomposition per layer; biases are carried through unchanged."""
    out = []
    for w, b in model.layers:
        u, s, v = jacobi_svd(w, tol, max_sweeps)
        out.append(LayerSpectralDecomposition(u, s, v, np.array(b, copy=True)))
    return out


def reconstruct(decomp, delta):
    """Weights with shifted spectrum ``U diag(relu(sigma + delta)) V^T``.

    ``decomp`` may be a single layer (returns one matrix) or a list of
    layers with a matching list of shifts (returns a list).
    """
    if isinstance(decomp, LayerSpectralDecomposition):
        return decomp.weight(delta)
    if len(decomp) != len(delta):
        raise ShapeError(f"{len(delta)} shift vectors for {len(decomp)} layers")
    return [d.weight(dl) for d, dl in zip(decomp, delta)]


def reconstruct_model(model, decomp, deltas, biases=None):
    """Model whose weights are ``reconstruct(decomp, deltas)``."""
    biases = [d.bias for d in decomp] if biases is None else biases
    layers = list(zip(reconstruct(decomp, deltas), biases))
    return model.with_params(model.layout.flatten(layers))


def tunable_count(shapes):
    """Spectral-shift parameters of a list of (M, N) weight shapes: sum of min(M, N)."""
    return int(sum(min(int(m), int(n)) for m, n in shapes))


def full_count(shapes):
    return int(sum(int(m) * int(n) for m, n in shapes))
