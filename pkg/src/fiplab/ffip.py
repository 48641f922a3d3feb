"""Fast purification by shifting singular values.

Every weight matrix is decomposed once as ``W = U diag(sigma) V^T``; only the
shifts ``delta`` (one per singular value) and the biases are trained, with
the weight rebuilt as ``U diag(relu(sigma + delta)) V^T``.  The tunable
vector ``phi`` concatenates ``[delta_k, b_k]`` for every layer ``k``.

The cross-entropy gradient is computed in factored form without ever
forming ``W``: for shift ``j``, ``d/d delta_j = gate_j * u_j^T G v_j`` with
``G = dZ^T A`` the weight gradient, so the diagonal of ``U^T G V`` is
``sum_n (dZ U)_nj (A V)_nj``.  The anchor term ``L_r`` is a fixed quadratic
form in ``e = relu(sigma + delta) - sigma`` per layer.  The Tr(F) term is
evaluated on the rebuilt parameters and pulled back by the same chain rule.
"""

from __future__ import annotations

import time
from dataclasses import dataclass, replace

import numpy as np

from .errors import FipLabError, NumericalError, ShapeError
from .fip import FipConfig, PurifyTrace, objective_row
from .fisher import _batch_of, fim_diag
from .nn import FD_EPS, log_softmax, params_checksum, softmax
from .svd import reconstruct_model, svd_decompose, tunable_count
from .train import sgd


class ShiftLayout:
    """``phi = [delta_1 .. delta_L, b_1 .. b_L]``: all shifts first, then all biases."""

    def __init__(self, decomp):
        ranks = [d.rank for d in decomp]
        outs = [d.bias.shape[0] for d in decomp]
        self.n_shifts = int(sum(ranks))
        self.size = self.n_shifts + int(sum(outs))
        r_off = np.concatenate([[0], np.cumsum(ranks)]).astype(int)
        b_off = self.n_shifts + np.concatenate([[0], np.cumsum(outs)]).astype(int)
        self.shift_slices = [slice(a, b) for a, b in zip(r_off[:-1], r_off[1:])]
        self.bias_slices = [slice(a, b) for a, b in zip(b_off[:-1], b_off[1:])]
        self.slices = list(zip(self.shift_slices, self.bias_slices))

    def split(self, phi):
        return [(phi[sd], phi[sb]) for sd, sb in self.slices]


class _Spectra:
    """Shifted singular values and ReLU gates of every layer at one ``phi``."""

    def __init__(self, sigma, layout, phi):
        z = sigma + phi[: layout.n_shifts]
        self.s = np.maximum(z, 0.0)
        self.gate = (z > 0).astype(np.float64)
        self.layers = [(self.s[sd], self.gate[sd], phi[sb]) for sd, sb in layout.slices]

    def __getitem__(self, k):
        return self.layers[k]

    def __iter__(self):
        return iter(self.layers)


def _spectra(decomp, shift_layout, phi):
    return _Spectra(np.concatenate([d.sigma for d in decomp]), shift_layout, phi)


@dataclass
class _Anchor:
    """``L_r`` expressed in the shift variables: ``e^T Q e + lin . e + const`` plus bias terms."""

    sigma: np.ndarray
    quad: np.ndarray  # block diagonal over layers
    lin: np.ndarray  # 2 * diag(U^T (F o R) V), R = round-trip residual
    const: float
    bias_f: np.ndarray
    bias_bar: np.ndarray


def _anchor(decomp, model, fisher):
    layout = model.layout
    sigma = np.concatenate([d.sigma for d in decomp])
    n = sigma.shape[0]
    quad = np.zeros((n, n))
    lin = np.empty(n)
    const = 0.0
    start = 0
    for k, d in enumerate(decomp):
        f = layout.weight(fisher.values, k)
        resid = d.weight() - layout.weight(model.theta, k)
        r = d.rank
        # Q_kl = sum_ij F_ij U_ik U_il V_jk V_jl
        vv = (d.v[:, :, None] * d.v[:, None, :]).reshape(d.v.shape[0], r * r)
        fvv = (f @ vv).reshape(-1, r, r)
        quad[start : start + r, start : start + r] = np.einsum("ik,il,ikl->kl", d.u, d.u, fvv)
        lin[start : start + r] = 2.0 * np.einsum("ik,ij,jk->k", d.u, f * resid, d.v, optimize=True)
        const += float(np.sum(f * resid * resid))
        start += r
    bias_f = np.concatenate([layout.bias(fisher.values, k) for k in range(len(decomp))])
    bias_bar = np.concatenate([layout.bias(model.theta, k) for k in range(len(decomp))])
    return _Anchor(sigma, quad, lin, const, bias_f, bias_bar)


def anchor_penalty(decomp, shift_layout, phi, anchor, spectra=None):
    """``L_r`` of the rebuilt parameters and its gradient w.r.t. ``phi``."""
    spectra = _spectra(decomp, shift_layout, phi) if spectra is None else spectra
    n = shift_layout.n_shifts
    e = spectra.s - anchor.sigma
    qe = anchor.quad @ e
    db = phi[n:] - anchor.bias_bar
    fdb = anchor.bias_f * db
    g = np.empty(shift_layout.size)
    g[:n] = spectra.gate * (2.0 * qe + anchor.lin)
    g[n:] = 2.0 * fdb
    return float(e @ qe + anchor.lin @ e + anchor.const + fdb @ db), g


def ce_and_grad(decomp, shift_layout, phi, batch, spectra=None):
    """Mean cross-entropy and its exact gradient w.r.t. ``phi``, factored form."""
    spectra = _spectra(decomp, shift_layout, phi) if spectra is None else spectra
    x = batch.inputs
    n = x.shape[0]
    rows = np.arange(n)
    last = len(decomp) - 1
    acts, proj = [x], []
    for k, (d, (s, _, b)) in enumerate(zip(decomp, spectra)):
        t = acts[-1] @ d.v
        z = (t * s) @ d.u.T + b
        proj.append(t)
        acts.append(np.maximum(z, 0.0) if k < last else z)
    logp = log_softmax(acts[-1])
    loss = float(-logp[rows, batch.labels].mean())
    dz = np.exp(logp)
    dz[rows, batch.labels] -= 1.0
    dz /= n
    g = np.empty(shift_layout.size)
    for k in range(last, -1, -1):
        d, (s, _, _) = decomp[k], spectra[k]
        du = dz @ d.u
        g[shift_layout.shift_slices[k]] = (du * proj[k]).sum(axis=0)
        g[shift_layout.bias_slices[k]] = dz.sum(axis=0)
        if k > 0:
            dz = ((du * s) @ d.v.T) * (acts[k] > 0)
    g[: shift_layout.n_shifts] *= spectra.gate
    # a single reduction propagates any nan/inf
    if not np.isfinite(g.sum()):
        raise NumericalError("non-finite shift gradient")
    return loss, g


def _forward_perturbed(decomp, spectra, x, base=None, eps=None, sign=0.0):
    """Forward pass; with ``base`` each sample s runs at its own parameters
    ``theta + sign * eps_s * g_s``, ``g_s`` given per layer as (acts, dz)."""
    last = len(decomp) - 1
    acts, proj, pres = [x], [], []
    for k, (d, (s, _, b)) in enumerate(zip(decomp, spectra)):
        t = acts[-1] @ d.v
        z = (t * s) @ d.u.T + b
        if base is not None:
            a0, dz0 = base[0][k], base[1][k]
            coef = sign * eps * (np.einsum("ni,ni->n", acts[-1], a0) + 1.0)
            z = z + coef[:, None] * dz0
        proj.append(t)
        pres.append(z)
        if k < last:
            acts.append(np.maximum(z, 0.0))
    return acts, proj, pres


def _loglik_backward(decomp, spectra, proj, pres, labels, base=None, eps=None, sign=0.0):
    """Per-sample log-likelihood signals per layer, plus the rows ``(dz U) o (a V)``."""
    n = labels.shape[0]
    dz = -softmax(pres[-1])
    dz[np.arange(n), labels] += 1.0
    dzs, shift_rows = [None] * len(decomp), [None] * len(decomp)
    for k in range(len(decomp) - 1, -1, -1):
        d = decomp[k]
        du = dz @ d.u
        dzs[k] = dz
        shift_rows[k] = du * proj[k]
        if k > 0:
            da = (du * spectra[k][0]) @ d.v.T
            if base is not None:
                a0, dz0 = base[0][k], base[1][k]
                da = da + (sign * eps * np.einsum("no,no->n", dz, dz0))[:, None] * a0
            dz = da * (pres[k - 1] > 0)
    return dzs, shift_rows


def trace_fim_and_grad(decomp, shift_layout, phi, batch, spectra=None):
    """Tr(F) of the rebuilt parameters and its gradient w.r.t. ``phi``.

    Same estimator as :func:`fiplab.fisher.grad_trace_fim` (central
    differences of each sample's gradient along itself), but each per-sample
    weight gradient is the rank-one ``dz^T a``, so both the perturbed passes
    and the pull-back run in factored form.
    """
    spectra = _spectra(decomp, shift_layout, phi) if spectra is None else spectra
    x, y = batch.inputs, batch.labels
    n_shift = shift_layout.n_shifts
    acts, proj, pres = _forward_perturbed(decomp, spectra, x)
    dzs, _ = _loglik_backward(decomp, spectra, proj, pres, y)
    sq = sum(np.einsum("no,no->n", dz, dz) * (np.einsum("ni,ni->n", a, a) + 1.0) for dz, a in zip(dzs, acts))
    # ||W||_F = ||relu(sigma + delta)|| since U and V are orthonormal
    theta_norm = np.sqrt(spectra.s @ spectra.s + phi[n_shift:] @ phi[n_shift:])
    eps = FD_EPS * (1.0 + theta_norm) / np.maximum(np.sqrt(sq), 1.0)
    base = (acts, dzs)
    w = 1.0 / (eps * x.shape[0])
    out = np.zeros(shift_layout.size)
    for sign in (1.0, -1.0):
        a_p, t_p, z_p = _forward_perturbed(decomp, spectra, x, base, eps, sign)
        dz_p, rows = _loglik_backward(decomp, spectra, t_p, z_p, y, base, eps, sign)
        for k in range(len(decomp)):
            out[shift_layout.shift_slices[k]] += sign * (w @ rows[k])
            out[shift_layout.bias_slices[k]] += sign * (w @ dz_p[k])
    out[:n_shift] *= spectra.gate
    if not np.all(np.isfinite(out)):
        raise NumericalError("non-finite Tr(F) gradient")
    return float(sq.mean()), out


def pull_back(decomp, shift_layout, phi, layout, g_theta):
    """Chain rule from a parameter-space gradient to ``phi``: gate * diag(U^T G V)."""
    out = np.empty(shift_layout.size)
    for k, (d, (sd, sb)) in enumerate(zip(decomp, shift_layout.slices)):
        gw = layout.weight(g_theta, k)
        out[sd] = d.gate(phi[sd]) * np.einsum("ij,ij->j", d.u, gw @ d.v)
        out[sb] = layout.bias(g_theta, k)
    return out


class ShiftProblem:
    """The purification objective as a function of the shift vector ``phi``."""

    def __init__(self, model, val_set, cfg=FipConfig()):
        self.model = model
        self.val = _batch_of(val_set)
        self.cfg = cfg
        start = time.perf_counter()
        self.decomp = svd_decompose(model)
        self.svd_seconds = time.perf_counter() - start
        self.layout = ShiftLayout(self.decomp)
        self.fisher = fim_diag(model, self.val)
        self.theta_bar = np.array(model.theta, copy=True)
        self.theta_bar.setflags(write=False)
        self.anchor = _anchor(self.decomp, model, self.fisher)

    def initial(self):
        phi = np.zeros(self.layout.size)
        for d, sb in zip(self.decomp, self.layout.bias_slices):
            phi[sb] = d.bias
        return phi

    def rebuild(self, phi):
        parts = self.layout.split(phi)
        return reconstruct_model(self.model, self.decomp, [p[0] for p in parts], [p[1] for p in parts])

    def objective(self, phi, batch=None, with_trace=True):
        """``(value, gradient)`` of CE + eta_F Tr(F) + (eta_r/2) L_r over ``batch``."""
        batch = self.val if batch is None else _batch_of(batch)
        spectra = _Spectra(self.anchor.sigma, self.layout, phi)
        value, g = ce_and_grad(self.decomp, self.layout, phi, batch, spectra)
        if with_trace and self.cfg.eta_F:
            tr, g_tr = trace_fim_and_grad(self.decomp, self.layout, phi, batch, spectra)
            value += self.cfg.eta_F * tr
            g = g + self.cfg.eta_F * g_tr
        if self.cfg.eta_r:
            l_r, g_r = anchor_penalty(self.decomp, self.layout, phi, self.anchor, spectra)
            value += 0.5 * self.cfg.eta_r * l_r
            g = g + 0.5 * self.cfg.eta_r * g_r
        return value, g

    def decay_grad(self, phi):
        """Gradient of ``||W||_F^2 / 2 + ||b||^2 / 2`` of the rebuilt weights w.r.t. ``phi``."""
        n = self.layout.n_shifts
        z = self.anchor.sigma + phi[:n]
        return np.concatenate([np.maximum(z, 0.0), phi[n:]])


def ffip_purify(model, val_set, cfg=FipConfig(), log=True):
    """Purify by training singular-value shifts and biases; returns ``(model, PurifyTrace)``.

    ``cfg.weight_decay`` penalizes the rebuilt weights and biases, matching
    the decay :func:`fiplab.fip.fip_purify` applies in parameter space.

    The trace carries ``svd_seconds`` and the tunable counts as attributes.
    """
    if cfg.batch_size < 1:
        raise ShapeError("batch_size must be positive")
    prob = ShiftProblem(model, val_set, cfg)
    val = prob.val
    per_epoch = -(-len(val) // cfg.batch_size)
    fisher_sum = params_checksum(prob.fisher.values)

    def step_grad(phi, idx, it):
        b = val.subset(idx)
        with_trace = bool(cfg.eta_F) and it % cfg.trace_grad_period == 0
        value, g = prob.objective(phi, b, with_trace=with_trace)
        if cfg.weight_decay:
            g = g + cfg.weight_decay * prob.decay_grad(phi)
        return value, g

    def row(phi, iteration):
        return objective_row(prob.rebuild(phi), val, prob.theta_bar, prob.fisher, cfg, iteration)

    phi0 = prob.initial()
    rows = [row(phi0, 0)] if log else []

    def on_epoch(epoch, phi, _):
        return row(phi, (epoch + 1) * per_epoch) if log else None

    start = time.perf_counter()
    # weight decay acts on the rebuilt weights inside step_grad, not on the shifts
    sgd_cfg = replace(cfg.train_config(), weight_decay=0.0)
    phi, epoch_rows = sgd(phi0, len(val), sgd_cfg, step_grad, on_epoch)
    seconds = time.perf_counter() - start
    if params_checksum(prob.fisher.values) != fisher_sum:
        raise FipLabError("Fisher snapshot changed during purification")
    trace = PurifyTrace(rows + epoch_rows, prob.fisher, seconds)
    shapes = [d.shape for d in prob.decomp]
    trace.svd_seconds = prob.svd_seconds
    trace.tunable_weights = tunable_count(shapes)
    trace.tunable_total = prob.layout.size
    return prob.rebuild(phi), trace
