"""Feed-forward ReLU classifier with exact reverse-mode derivatives.

All parameters of a model live in one flat float64 vector ``theta``; the
per-layer weight matrices and bias vectors are reshaped views into it, so
flattening and unflattening are free and lossless.  Layer ``k`` maps
``a_{k-1}`` (batch x in_k) to ``z_k = a_{k-1} @ W_k.T + b_k`` with ``W_k`` of
shape (out_k, in_k).  Hidden layers use ReLU, the head is softmax with
cross-entropy.
"""

from __future__ import annotations

import hashlib
import json
import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .errors import CheckpointError, NumericalError, ShapeError

CHECKPOINT_MAGIC = b"FIPCKPT1"
CHECKPOINT_VERSION = 1

# relative FD step; sqrt of float64 machine epsilon
FD_EPS = float(np.sqrt(np.finfo(np.float64).eps))


@dataclass(frozen=True)
class LayerLayout:
    offset: int  # start of the row-major weight block; bias follows it
    rows: int
    cols: int

    @property
    def weight_size(self):
        return self.rows * self.cols

    @property
    def bias_offset(self):
        return self.offset + self.weight_size

    @property
    def end(self):
        return self.bias_offset + self.rows


class ParamLayout:
    """Offsets of every layer's (W, b) block inside the flat parameter vector."""

    def __init__(self, dims):
        dims = tuple(int(d) for d in dims)
        if len(dims) < 2 or min(dims) < 1:
            raise ShapeError(f"need at least two positive widths, got {dims}")
        self.dims = dims
        layers = []
        offset = 0
        for fan_in, fan_out in zip(dims[:-1], dims[1:]):
            lay = LayerLayout(offset, fan_out, fan_in)
            layers.append(lay)
            offset = lay.end
        self.layers = tuple(layers)
        self.size = offset

    def __len__(self):
        return len(self.layers)

    def __eq__(self, other):
        return isinstance(other, ParamLayout) and self.dims == other.dims

    def __hash__(self):
        return hash(self.dims)

    def weight(self, theta, k):
        lay = self.layers[k]
        return theta[..., lay.offset : lay.bias_offset].reshape(*theta.shape[:-1], lay.rows, lay.cols)

    def bias(self, theta, k):
        lay = self.layers[k]
        return theta[..., lay.bias_offset : lay.end]

    def unflatten(self, theta):
        """Split ``theta`` into a list of ``(W, b)`` views."""
        theta = np.asarray(theta)
        if theta.shape[-1] != self.size:
            raise ShapeError(f"parameter vector has length {theta.shape[-1]}, layout needs {self.size}")
        return [(self.weight(theta, k), self.bias(theta, k)) for k in range(len(self.layers))]

    def flatten(self, layers):
        out = np.empty(self.size, dtype=np.float64)
        if len(layers) != len(self.layers):
            raise ShapeError(f"expected {len(self.layers)} layers, got {len(layers)}")
        for k, ((w, b), lay) in enumerate(zip(layers, self.layers)):
            w = np.asarray(w, dtype=np.float64)
            b = np.asarray(b, dtype=np.float64)
            if w.shape != (lay.rows, lay.cols) or b.shape != (lay.rows,):
                raise ShapeError(
                    f"weight {w.shape} / bias {b.shape} do not match ({lay.rows}, {lay.cols})", layer=k
                )
            out[lay.offset : lay.bias_offset] = w.ravel()
            out[lay.bias_offset : lay.end] = b
        return out

    def weight_mask(self):
        """Boolean mask selecting weight-matrix entries (not biases)."""
        mask = np.zeros(self.size, dtype=bool)
        for lay in self.layers:
            mask[lay.offset : lay.bias_offset] = True
        return mask


@dataclass(frozen=True)
class Batch:
    inputs: np.ndarray
    labels: np.ndarray

    def __post_init__(self):
        x = np.ascontiguousarray(self.inputs, dtype=np.float64)
        if x.ndim == 1:
            x = x[None, :]
        x = x.reshape(x.shape[0], -1)
        y = np.asarray(self.labels, dtype=np.int64).reshape(-1)
        if x.shape[0] < 1:
            raise ShapeError("batch is empty")
        if y.shape[0] != x.shape[0]:
            raise ShapeError(f"{x.shape[0]} inputs but {y.shape[0]} labels")
        object.__setattr__(self, "inputs", x)
        object.__setattr__(self, "labels", y)

    def __len__(self):
        return self.inputs.shape[0]

    def subset(self, idx):
        return Batch(self.inputs[idx], self.labels[idx])


@dataclass(frozen=True, eq=False)
class MlpModel:
    """Immutable MLP: architecture widths plus the flat parameter vector."""

    dims: tuple
    theta: np.ndarray
    seed: int | None = None
    layout: ParamLayout = field(init=False, repr=False)

    def __post_init__(self):
        dims = tuple(int(d) for d in self.dims)
        layout = ParamLayout(dims)
        theta = np.array(self.theta, dtype=np.float64, copy=True).reshape(-1)
        if theta.shape[0] != layout.size:
            raise ShapeError(f"theta has {theta.shape[0]} entries, widths {dims} need {layout.size}")
        if not np.all(np.isfinite(theta)):
            raise NumericalError("non-finite parameter")
        theta.setflags(write=False)
        object.__setattr__(self, "dims", dims)
        object.__setattr__(self, "theta", theta)
        object.__setattr__(self, "layout", layout)

    @property
    def n_params(self):
        return self.layout.size

    @property
    def class_count(self):
        return self.dims[-1]

    @property
    def layers(self):
        return self.layout.unflatten(self.theta)

    def with_params(self, theta):
        return MlpModel(self.dims, theta, seed=self.seed)

    def checksum(self):
        return params_checksum(self.theta)


def params_checksum(theta):
    return hashlib.sha256(np.ascontiguousarray(theta, dtype="<f8").tobytes()).hexdigest()


def init_mlp(dims, seed=0):
    """Glorot-uniform weights, zero biases, drawn from a PCG64 stream."""
    layout = ParamLayout(dims)
    rng = np.random.Generator(np.random.PCG64(seed))
    theta = np.zeros(layout.size)
    for lay in layout.layers:
        limit = np.sqrt(6.0 / (lay.rows + lay.cols))
        theta[lay.offset : lay.bias_offset] = rng.uniform(-limit, limit, size=lay.weight_size)
    return MlpModel(layout.dims, theta, seed=seed)


def _as_batch(batch):
    if isinstance(batch, Batch):
        return batch
    x, y = batch
    return Batch(x, y)


def _check_input(model, x):
    if x.shape[1] != model.dims[0]:
        raise ShapeError(f"input width {x.shape[1]} != model input width {model.dims[0]}", layer=0)


def _forward_cache(layers, x):
    """Return (pre-activations, activations) lists; activations[0] is the input."""
    acts = [x]
    pres = []
    last = len(layers) - 1
    for k, (w, b) in enumerate(layers):
        z = acts[-1] @ w.T + b
        pres.append(z)
        if k < last:
            acts.append(np.maximum(z, 0.0))
    return pres, acts


def log_softmax(z):
    m = z.max(axis=1, keepdims=True)
    s = z - m
    return s - np.log(np.exp(s).sum(axis=1, keepdims=True))


def softmax(z):
    e = np.exp(z - z.max(axis=1, keepdims=True))
    return e / e.sum(axis=1, keepdims=True)


def forward(model, batch):
    """Logits of shape (n, C)."""
    batch = _as_batch(batch)
    _check_input(model, batch.inputs)
    pres, _ = _forward_cache(model.layers, batch.inputs)
    out = pres[-1]
    if not np.all(np.isfinite(out)):
        raise NumericalError("non-finite logits", layer=len(model.dims) - 2)
    return out


def predict(model, inputs):
    """Argmax class per row; ties go to the lowest class index."""
    x = np.asarray(inputs, dtype=np.float64).reshape(len(inputs), -1)
    _check_input(model, x)
    pres, _ = _forward_cache(model.layers, x)
    return np.argmax(pres[-1], axis=1)


def loss_ce(model, batch):
    batch = _as_batch(batch)
    logp = log_softmax(forward(model, batch))
    return float(-logp[np.arange(len(batch)), batch.labels].mean())


def _backward(layout, layers, pres, acts, dz):
    """Backpropagate logit gradients ``dz`` into a flat parameter gradient."""
    out = np.empty(layout.size)
    for k in range(len(layers) - 1, -1, -1):
        if not np.all(np.isfinite(dz)):
            raise NumericalError("non-finite gradient", layer=k)
        lay = layout.layers[k]
        out[lay.offset : lay.bias_offset] = (dz.T @ acts[k]).ravel()
        out[lay.bias_offset : lay.end] = dz.sum(axis=0)
        if k > 0:
            dz = (dz @ layers[k][0]) * (pres[k - 1] > 0)
    return out


def _onehot(labels, c):
    out = np.zeros((labels.shape[0], c))
    out[np.arange(labels.shape[0]), labels] = 1.0
    return out


def _check_labels(model, labels):
    if labels.min() < 0 or labels.max() >= model.class_count:
        raise ShapeError(f"labels must lie in [0, {model.class_count})")


def loss_and_grad(model, batch):
    batch = _as_batch(batch)
    _check_input(model, batch.inputs)
    _check_labels(model, batch.labels)
    layers = model.layers
    pres, acts = _forward_cache(layers, batch.inputs)
    logp = log_softmax(pres[-1])
    n = len(batch)
    loss = float(-logp[np.arange(n), batch.labels].mean())
    dz = (np.exp(logp) - _onehot(batch.labels, model.class_count)) / n
    return loss, _backward(model.layout, layers, pres, acts, dz)


def grad(model, batch):
    """Exact gradient of the mean cross-entropy over ``batch``."""
    return loss_and_grad(model, batch)[1]


def grad_loglik_per_sample(model, x, y):
    """Gradient of ``log p(y | x)`` for a single sample."""
    b = Batch(np.asarray(x).reshape(1, -1), [y])
    _check_input(model, b.inputs)
    _check_labels(model, b.labels)
    layers = model.layers
    pres, acts = _forward_cache(layers, b.inputs)
    dz = _onehot(b.labels, model.class_count) - softmax(pres[-1])
    return _backward(model.layout, layers, pres, acts, dz)


def per_sample_loglik_grads(model, batch, thetas=None):
    """Rows are per-sample gradients of ``log p(y_s | x_s)``, shape (n, P).

    If ``thetas`` (n, P) is given, sample ``s`` is evaluated at its own
    parameter vector ``thetas[s]`` instead of ``model.theta``.
    """
    batch = _as_batch(batch)
    _check_input(model, batch.inputs)
    _check_labels(model, batch.labels)
    layout = model.layout
    n = len(batch)
    x = batch.inputs
    if thetas is None:
        layers = model.layers
        pres, acts = _forward_cache(layers, x)
        dz = _onehot(batch.labels, model.class_count) - softmax(pres[-1])
        out = np.empty((n, layout.size))
        for k in range(len(layers) - 1, -1, -1):
            if not np.all(np.isfinite(dz)):
                raise NumericalError("non-finite per-sample gradient", layer=k)
            lay = layout.layers[k]
            out[:, lay.offset : lay.bias_offset] = (dz[:, :, None] * acts[k][:, None, :]).reshape(n, -1)
            out[:, lay.bias_offset : lay.end] = dz
            if k > 0:
                dz = (dz @ layers[k][0]) * (pres[k - 1] > 0)
        return out

    thetas = np.asarray(thetas, dtype=np.float64)
    if thetas.shape != (n, layout.size):
        raise ShapeError(f"per-sample parameters must have shape {(n, layout.size)}")
    ws = [layout.weight(thetas, k) for k in range(len(layout))]
    bs = [layout.bias(thetas, k) for k in range(len(layout))]
    acts = [x]
    pres = []
    for k in range(len(layout)):
        z = np.einsum("soi,si->so", ws[k], acts[-1]) + bs[k]
        pres.append(z)
        if k < len(layout) - 1:
            acts.append(np.maximum(z, 0.0))
    dz = _onehot(batch.labels, model.class_count) - softmax(pres[-1])
    out = np.empty((n, layout.size))
    for k in range(len(layout) - 1, -1, -1):
        if not np.all(np.isfinite(dz)):
            raise NumericalError("non-finite per-sample gradient", layer=k)
        lay = layout.layers[k]
        out[:, lay.offset : lay.bias_offset] = (dz[:, :, None] * acts[k][:, None, :]).reshape(n, -1)
        out[:, lay.bias_offset : lay.end] = dz
        if k > 0:
            dz = np.einsum("so,soi->si", dz, ws[k]) * (pres[k - 1] > 0)
    return out


def fd_step(theta, v):
    """Central-difference step used by every Hessian-vector product."""
    return FD_EPS * (1.0 + np.linalg.norm(theta)) / max(np.linalg.norm(v), 1.0)


def hvp(model, batch, v, method="fd"):
    """Hessian of the mean cross-entropy times ``v``.

    ``method="fd"`` differences two exact gradients around ``theta``;
    ``method="exact"`` runs the forward-over-reverse R-operator.
    """
    batch = _as_batch(batch)
    v = np.asarray(v, dtype=np.float64).reshape(-1)
    if v.size == 0:
        raise ShapeError("direction vector is empty")
    if v.shape[0] != model.n_params:
        raise ShapeError(f"direction has length {v.shape[0]}, model has {model.n_params} parameters")
    if method == "exact":
        out = _hvp_rop(model, batch, v)
    elif method == "fd":
        if not np.any(v):
            return np.zeros_like(v)
        eps = fd_step(model.theta, v)
        gp = grad(model.with_params(model.theta + eps * v), batch)
        gm = grad(model.with_params(model.theta - eps * v), batch)
        out = (gp - gm) / (2.0 * eps)
    else:
        raise ValueError(f"unknown hvp method {method!r}")
    if not np.all(np.isfinite(out)):
        raise NumericalError("non-finite Hessian-vector product")
    return out


def _hvp_rop(model, batch, v):
    layout = model.layout
    layers = model.layers
    dirs = layout.unflatten(v)
    x = batch.inputs
    _check_input(model, x)
    n = len(batch)
    pres, acts = _forward_cache(layers, x)
    masks = [(z > 0).astype(np.float64) for z in pres[:-1]]

    r_acts = [np.zeros_like(x)]
    r_pres = []
    for k, ((w, _), (vw, vb)) in enumerate(zip(layers, dirs)):
        rz = r_acts[-1] @ w.T + acts[k] @ vw.T + vb
        r_pres.append(rz)
        if k < len(layers) - 1:
            r_acts.append(rz * masks[k])

    p = softmax(pres[-1])
    dz = (p - _onehot(batch.labels, model.class_count)) / n
    rz = r_pres[-1]
    rdz = (p * rz - p * (p * rz).sum(axis=1, keepdims=True)) / n

    out = np.empty(layout.size)
    for k in range(len(layers) - 1, -1, -1):
        lay = layout.layers[k]
        out[lay.offset : lay.bias_offset] = (rdz.T @ acts[k] + dz.T @ r_acts[k]).ravel()
        out[lay.bias_offset : lay.end] = rdz.sum(axis=0)
        if k > 0:
            w, _ = layers[k]
            vw, _ = dirs[k]
            rdz = (rdz @ w + dz @ vw) * masks[k - 1]
            dz = (dz @ w) * masks[k - 1]
    return out


def save_checkpoint(model, path):
    header = {
        "version": CHECKPOINT_VERSION,
        "layer_dims": [[lay.cols, lay.rows] for lay in model.layout.layers],
        "class_count": model.class_count,
        "seed": model.seed,
    }
    blob = json.dumps(header, sort_keys=True).encode("utf-8")
    path = Path(path)
    with path.open("wb") as fh:
        fh.write(CHECKPOINT_MAGIC)
        fh.write(struct.pack("<I", len(blob)))
        fh.write(blob)
        fh.write(np.ascontiguousarray(model.theta, dtype="<f8").tobytes())
    return path


def load_checkpoint(path):
    data = Path(path).read_bytes()
    if data[:8] != CHECKPOINT_MAGIC:
        raise CheckpointError(f"bad magic {data[:8]!r}")
    if len(data) < 12:
        raise CheckpointError("truncated header")
    (hlen,) = struct.unpack("<I", data[8:12])
    try:
        header = json.loads(data[12 : 12 + hlen].decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise CheckpointError(f"unreadable header: {exc}") from exc
    if header.get("version") != CHECKPOINT_VERSION:
        raise CheckpointError(f"unsupported checkpoint version {header.get('version')!r}")
    pairs = header["layer_dims"]
    dims = [pairs[0][0]] + [out for _, out in pairs]
    for (_, prev_out), (nxt_in, _) in zip(pairs[:-1], pairs[1:]):
        if prev_out != nxt_in:
            raise CheckpointError("layer widths do not chain")
    if dims[-1] != header["class_count"]:
        raise CheckpointError("class_count disagrees with the last layer")
    layout = ParamLayout(dims)
    payload = data[12 + hlen :]
    if len(payload) != 8 * layout.size:
        raise CheckpointError(f"payload has {len(payload)} bytes, expected {8 * layout.size}")
    theta = np.frombuffer(payload, dtype="<f8").astype(np.float64)
    return MlpModel(dims, theta, seed=header.get("seed"))
