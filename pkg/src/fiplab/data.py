"""Desk-scale image datasets, trigger injection and label poisoning."""

from __future__ import annotations

import gzip
import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .errors import (
    CountMismatchError,
    SplitError,
    TriggerBoundsError,
    TruncatedPayloadError,
    WrongMagicError,
)

IDX_IMAGES_MAGIC = 0x00000803
IDX_LABELS_MAGIC = 0x00000801


@dataclass(frozen=True, eq=False)
class LabeledDataset:
    images: np.ndarray  # (N, h, w) float64 in [0, 1]
    labels: np.ndarray  # (N,) int64
    class_count: int
    provenance: str = ""

    def __post_init__(self):
        images = np.asarray(self.images, dtype=np.float64)
        labels = np.asarray(self.labels, dtype=np.int64).reshape(-1)
        if images.ndim != 3:
            raise ValueError(f"images must have shape (N, h, w), got {images.shape}")
        if images.shape[0] != labels.shape[0]:
            raise ValueError(f"{images.shape[0]} images but {labels.shape[0]} labels")
        if images.size and (images.min() < 0.0 or images.max() > 1.0):
            raise ValueError("pixels must lie in [0, 1]")
        if labels.size and (labels.min() < 0 or labels.max() >= self.class_count):
            raise ValueError(f"labels must lie in [0, {self.class_count})")
        images.setflags(write=False)
        labels.setflags(write=False)
        object.__setattr__(self, "images", images)
        object.__setattr__(self, "labels", labels)

    def __len__(self):
        return self.labels.shape[0]

    @property
    def image_shape(self):
        return self.images.shape[1:]

    @property
    def inputs(self):
        """Images flattened to (N, h*w)."""
        return self.images.reshape(len(self), -1)

    def subset(self, idx):
        idx = np.asarray(idx, dtype=np.int64)
        return LabeledDataset(self.images[idx], self.labels[idx], self.class_count, self.provenance)

    def with_labels(self, labels):
        return LabeledDataset(self.images, labels, self.class_count, self.provenance)


@dataclass(frozen=True)
class TriggerSpec:
    """Patch (k x k block set to ``value``) or blend (mixup with ``pattern``)."""

    kind: str = "patch"
    row: int = 13
    col: int = 13
    size: int = 3
    value: float = 1.0
    pattern: np.ndarray | None = field(default=None, repr=False, compare=False)
    alpha: float = 0.2
    epsilon: float | None = None  # declared max-norm bound; None records the realized one

    def __post_init__(self):
        if self.kind not in ("patch", "blend"):
            raise ValueError(f"unknown trigger kind {self.kind!r}")
        if self.kind == "patch" and not 0.0 <= self.value <= 1.0:
            raise ValueError("patch value must lie in [0, 1]")
        if self.kind == "blend":
            if not 0.0 <= self.alpha <= 1.0:
                raise ValueError("mixup ratio must lie in [0, 1]")
            if self.pattern is None:
                raise ValueError("blend trigger needs a pattern image")

    @classmethod
    def corner_patch(cls, image_shape, size=3, value=1.0):
        """Bottom-right ``size`` x ``size`` patch."""
        h, w = image_shape
        return cls("patch", row=h - size, col=w - size, size=size, value=value)

    @classmethod
    def blend(cls, pattern, alpha=0.2):
        return cls("blend", pattern=np.clip(np.asarray(pattern, dtype=np.float64), 0.0, 1.0), alpha=alpha)

    def check_fits(self, image_shape):
        h, w = image_shape
        if self.kind == "patch":
            if self.size < 0 or self.row < 0 or self.col < 0 or self.row + self.size > h or self.col + self.size > w:
                raise TriggerBoundsError(
                    f"{self.size}x{self.size} patch at ({self.row}, {self.col}) does not fit a {h}x{w} image"
                )
        elif self.pattern.shape != (h, w):
            raise TriggerBoundsError(f"blend pattern {self.pattern.shape} does not match image {(h, w)}")


def default_blend_pattern(image_shape, seed=0):
    return np.random.default_rng(seed).uniform(0.0, 1.0, size=image_shape)


def apply_trigger(x, t):
    """Return the triggered copy of a single image (or a stack of images)."""
    x = np.asarray(x, dtype=np.float64)
    t.check_fits(x.shape[-2:])
    if t.kind == "patch":
        out = x.copy()
        out[..., t.row : t.row + t.size, t.col : t.col + t.size] = t.value
        return out
    if t.alpha == 0.0:
        return x.copy()
    return np.clip((1.0 - t.alpha) * x + t.alpha * t.pattern, 0.0, 1.0)


@dataclass(frozen=True)
class PoisonPlan:
    trigger: TriggerSpec
    poison_rate: float = 0.1
    label_map: str = "all2one"
    target: int = 0
    seed: int = 0

    def __post_init__(self):
        if not 0.0 <= self.poison_rate <= 1.0:
            raise ValueError(f"poison rate {self.poison_rate} outside [0, 1]")
        if self.label_map not in ("all2one", "all2all"):
            raise ValueError(f"unknown label map {self.label_map!r}")

    def assign(self, labels, class_count):
        labels = np.asarray(labels, dtype=np.int64)
        if self.label_map == "all2one":
            return np.full_like(labels, self.target)
        return (labels + 1) % class_count


@dataclass(frozen=True)
class PoisonBookkeeping:
    indices: np.ndarray
    original: np.ndarray
    assigned: np.ndarray
    epsilon: float = 0.0  # realized max-norm of x_b - x over poisoned samples

    def __len__(self):
        return self.indices.shape[0]


def _realized_epsilon(clean, triggered, t):
    if clean.shape[0] == 0:
        return 0.0
    eps = float(np.abs(triggered - clean).max())
    if t.epsilon is not None and eps > t.epsilon + 1e-12:
        raise ValueError(f"trigger perturbation {eps:.4f} exceeds declared bound {t.epsilon:.4f}")
    return eps


def poison(ds, plan):
    """Trigger and relabel ``round(rate * N)`` samples chosen without replacement."""
    n = len(ds)
    count = int(np.floor(plan.poison_rate * n + 0.5))
    rng = np.random.default_rng(plan.seed)
    idx = np.sort(rng.choice(n, size=count, replace=False)) if count else np.zeros(0, dtype=np.int64)
    images = ds.images.copy()
    labels = ds.labels.copy()
    original = labels[idx].copy()
    assigned = plan.assign(original, ds.class_count)
    images[idx] = apply_trigger(ds.images[idx], plan.trigger)
    labels[idx] = assigned
    eps = _realized_epsilon(ds.images[idx], images[idx], plan.trigger)
    out = LabeledDataset(images, labels, ds.class_count, ds.provenance + "+poison")
    return out, PoisonBookkeeping(idx.astype(np.int64), original, assigned, eps)


def poisoned_test_set(ds, plan):
    """Trigger every eligible test sample.

    For all2one, samples whose ground truth already equals the target are
    dropped.  Returned labels are the ground truth; the attacker's labels are
    in the bookkeeping.
    """
    if plan.label_map == "all2one":
        idx = np.flatnonzero(ds.labels != plan.target)
    else:
        idx = np.arange(len(ds))
    images = apply_trigger(ds.images[idx], plan.trigger)
    original = ds.labels[idx].copy()
    assigned = plan.assign(original, ds.class_count)
    eps = _realized_epsilon(ds.images[idx], images, plan.trigger)
    out = LabeledDataset(images, original, ds.class_count, ds.provenance + "+triggered")
    return out, PoisonBookkeeping(idx.astype(np.int64), original, assigned, eps)


def ground_truth_view(poisoned, book):
    """Poisoned images paired with their true labels."""
    labels = poisoned.labels.copy()
    labels[book.indices] = book.original
    return poisoned.with_labels(labels)


def split_indices(ds, val_fraction=None, seed=0, per_class=None):
    """Stratified (train_idx, val_idx).

    Each class contributes ``ceil(val_fraction * n_class)`` validation samples,
    or exactly ``per_class`` of them when given (``per_class=1`` is one-shot).
    """
    if (val_fraction is None) == (per_class is None):
        raise ValueError("give exactly one of val_fraction and per_class")
    if val_fraction is not None and not 0.0 < val_fraction < 1.0:
        raise ValueError("val_fraction must lie in (0, 1)")
    rng = np.random.default_rng(seed)
    train_parts, val_parts = [], []
    for c in range(ds.class_count):
        members = np.flatnonzero(ds.labels == c)
        if members.size == 0:
            raise SplitError(f"class {c} has no samples")
        take = int(per_class) if per_class is not None else int(np.ceil(val_fraction * members.size))
        if take < 1 or take >= members.size:
            raise SplitError(f"class {c}: {take} validation samples out of {members.size} leaves a split empty")
        members = rng.permutation(members)
        val_parts.append(members[:take])
        train_parts.append(members[take:])
    return np.sort(np.concatenate(train_parts)), np.sort(np.concatenate(val_parts))


def split(ds, val_fraction=None, seed=0, per_class=None):
    train_idx, val_idx = split_indices(ds, val_fraction, seed, per_class)
    return ds.subset(train_idx), ds.subset(val_idx)


def stripe_patterns(class_count, image_size, contrast=0.35):
    """One noiseless stripe texture per class, values in 0.5 +- contrast."""
    rows, cols = np.mgrid[0:image_size, 0:image_size].astype(np.float64)
    patterns = np.empty((class_count, image_size, image_size))
    for c in range(class_count):
        angle = np.pi * c / class_count
        freq = 2.0 + (c % 3)
        phase = 0.5 * c
        coord = (cols * np.cos(angle) + rows * np.sin(angle)) / image_size
        patterns[c] = 0.5 + contrast * np.sin(2.0 * np.pi * freq * coord + phase)
    return patterns


def gen_synthetic(class_count=3, per_class=500, image_size=16, noise_level=0.25, seed=0, *, contrast=0.35):
    """Stripe textures (class-specific orientation and frequency) plus uniform noise."""
    if class_count < 2:
        raise ValueError("need at least two classes")
    if image_size < 8:
        raise ValueError("image_size must be at least 8")
    if per_class < 1:
        raise ValueError("per_class must be positive")
    if noise_level < 0:
        raise ValueError("noise_level must be nonnegative")
    rng = np.random.default_rng(seed)
    patterns = stripe_patterns(class_count, image_size, contrast)
    labels = rng.permutation(np.repeat(np.arange(class_count), per_class))
    noise = rng.uniform(-noise_level, noise_level, size=(labels.size, image_size, image_size))
    images = np.clip(patterns[labels] + noise, 0.0, 1.0)
    return LabeledDataset(images, labels, class_count, f"synthetic:seed={seed}")


def _open(path):
    path = Path(path)
    return gzip.open(path, "rb") if path.suffix == ".gz" else path.open("rb")


def _read_idx(path, magic, ndim):
    with _open(path) as fh:
        data = fh.read()
    if len(data) < 4 + 4 * ndim:
        raise TruncatedPayloadError(f"{path}: header shorter than {4 + 4 * ndim} bytes")
    (found,) = struct.unpack(">I", data[:4])
    if found != magic:
        raise WrongMagicError(f"{path}: wrong magic 0x{found:08x}, expected 0x{magic:08x}")
    shape = struct.unpack(f">{ndim}I", data[4 : 4 + 4 * ndim])
    payload = data[4 + 4 * ndim :]
    need = int(np.prod(shape))
    if len(payload) < need:
        raise TruncatedPayloadError(f"{path}: payload has {len(payload)} bytes, header declares {need}")
    return np.frombuffer(payload[:need], dtype=np.uint8).reshape(shape)


def load_idx(images_path, labels_path, class_count=None):
    """Read a big-endian IDX image/label pair; pixels are scaled by 1/255."""
    raw = _read_idx(images_path, IDX_IMAGES_MAGIC, 3)
    labels = _read_idx(labels_path, IDX_LABELS_MAGIC, 1).astype(np.int64)
    if raw.shape[0] != labels.shape[0]:
        raise CountMismatchError(f"{raw.shape[0]} images but {labels.shape[0]} labels")
    if class_count is None:
        class_count = int(labels.max()) + 1 if labels.size else 1
    return LabeledDataset(raw.astype(np.float64) / 255.0, labels, class_count, f"idx:{images_path}")


def save_idx(ds, images_path, labels_path):
    """Write ``ds`` as an IDX pair, quantizing pixels to bytes."""
    n, h, w = ds.images.shape
    pixels = np.rint(ds.images * 255.0).astype(np.uint8)
    with Path(images_path).open("wb") as fh:
        fh.write(struct.pack(">IIII", IDX_IMAGES_MAGIC, n, h, w))
        fh.write(pixels.tobytes())
    with Path(labels_path).open("wb") as fh:
        fh.write(struct.pack(">II", IDX_LABELS_MAGIC, n))
        fh.write(ds.labels.astype(np.uint8).tobytes())


__all__ = [
    "LabeledDataset",
    "TriggerSpec",
    "PoisonPlan",
    "PoisonBookkeeping",
    "apply_trigger",
    "default_blend_pattern",
    "gen_synthetic",
    "ground_truth_view",
    "load_idx",
    "save_idx",
    "poison",
    "poisoned_test_set",
    "split",
    "split_indices",
]
