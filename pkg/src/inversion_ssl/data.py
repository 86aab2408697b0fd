"""Dataset construction: synthetic generators, image ingestion, normalisation, splits."""

from __future__ import annotations

import struct
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional

import numpy as np
from sklearn.datasets import make_blobs, make_moons

from . import tensor as T


class DegenerateSampleError(ValueError):
    """A constant sample cannot be centred and reduced."""


@dataclass
class RawDataset:
    samples: np.ndarray
    labels: Optional[np.ndarray]
    name: str
    n_classes: int

    def __post_init__(self):
        self.samples = np.asarray(self.samples)
        if self.labels is not None:
            self.labels = np.asarray(self.labels, dtype=np.int64)
            if len(self.labels) != len(self.samples):
                raise ValueError(
                    f"{len(self.labels)} labels for {len(self.samples)} samples")
            if len(self.labels) and (self.labels.min() < 0 or self.labels.max() >= self.n_classes):
                raise ValueError(f"labels must lie in [0, {self.n_classes})")

    def __len__(self):
        return len(self.samples)


@dataclass
class SplitDataset:
    labeled_x: np.ndarray
    labeled_y: np.ndarray
    unlabeled_x: np.ndarray
    test_x: np.ndarray
    test_y: np.ndarray
    n_classes: int
    labeled_index: np.ndarray = field(default_factory=lambda: np.zeros(0, np.int64))
    unlabeled_index: np.ndarray = field(default_factory=lambda: np.zeros(0, np.int64))

    @property
    def n_labeled(self) -> int:
        return len(self.labeled_x)

    @property
    def n_unlabeled(self) -> int:
        return len(self.unlabeled_x)


# -- normalisation ------------------------------------------------------------

def normalize_sample(x) -> np.ndarray:
    """Centre a sample and divide by its largest absolute deviation."""
    x = np.asarray(x, dtype=np.float64)
    centred = x - x.mean()
    peak = np.abs(centred).max() if centred.size else 0.0
    if peak == 0.0:
        raise DegenerateSampleError("sample is constant; cannot normalise")
    return centred / peak


def normalize_samples(X) -> np.ndarray:
    """Per-sample normalisation of a batch (first axis indexes samples)."""
    X = np.asarray(X, dtype=np.float64)
    flat = X.reshape(len(X), -1)
    centred = flat - flat.mean(axis=1, keepdims=True)
    peak = np.abs(centred).max(axis=1, keepdims=True)
    if np.any(peak == 0.0):
        bad = int(np.flatnonzero(peak[:, 0] == 0.0)[0])
        raise DegenerateSampleError(f"sample {bad} is constant; cannot normalise")
    return (centred / peak).reshape(X.shape)


def symmetric_lift(X, anchor: float) -> np.ndarray:
    """Map feature vectors to ``[x, -x, anchor, -anchor]``.

    Per-sample centring and reduction of a low-dimensional vector discards its
    mean and scale. After this lift the mean is zero and, as long as
    ``anchor > max|x|``, the peak is ``anchor``, so normalisation becomes a
    fixed rescaling that keeps every sample distinguishable.
    """
    X = np.asarray(X, dtype=np.float64)
    if np.abs(X).max(initial=0.0) >= anchor:
        raise ValueError("anchor must exceed every |feature|")
    a = np.full((len(X), 1), anchor)
    return np.concatenate([X, -X, a, -a], axis=1)


def prepare_vectors(X, anchor: float) -> np.ndarray:
    return normalize_samples(symmetric_lift(X, anchor))


# -- generators ---------------------------------------------------------------

def make_clusters(n_per_class: int, n_classes: int, centers=None, spread: float = 1.0,
                  seed: int = 0, n_features: int = 2, center_box: float = 5.0) -> RawDataset:
    """Isotropic Gaussian clusters; random centres in a box when none are given."""
    if n_per_class < 1 or n_classes < 2:
        raise ValueError("need n_per_class >= 1 and n_classes >= 2")
    if spread < 0:
        raise ValueError("spread must be non-negative")
    rng = np.random.default_rng(seed)
    if centers is None:
        centers = rng.uniform(-center_box, center_box, size=(n_classes, n_features))
    centers = np.asarray(centers, dtype=np.float64)
    if len(centers) != n_classes:
        raise ValueError(f"{len(centers)} centers given for {n_classes} classes")
    X, y = make_blobs(n_samples=[n_per_class] * n_classes, centers=centers, cluster_std=spread,
                      shuffle=True, random_state=int(rng.integers(2**31 - 1)))
    return RawDataset(X, y, "clusters", n_classes)


def make_half_moons(n_samples: int, noise: float = 0.1, seed: int = 0) -> RawDataset:
    """Two interleaved half circles."""
    if n_samples < 2:
        raise ValueError("need at least 2 samples")
    X, y = make_moons(n_samples=n_samples, noise=noise, random_state=seed)
    return RawDataset(X, y, "half-moons", 2)


def add_distractors(data: RawDataset, fraction: float = 0.2, scale: Optional[float] = None,
                    seed: int = 0) -> RawDataset:
    """Append class-independent Gaussian coordinates making up ``fraction`` of the features."""
    if not 0.0 <= fraction < 1.0:
        raise ValueError("fraction must be in [0, 1)")
    X = data.samples.reshape(len(data), -1)
    d = X.shape[1]
    extra = int(round(fraction * d / (1.0 - fraction)))
    rng = np.random.default_rng(seed)
    scale = X.std() if scale is None else scale
    noise = rng.normal(0.0, scale, size=(len(X), extra))
    return RawDataset(np.concatenate([X, noise], axis=1), data.labels, data.name + "+noise",
                      data.n_classes)


# -- splits -------------------------------------------------------------------

def split_semisupervised(data: RawDataset, n_labels: int, seed: int = 0,
                         test: Optional[RawDataset] = None) -> SplitDataset:
    """Class-balanced labeled draw; the remaining training samples lose their labels."""
    if data.labels is None:
        raise ValueError("training data must carry labels to draw a labeled subset")
    C = data.n_classes
    if n_labels < 0 or n_labels > len(data):
        raise ValueError(f"n_labels must be in [0, {len(data)}]")
    if n_labels % C:
        raise ValueError(f"label budget {n_labels} is not divisible by {C} classes")
    per_class = n_labels // C
    rng = np.random.default_rng(seed)
    chosen = []
    for c in range(C):
        members = np.flatnonzero(data.labels == c)
        if len(members) < per_class:
            raise ValueError(f"class {c} has {len(members)} samples, {per_class} requested")
        chosen.append(rng.choice(members, size=per_class, replace=False))
    lab_idx = np.sort(np.concatenate(chosen)) if chosen else np.zeros(0, np.int64)
    unl_mask = np.ones(len(data), bool)
    unl_mask[lab_idx] = False
    unl_idx = np.flatnonzero(unl_mask)
    if test is None:
        test_x = np.zeros((0,) + data.samples.shape[1:])
        test_y = np.zeros(0, np.int64)
    else:
        test_x, test_y = test.samples, test.labels
    return SplitDataset(data.samples[lab_idx], data.labels[lab_idx], data.samples[unl_idx],
                        test_x, test_y, C, lab_idx, unl_idx)


# -- image ingestion ----------------------------------------------------------

def save_dataset(data: RawDataset, path) -> None:
    """Write samples then (optionally) labels as concatenated tensor containers."""
    with open(path, "wb") as fh:
        T.write_tensor(fh, data.samples)
        if data.labels is not None:
            T.write_tensor(fh, data.labels.astype(np.float64))


_IDX_TYPES = {0x08: ">u1", 0x09: ">i1", 0x0B: ">i2", 0x0C: ">i4", 0x0D: ">f4", 0x0E: ">f8"}


def read_idx(path) -> np.ndarray:
    buf = Path(path).read_bytes()
    if len(buf) < 4 or buf[0] != 0 or buf[1] != 0 or buf[2] not in _IDX_TYPES:
        raise T.TensorFormatError(f"bad IDX magic {buf[:4]!r}")
    dtype = np.dtype(_IDX_TYPES[buf[2]])
    ndim = buf[3]
    header = 4 + 4 * ndim
    if len(buf) < header:
        raise T.TensorFormatError(f"truncated IDX header at byte offset {len(buf)}")
    dims = struct.unpack(f">{ndim}I", buf[4:header])
    nbytes = int(np.prod(dims, dtype=np.int64)) * dtype.itemsize
    if len(buf) < header + nbytes:
        raise T.TensorFormatError(
            f"truncated IDX payload: expected {nbytes} bytes from offset {header}, "
            f"file ends at byte offset {len(buf)}")
    return np.frombuffer(buf, dtype=dtype, count=int(np.prod(dims)), offset=header).reshape(dims)


def load_image_dataset(path, format: str = "tensor-container", labels_path=None,
                       n_classes: Optional[int] = None, name: Optional[str] = None) -> RawDataset:
    """Load samples as (N, C, H, W) plus optional integer labels."""
    path = Path(path)
    if format == "tensor-container":
        tensors = T.load_tensors(path)
        if not tensors or len(tensors) > 2:
            raise T.TensorFormatError(f"expected 1 or 2 tensors in {path}, found {len(tensors)}")
        samples = tensors[0]
        labels = tensors[1] if len(tensors) == 2 else None
        if labels_path is not None:
            labels = T.load_tensor(labels_path)
    elif format == "idx":
        samples = read_idx(path)
        labels = read_idx(labels_path) if labels_path is not None else None
        if samples.ndim == 3:
            samples = samples[:, None]
        samples = samples.astype(np.float64)
    else:
        raise ValueError(f"unknown dataset format {format!r}")
    if labels is not None:
        labels = np.asarray(labels).astype(np.int64).reshape(-1)
        if len(labels) != len(samples):
            raise ValueError(f"label/sample count mismatch: {len(labels)} labels, {len(samples)} samples")
    if n_classes is None:
        n_classes = int(labels.max()) + 1 if labels is not None and len(labels) else 0
    return RawDataset(samples, labels, name or path.stem, n_classes)
