"""Desk-scale semi-supervised experiments on synthetic vector data.

Low-dimensional points are observed through a fixed random linear map into a
higher-dimensional space, then lifted and normalised per sample (see
:func:`inversion_ssl.data.prepare_vectors`). This mimics the situation the
reconstruction losses are designed for: many correlated input coordinates
generated from a few latent factors.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Optional, Sequence

import numpy as np
from sklearn.model_selection import train_test_split

from .data import RawDataset, SplitDataset, make_clusters, make_half_moons, prepare_vectors, split_semisupervised
from .losses import LossConfig, recon_multiscale
from .network import LayerSpec, Network, NetworkSpec
from .trainer import TrainConfig, TrainResult, train

OBSERVED_DIM = 128
ANCHOR_MARGIN = 1.25


def observe(X, dim: int = OBSERVED_DIM, seed: int = 7, corrupt: float = 0.0,
            corrupt_seed: int = 0, additive: float = 0.0) -> np.ndarray:
    """Project ``X`` through a random Gaussian map and normalise each sample.

    ``corrupt`` replaces that fraction of the observed coordinates (the same
    ones for every sample) with class-independent Gaussian noise matched to
    the signal's spread.
    """
    X = np.asarray(X, dtype=np.float64)
    if not 0.0 <= corrupt < 1.0:
        raise ValueError("corrupt must be in [0, 1)")
    P = np.random.default_rng(seed).normal(size=(X.shape[1], dim)) / np.sqrt(X.shape[1])
    Z = X @ P
    if corrupt:
        rng = np.random.default_rng(corrupt_seed)
        cols = rng.choice(dim, int(round(corrupt * dim)), replace=False)
        Z[:, cols] = rng.normal(0.0, Z.std(), size=(len(Z), len(cols)))
    if additive:
        rng = np.random.default_rng(corrupt_seed + 1)
        Z = Z + rng.normal(0.0, additive * Z.std(), size=Z.shape)
    return prepare_vectors(Z, ANCHOR_MARGIN * np.abs(Z).max())


def moons_split(seed: int, n_samples: int = 1000, n_labels: int = 4, noise: float = 0.1,
                n_test: int = 1000) -> SplitDataset:
    raw = make_half_moons(n_samples + n_test, noise, seed=seed)
    return _split(raw, observe(raw.samples), n_labels, n_test, seed)


def clusters_split(seed: int, n_samples: int = 2000, n_labels: int = 50, n_classes: int = 10,
                   n_features: int = 8, spread: float = 1.5, corrupt: float = 0.0, additive: float = 0.0,
                   n_test: int = 1000) -> SplitDataset:
    """Gaussian clusters; ``corrupt=0.2`` gives the noisy variant."""
    per_class = -(-(n_samples + n_test) // n_classes)
    raw = make_clusters(per_class, n_classes, spread=spread, seed=seed, n_features=n_features)
    X = observe(raw.samples, corrupt=corrupt, corrupt_seed=seed + 99, additive=additive)
    return _split(raw, X, n_labels, n_test, seed)


def _split(raw: RawDataset, X, n_labels: int, n_test: int, seed: int) -> SplitDataset:
    xtr, xte, ytr, yte = train_test_split(X, raw.labels, test_size=n_test, stratify=raw.labels,
                                          random_state=seed)
    C = raw.n_classes
    return split_semisupervised(RawDataset(xtr, ytr, raw.name, C), n_labels, seed=seed,
                                test=RawDataset(xte, yte, raw.name, C))


def mlp_spec(n_inputs: int, n_classes: int, hidden: Sequence[int] = (32, 32),
             activation: str = "leaky_relu", batch_norm: bool = False) -> NetworkSpec:
    layers = tuple(LayerSpec("dense", h, activation=activation, batch_norm=batch_norm)
                   for h in hidden)
    return NetworkSpec((n_inputs,), layers + (LayerSpec("dense", n_classes, activation="none"),),
                       n_classes)


ARMS = {
    "lambda": dict(mode="lambda"),
    "gamma": dict(mode="gamma"),
    "supervised": dict(mode="original", alpha=1.0, beta=0.0),
}


@dataclass
class ArmResult:
    arm: str
    seed: int
    accuracy: float
    deepest_recon: float
    result: TrainResult


def run_arm(split: SplitDataset, arm: str, seed: int, epochs: int = 30, lr0: float = 0.002,
            spec: Optional[NetworkSpec] = None) -> ArmResult:
    spec = spec or mlp_spec(split.labeled_x.shape[1], split.n_classes)
    loss = LossConfig(n_classes=split.n_classes, **ARMS[arm])
    cfg = TrainConfig(lr0=lr0, epochs=epochs, lr_halve_epochs=(int(epochs * 0.4), int(epochs * 0.75)),
                      seed=seed, loss=loss, eval_every=epochs or 1)
    res = train(spec, split, cfg)
    return ArmResult(arm, seed, res.final_accuracy, deepest_reconstruction(res.network, split.unlabeled_x), res)


def deepest_reconstruction(net: Network, x) -> float:
    """Reconstruction error at the last hidden layer, eval mode, averaged over ``x``."""
    trace = net.forward(x, mode="eval")
    value = recon_multiscale(trace)[-1]
    trace.tape.release()
    return value
