"""scikit-learn compatible wrappers.

``InversionClassifier`` trains a dense network on partially labeled data: rows
whose target equals ``unlabeled_marker`` (default ``-1``) are used only by the
entropy and reconstruction terms. ``SampleNormalizer`` applies the per-sample
centring and reduction used throughout the package.
"""

from __future__ import annotations

from typing import Optional, Sequence

import numpy as np
from sklearn.base import BaseEstimator, ClassifierMixin, TransformerMixin
from sklearn.preprocessing import LabelEncoder
from sklearn.utils.multiclass import check_classification_targets
from sklearn.utils.validation import check_array, check_is_fitted, validate_data

from .data import SplitDataset, normalize_samples, prepare_vectors
from .losses import UNLABELED, LossConfig, recon_multiscale
from .network import LayerSpec, Network, NetworkSpec
from .trainer import TrainConfig, train


class SampleNormalizer(TransformerMixin, BaseEstimator):
    """Centre each row and divide by its largest absolute deviation.

    With ``lift=True`` rows are first mapped to ``[x, -x, a, -a]`` where the
    anchor ``a`` is learned from the training data in ``fit``; this keeps the
    mean and scale of short feature vectors, which plain normalisation would
    discard.
    """

    def __init__(self, lift: bool = False, anchor_margin: float = 1.25):
        self.lift = lift
        self.anchor_margin = anchor_margin

    def fit(self, X, y=None):
        X = validate_data(self, X, reset=True)
        if self.anchor_margin <= 1.0:
            raise ValueError("anchor_margin must exceed 1")
        self.anchor_ = self.anchor_margin * max(float(np.abs(X).max()), np.finfo(float).tiny)
        return self

    def transform(self, X):
        check_is_fitted(self, "anchor_")
        X = validate_data(self, X, reset=False)
        if not self.lift:
            return normalize_samples(X)
        # samples outside the fitted range are clipped so the anchor stays the peak
        limit = np.nextafter(self.anchor_, 0.0)
        return prepare_vectors(np.clip(X, -limit, limit), self.anchor_)


class InversionClassifier(ClassifierMixin, BaseEstimator):
    """Semi-supervised dense network trained with the renormalised inversion loss.

    Parameters mirror :class:`~inversion_ssl.trainer.TrainConfig`; ``mode``
    selects the loss (``"lambda"``, ``"gamma"`` or ``"original"``).
    """

    def __init__(self, hidden: Sequence[int] = (32, 32), activation: str = "leaky_relu",
                 batch_norm: bool = False, mode: str = "lambda", alpha: float = 0.5,
                 beta: float = 0.5, epochs: int = 30, lr0: float = 0.002, batch_size: int = 50,
                 lr_halve_epochs: Optional[Sequence[int]] = None, random_state: int = 0,
                 unlabeled_marker=UNLABELED):
        self.hidden = hidden
        self.activation = activation
        self.batch_norm = batch_norm
        self.mode = mode
        self.alpha = alpha
        self.beta = beta
        self.epochs = epochs
        self.lr0 = lr0
        self.batch_size = batch_size
        self.lr_halve_epochs = lr_halve_epochs
        self.random_state = random_state
        self.unlabeled_marker = unlabeled_marker

    def _spec(self, n_features: int, n_classes: int) -> NetworkSpec:
        layers = tuple(LayerSpec("dense", int(h), activation=self.activation, batch_norm=self.batch_norm)
                       for h in self.hidden)
        return NetworkSpec((n_features,), layers + (LayerSpec("dense", n_classes, activation="none"),),
                           n_classes)

    def fit(self, X, y):
        X, y = validate_data(self, X, y, reset=True, dtype=np.float64)
        check_classification_targets(y)
        labeled = y != self.unlabeled_marker
        if not labeled.any():
            raise ValueError("at least one labeled sample is required")
        self.label_encoder_ = LabelEncoder().fit(y[labeled])
        self.classes_ = self.label_encoder_.classes_
        if len(self.classes_) < 2:
            raise ValueError("labeled samples cover only one class; need at least two")
        y_lab = self.label_encoder_.transform(y[labeled])
        data = SplitDataset(X[labeled], y_lab, X[~labeled], np.zeros((0, X.shape[1])),
                            np.zeros(0, np.int64), len(self.classes_))
        halve = self.lr_halve_epochs
        if halve is None:
            halve = (int(self.epochs * 0.4), int(self.epochs * 0.75))
        cfg = TrainConfig(lr0=self.lr0, batch_size=self.batch_size, epochs=self.epochs,
                          lr_halve_epochs=tuple(halve), seed=self.random_state,
                          loss=LossConfig(self.mode, self.alpha, self.beta, len(self.classes_)),
                          eval_every=max(self.epochs, 1))
        result = train(self._spec(X.shape[1], len(self.classes_)), data, cfg)
        if result.status != "completed":
            raise RuntimeError(result.message)
        self.network_: Network = result.network
        self.n_iter_ = len(result.steps)
        return self

    def predict_proba(self, X) -> np.ndarray:
        check_is_fitted(self, "network_")
        X = validate_data(self, X, reset=False, dtype=np.float64)
        return self.network_.predict_proba(X)

    def decision_function(self, X) -> np.ndarray:
        """Logits; for two classes the margin ``z[1] - z[0]`` as sklearn expects."""
        z = self._logits(X)
        return z[:, 1] - z[:, 0] if z.shape[1] == 2 else z

    def _logits(self, X) -> np.ndarray:
        check_is_fitted(self, "network_")
        X = validate_data(self, X, reset=False, dtype=np.float64)
        return self.network_.logits(X)

    def predict(self, X) -> np.ndarray:
        idx = np.argmax(self._logits(X), axis=1)
        return self.classes_[idx]

    def reconstruction_errors(self, X) -> np.ndarray:
        """Per-layer reconstruction errors (eval mode, averaged over ``X``)."""
        check_is_fitted(self, "network_")
        X = check_array(X, dtype=np.float64)
        trace = self.network_.forward(X, mode="eval")
        out = np.array(recon_multiscale(trace))
        trace.tape.release()
        return out
