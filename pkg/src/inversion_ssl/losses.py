"""Semi-supervised loss family built on a traced forward pass.

Reconstructions are vector-Jacobian products seeded with the pre-softmax
output: ``r[l] = (dz[L]/dz[l])^T z[L]``. The backward sweep that produces them
is recorded on the same tape, so every loss here is differentiable with
respect to the parameters (including through the seed).

Batch conventions: ``labels`` holds a class index per sample, ``-1`` marks an
unlabeled sample. Cross-entropy is averaged over labeled samples, entropy over
unlabeled ones and reconstruction over all of them; absent terms are zero.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Optional

import numpy as np

from . import autodiff as ad
from .network import ForwardTrace

MODES = ("gamma", "lambda", "original")
UNLABELED = -1


@dataclass(frozen=True)
class LossConfig:
    mode: str = "lambda"
    alpha: float = 0.5
    beta: float = 0.5
    n_classes: int = 10

    def __post_init__(self):
        if self.mode not in MODES:
            raise ValueError(f"loss mode must be one of {MODES}, got {self.mode!r}")
        for name in ("alpha", "beta"):
            v = getattr(self, name)
            if not 0.0 <= v <= 1.0:
                raise ValueError(f"{name} must be in [0, 1], got {v}")
        if self.n_classes < 2:
            raise ValueError("n_classes must be >= 2")

    def weights(self) -> tuple[float, float, float]:
        """(cross-entropy, entropy, reconstruction) weights of the original convex combination."""
        a, b = self.alpha, self.beta
        return a, (1 - a) * b, (1 - a) * (1 - b)


@dataclass
class LossBreakdown:
    mode: str
    ce: float
    entropy: float
    recon_per_layer: list[float]
    total: float
    n_labeled: int
    n_unlabeled: int
    sizes: list[int] = field(default_factory=list)
    node: Optional[ad.Node] = field(default=None, repr=False, compare=False)

    def recompute_total(self, config: LossConfig) -> float:
        """Total rebuilt from the stored components."""
        if self.mode == "original":
            w_ce, w_e, w_r = config.weights()
            return w_ce * self.ce + w_e * self.entropy + w_r * self.recon_per_layer[0]
        cls = (self.ce + self.entropy) / math.log(config.n_classes)
        if self.mode == "gamma":
            return cls + self.recon_per_layer[0] / self.sizes[0]
        terms = [r / d for r, d in zip(self.recon_per_layer, self.sizes)]
        return cls + sum(terms) / len(terms)

    def as_row(self) -> dict:
        row = {"n_labeled": self.n_labeled, "n_unlabeled": self.n_unlabeled,
               "ce": self.ce, "entropy": self.entropy}
        for i, r in enumerate(self.recon_per_layer):
            row[f"recon_{i}"] = r
        row["total"] = self.total
        return row


# -- per-prediction helpers (plain arrays) -------------------------------------

def cross_entropy(prediction, label: int) -> float:
    """``-log prediction[label]`` for one probability vector."""
    p = np.asarray(prediction, dtype=np.float64)
    if not 0 <= label < p.shape[-1]:
        raise ValueError(f"label {label} out of range for {p.shape[-1]} classes")
    return float(-np.log(p[label]))


def cross_entropy_from_logits(logits, label: int) -> float:
    z = np.asarray(logits, dtype=np.float64)
    if not 0 <= label < z.shape[-1]:
        raise ValueError(f"label {label} out of range for {z.shape[-1]} classes")
    m = z.max()
    return float(m + np.log(np.exp(z - m).sum()) - z[label])


def entropy(prediction) -> float:
    """Shannon entropy in nats, with ``0 log 0 = 0``."""
    p = np.asarray(prediction, dtype=np.float64)
    if np.any(p < 0):
        raise ValueError("probabilities must be non-negative")
    nz = p[p > 0]
    return float(-(nz * np.log(nz)).sum())


# -- differentiable batch terms -------------------------------------------------

def _split(labels, n: int) -> np.ndarray:
    labels = np.asarray(labels if labels is not None else [UNLABELED] * n, dtype=np.int64)
    if labels.shape != (n,):
        raise ValueError(f"expected {n} labels, got shape {labels.shape}")
    return labels


def cross_entropy_term(logits: ad.Node, labels) -> Optional[ad.Node]:
    """Mean cross-entropy over labeled rows, or ``None`` if there are none."""
    n, c = logits.shape
    labels = _split(labels, n)
    mask = labels != UNLABELED
    if not mask.any():
        return None
    if np.any(labels[mask] >= c) or np.any(labels < UNLABELED):
        raise ValueError(f"label out of range for {c} classes")
    onehot = np.zeros((n, c))
    onehot[np.flatnonzero(mask), labels[mask]] = 1.0
    logp = ad.log_softmax(logits)
    picked = ad.sum_all(ad.mul(logp, logits.tape.constant(onehot)))
    return ad.scale(picked, -1.0 / mask.sum())


def entropy_term(logits: ad.Node, labels) -> Optional[ad.Node]:
    """Mean prediction entropy over unlabeled rows, or ``None``."""
    n, c = logits.shape
    labels = _split(labels, n)
    mask = labels == UNLABELED
    if not mask.any():
        return None
    logp = ad.log_softmax(logits)
    plogp = ad.mul(ad.exp(logp), logp)
    rows = logits.tape.constant(np.repeat(mask[:, None].astype(float), c, axis=1))
    return ad.scale(ad.sum_all(ad.mul(plogp, rows)), -1.0 / mask.sum())


def reconstructions(trace: ForwardTrace, layers=None, record: bool = True) -> dict[int, ad.Node]:
    """``(dz[L]/dz[l])^T z[L]`` for each requested layer index, from one backward sweep."""
    depth = trace.depth
    layers = list(range(depth)) if layers is None else list(layers)
    for l in layers:
        if not 0 <= l < depth:
            raise IndexError(f"layer {l} out of range for a depth-{depth} network")
    if trace.tape.released:
        raise ad.TapeError("tape has been released")
    targets = [trace.activations[l] for l in layers]
    adj = ad.vjp(trace.tape, trace.logits, trace.logits, targets, record_backward=record)
    return {l: adj[t] for l, t in zip(layers, targets)}


def _squared_error(z: ad.Node, r: ad.Node) -> ad.Node:
    """Batch mean of the per-sample squared error."""
    d = ad.sub(z, r)
    return ad.scale(ad.sum_all(ad.mul(d, d)), 1.0 / z.shape[0])


def recon_multiscale_terms(trace: ForwardTrace) -> list[ad.Node]:
    recs = reconstructions(trace)
    return [_squared_error(trace.activations[l], recs[l]) for l in range(trace.depth)]


def recon_global_term(trace: ForwardTrace) -> ad.Node:
    r = reconstructions(trace, [0])[0]
    return _squared_error(trace.input, r)


def recon_global(trace: ForwardTrace) -> float:
    """``||x - (dz[L]/dx)^T z[L]||^2`` averaged over the batch."""
    return float(recon_global_term(trace).value)


def recon_multiscale(trace: ForwardTrace) -> list[float]:
    """Per-layer reconstruction errors for ``l = 0 .. L-1`` from a single sweep."""
    return [float(t.value) for t in recon_multiscale_terms(trace)]


def lambda_value(recon: list[float], sizes: list[int]) -> float:
    return sum(r / d for r, d in zip(recon, sizes)) / len(recon)


def _val(node: Optional[ad.Node]) -> float:
    return 0.0 if node is None else float(node.value)


def _counts(trace, labels):
    labels = _split(labels, trace.logits.shape[0])
    n_lab = int((labels != UNLABELED).sum())
    return labels, n_lab, len(labels) - n_lab


def _weighted_sum(tape, terms):
    total = None
    for w, node in terms:
        if node is None or w == 0.0:
            continue
        term = ad.scale(node, w)
        total = term if total is None else ad.add(total, term)
    return total if total is not None else tape.constant(0.0)


def loss_original(trace: ForwardTrace, labels, config: LossConfig) -> LossBreakdown:
    """Convex combination of cross-entropy, entropy and global reconstruction."""
    labels, n_lab, n_unl = _counts(trace, labels)
    w_ce, w_e, w_r = config.weights()
    ce = cross_entropy_term(trace.logits, labels)
    ent = entropy_term(trace.logits, labels)
    rec = recon_global_term(trace) if w_r > 0 else None
    rec_value = _val(rec) if rec is not None else recon_global_value(trace)
    total = _weighted_sum(trace.tape, [(w_ce, ce), (w_e, ent), (w_r, rec)])
    return LossBreakdown("original", _val(ce), _val(ent), [rec_value], float(total.value),
                         n_lab, n_unl, trace.sizes[:1], total)


def recon_global_value(trace: ForwardTrace) -> float:
    """Global reconstruction error computed off-tape (for logging only)."""
    r = reconstructions(trace, [0], record=False)[0]
    d = trace.input.value - r.value
    return float((d * d).sum() / d.shape[0])


def loss_renormalized(trace: ForwardTrace, labels, config: LossConfig) -> LossBreakdown:
    """Classification terms scaled by ``1/log C`` plus size-normalised reconstruction."""
    if config.mode not in ("gamma", "lambda"):
        raise ValueError("renormalized loss needs mode 'gamma' or 'lambda'")
    labels, n_lab, n_unl = _counts(trace, labels)
    inv_log_c = 1.0 / math.log(config.n_classes)
    ce = cross_entropy_term(trace.logits, labels)
    ent = entropy_term(trace.logits, labels)
    if config.mode == "gamma":
        recs = [recon_global_term(trace)]
        sizes = trace.sizes[:1]
        rec_terms = [(1.0 / sizes[0], recs[0])]
    else:
        recs = recon_multiscale_terms(trace)
        sizes = trace.sizes
        depth = len(recs)
        rec_terms = [(1.0 / (depth * d), r) for r, d in zip(recs, sizes)]
    total = _weighted_sum(trace.tape, [(inv_log_c, ce), (inv_log_c, ent)] + rec_terms)
    return LossBreakdown(config.mode, _val(ce), _val(ent), [_val(r) for r in recs],
                         float(total.value), n_lab, n_unl, list(sizes), total)


def compute_loss(trace: ForwardTrace, labels, config: LossConfig) -> LossBreakdown:
    if config.mode == "original":
        return loss_original(trace, labels, config)
    return loss_renormalized(trace, labels, config)
