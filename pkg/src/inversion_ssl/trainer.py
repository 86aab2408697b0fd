"""Semi-supervised training loop: mixed batches, Adam, step schedule, metrics."""

from __future__ import annotations

import csv
import logging
import math
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional

import numpy as np

from . import autodiff as ad
from . import tensor as T
from .data import SplitDataset
from .losses import UNLABELED, LossConfig, compute_loss
from .network import Network, NetworkSpec, save_checkpoint

logger = logging.getLogger(__name__)

STEP_FILE = "metrics.csv"
EPOCH_FILE = "epochs.csv"


@dataclass
class TrainConfig:
    lr0: float = 0.002
    batch_size: int = 50
    labeled_fraction: float = 0.5
    epochs: int = 100
    lr_halve_epochs: tuple = (40, 75)
    optimizer: str = "adam"
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    seed: int = 0
    loss: LossConfig = field(default_factory=LossConfig)
    eval_every: int = 1

    def __post_init__(self):
        self.lr_halve_epochs = tuple(int(e) for e in self.lr_halve_epochs)
        if not self.lr0 > 0:
            raise ValueError("lr0 must be positive")
        if self.batch_size < 2:
            raise ValueError("batch_size must be >= 2")
        if not 0.0 < self.labeled_fraction < 1.0:
            raise ValueError("labeled_fraction must be in (0, 1)")
        if self.labeled_fraction == 0.5 and self.batch_size % 2:
            raise ValueError("batch_size must be even when half the batch is labeled")
        if self.epochs < 0:
            raise ValueError("epochs must be >= 0")
        if self.optimizer not in ("adam", "sgd"):
            raise ValueError(f"unknown optimizer {self.optimizer!r}")
        if list(self.lr_halve_epochs) != sorted(self.lr_halve_epochs):
            raise ValueError("lr_halve_epochs must be sorted")
        if self.eval_every < 1:
            raise ValueError("eval_every must be >= 1")


@dataclass
class Batch:
    x: np.ndarray
    labels: np.ndarray  # -1 for unlabeled rows

    @property
    def n_labeled(self) -> int:
        return int((self.labels != UNLABELED).sum())

    @property
    def n_unlabeled(self) -> int:
        return int((self.labels == UNLABELED).sum())


def compose_batches(data: SplitDataset, config: TrainConfig, epoch_seed: int) -> list[Batch]:
    """One epoch of mixed batches.

    Every unlabeled sample appears exactly once. The labeled pool is
    replicated a whole number of times, shuffled, then truncated so that each
    batch carries its share of labeled rows.
    """
    n_s, n_u = data.n_labeled, data.n_unlabeled
    if n_s == 0:
        raise ValueError("the labeled pool is empty")
    rng = np.random.default_rng(epoch_seed)
    if n_u == 0:
        # fully supervised: one pass over the labeled pool
        order = rng.permutation(n_s)
        bs = config.batch_size
        return [Batch(data.labeled_x[order[i:i + bs]], data.labeled_y[order[i:i + bs]])
                for i in range(0, n_s, bs)]
    n_lab = int(round(config.batch_size * config.labeled_fraction))
    n_lab = min(max(n_lab, 1), config.batch_size - 1)
    n_unl = config.batch_size - n_lab
    n_batches = math.ceil(n_u / n_unl)
    unl_order = rng.permutation(n_u)
    chunks = [unl_order[i * n_unl:(i + 1) * n_unl] for i in range(n_batches)]
    lab_counts = [n_lab if len(c) == n_unl else max(1, math.ceil(len(c) * n_lab / n_unl))
                  for c in chunks]
    needed = sum(lab_counts)
    reps = math.ceil(needed / n_s)
    lab_stream = rng.permutation(np.tile(np.arange(n_s), reps))[:needed]
    batches, pos = [], 0
    for chunk, k in zip(chunks, lab_counts):
        li = lab_stream[pos:pos + k]
        pos += k
        x = np.concatenate([data.labeled_x[li], data.unlabeled_x[chunk]])
        y = np.concatenate([data.labeled_y[li], np.full(len(chunk), UNLABELED)])
        batches.append(Batch(x, y))
    return batches


def lr_schedule(lr0: float, epoch: int, halve_at) -> float:
    """``lr0`` halved once for every threshold already reached."""
    return lr0 / 2 ** sum(1 for e in halve_at if e <= epoch)


@dataclass
class OptimizerState:
    m: dict = field(default_factory=dict)
    v: dict = field(default_factory=dict)
    t: int = 0


def _check_grads(grads):
    for name, g in grads.items():
        if not np.all(np.isfinite(g)):
            raise T.NonFiniteError(f"non-finite gradient for {name}")


def adam_step(state: OptimizerState, params: dict, grads: dict, lr: float,
              beta1: float = 0.9, beta2: float = 0.999, eps: float = 1e-8
              ) -> tuple[dict, OptimizerState]:
    """Bias-corrected Adam update; returns new parameter and state objects."""
    _check_grads(grads)
    t = state.t + 1
    m, v, out = dict(state.m), dict(state.v), dict(params)
    bc1 = 1.0 - beta1 ** t
    bc2 = 1.0 - beta2 ** t
    for name, g in grads.items():
        p = params[name]
        if p.shape != g.shape:
            raise T.ShapeError(f"{name}: gradient shape {g.shape} != parameter shape {p.shape}")
        m[name] = beta1 * m.get(name, np.zeros_like(p)) + (1 - beta1) * g
        v[name] = beta2 * v.get(name, np.zeros_like(p)) + (1 - beta2) * (g * g)
        out[name] = p - lr * (m[name] / bc1) / (np.sqrt(v[name] / bc2) + eps)
    return out, OptimizerState(m, v, t)


def sgd_step(state: OptimizerState, params: dict, grads: dict, lr: float
             ) -> tuple[dict, OptimizerState]:
    _check_grads(grads)
    out = dict(params)
    for name, g in grads.items():
        out[name] = params[name] - lr * g
    return out, OptimizerState(state.m, state.v, state.t + 1)


def evaluate(net: Network, x, y, jobs: int = 1, chunk: int = 500) -> float:
    """Categorical accuracy of eval-mode predictions; argmax ties go to the lowest class.

    Eval mode treats samples independently, so with ``jobs > 1`` chunks of the
    test set are scored on separate threads. The result does not depend on
    ``jobs``.
    """
    y = np.asarray(y)
    if len(y) == 0:
        raise ValueError("test set is empty")
    if jobs < 1:
        raise ValueError("jobs must be >= 1")
    starts = range(0, len(y), chunk)
    if jobs == 1 or len(starts) == 1:
        logits = [net.logits(x[i:i + chunk]) for i in starts]
    else:
        with ThreadPoolExecutor(jobs) as pool:
            logits = list(pool.map(lambda i: net.logits(x[i:i + chunk]), starts))
    pred = np.argmax(np.concatenate(logits), axis=1)
    return float(np.mean(pred == y))


@dataclass
class TrainResult:
    network: Network
    steps: list[dict]
    epochs: list[dict]
    status: str = "completed"  # or "diverged"
    diverged_at: Optional[int] = None  # global batch index
    message: str = ""

    @property
    def final_accuracy(self) -> float:
        return self.epochs[-1]["test_accuracy"] if self.epochs else float("nan")


def step_header(depth_columns: int) -> list[str]:
    return (["step", "epoch", "lr", "n_labeled", "n_unlabeled", "ce", "entropy"]
            + [f"recon_{i}" for i in range(depth_columns)] + ["total"])


def _fmt(v):
    return repr(float(v)) if isinstance(v, (float, np.floating)) else str(v)


class MetricsWriter:
    """Streams per-batch and per-epoch rows to CSV."""

    def __init__(self, directory, recon_columns: int):
        self.dir = Path(directory)
        self.dir.mkdir(parents=True, exist_ok=True)
        self._steps = open(self.dir / STEP_FILE, "w", newline="")
        self._epochs = open(self.dir / EPOCH_FILE, "w", newline="")
        self.step_writer = csv.writer(self._steps, lineterminator="\n")
        self.epoch_writer = csv.writer(self._epochs, lineterminator="\n")
        self.step_cols = step_header(recon_columns)
        self.step_writer.writerow(self.step_cols)
        self.epoch_writer.writerow(["epoch", "test_accuracy", "wall_seconds"])

    def step(self, row: dict):
        self.step_writer.writerow([_fmt(row[c]) for c in self.step_cols])

    def epoch(self, row: dict):
        self.epoch_writer.writerow([row["epoch"], _fmt(row["test_accuracy"]),
                                    f"{row['wall_seconds']:.3f}"])
        self._epochs.flush()

    def close(self):
        self._steps.close()
        self._epochs.close()


def _derive_seed(*parts: int) -> int:
    return int(np.random.SeedSequence([int(p) & 0xFFFFFFFF for p in parts]).generate_state(1)[0])


def train(spec: NetworkSpec, data: SplitDataset, config: TrainConfig,
          out_dir=None, network: Optional[Network] = None, jobs: int = 1) -> TrainResult:
    """Train ``spec`` on ``data``; deterministic given ``config.seed``.

    With ``out_dir`` the metrics CSVs are streamed there and a checkpoint is
    written at every evaluation point and at the end.
    """
    net = network.copy() if network is not None else Network(spec, seed=config.seed)
    loss_cfg = config.loss
    if loss_cfg.n_classes != spec.n_classes:
        raise ValueError(f"loss n_classes {loss_cfg.n_classes} != network n_classes {spec.n_classes}")
    recon_cols = spec.depth if loss_cfg.mode == "lambda" else 1
    writer = MetricsWriter(out_dir, recon_cols) if out_dir is not None else None
    steps: list[dict] = []
    epochs: list[dict] = []
    opt = OptimizerState()
    t0 = time.perf_counter()
    has_test = len(data.test_y) > 0

    def record_epoch(e):
        acc = evaluate(net, data.test_x, data.test_y, jobs) if has_test else float("nan")
        row = {"epoch": e, "test_accuracy": acc, "wall_seconds": time.perf_counter() - t0}
        epochs.append(row)
        if writer:
            writer.epoch(row)
            save_checkpoint(net, Path(out_dir) / "checkpoint", {"epoch": e})
        logger.info("epoch %d accuracy %.4f", e, acc)

    result = TrainResult(net, steps, epochs)
    try:
        record_epoch(0)
        step = 0
        for epoch in range(1, config.epochs + 1):
            lr = lr_schedule(config.lr0, epoch, config.lr_halve_epochs)
            for batch in compose_batches(data, config, _derive_seed(config.seed, epoch)):
                try:
                    with np.errstate(over="ignore", invalid="ignore"):
                        trace = net.forward(batch.x, mode="train", rng_seed=_derive_seed(config.seed, 1_000_003, step))
                        breakdown = compute_loss(trace, batch.labels, loss_cfg)
                        row = {"step": step, "epoch": epoch, "lr": lr, **breakdown.as_row()}
                        values = [breakdown.ce, breakdown.entropy, breakdown.total, *breakdown.recon_per_layer]
                        if not np.all(np.isfinite(values)):
                            raise T.NonFiniteError("non-finite loss component")
                        names = list(trace.params)
                        g = ad.grad(trace.tape, breakdown.node, [trace.params[n] for n in names])
                        grads = {n: g[trace.params[n]] for n in names}
                        if config.optimizer == "adam":
                            params, opt = adam_step(opt, net.params, grads, lr, config.beta1,
                                                    config.beta2, config.eps)
                        else:
                            params, opt = sgd_step(opt, net.params, grads, lr)
                except T.NonFiniteError as exc:
                    result.status = "diverged"
                    result.diverged_at = step
                    result.message = f"diverged at batch {step} (epoch {epoch}): {exc}"
                    logger.warning(result.message)
                    return result
                net.params = params
                net.update_running_stats(trace)
                trace.tape.release()
                steps.append(row)
                if writer:
                    writer.step(row)
                step += 1
            if epoch % config.eval_every == 0 or epoch == config.epochs:
                record_epoch(epoch)
        return result
    finally:
        if writer:
            writer.close()
            if result.status == "diverged":
                save_checkpoint(net, Path(out_dir) / "checkpoint",
                                {"epoch": epochs[-1]["epoch"] if epochs else 0, "diverged_at": result.diverged_at})
