"""Command-line entry point: train, eval, reconstruct, gradcheck.

Exit codes are a stable contract: 0 success, 1 configuration or input error,
2 training divergence, 3 failed gradient check.
"""

from __future__ import annotations

import argparse
import csv
import json
import logging
import os
import sys
from pathlib import Path
from typing import Literal, Optional

import numpy as np
from pydantic import BaseModel, ConfigDict, Field, ValidationError, model_validator

from . import autodiff as ad
from . import desk
from . import tensor as T
from .data import SplitDataset, load_image_dataset, normalize_samples, split_semisupervised
from .gradcheck import check_gradients
from .losses import MODES, UNLABELED, LossConfig, reconstructions
from .network import LayerSpec, Network, NetworkSpec, load_checkpoint, parse_cnn_spec, preset
from .trainer import TrainConfig, evaluate, train

logger = logging.getLogger("inversion_ssl")

EXIT_OK, EXIT_CONFIG, EXIT_DIVERGED, EXIT_CHECK_FAILED = 0, 1, 2, 3
SEED_ENV = "SSL_SEED"
GRADCHECK_MAX_PARAMS = 5000


class ConfigError(Exception):
    pass


class _Strict(BaseModel):
    model_config = ConfigDict(extra="forbid")


class NetworkSection(_Strict):
    """Exactly one of ``preset``, ``tuples``, ``hidden`` or ``layers`` picks the topology."""
    preset: Optional[Literal["large-cnn", "wide-resnet", "deep-resnet"]] = None
    scale: float = Field(1.0, gt=0)
    k: Optional[int] = Field(None, ge=1)
    tuples: Optional[list[tuple[int, int, Literal["s", "v", "f"], int]]] = None
    hidden: Optional[list[int]] = None
    layers: Optional[list[dict]] = None
    activation: Literal["leaky_relu", "sigmoid", "none"] = "leaky_relu"
    batch_norm: bool = False
    dropout_p: float = Field(0.0, ge=0, lt=1)

    @model_validator(mode="after")
    def _one_topology(self):
        given = [n for n in ("preset", "tuples", "hidden", "layers") if getattr(self, n) is not None]
        if len(given) != 1:
            raise ValueError(f"exactly one of preset, tuples, hidden, layers is required (got {given or 'none'})")
        return self


class LossSection(_Strict):
    mode: Literal["gamma", "lambda", "original"] = "lambda"
    alpha: float = Field(0.5, ge=0, le=1)
    beta: float = Field(0.5, ge=0, le=1)


class TrainSection(_Strict):
    lr0: float = Field(0.002, gt=0)
    batch_size: int = Field(50, ge=2)
    labeled_fraction: float = Field(0.5, gt=0, lt=1)
    epochs: int = Field(100, ge=0)
    lr_halve_epochs: list[int] = [40, 75]
    optimizer: Literal["adam", "sgd"] = "adam"
    beta1: float = Field(0.9, ge=0, lt=1)
    beta2: float = Field(0.999, ge=0, lt=1)
    eps: float = Field(1e-8, gt=0)
    seed: int = 0
    eval_every: int = Field(1, ge=1)

    @model_validator(mode="after")
    def _consistent(self):
        if self.lr_halve_epochs != sorted(self.lr_halve_epochs):
            raise ValueError("lr_halve_epochs must be sorted ascending")
        if self.labeled_fraction == 0.5 and self.batch_size % 2:
            raise ValueError("batch_size must be even when labeled_fraction is 0.5")
        return self


class DataSection(_Strict):
    kind: Literal["clusters", "half-moons", "images"]
    n_labels: int = Field(ge=0)
    seed: int = 0
    # synthetic generators
    n_samples: int = Field(1000, ge=2)
    n_test: int = Field(1000, ge=1)
    n_classes: int = Field(10, ge=2)
    n_features: int = Field(8, ge=1)
    spread: float = Field(1.5, ge=0)
    noise: float = Field(0.1, ge=0)
    corrupt: float = Field(0.0, ge=0, lt=1)
    # image files
    path: Optional[str] = None
    format: Literal["tensor-container", "idx"] = "tensor-container"
    labels_path: Optional[str] = None
    test_path: Optional[str] = None
    test_labels_path: Optional[str] = None

    @model_validator(mode="after")
    def _files(self):
        if self.kind == "images" and not self.path:
            raise ValueError("images data needs a path")
        return self


class RunConfig(_Strict):
    network: NetworkSection
    loss: LossSection = LossSection()
    train: TrainSection = TrainSection()
    data: DataSection
    output_dir: str = "run"


def _field_path(err: dict) -> str:
    return ".".join(str(p) for p in err["loc"]) or "<root>"


def load_run_config(path, seed_override: Optional[str] = None) -> RunConfig:
    """Parse and validate a run configuration; errors name the offending field."""
    try:
        raw = json.loads(Path(path).read_text())
    except OSError as exc:
        raise ConfigError(f"cannot read config {path}: {exc}") from None
    except json.JSONDecodeError as exc:
        raise ConfigError(f"{path}: invalid JSON at line {exc.lineno}: {exc.msg}") from None
    try:
        cfg = RunConfig.model_validate(raw)
    except ValidationError as exc:
        lines = [f"{_field_path(e)}: {e['msg']}" for e in exc.errors()]
        raise ConfigError("invalid config:\n  " + "\n  ".join(lines)) from None
    if seed_override is not None:
        try:
            cfg.train.seed = int(seed_override)
        except ValueError:
            raise ConfigError(f"{SEED_ENV} must be an integer, got {seed_override!r}") from None
    return cfg


# -- config -> objects ----------------------------------------------------------

def build_dataset(d: DataSection) -> SplitDataset:
    if d.kind == "clusters":
        return desk.clusters_split(d.seed, d.n_samples, d.n_labels, d.n_classes, d.n_features,
                                   d.spread, d.corrupt, n_test=d.n_test)
    if d.kind == "half-moons":
        return desk.moons_split(d.seed, d.n_samples, d.n_labels, d.noise, d.n_test)
    train_raw = load_image_dataset(d.path, d.format, d.labels_path)
    train_raw.samples = normalize_samples(train_raw.samples)
    test = None
    if d.test_path:
        test = load_image_dataset(d.test_path, d.format, d.test_labels_path, train_raw.n_classes)
        test.samples = normalize_samples(test.samples)
    return split_semisupervised(train_raw, d.n_labels, seed=d.seed, test=test)


def build_spec(n: NetworkSection, input_shape: tuple, n_classes: int) -> NetworkSpec:
    if n.preset:
        return preset(n.preset, n.scale, input_shape, n_classes, n.activation, n.k, n.batch_norm, n.dropout_p)
    if n.tuples is not None:
        return parse_cnn_spec(n.tuples, input_shape, n_classes, n.activation, n.batch_norm, n.dropout_p)
    if n.hidden is not None:
        layers = tuple(LayerSpec("dense", h, activation=n.activation, batch_norm=n.batch_norm,
                                 dropout_p=n.dropout_p) for h in n.hidden)
        return NetworkSpec(input_shape, layers + (LayerSpec("dense", n_classes, activation="none"),), n_classes)
    return NetworkSpec.from_dict({"input_shape": input_shape, "n_classes": n_classes, "layers": n.layers})


def build_run(cfg: RunConfig) -> tuple[NetworkSpec, SplitDataset, TrainConfig]:
    """Materialise dataset, topology and trainer settings; shape problems surface as ConfigError."""
    try:
        data = build_dataset(cfg.data)
        spec = build_spec(cfg.network, data.labeled_x.shape[1:], data.n_classes)
        t = cfg.train
        tcfg = TrainConfig(t.lr0, t.batch_size, t.labeled_fraction, t.epochs, tuple(t.lr_halve_epochs),
                           t.optimizer, t.beta1, t.beta2, t.eps, t.seed,
                           LossConfig(cfg.loss.mode, cfg.loss.alpha, cfg.loss.beta, data.n_classes),
                           t.eval_every)
    except (ValueError, TypeError, T.ShapeError, T.TensorFormatError, OSError) as exc:
        raise ConfigError(str(exc)) from None
    return spec, data, tcfg


# -- commands ---------------------------------------------------------------------

def cmd_train(args) -> int:
    cfg = load_run_config(args.config, os.environ.get(SEED_ENV))
    if args.output_dir:
        cfg.output_dir = args.output_dir
    spec, data, tcfg = build_run(cfg)
    out = Path(cfg.output_dir)
    out.mkdir(parents=True, exist_ok=True)
    resolved = cfg.model_dump()
    resolved["resolved_network"] = spec.to_dict()
    (out / "run.json").write_text(json.dumps(resolved, indent=2, sort_keys=True) + "\n")
    logger.info("training %d parameters on %d labeled / %d unlabeled samples",
                Network(spec, seed=tcfg.seed).n_params, data.n_labeled, data.n_unlabeled)
    result = train(spec, data, tcfg, out, jobs=args.jobs)
    if result.status == "diverged":
        print(result.message, file=sys.stderr)
        return EXIT_DIVERGED
    print(json.dumps({"status": result.status, "steps": len(result.steps),
                      "final_accuracy": result.final_accuracy}))
    return EXIT_OK


def _load_checkpoint(path) -> Network:
    try:
        return load_checkpoint(path)
    except (OSError, ValueError, KeyError, T.TensorFormatError) as exc:
        raise ConfigError(f"cannot load checkpoint {path}: {exc}") from None


def cmd_eval(args) -> int:
    net = _load_checkpoint(args.checkpoint)
    try:
        raw = load_image_dataset(args.data, args.format, args.labels, net.spec.n_classes)
    except (OSError, ValueError, T.TensorFormatError) as exc:
        raise ConfigError(str(exc)) from None
    if raw.labels is None:
        raise ConfigError(f"{args.data} carries no labels")
    x = _match_input(net, raw.samples, args.data)
    acc = evaluate(net, normalize_samples(x), raw.labels, args.jobs)
    print(json.dumps({"n_samples": len(raw), "accuracy": acc}))
    return EXIT_OK


def _match_input(net: Network, x: np.ndarray, source) -> np.ndarray:
    shape = tuple(net.spec.input_shape)
    if x.shape == shape:
        return x[None]
    if x.shape[1:] != shape:
        # vector inputs may have been stored with singleton image axes
        if x.ndim > 1 and int(np.prod(x.shape[1:])) == int(np.prod(shape)) and len(shape) == 1:
            return x.reshape(len(x), *shape)
        raise ConfigError(f"{source}: sample shape {x.shape[1:]} does not match network input {shape}")
    return x


def cmd_reconstruct(args) -> int:
    net = _load_checkpoint(args.checkpoint)
    try:
        x = T.load_tensor(args.input)
    except (OSError, T.TensorFormatError) as exc:
        raise ConfigError(str(exc)) from None
    x = _match_input(net, x, args.input)
    L = net.depth
    if args.layer == "all":
        layers = list(range(L))
    else:
        try:
            layers = [int(args.layer)]
        except ValueError:
            raise ConfigError(f"--layer must be an integer or 'all', got {args.layer!r}") from None
        if not 0 <= layers[0] < L:
            raise ConfigError(f"layer {layers[0]} out of range: the network has L={L} (valid 0..{L - 1})")
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    trace = net.forward(x.astype(net.dtype), mode="eval")
    recs = reconstructions(trace, layers, record=False)
    rows, per_sample = [], []
    for l in layers:
        r = recs[l].value
        T.save_tensor(out / f"recon_{l}.tnsr", r)
        err = ((trace.activations[l].value - r) ** 2).reshape(len(x), -1).sum(axis=1)
        rows.append((l, float(err.mean())))
        per_sample.extend((l, i, float(e)) for i, e in enumerate(err))
    trace.tape.release()
    with open(out / "recon_errors.csv", "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["layer", "recon"])
        w.writerows([(l, repr(e)) for l, e in rows])
    with open(out / "recon_errors_per_sample.csv", "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["layer", "sample", "recon"])
        w.writerows([(l, i, repr(e)) for l, i, e in per_sample])
    for l, e in rows:
        print(f"layer {l}: recon {e!r}")
    return EXIT_OK


def _gradcheck_batch(data: SplitDataset, size: int = 8):
    k = min(size // 2, data.n_labeled)
    u = min(size - k, data.n_unlabeled)
    x = np.concatenate([data.labeled_x[:k], data.unlabeled_x[:u]])
    y = np.concatenate([data.labeled_y[:k], np.full(u, UNLABELED)])
    return x, y


def gradcheck_report(net: Network, x, y, loss: LossSection, n_classes: int, step: float = 1e-5) -> dict:
    """Per-mode, per-parameter-block max relative error."""
    report = {}
    for mode in MODES:
        cfg = LossConfig(mode, loss.alpha, loss.beta, n_classes)
        report[mode] = check_gradients(net, x, y, cfg, step=step, rng_seed=1)
    return report


def cmd_gradcheck(args) -> int:
    cfg = load_run_config(args.config, os.environ.get(SEED_ENV))
    spec, data, tcfg = build_run(cfg)
    net = Network(spec, seed=tcfg.seed)
    if net.n_params > GRADCHECK_MAX_PARAMS:
        raise ConfigError(f"network has {net.n_params} parameters; gradcheck is limited to {GRADCHECK_MAX_PARAMS}")
    x, y = _gradcheck_batch(data, args.batch)
    if args.inject_fault:
        op, _, factor = args.inject_fault.partition(":")
        if op not in ad.PRIMITIVES:
            raise ConfigError(f"--inject-fault: unknown primitive {op!r}")
        with ad.corrupt_adjoint(op, float(factor or 1.01)):
            report = gradcheck_report(net, x, y, cfg.loss, spec.n_classes)
    else:
        report = gradcheck_report(net, x, y, cfg.loss, spec.n_classes)
    ok = True
    for mode, blocks in report.items():
        for name, err in blocks.items():
            status = "ok" if err <= args.tol else "FAIL"
            ok &= err <= args.tol
            print(f"{mode:9s} {name:20s} {err:.3e} {status}")
    if args.report:
        Path(args.report).write_text(json.dumps(report, indent=2, sort_keys=True) + "\n")
    print(f"gradcheck {'passed' if ok else 'failed'} at tol {args.tol:g}")
    return EXIT_OK if ok else EXIT_CHECK_FAILED


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="inversion-ssl", description=__doc__.splitlines()[0])
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)

    t = sub.add_parser("train", help="train a network from a JSON run config")
    t.add_argument("--config", required=True)
    t.add_argument("--output-dir", help="overrides output_dir from the config")
    t.add_argument("--jobs", type=int, default=1, help="threads for test-set evaluation")

    e = sub.add_parser("eval", help="test accuracy of a checkpoint")
    e.add_argument("--checkpoint", required=True)
    e.add_argument("--data", required=True, help="samples and labels as concatenated tensors")
    e.add_argument("--format", choices=("tensor-container", "idx"), default="tensor-container")
    e.add_argument("--labels", help="separate labels file")
    e.add_argument("--jobs", type=int, default=1)

    r = sub.add_parser("reconstruct", help="write inversion reconstructions and their errors")
    r.add_argument("--checkpoint", required=True)
    r.add_argument("--input", required=True, help="tensor-container file of samples")
    r.add_argument("--layer", default="all", help="layer index or 'all'")
    r.add_argument("--out", required=True)

    g = sub.add_parser("gradcheck", help="finite-difference check of every loss mode")
    g.add_argument("--config", required=True)
    g.add_argument("--tol", type=float, default=1e-5)
    g.add_argument("--batch", type=int, default=8)
    g.add_argument("--report", help="write the per-block errors as JSON")
    g.add_argument("--inject-fault", metavar="OP[:FACTOR]", help=argparse.SUPPRESS)
    return p


COMMANDS = {"train": cmd_train, "eval": cmd_eval, "reconstruct": cmd_reconstruct, "gradcheck": cmd_gradcheck}


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    if getattr(args, "jobs", 1) < 1:
        print("error: --jobs must be >= 1", file=sys.stderr)
        return EXIT_CONFIG
    try:
        return COMMANDS[args.command](args)
    except ConfigError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_CONFIG


if __name__ == "__main__":
    sys.exit(main())
