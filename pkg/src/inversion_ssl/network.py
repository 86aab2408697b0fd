"""Declarative network topologies and the traced forward pass.

A network is an ordered list of layers in the coarse sense used for the
reconstruction losses: one conv-nonlinearity-pool unit, one dense unit, or one
residual block. The last layer is always the dense classification head, so a
spec with ``L`` layers produces activations ``z[0] .. z[L]`` with ``z[0]`` the
input and ``z[L]`` the pre-softmax logits.
"""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Optional, Sequence

import numpy as np

from . import autodiff as ad
from . import tensor as T

KINDS = ("conv", "dense", "resnet_block", "pool_only")
ACTIVATIONS = ("leaky_relu", "sigmoid", "none")
PAD_TOKENS = {"s": "same", "v": "valid", "f": "full"}

BN_MOMENTUM = 0.9
BN_EPS = 1e-5

CHECKPOINT_FORMAT = "inversion-ssl-checkpoint/1"

# (filters, kernel, padding, pool) from input to innermost layer
LARGE_CNN_TUPLES = [
    (96, 3, "s", 1), (96, 3, "f", 1), (96, 3, "f", 2),
    (192, 3, "v", 1), (192, 3, "f", 1), (192, 3, "v", 2),
    (192, 3, "v", 1), (192, 1, "s", 6),
]


@dataclass(frozen=True)
class LayerSpec:
    kind: str
    filters: int = 1
    kernel: int = 3
    padding: str = "same"
    pool: int = 1
    activation: str = "leaky_relu"
    batch_norm: bool = False
    dropout_p: float = 0.0

    def __post_init__(self):
        if self.kind not in KINDS:
            raise ValueError(f"unknown layer kind {self.kind!r}")
        if self.activation not in ACTIVATIONS:
            raise ValueError(f"unknown activation {self.activation!r}")
        if self.padding not in T.PADDINGS:
            raise ValueError(f"invalid padding {self.padding!r}")
        if self.filters < 1 or self.kernel < 1 or self.pool < 1:
            raise ValueError("filters, kernel and pool must be >= 1")
        if not 0.0 <= self.dropout_p < 1.0:
            raise ValueError(f"dropout_p must be in [0, 1), got {self.dropout_p}")


@dataclass(frozen=True)
class NetworkSpec:
    input_shape: tuple[int, ...]
    layers: tuple[LayerSpec, ...]
    n_classes: int

    def __post_init__(self):
        object.__setattr__(self, "input_shape", tuple(int(s) for s in self.input_shape))
        object.__setattr__(self, "layers", tuple(self.layers))
        if not self.layers:
            raise ValueError("a network needs at least one layer")
        head = self.layers[-1]
        if head.kind != "dense" or head.filters != self.n_classes:
            raise ValueError("the last layer must be a dense head with n_classes outputs")
        if self.n_classes < 2:
            raise ValueError("n_classes must be >= 2")
        infer_shapes(self)

    @property
    def depth(self) -> int:
        return len(self.layers)

    @property
    def head(self) -> LayerSpec:
        return self.layers[-1]

    def to_dict(self) -> dict:
        return {
            "input_shape": list(self.input_shape),
            "n_classes": self.n_classes,
            "layers": [asdict(layer) for layer in self.layers],
        }

    @classmethod
    def from_dict(cls, d: dict) -> "NetworkSpec":
        return cls(tuple(d["input_shape"]), tuple(LayerSpec(**layer) for layer in d["layers"]),
                   int(d["n_classes"]))


@dataclass(frozen=True)
class ResnetConfig:
    n: int
    k: int
    input_shape: tuple[int, ...] = (3, 32, 32)
    n_classes: int = 10
    activation: str = "leaky_relu"
    batch_norm: bool = True
    dropout_p: float = 0.2
    stages: int = 3


def layer_output_shape(layer: LayerSpec, shape: tuple[int, ...]) -> tuple[int, ...]:
    if layer.kind == "dense":
        return (layer.filters,)
    if len(shape) != 3:
        raise T.ShapeError(f"{layer.kind} layer needs a (C, H, W) input, got {shape}")
    c, h, w = shape
    if layer.kind == "conv":
        c = layer.filters
        h, w = T.conv_output_hw(h, w, layer.kernel, layer.kernel, layer.padding)
    elif layer.kind == "resnet_block":
        c = layer.filters
    return (c,) + T.pooled_hw(h, w, layer.pool)


def infer_shapes(spec: NetworkSpec) -> list[tuple[int, ...]]:
    """Static shapes of z[0] .. z[L]."""
    shapes = [tuple(spec.input_shape)]
    for i, layer in enumerate(spec.layers, start=1):
        try:
            shapes.append(layer_output_shape(layer, shapes[-1]))
        except T.ShapeError as exc:
            raise T.ShapeError(f"layer {i}: {exc}") from None
    return shapes


def parse_cnn_spec(tuples: Sequence[Sequence], input_shape=(3, 32, 32), n_classes: int = 10,
                   activation: str = "leaky_relu", batch_norm: bool = True,
                   dropout_p: float = 0.2) -> NetworkSpec:
    """Build a CNN from ``(filters, kernel, padding-token, pool)`` tuples plus a dense head."""
    layers = []
    for filters, kernel, token, pool in tuples:
        if token not in PAD_TOKENS:
            raise ValueError(f"unknown padding token {token}")
        layers.append(LayerSpec("conv", int(filters), int(kernel), PAD_TOKENS[token], int(pool),
                                activation, batch_norm, dropout_p))
    layers.append(LayerSpec("dense", n_classes, activation="none"))
    return NetworkSpec(tuple(input_shape), tuple(layers), n_classes)


def build_resnet(config: ResnetConfig) -> NetworkSpec:
    """``stages * n`` residual blocks; filters double and maps halve at every stage end."""
    if config.n < 1 or config.k < 1:
        raise ValueError("resnet needs n >= 1 and k >= 1")
    shape = tuple(config.input_shape)
    if len(shape) != 3:
        raise T.ShapeError(f"resnet needs a (C, H, W) input, got {shape}")
    min_side = 2 ** config.stages
    if min(shape[1:]) < min_side:
        raise T.ShapeError(
            f"input {shape[1]}x{shape[2]} too small to pool {config.stages} times "
            f"(needs at least {min_side}x{min_side})")
    layers = []
    for stage in range(config.stages):
        filters = config.k * 2 ** stage
        for block in range(config.n):
            pool = 2 if block == config.n - 1 else 1
            layers.append(LayerSpec("resnet_block", filters, 3, "same", pool, config.activation,
                                    config.batch_norm, config.dropout_p))
    layers.append(LayerSpec("dense", config.n_classes, activation="none"))
    return NetworkSpec(shape, tuple(layers), config.n_classes)


def _scaled(n: int, scale: float) -> int:
    return max(1, int(round(n * scale)))


def preset(name: str, scale: float = 1.0, input_shape=(3, 32, 32), n_classes: int = 10,
           activation: str = "leaky_relu", k: Optional[int] = None,
           batch_norm: bool = True, dropout_p: float = 0.2) -> NetworkSpec:
    """The three named topologies, with filter counts multiplied by ``scale``."""
    if name == "large-cnn":
        tuples = [(_scaled(f, scale), kk, pad, pool) for f, kk, pad, pool in LARGE_CNN_TUPLES]
        return parse_cnn_spec(tuples, input_shape, n_classes, activation, batch_norm, dropout_p)
    if name in ("wide-resnet", "deep-resnet"):
        n, default_k = (3, 64) if name == "wide-resnet" else (6, 32)
        return build_resnet(ResnetConfig(n, _scaled(k or default_k, scale), tuple(input_shape),
                                         n_classes, activation, batch_norm, dropout_p))
    raise ValueError(f"unknown preset {name!r}")


PRESETS = ("large-cnn", "wide-resnet", "deep-resnet")


# -- parameters ---------------------------------------------------------------

def _glorot(rng, shape, fan_in, fan_out, dtype):
    limit = np.sqrt(6.0 / (fan_in + fan_out))
    return rng.uniform(-limit, limit, size=shape).astype(dtype)


def init_params(spec: NetworkSpec, seed: int = 0, dtype=T.DEFAULT_DTYPE
                ) -> tuple[dict[str, np.ndarray], dict[str, np.ndarray]]:
    """Glorot-uniform weights, zero biases, unit batch-norm scale.

    Returns ``(params, state)`` where ``state`` holds the batch-norm running
    statistics.
    """
    rng = np.random.default_rng(seed)
    params: dict[str, np.ndarray] = {}
    state: dict[str, np.ndarray] = {}
    shapes = infer_shapes(spec)
    for i, layer in enumerate(spec.layers, start=1):
        in_shape = shapes[i - 1]
        pre = f"layer{i}."
        if layer.kind == "dense":
            d_in = int(np.prod(in_shape))
            params[pre + "W"] = _glorot(rng, (d_in, layer.filters), d_in, layer.filters, dtype)
            bn_width = layer.filters
        elif layer.kind == "conv":
            c, k = in_shape[0], layer.kernel
            params[pre + "W"] = _glorot(rng, (layer.filters, c, k, k), c * k * k,
                                        layer.filters * k * k, dtype)
            bn_width = layer.filters
        elif layer.kind == "resnet_block":
            c, k = in_shape[0], layer.kernel
            params[pre + "shortcut"] = _glorot(rng, (layer.filters, c, 1, 1), c, layer.filters, dtype)
            params[pre + "W"] = _glorot(rng, (layer.filters, c, k, k), c * k * k,
                                        layer.filters * k * k, dtype)
            bn_width = c  # normalises the block input
        else:
            continue
        # a batch-norm shift makes a bias redundant (its gradient is identically zero)
        if not (layer.batch_norm and layer.kind != "resnet_block"):
            params[pre + "b"] = np.zeros(layer.filters, dtype)
        if layer.batch_norm:
            params[pre + "gamma"] = np.ones(bn_width, dtype)
            params[pre + "beta"] = np.zeros(bn_width, dtype)
            state[pre + "running_mean"] = np.zeros(bn_width, dtype)
            state[pre + "running_var"] = np.ones(bn_width, dtype)
    return params, state


# -- forward ------------------------------------------------------------------

@dataclass
class ForwardTrace:
    tape: ad.Tape
    activations: list  # z[0] .. z[L] as tape nodes
    sizes: list[int]  # D[0] .. D[L-1], per sample
    prediction: np.ndarray  # softmax(z[L]), shape (N, C)
    mode: str
    params: dict = field(default_factory=dict)  # name -> leaf node
    batch_stats: dict = field(default_factory=dict)  # name -> (mean, var) arrays

    @property
    def depth(self) -> int:
        return len(self.activations) - 1

    @property
    def logits(self) -> ad.Node:
        return self.activations[-1]

    @property
    def input(self) -> ad.Node:
        return self.activations[0]


def _activate(z: ad.Node, kind: str) -> ad.Node:
    if kind == "leaky_relu":
        return ad.leaky_relu(z)
    if kind == "sigmoid":
        return ad.sigmoid(z)
    return z


def _batch_norm(z: ad.Node, gamma: ad.Node, beta: ad.Node, mode: str, running, stats_out, key):
    tape = z.tape
    axes_shape = [1] * z.ndim
    axes_shape[1] = z.shape[1]
    axes_shape = tuple(axes_shape)
    if mode == "train":
        m = z.size // z.shape[1]
        mean = ad.scale(ad.sum_to(z, axes_shape), 1.0 / m)
        centred = ad.sub(z, ad.broadcast_to(mean, z.shape))
        var = ad.scale(ad.sum_to(ad.mul(centred, centred), axes_shape), 1.0 / m)
        inv_std = ad.power(ad.add_scalar(var, BN_EPS), -0.5)
        normed = ad.mul(centred, ad.broadcast_to(inv_std, z.shape))
        stats_out[key] = (mean.value.reshape(-1).copy(), var.value.reshape(-1).copy())
    else:
        r_mean, r_var = running
        mean = tape.constant(r_mean.reshape(axes_shape))
        inv_std = tape.constant((1.0 / np.sqrt(r_var + BN_EPS)).reshape(axes_shape))
        centred = ad.sub(z, ad.broadcast_to(mean, z.shape))
        normed = ad.mul(centred, ad.broadcast_to(inv_std, z.shape))
    out = ad.mul(normed, ad.broadcast_to(ad.reshape(gamma, axes_shape), z.shape))
    return ad.add(out, ad.broadcast_to(ad.reshape(beta, axes_shape), z.shape))


def _dropout(z: ad.Node, p: float, mode: str, rng) -> ad.Node:
    if mode != "train" or p <= 0.0:
        return z
    keep = (rng.random(z.shape) >= p).astype(z.tape.dtype) / (1.0 - p)
    return ad.mul(z, z.tape.constant(keep))


class Network:
    """Parameters and running statistics bound to a :class:`NetworkSpec`."""

    def __init__(self, spec: NetworkSpec, params=None, state=None, seed: int = 0,
                 dtype=T.DEFAULT_DTYPE):
        self.spec = spec
        self.seed = seed
        self.dtype = np.dtype(dtype)
        if params is None:
            params, init_state = init_params(spec, seed, self.dtype)
            state = init_state if state is None else state
        self.params: dict[str, np.ndarray] = dict(params)
        self.state: dict[str, np.ndarray] = dict(state or {})

    @property
    def depth(self) -> int:
        return self.spec.depth

    @property
    def n_params(self) -> int:
        return int(sum(p.size for p in self.params.values()))

    def sizes(self) -> list[int]:
        return [int(np.prod(s)) for s in infer_shapes(self.spec)[:-1]]

    def copy(self) -> "Network":
        return Network(self.spec, {k: v.copy() for k, v in self.params.items()},
                       {k: v.copy() for k, v in self.state.items()}, self.seed, self.dtype)

    def forward(self, x, mode: str = "train", rng_seed: int = 0,
                tape: Optional[ad.Tape] = None, params: Optional[dict] = None) -> ForwardTrace:
        """Run the network on a batch, recording every activation on a tape.

        ``x`` is ``(N, *input_shape)``; a single unbatched sample is promoted.
        ``params`` optionally overrides parameter values (used by gradient checks).
        """
        if mode not in ("train", "eval"):
            raise ValueError(f"mode must be 'train' or 'eval', got {mode!r}")
        spec = self.spec
        x = np.asarray(x, dtype=self.dtype)
        if x.shape == spec.input_shape:
            x = x[None]
        if x.shape[1:] != spec.input_shape:
            raise T.ShapeError(f"input shape {x.shape[1:]} does not match network input {spec.input_shape}")
        T.check_finite(x, "input")
        tape = tape or ad.Tape(self.dtype)
        values = self.params if params is None else {**self.params, **params}
        pnodes = {name: tape.variable(v) for name, v in values.items()}
        rng = np.random.default_rng(rng_seed)
        stats: dict = {}

        z = tape.constant(x)
        acts = [z]
        for i, layer in enumerate(spec.layers, start=1):
            z = self._layer(i, layer, z, pnodes, mode, rng, stats)
            if not np.all(np.isfinite(z.value)):
                raise T.NonFiniteError(f"non-finite activation at layer {i}")
            acts.append(z)
        return ForwardTrace(tape, acts, self.sizes(), ad.softmax(z.value), mode, pnodes, stats)

    def _layer(self, i, layer, z, p, mode, rng, stats):
        pre = f"layer{i}."
        n = z.shape[0]

        def bn(h):
            if not layer.batch_norm:
                return h
            running = (self.state.get(pre + "running_mean"), self.state.get(pre + "running_var"))
            return _batch_norm(h, p[pre + "gamma"], p[pre + "beta"], mode, running, stats, i)

        if layer.kind == "dense":
            h = ad.matmul(ad.reshape(z, (n, -1)), p[pre + "W"])
            if pre + "b" in p:
                h = ad.add_bias(h, p[pre + "b"])
            h = _activate(bn(h), layer.activation)
            return _dropout(h, layer.dropout_p, mode, rng)
        if layer.kind == "conv":
            h = ad.conv2d(z, p[pre + "W"], layer.padding)
            if pre + "b" in p:
                h = ad.add_bias(h, p[pre + "b"])
            h = _activate(bn(h), layer.activation)
            h = _dropout(h, layer.dropout_p, mode, rng)
            return ad.mean_pool(h, layer.pool)
        if layer.kind == "resnet_block":
            short = ad.conv2d(z, p[pre + "shortcut"], "valid")
            h = _activate(bn(z), layer.activation)
            h = _dropout(h, layer.dropout_p, mode, rng)
            h = ad.conv2d(h, p[pre + "W"], layer.padding)
            if pre + "b" in p:
                h = ad.add_bias(h, p[pre + "b"])
            return ad.mean_pool(ad.add(short, h), layer.pool)
        return ad.mean_pool(z, layer.pool)  # pool_only

    def update_running_stats(self, trace: ForwardTrace, momentum: float = BN_MOMENTUM) -> None:
        for i, (mean, var) in trace.batch_stats.items():
            pre = f"layer{i}."
            self.state[pre + "running_mean"] = momentum * self.state[pre + "running_mean"] + (1 - momentum) * mean
            self.state[pre + "running_var"] = momentum * self.state[pre + "running_var"] + (1 - momentum) * var

    def predict_proba(self, x, batch_size: int = 500) -> np.ndarray:
        x = np.asarray(x, dtype=self.dtype)
        out = []
        for start in range(0, len(x), batch_size):
            trace = self.forward(x[start:start + batch_size], mode="eval")
            out.append(trace.prediction)
            trace.tape.release()
        return np.concatenate(out) if out else np.zeros((0, self.spec.n_classes))

    def logits(self, x, batch_size: int = 500) -> np.ndarray:
        x = np.asarray(x, dtype=self.dtype)
        out = []
        for start in range(0, len(x), batch_size):
            trace = self.forward(x[start:start + batch_size], mode="eval")
            out.append(trace.logits.value)
            trace.tape.release()
        return np.concatenate(out) if out else np.zeros((0, self.spec.n_classes))


# -- checkpoints --------------------------------------------------------------

def save_checkpoint(net: Network, directory, extra: Optional[dict] = None) -> Path:
    """Write ``manifest.json`` plus one tensor file per parameter and statistic."""
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    shapes = infer_shapes(net.spec)
    entries = {}
    for group, arrays in (("params", net.params), ("state", net.state)):
        for name in sorted(arrays, key=_param_order):
            fname = f"{name}.tnsr"
            T.save_tensor(directory / fname, arrays[name])
            entries[name] = {"group": group, "file": fname, "shape": list(arrays[name].shape)}
    manifest = {
        "format": CHECKPOINT_FORMAT,
        "spec": net.spec.to_dict(),
        "layer_order": [f"layer{i}" for i in range(1, net.depth + 1)],
        "activation_shapes": [list(s) for s in shapes],
        "seed": net.seed,
        "dtype": net.dtype.name,
        "bn_momentum": BN_MOMENTUM,
        "bn_eps": BN_EPS,
        "tensors": entries,
    }
    if extra:
        manifest["extra"] = extra
    path = directory / "manifest.json"
    path.write_text(json.dumps(manifest, indent=2, sort_keys=True))
    return path


def load_checkpoint(directory) -> Network:
    directory = Path(directory)
    if directory.is_file():
        directory = directory.parent
    manifest = json.loads((directory / "manifest.json").read_text())
    if manifest.get("format") != CHECKPOINT_FORMAT:
        raise ValueError(f"unrecognised checkpoint format {manifest.get('format')!r}")
    spec = NetworkSpec.from_dict(manifest["spec"])
    params, state = {}, {}
    for name, entry in manifest["tensors"].items():
        arr = T.load_tensor(directory / entry["file"])
        if list(arr.shape) != entry["shape"]:
            raise ValueError(f"{name}: shape {arr.shape} disagrees with manifest {entry['shape']}")
        (params if entry["group"] == "params" else state)[name] = arr
    return Network(spec, params, state, manifest.get("seed", 0), manifest.get("dtype", "float64"))


def _param_order(name: str):
    layer, _, rest = name.partition(".")
    return int(layer.removeprefix("layer")), rest


def with_params(net: Network, **changes) -> Network:
    """Copy of ``net`` with some parameter arrays replaced."""
    out = net.copy()
    out.params.update(changes)
    return out


__all__ = [
    "LayerSpec", "NetworkSpec", "ResnetConfig", "ForwardTrace", "Network",
    "parse_cnn_spec", "build_resnet", "preset", "infer_shapes", "init_params",
    "save_checkpoint", "load_checkpoint", "PRESETS", "LARGE_CNN_TUPLES",
]
