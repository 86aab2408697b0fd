"""Reverse-mode differentiation on a recording tape.

Every primitive's adjoint rule is written with the same recordable primitives
used by the forward pass. A backward sweep can therefore be recorded onto the
tape and differentiated again, which is what training a reconstruction loss
(an objective containing a vector-Jacobian product) requires.

Typical use::

    tape = Tape()
    x = tape.variable(np.array([3.0]))
    y = x * x
    grad(tape, sum_all(y), [x])[x]   # -> array([6.])
"""

from __future__ import annotations

import contextlib
from collections.abc import Callable, Iterable, Sequence
from dataclasses import dataclass
from functools import lru_cache

import numpy as np

from . import tensor as T

LEAKY_SLOPE = 0.01


class TapeError(RuntimeError):
    """Misuse of a tape: foreign node, released tape, bad seed."""


class Node:
    """Handle to one recorded value on a :class:`Tape`."""

    __slots__ = ("tape", "index", "value", "op", "inputs", "aux")
    __array_ufunc__ = None  # make ``ndarray * node`` dispatch to Node

    def __init__(self, tape, index, value, op=None, inputs=(), aux=None):
        self.tape = tape
        self.index = index
        self.value = value
        self.op = op
        self.inputs = inputs
        self.aux = aux or {}

    @property
    def shape(self) -> tuple[int, ...]:
        return self.value.shape

    @property
    def size(self) -> int:
        return self.value.size

    @property
    def ndim(self) -> int:
        return self.value.ndim

    def __repr__(self):
        kind = self.op or "leaf"
        return f"Node(#{self.index} {kind} shape={self.shape})"

    # operator sugar; scalars and arrays are lifted to constants
    def _lift(self, other):
        if isinstance(other, Node):
            return other
        return self.tape.constant(np.broadcast_to(np.asarray(other, self.value.dtype), self.shape))

    def __add__(self, other):
        if np.isscalar(other):
            return add_scalar(self, other)
        return add(self, self._lift(other))

    __radd__ = __add__

    def __sub__(self, other):
        if np.isscalar(other):
            return add_scalar(self, -other)
        return sub(self, self._lift(other))

    def __rsub__(self, other):
        if np.isscalar(other):
            return add_scalar(neg(self), other)
        return sub(self._lift(other), self)

    def __mul__(self, other):
        if np.isscalar(other):
            return scale(self, other)
        return mul(self, self._lift(other))

    __rmul__ = __mul__

    def __truediv__(self, other):
        if np.isscalar(other):
            return scale(self, 1.0 / other)
        return mul(self, power(self._lift(other), -1.0))

    def __neg__(self):
        return neg(self)

    def __matmul__(self, other):
        return matmul(self, self._lift(other))

    def __pow__(self, p):
        return power(self, float(p))

    @property
    def T(self):
        return transpose(self, (1, 0))


class Tape:
    """Ordered record of primitive applications.

    Nodes are appended in evaluation order, so index order is a valid
    topological order, including for nodes appended by a recorded backward
    sweep.
    """

    def __init__(self, dtype=T.DEFAULT_DTYPE):
        self.dtype = np.dtype(dtype)
        self.nodes: list[Node] = []
        self.recording = True
        self.released = False

    def __len__(self):
        return len(self.nodes)

    def _append(self, value, op=None, inputs=(), aux=None) -> Node:
        if self.released:
            raise TapeError("tape has been released")
        if not self.recording:
            return Node(self, -1, value)
        node = Node(self, len(self.nodes), value, op, tuple(inputs), aux)
        self.nodes.append(node)
        return node

    def variable(self, value) -> Node:
        """Record a leaf whose gradient may be requested."""
        return self._append(np.asarray(value, dtype=self.dtype))

    def constant(self, value) -> Node:
        return self._append(np.asarray(value, dtype=self.dtype))

    def record(self, op: str, inputs: Sequence[Node], **aux) -> Node:
        prim = PRIMITIVES.get(op)
        if prim is None:
            raise TapeError(f"unknown primitive {op!r}")
        for node in inputs:
            self.check_owner(node)
        value = prim.forward(*(n.value for n in inputs), **aux)
        if value.dtype != self.dtype:
            value = value.astype(self.dtype)
        return self._append(value, op, inputs, aux)

    def check_owner(self, node: Node) -> None:
        if not isinstance(node, Node):
            raise TypeError(f"expected Node, got {type(node).__name__}")
        if node.tape is not self:
            raise TapeError(f"{node!r} belongs to a different tape")

    @contextlib.contextmanager
    def paused(self, pause: bool = True):
        """Evaluate without recording; results are detached constants."""
        prev = self.recording
        self.recording = prev and not pause
        try:
            yield self
        finally:
            self.recording = prev

    def release(self) -> None:
        self.nodes = []
        self.released = True


# -- primitive registry -------------------------------------------------------

@dataclass(frozen=True)
class Primitive:
    name: str
    forward: Callable[..., np.ndarray]
    # vjp(g, out, wants) -> sequence of adjoint Nodes (or None) per input
    vjp: Callable[..., Sequence[Node | None]]


PRIMITIVES: dict[str, Primitive] = {}
_FAULTS: dict[str, float] = {}


def primitive(name: str, forward: Callable[..., np.ndarray]):
    def register(vjp_rule):
        PRIMITIVES[name] = Primitive(name, forward, vjp_rule)
        return vjp_rule
    return register


@contextlib.contextmanager
def corrupt_adjoint(op: str, factor: float = 1.01):
    """Scale the adjoint rule of ``op``. Test hook for negative controls."""
    if op not in PRIMITIVES:
        raise KeyError(op)
    _FAULTS[op] = factor
    try:
        yield
    finally:
        _FAULTS.pop(op, None)


def _rec(op: str, *inputs: Node, **aux) -> Node:
    return inputs[0].tape.record(op, inputs, **aux)


def add(a: Node, b: Node) -> Node:
    return _rec("add", a, b)


def sub(a: Node, b: Node) -> Node:
    return _rec("sub", a, b)


def mul(a: Node, b: Node) -> Node:
    return _rec("mul", a, b)


def neg(a: Node) -> Node:
    return _rec("neg", a)


def scale(a: Node, c: float) -> Node:
    return _rec("scale", a, c=float(c))


def add_scalar(a: Node, c: float) -> Node:
    return _rec("add_scalar", a, c=float(c))


def exp(a: Node) -> Node:
    return _rec("exp", a)


def log(a: Node) -> Node:
    return _rec("log", a)


def power(a: Node, p: float) -> Node:
    return _rec("power", a, p=float(p))


def sigmoid(a: Node) -> Node:
    return _rec("sigmoid", a)


def leaky_relu(a: Node, slope: float = LEAKY_SLOPE) -> Node:
    return _rec("leaky_relu", a, slope=float(slope))


def matmul(a: Node, b: Node) -> Node:
    if a.ndim != 2 or b.ndim != 2 or a.shape[1] != b.shape[0]:
        raise T.ShapeError(f"cannot multiply shapes {a.shape} and {b.shape}")
    return _rec("matmul", a, b)


def transpose(a: Node, axes: Sequence[int]) -> Node:
    return _rec("transpose", a, axes=tuple(axes))


def reshape(a: Node, shape: Sequence[int]) -> Node:
    shape = tuple(int(s) for s in shape)
    if -1 in shape:
        known = int(np.prod([s for s in shape if s != -1]))
        shape = tuple(a.size // known if s == -1 else s for s in shape)
    if shape == a.shape:
        return a
    return _rec("reshape", a, shape=shape)


def broadcast_to(a: Node, shape: Sequence[int]) -> Node:
    shape = tuple(shape)
    if shape == a.shape:
        return a
    return _rec("broadcast_to", a, shape=shape)


def sum_to(a: Node, shape: Sequence[int]) -> Node:
    """Sum ``a`` down to ``shape`` (the reverse of broadcasting)."""
    shape = tuple(shape)
    if shape == a.shape:
        return a
    return _rec("sum_to", a, shape=shape)


def sum_all(a: Node) -> Node:
    return sum_to(a, ())


def gather(a: Node, index: np.ndarray) -> Node:
    """``out[i] = a.flat[index[i]]``, with ``index == -1`` reading zero."""
    return _rec("gather", a, index=index)


def scatter_add(a: Node, index: np.ndarray, shape: Sequence[int]) -> Node:
    """Accumulate ``a[i]`` into ``out.flat[index[i]]``; ``index == -1`` is dropped."""
    return _rec("scatter_add", a, index=index, shape=tuple(shape))


# forward implementations ------------------------------------------------------

def _sum_to(x: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    lead = x.ndim - len(shape)
    axes = tuple(range(lead)) + tuple(
        i + lead for i, s in enumerate(shape) if s == 1 and x.shape[i + lead] != 1)
    out = x.sum(axis=axes, keepdims=True) if axes else x
    return out.reshape(shape)


def _gather(x: np.ndarray, index: np.ndarray) -> np.ndarray:
    flat = np.concatenate([x.reshape(-1), np.zeros(1, x.dtype)])
    return flat[index]


def _scatter_add(x: np.ndarray, index: np.ndarray, shape) -> np.ndarray:
    size = int(np.prod(shape, dtype=np.int64))
    idx = index.reshape(-1)
    w = x.reshape(-1)
    valid = idx >= 0
    if not valid.all():
        idx, w = idx[valid], w[valid]
    if x.dtype == np.float64 or x.dtype == np.float32:
        out = np.bincount(idx, weights=w, minlength=size).astype(x.dtype, copy=False)
    else:  # bincount would round extended precision to float64
        out = np.zeros(size, x.dtype)
        np.add.at(out, idx, w)
    return out.reshape(shape)


def _sigmoid(x: np.ndarray) -> np.ndarray:
    out = np.empty_like(x)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    out[~pos] = ex / (1.0 + ex)
    return out


def _check_same_shape(a, b):
    if a.shape != b.shape:
        raise T.ShapeError(f"elementwise shape mismatch {a.shape} vs {b.shape}")


def _add(a, b):
    _check_same_shape(a, b)
    return a + b


def _sub(a, b):
    _check_same_shape(a, b)
    return a - b


def _mul(a, b):
    _check_same_shape(a, b)
    return a * b


@primitive("add", _add)
def _add_vjp(g, out, wants):
    return g, g


@primitive("sub", _sub)
def _sub_vjp(g, out, wants):
    return g, (neg(g) if wants[1] else None)


@primitive("mul", _mul)
def _mul_vjp(g, out, wants):
    a, b = out.inputs
    return (mul(g, b) if wants[0] else None), (mul(g, a) if wants[1] else None)


@primitive("neg", lambda a: -a)
def _neg_vjp(g, out, wants):
    return (neg(g),)


@primitive("scale", lambda a, c: a * c)
def _scale_vjp(g, out, wants):
    return (scale(g, out.aux["c"]),)


@primitive("add_scalar", lambda a, c: a + c)
def _add_scalar_vjp(g, out, wants):
    return (g,)


@primitive("exp", np.exp)
def _exp_vjp(g, out, wants):
    return (mul(g, out),)


@primitive("log", np.log)
def _log_vjp(g, out, wants):
    return (mul(g, power(out.inputs[0], -1.0)),)


@primitive("power", lambda a, p: np.power(a, p))
def _power_vjp(g, out, wants):
    (a,) = out.inputs
    p = out.aux["p"]
    if p == 1.0:
        return (g,)
    return (mul(g, scale(power(a, p - 1.0), p)),)


@primitive("sigmoid", _sigmoid)
def _sigmoid_vjp(g, out, wants):
    # sigma' = sigma (1 - sigma), expressed on the output node so it stays differentiable
    return (mul(g, mul(out, add_scalar(neg(out), 1.0))),)


def _leaky(a, slope):
    return np.where(a >= 0, a, slope * a)


@primitive("leaky_relu", _leaky)
def _leaky_vjp(g, out, wants):
    (a,) = out.inputs
    # kink at 0 takes the positive-side slope
    mask = np.where(a.value >= 0, 1.0, out.aux["slope"])
    return (mul(g, g.tape.constant(mask)),)


@primitive("matmul", lambda a, b: a @ b)
def _matmul_vjp(g, out, wants):
    a, b = out.inputs
    ga = matmul(g, transpose(b, (1, 0))) if wants[0] else None
    gb = matmul(transpose(a, (1, 0)), g) if wants[1] else None
    return ga, gb


@primitive("transpose", lambda a, axes: np.ascontiguousarray(np.transpose(a, axes)))
def _transpose_vjp(g, out, wants):
    return (transpose(g, tuple(np.argsort(out.aux["axes"]))),)


@primitive("reshape", lambda a, shape: a.reshape(shape))
def _reshape_vjp(g, out, wants):
    return (reshape(g, out.inputs[0].shape),)


@primitive("broadcast_to", lambda a, shape: np.ascontiguousarray(np.broadcast_to(a, shape)))
def _broadcast_vjp(g, out, wants):
    return (sum_to(g, out.inputs[0].shape),)


@primitive("sum_to", _sum_to)
def _sum_to_vjp(g, out, wants):
    src = out.inputs[0].shape
    lead = len(src) - len(out.shape)
    gshape = (1,) * lead + g.shape
    return (broadcast_to(reshape(g, gshape), src),)


@primitive("gather", _gather)
def _gather_vjp(g, out, wants):
    return (scatter_add(g, out.aux["index"], out.inputs[0].shape),)


@primitive("scatter_add", _scatter_add)
def _scatter_vjp(g, out, wants):
    return (gather(g, out.aux["index"]),)


# -- composite operations -----------------------------------------------------

@lru_cache(maxsize=128)
def _batched_im2col(n, c, h, w, kh, kw, padding):
    idx = T.im2col_index(c, h, w, kh, kw, padding)
    offs = (np.arange(n) * (c * h * w))[:, None, None]
    out = np.where(idx[None] >= 0, idx[None] + offs, -1)
    out.setflags(write=False)
    return out


@lru_cache(maxsize=128)
def _batched_pool(n, c, h, w, size):
    window, inv = T.pool_index(c, h, w, size)
    offs = (np.arange(n) * inv.size)[:, None]
    out = (window[None, :] + offs).reshape(n, c, h, w)
    out.setflags(write=False)
    return out, inv


def conv2d(x: Node, kernels: Node, padding: str) -> Node:
    """Differentiable stride-1 cross-correlation of a (N, C, H, W) batch."""
    n, c, h, w = x.shape
    o, kc, kh, kw = kernels.shape
    if kc != c:
        raise T.ShapeError(f"channel mismatch: input has {c}, kernels expect {kc}")
    ho, wo = T.conv_output_hw(h, w, kh, kw, padding)
    idx = _batched_im2col(n, c, h, w, kh, kw, padding)
    cols = reshape(gather(x, idx), (n * ho * wo, c * kh * kw))
    out = matmul(cols, transpose(reshape(kernels, (o, c * kh * kw)), (1, 0)))
    return transpose(reshape(out, (n, ho, wo, o)), (0, 3, 1, 2))


def mean_pool(x: Node, size: int) -> Node:
    """Differentiable mean pooling of a (N, C, H, W) batch."""
    if size < 1:
        raise ValueError(f"pool size must be >= 1, got {size}")
    if size == 1:
        return x
    n, c, h, w = x.shape
    idx, inv = _batched_pool(n, c, h, w, size)
    sums = scatter_add(x, idx, (n,) + inv.shape)
    return mul(sums, x.tape.constant(np.broadcast_to(inv, sums.shape)))


def add_bias(x: Node, bias: Node, axis: int = 1) -> Node:
    shape = [1] * x.ndim
    shape[axis] = bias.size
    return add(x, broadcast_to(reshape(bias, shape), x.shape))


def log_softmax(z: Node) -> Node:
    """Row-wise log-softmax of a (N, C) node, shifted by the (constant) row max."""
    shift = z.tape.constant(np.max(z.value, axis=1, keepdims=True))
    s = sub(z, broadcast_to(shift, z.shape))
    lse = log(sum_to(exp(s), (z.shape[0], 1)))
    return sub(s, broadcast_to(lse, z.shape))


def softmax(z: np.ndarray) -> np.ndarray:
    """Numerically stabilised softmax over the last axis (plain arrays)."""
    s = z - np.max(z, axis=-1, keepdims=True)
    e = np.exp(s)
    return e / e.sum(axis=-1, keepdims=True)


# -- differentiation ----------------------------------------------------------

class VJPResult(dict):
    """Map from target node to adjoint node.

    ``unreachable`` lists targets the output does not depend on; their
    adjoint is reported as zeros.
    """

    def __init__(self, *args, unreachable=(), **kwargs):
        super().__init__(*args, **kwargs)
        self.unreachable = list(unreachable)


def vjp(tape: Tape, output: Node, seed, targets: Iterable[Node],
        record_backward: bool = False) -> VJPResult:
    """Adjoint ``(d output / d target)^T seed`` for every target in one sweep.

    ``seed`` may be an array or a node on the same tape; when
    ``record_backward`` is true and ``seed`` is a node, the result is also
    differentiable with respect to the seed.
    """
    if tape.released:
        raise TapeError("tape has been released")
    tape.check_owner(output)
    targets = list(targets)
    for t in targets:
        tape.check_owner(t)
        if t.index < 0:
            raise TapeError(f"{t!r} is detached and cannot be a target")
    if output.index < 0:
        raise TapeError("output node is detached")
    seed_value = seed.value if isinstance(seed, Node) else np.asarray(seed)
    if seed_value.shape != output.shape:
        raise TapeError(f"seed shape {seed_value.shape} does not match output shape {output.shape}")
    if not targets:
        return VJPResult()

    lo = min(t.index for t in targets)
    hi = output.index
    nodes = tape.nodes
    # mark nodes that depend on some target
    dep = np.zeros(hi + 1, dtype=bool)
    for t in targets:
        if t.index <= hi:
            dep[t.index] = True
    for i in range(lo, hi + 1):
        node = nodes[i]
        if not dep[i] and node.inputs:
            dep[i] = any(dep[inp.index] for inp in node.inputs if inp.index >= lo)

    wanted = {t.index for t in targets}
    found: dict[int, Node] = {}
    with tape.paused(not record_backward):
        if isinstance(seed, Node) and record_backward:
            seed_node = seed
        else:
            seed_node = tape.constant(seed_value)
        adj: dict[int, Node] = {hi: seed_node} if dep[hi] else {}
        for i in range(hi, lo - 1, -1):
            g = adj.pop(i, None)
            if g is None:
                continue
            if i in wanted:
                found[i] = g
            node = nodes[i]
            if node.op is None:
                continue
            wants = [inp.index >= lo and dep[inp.index] for inp in node.inputs]
            if not any(wants):
                continue
            grads = PRIMITIVES[node.op].vjp(g, node, wants)
            factor = _FAULTS.get(node.op)
            for inp, gi, w in zip(node.inputs, grads, wants):
                if not w or gi is None:
                    continue
                if factor is not None:
                    gi = scale(gi, factor)
                prev = adj.get(inp.index)
                adj[inp.index] = gi if prev is None else add(prev, gi)
        result = VJPResult()
        missing = []
        for t in targets:
            if t.index in found:
                result[t] = found[t.index]
            else:
                missing.append(t)
                result[t] = tape.constant(np.zeros(t.shape))
        result.unreachable = missing
    return result


def grad(tape: Tape, scalar_output: Node, parameters: Iterable[Node],
         create_graph: bool = False) -> dict[Node, np.ndarray]:
    """Gradient of a one-element node w.r.t. ``parameters``.

    If ``scalar_output`` was built from a recorded backward sweep this is a
    double-backward pass. With ``create_graph`` the returned values are nodes.
    """
    if scalar_output.size != 1:
        raise TapeError(f"grad needs a scalar output, got shape {scalar_output.shape}")
    params = list(parameters)
    res = vjp(tape, scalar_output, np.ones(scalar_output.shape, tape.dtype), params,
              record_backward=create_graph)
    if create_graph:
        return dict(res)
    return {p: res[p].value for p in params}


def numeric_grad(f: Callable[[np.ndarray], float], x: np.ndarray, step: float = 1e-5,
                 dtype=np.float64) -> np.ndarray:
    """Central-difference gradient of a scalar function of an array.

    ``x`` is perturbed in ``dtype``; pass ``np.longdouble`` (with ``f``
    evaluating in the same precision) to push rounding noise well below the
    truncation error.
    """
    if step <= 0:
        raise ValueError("step must be positive")
    x = np.array(x, dtype=dtype)
    g = np.zeros_like(x)
    flat = x.reshape(-1)
    gflat = g.reshape(-1)
    for i in range(flat.size):
        orig = flat[i]
        flat[i] = orig + step
        fp = f(x)
        flat[i] = orig - step
        fm = f(x)
        flat[i] = orig
        if not (np.isfinite(fp) and np.isfinite(fm)):
            raise T.NonFiniteError(f"non-finite evaluation at coordinate {i}")
        gflat[i] = (fp - fm) / (2 * x.dtype.type(step))
    return g.astype(np.float64)


def relative_error(analytic: np.ndarray, numeric: np.ndarray, floor: float = 1e-8) -> float:
    analytic = np.asarray(analytic, dtype=np.float64)
    numeric = np.asarray(numeric, dtype=np.float64)
    if analytic.size == 0:
        return 0.0
    denom = np.maximum(np.maximum(np.abs(analytic), np.abs(numeric)), floor)
    return float(np.max(np.abs(analytic - numeric) / denom))


def fd_check(scalar_fn: Callable[[Tape, Node], Node], point, step: float = 1e-5,
             oracle_dtype=np.longdouble) -> float:
    """Max relative error between the tape gradient and central differences.

    ``scalar_fn(tape, x)`` must build a one-element node from ``x``. The tape
    gradient is taken in float64; the difference quotients are evaluated in
    ``oracle_dtype``.
    """
    if step <= 0:
        raise ValueError("step must be positive")
    point = np.asarray(point, dtype=np.float64)
    tape = Tape()
    x = tape.variable(point)
    out = scalar_fn(tape, x)
    if not np.all(np.isfinite(out.value)):
        raise T.NonFiniteError("non-finite function value")
    analytic = grad(tape, out, [x])[x]

    def value(p):
        t = Tape(oracle_dtype)
        return scalar_fn(t, t.variable(p)).value.reshape(())[()]

    return relative_error(analytic, numeric_grad(value, point, step, oracle_dtype))
