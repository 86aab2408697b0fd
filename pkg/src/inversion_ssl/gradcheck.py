"""Finite-difference verification of loss gradients w.r.t. network parameters.

The analytic side runs in the network's own precision. The difference
quotients are evaluated on an extended-precision copy of the network so that
rounding noise stays far below the error budget even for gradient entries of
very small magnitude.
"""

from __future__ import annotations

import numpy as np

from . import autodiff as ad
from .losses import LossConfig, compute_loss
from .network import Network

ORACLE_DTYPE = np.longdouble


def loss_value(net: Network, x, labels, config: LossConfig, params=None,
               mode: str = "train", rng_seed: int = 0):
    trace = net.forward(x, mode=mode, rng_seed=rng_seed, params=params)
    value = compute_loss(trace, labels, config).node.value.reshape(())[()]
    trace.tape.release()
    return value


def loss_gradients(net: Network, x, labels, config: LossConfig, mode: str = "train",
                   rng_seed: int = 0) -> tuple[float, dict[str, np.ndarray]]:
    trace = net.forward(x, mode=mode, rng_seed=rng_seed)
    breakdown = compute_loss(trace, labels, config)
    names = list(trace.params)
    grads = ad.grad(trace.tape, breakdown.node, [trace.params[n] for n in names])
    out = {n: grads[trace.params[n]] for n in names}
    trace.tape.release()
    return breakdown.total, out


def _as_dtype(net: Network, dtype) -> Network:
    return Network(net.spec, {k: v.astype(dtype) for k, v in net.params.items()},
                   {k: v.astype(dtype) for k, v in net.state.items()}, net.seed, dtype)


def numeric_gradients(net: Network, x, labels, config: LossConfig, step: float = 1e-5,
                      mode: str = "train", rng_seed: int = 0, names=None,
                      dtype=ORACLE_DTYPE) -> dict[str, np.ndarray]:
    oracle = _as_dtype(net, dtype)
    x = np.asarray(x, dtype=dtype)
    out = {}
    for name in names or list(net.params):
        def f(p, name=name):
            return loss_value(oracle, x, labels, config, {name: p}, mode, rng_seed)

        out[name] = ad.numeric_grad(f, oracle.params[name], step, dtype)
    return out


def check_gradients(net: Network, x, labels, config: LossConfig, step: float = 1e-5,
                    mode: str = "train", rng_seed: int = 0, dtype=ORACLE_DTYPE) -> dict[str, float]:
    """Max elementwise relative error (analytic vs central differences) per parameter block."""
    _, analytic = loss_gradients(net, x, labels, config, mode, rng_seed)
    numeric = numeric_gradients(net, x, labels, config, step, mode, rng_seed, list(analytic), dtype)
    return {name: ad.relative_error(analytic[name], numeric[name]) for name in analytic}
