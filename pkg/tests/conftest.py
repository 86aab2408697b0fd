import json
from pathlib import Path

import numpy as np
import pytest

from inversion_ssl.network import LayerSpec, Network, NetworkSpec

ORACLES = json.loads((Path(__file__).parent / "oracles" / "frozen.json").read_text())


@pytest.fixture(scope="session")
def frozen():
    return ORACLES


def dense_net(widths, activations, seed=0, batch_norm=False, dropout_p=0.0):
    """Dense network; ``widths`` runs from the input size to the class count."""
    layers = tuple(
        LayerSpec("dense", o, activation=a, batch_norm=batch_norm and i < len(widths) - 2,
                  dropout_p=dropout_p if i < len(widths) - 2 else 0.0)
        for i, (o, a) in enumerate(zip(widths[1:], activations)))
    return Network(NetworkSpec((widths[0],), layers, widths[-1]), seed=seed)


def frozen_dense_net(case):
    """Rebuild a network from the parameters stored with an oracle case."""
    widths = case["widths"]
    layers = tuple(LayerSpec("dense", o, activation=a) for o, a in zip(widths[1:], case["acts"]))
    params = {}
    for i in range(len(layers)):
        params[f"layer{i + 1}.W"] = np.array(case["params"][2 * i])
        params[f"layer{i + 1}.b"] = np.array(case["params"][2 * i + 1])
    return Network(NetworkSpec((widths[0],), layers, widths[-1]), params)


def random_small_net(rng, n_classes=3):
    """A random small topology mixing conv, pool, dense, batch-norm and both activations."""
    act = ["leaky_relu", "sigmoid"][rng.integers(2)]
    bn = bool(rng.integers(2))
    if rng.integers(2):
        c, h = int(rng.integers(1, 3)), int(rng.integers(4, 6))
        layers = [LayerSpec("conv", int(rng.integers(1, 3)), 3, ["same", "valid", "full"][rng.integers(3)],
                            int(rng.integers(1, 3)), act, bn)]
        if rng.integers(2):
            layers.append(LayerSpec("pool_only", pool=2))
        layers.append(LayerSpec("dense", int(rng.integers(2, 5)), activation=act, batch_norm=bn))
        shape = (c, h, h)
    else:
        d = int(rng.integers(2, 6))
        layers = [LayerSpec("dense", int(rng.integers(2, 6)), activation=act, batch_norm=bn)
                  for _ in range(rng.integers(1, 3))]
        shape = (d,)
    layers.append(LayerSpec("dense", n_classes, activation="none"))
    spec = NetworkSpec(shape, tuple(layers), n_classes)
    return Network(spec, seed=int(rng.integers(1 << 30)))


# acceptance criterion number -> (passed, detail); filled by test_acceptance.py
ACCEPTANCE: dict = {}


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE:
        return
    terminalreporter.section("acceptance criteria")
    for number in sorted(ACCEPTANCE):
        ok, detail = ACCEPTANCE[number]
        terminalreporter.write_line(f"criterion {number}: {'PASS' if ok else 'FAIL'} - {detail}")
