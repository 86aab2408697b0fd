import json

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from inversion_ssl import autodiff as ad
from inversion_ssl import tensor as T
from inversion_ssl.network import (LayerSpec, Network, NetworkSpec, ResnetConfig, build_resnet,
                                   infer_shapes, load_checkpoint, parse_cnn_spec, preset,
                                   save_checkpoint)

from conftest import dense_net


def test_large_cnn_shapes_match_grammar_walk(frozen):
    spec = preset("large-cnn")
    assert spec.depth == 9  # 8 conv units + dense head
    assert [list(s) for s in infer_shapes(spec)] == frozen["large_cnn_shapes"]
    # layer 3: 34x34 input, full padding gives 36x36, pool 2 gives 18x18
    assert infer_shapes(spec)[3] == (96, 18, 18)


def test_single_same_conv_preserves_shape():
    spec = parse_cnn_spec([(1, 1, "s", 1)], input_shape=(2, 5, 7), n_classes=3)
    assert infer_shapes(spec)[1] == (1, 5, 7)


def test_unknown_padding_token():
    with pytest.raises(ValueError, match="unknown padding token x"):
        parse_cnn_spec([(4, 3, "x", 1)])


def test_valid_conv_underflow():
    with pytest.raises(T.ShapeError, match="layer 1"):
        parse_cnn_spec([(2, 5, "v", 1)], input_shape=(1, 3, 3), n_classes=2)


def test_resnet_shapes(frozen):
    spec = build_resnet(ResnetConfig(n=1, k=4, input_shape=(3, 16, 16)))
    assert [list(s) for s in infer_shapes(spec)] == frozen["resnet_1_4_shapes"]
    assert [layer.filters for layer in spec.layers[:-1]] == [4, 8, 16]


def test_resnet_too_small():
    with pytest.raises(T.ShapeError, match="too small"):
        build_resnet(ResnetConfig(n=1, k=2, input_shape=(1, 4, 4)))


def test_wide_resnet_block_count():
    spec = preset("wide-resnet", scale=1 / 16)
    assert sum(layer.kind == "resnet_block" for layer in spec.layers) == 9
    assert spec.layers[0].filters == 4  # k=64 scaled by 1/16
    assert sum(layer.kind == "resnet_block" for layer in preset("deep-resnet", scale=1 / 16).layers) == 18


def test_resnet_block_zero_branch_identity_shortcut_is_identity():
    spec = NetworkSpec((2, 4, 4), (LayerSpec("resnet_block", 2, 3, "same", 1, "leaky_relu", False),
                                   LayerSpec("dense", 2, activation="none")), 2)
    net = Network(spec)
    net.params["layer1.W"] = np.zeros_like(net.params["layer1.W"])
    net.params["layer1.shortcut"] = np.eye(2).reshape(2, 2, 1, 1)
    x = np.random.default_rng(0).normal(size=(3, 2, 4, 4))
    np.testing.assert_array_equal(net.forward(x).activations[1].value, x)


def test_identity_dense_trace():
    spec = NetworkSpec((3,), (LayerSpec("dense", 3, activation="none"),), 3)
    net = Network(spec, {"layer1.W": np.eye(3), "layer1.b": np.zeros(3)})
    x = np.array([[0.5, -1.0, 2.0]])
    tr = net.forward(x)
    assert len(tr.activations) == 2
    np.testing.assert_array_equal(tr.activations[0].value, x)
    np.testing.assert_array_equal(tr.activations[1].value, x)
    np.testing.assert_allclose(tr.prediction, ad.softmax(x), atol=1e-15)


def test_zero_logits_uniform_prediction():
    spec = NetworkSpec((4,), (LayerSpec("dense", 10, activation="none"),), 10)
    net = Network(spec, {"layer1.W": np.zeros((4, 10)), "layer1.b": np.zeros(10)})
    np.testing.assert_allclose(net.forward(np.ones((1, 4))).prediction, np.full((1, 10), 0.1), atol=1e-15)


def _mixed_net():
    spec = NetworkSpec((2, 6, 6), (
        LayerSpec("conv", 3, 3, "same", 2, "leaky_relu", True, 0.2),
        LayerSpec("resnet_block", 4, 3, "same", 1, "sigmoid", True, 0.2),
        LayerSpec("dense", 5, activation="leaky_relu", batch_norm=True, dropout_p=0.2),
        LayerSpec("dense", 3, activation="none")), 3)
    return Network(spec, seed=7)


def test_train_forward_deterministic_per_seed():
    net = _mixed_net()
    x = np.random.default_rng(1).normal(size=(4, 2, 6, 6))
    a = net.forward(x, "train", rng_seed=11)
    b = net.forward(x, "train", rng_seed=11)
    c = net.forward(x, "train", rng_seed=12)
    for za, zb in zip(a.activations, b.activations):
        assert za.value.tobytes() == zb.value.tobytes()
    assert not np.array_equal(a.logits.value, c.logits.value)


def test_eval_forward_deterministic_and_dropout_free():
    net = _mixed_net()
    x = np.random.default_rng(2).normal(size=(4, 2, 6, 6))
    a = net.forward(x, "eval", rng_seed=1)
    b = net.forward(x, "eval", rng_seed=2)
    np.testing.assert_array_equal(a.logits.value, b.logits.value)
    # eval mode is per-sample: a sample's output does not depend on its batch
    np.testing.assert_allclose(net.forward(x[:1], "eval").logits.value, a.logits.value[:1], atol=1e-13)


def test_sizes_equal_element_counts():
    for spec in (preset("large-cnn", scale=1 / 48), preset("wide-resnet", scale=1 / 32)):
        net = Network(spec)
        tr = net.forward(np.zeros((1, 3, 32, 32)) + np.linspace(-1, 1, 3 * 32 * 32).reshape(1, 3, 32, 32),
                         "eval")
        for z, d in zip(tr.activations[:-1], tr.sizes):
            assert z.value[0].size == d


@settings(max_examples=25, deadline=None)
@given(st.integers(0, 2**31), st.floats(-50, 50))
def test_softmax_shift_invariance_and_simplex(seed, c):
    net = dense_net([3, 4, 5], ["leaky_relu", "none"], seed=seed % 997)
    x = np.random.default_rng(seed).normal(size=(3, 3)) * 3
    tr = net.forward(x)
    p = tr.prediction
    np.testing.assert_allclose(p.sum(axis=1), 1.0, atol=1e-9)
    assert np.all(p > 0)
    np.testing.assert_allclose(ad.softmax(tr.logits.value + c), p, atol=1e-12)


def test_forward_errors():
    net = dense_net([3, 2], ["none"])
    with pytest.raises(T.ShapeError):
        net.forward(np.ones((2, 4)))
    net.params["layer1.W"] = np.full((3, 2), 1e308)
    with pytest.raises(T.NonFiniteError), np.errstate(over="ignore"):
        net.forward(np.ones((1, 3)) * 10)


def test_layer_spec_validation():
    with pytest.raises(ValueError):
        LayerSpec("dense", 3, dropout_p=1.0)
    with pytest.raises(ValueError):
        LayerSpec("dense", 0)
    with pytest.raises(ValueError):
        NetworkSpec((3,), (LayerSpec("dense", 4, activation="none"),), 3)


def test_glorot_init_bounds():
    net = Network(NetworkSpec((20,), (LayerSpec("dense", 30), LayerSpec("dense", 10, activation="none")), 10), seed=3)
    lim = np.sqrt(6 / 50)
    assert np.abs(net.params["layer1.W"]).max() <= lim
    assert np.abs(net.params["layer1.W"]).max() > 0.9 * lim
    np.testing.assert_array_equal(net.params["layer1.b"], 0.0)


def test_checkpoint_round_trip_bit_exact(tmp_path):
    net = _mixed_net()
    net.forward(np.ones((2, 2, 6, 6)))
    net.state = {k: v + 0.123 for k, v in net.state.items()}
    save_checkpoint(net, tmp_path / "ck", {"epoch": 3})
    names = sorted(p.name for p in (tmp_path / "ck").iterdir())
    assert "manifest.json" in names and "layer1.W.tnsr" in names and "layer2.shortcut.tnsr" in names
    manifest = json.loads((tmp_path / "ck" / "manifest.json").read_text())
    assert manifest["layer_order"] == ["layer1", "layer2", "layer3", "layer4"]
    back = load_checkpoint(tmp_path / "ck")
    assert back.spec == net.spec
    for group in ("params", "state"):
        a, b = getattr(net, group), getattr(back, group)
        assert a.keys() == b.keys()
        for k in a:
            assert a[k].tobytes() == b[k].tobytes()
