import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from inversion_ssl import autodiff as ad

from conftest import dense_net


def test_record_values():
    tape = ad.Tape()
    a, b = tape.variable([1.0, 2.0]), tape.variable([3.0, -1.0])
    np.testing.assert_array_equal(tape.record("add", [a, b]).value, [4.0, 1.0])
    assert ad.leaky_relu(tape.constant(-2.0)).value == pytest.approx(-0.02, abs=1e-15)
    assert ad.sigmoid(tape.constant(0.0)).value == 0.5


def test_leaky_kink_takes_positive_slope():
    tape = ad.Tape()
    x = tape.variable(np.array([0.0, -1.0, 2.0]))
    g = ad.grad(tape, ad.sum_all(ad.leaky_relu(x)), [x])[x]
    np.testing.assert_array_equal(g, [1.0, 0.01, 1.0])


def test_vjp_linear_map():
    tape = ad.Tape()
    x = tape.variable(np.array([[0.3, -0.7]]))
    W = tape.constant(np.array([[1.0, 3.0], [2.0, 4.0]]))  # row-vector convention: z = x W
    z = ad.matmul(x, W)
    res = ad.vjp(tape, z, np.array([[1.0, 1.0]]), [x])
    np.testing.assert_array_equal(res[x].value, [[4.0, 6.0]])


def test_vjp_identity_chain():
    tape = ad.Tape()
    nodes = [tape.variable(np.arange(3.0))]
    for _ in range(4):
        nodes.append(ad.scale(nodes[-1], 1.0))
    seed = np.array([0.5, -2.0, 3.0])
    res = ad.vjp(tape, nodes[-1], seed, nodes)
    for n in nodes:
        np.testing.assert_array_equal(res[n].value, seed)


def test_vjp_input_adjoint_matches_fd_oracle(frozen):
    case = frozen["input_adjoint"]
    net = dense_net([4, 5, 3], ["sigmoid", "none"])
    net.params = {"layer1.W": np.array(case["params"][0]), "layer1.b": np.array(case["params"][1]),
                  "layer2.W": np.array(case["params"][2]), "layer2.b": np.array(case["params"][3])}
    trace = net.forward(np.array(case["x"]))
    res = ad.vjp(trace.tape, trace.logits, np.array([case["seed"]]), [trace.input])
    assert ad.relative_error(res[trace.input].value[0], np.array(case["adjoint"])) < 1e-6


def test_vjp_errors_and_unreachable():
    tape = ad.Tape()
    x, y = tape.variable(np.ones(2)), tape.variable(np.ones(2))
    z = ad.scale(x, 2.0)
    with pytest.raises(ad.TapeError, match="seed shape"):
        ad.vjp(tape, z, np.ones(3), [x])
    res = ad.vjp(tape, z, np.ones(2), [x, y])
    assert res.unreachable == [y]
    np.testing.assert_array_equal(res[y].value, [0.0, 0.0])


def test_foreign_node_rejected():
    t1, t2 = ad.Tape(), ad.Tape()
    a, b = t1.variable(1.0), t2.variable(1.0)
    with pytest.raises(ad.TapeError, match="different tape"):
        ad.add(a, b)
    with pytest.raises(ad.TapeError):
        ad.vjp(t1, a, np.ones(()), [b])


def test_released_tape():
    tape = ad.Tape()
    x = tape.variable(1.0)
    tape.release()
    with pytest.raises(ad.TapeError):
        ad.scale(x, 2.0)


def test_grad_square():
    tape = ad.Tape()
    x = tape.variable(3.0)
    assert ad.grad(tape, ad.mul(x, x), [x])[x] == 6.0


def test_grad_needs_scalar():
    tape = ad.Tape()
    x = tape.variable(np.ones(2))
    with pytest.raises(ad.TapeError, match="scalar"):
        ad.grad(tape, x, [x])


def test_double_backward_scalar_reconstruction():
    """Loss ||x - a (a x)||^2 at x=[1,0], a=2: value 9, derivative 24."""
    tape = ad.Tape()
    a = tape.variable(2.0)
    x = tape.constant(np.array([1.0, 0.0]))
    z = ad.mul(ad.broadcast_to(a, (2,)), x)
    r = ad.vjp(tape, z, z, [x], record_backward=True)[x]
    d = ad.sub(x, r)
    loss = ad.sum_all(ad.mul(d, d))
    assert loss.value == 9.0
    assert ad.grad(tape, loss, [a])[a] == pytest.approx(24.0, abs=1e-12)


def test_fd_check_examples():
    assert ad.fd_check(lambda t, x: ad.mul(x, x), np.array(3.0), step=1e-3) < 1e-6
    assert ad.fd_check(lambda t, x: ad.sum_all(ad.scale(x, 0.0)), np.ones(3)) == 0.0


def test_fd_check_softmax_cross_entropy():
    logits = np.random.default_rng(4).normal(size=(1, 3))

    def ce(tape, z):
        return ad.neg(ad.sum_all(ad.mul(ad.log_softmax(z), tape.constant([[0.0, 1.0, 0.0]]))))

    assert ad.fd_check(ce, logits) < 1e-6


def test_fd_check_rejects_bad_step():
    with pytest.raises(ValueError):
        ad.fd_check(lambda t, x: x, np.ones(()), step=0.0)


@settings(max_examples=20, deadline=None)
@given(st.integers(0, 2**31), st.floats(-3, 3), st.floats(-3, 3))
def test_vjp_linearity(seed, a, b):
    rng = np.random.default_rng(seed)
    net = dense_net([4, 5, 3], ["sigmoid", "none"], seed=seed % 1000)
    trace = net.forward(rng.normal(size=(2, 4)))
    v1, v2 = rng.normal(size=(2, 3)), rng.normal(size=(2, 3))
    x = trace.input

    def adj(v):
        return ad.vjp(trace.tape, trace.logits, v, [x])[x].value

    np.testing.assert_allclose(adj(a * v1 + b * v2), a * adj(v1) + b * adj(v2), atol=1e-10)


def test_single_sweep_equals_separate_calls():
    net = dense_net([5, 6, 4, 3], ["leaky_relu", "sigmoid", "none"], seed=3)
    trace = net.forward(np.random.default_rng(5).normal(size=(3, 5)))
    targets = trace.activations[:-1]
    seed = trace.logits.value
    together = ad.vjp(trace.tape, trace.logits, seed, targets)
    for t in targets:
        alone = ad.vjp(trace.tape, trace.logits, seed, [t])
        np.testing.assert_array_equal(together[t].value, alone[t].value)


def test_paused_tape_records_nothing():
    tape = ad.Tape()
    x = tape.variable(1.0)
    n = len(tape)
    with tape.paused():
        y = ad.scale(x, 3.0)
    assert len(tape) == n and y.index == -1 and y.value == 3.0


def test_conv_and_pool_adjoints_fd():
    rng = np.random.default_rng(6)
    k = rng.normal(size=(2, 2, 3, 3))

    def f(tape, x):
        h = ad.conv2d(x, tape.constant(k), "full")
        return ad.sum_all(ad.mul(ad.mean_pool(ad.sigmoid(h), 2), ad.mean_pool(h, 2)))

    assert ad.fd_check(f, rng.normal(size=(1, 2, 4, 5))) < 1e-6


def test_corrupt_adjoint_is_scoped():
    tape = ad.Tape()
    x = tape.variable(2.0)
    with ad.corrupt_adjoint("mul", 2.0):
        assert ad.grad(tape, ad.mul(x, x), [x])[x] == 8.0  # both operand adjoints doubled
    tape2 = ad.Tape()
    x2 = tape2.variable(2.0)
    assert ad.grad(tape2, ad.mul(x2, x2), [x2])[x2] == 4.0
