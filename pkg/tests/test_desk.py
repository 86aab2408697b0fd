import numpy as np
import pytest

from inversion_ssl import desk


def test_observe_shape_and_normalisation():
    X = np.random.default_rng(0).normal(size=(10, 3))
    Z = desk.observe(X)
    assert Z.shape == (10, 2 * desk.OBSERVED_DIM + 2)
    np.testing.assert_allclose(Z.mean(axis=1), 0.0, atol=1e-15)
    np.testing.assert_allclose(np.abs(Z).max(axis=1), 1.0)
    np.testing.assert_array_equal(desk.observe(X), Z)
    with pytest.raises(ValueError):
        desk.observe(X, corrupt=1.0)


def test_corruption_replaces_a_fixed_column_subset():
    X = np.random.default_rng(0).normal(size=(50, 3))
    d = desk.OBSERVED_DIM
    clean, noisy = desk.observe(X)[:, :d], desk.observe(X, corrupt=0.2, corrupt_seed=1)[:, :d]
    # untouched columns differ only by the global anchor rescaling
    ratio = noisy / clean
    common = np.median(ratio)
    untouched = np.isclose(ratio, common, rtol=1e-12).all(axis=0)
    assert int((~untouched).sum()) == round(0.2 * d)


def test_splits():
    s = desk.moons_split(0, n_samples=200, n_labels=4, n_test=100)
    assert s.n_labeled == 4 and s.n_unlabeled == 196 and len(s.test_y) == 100
    assert sorted(s.labeled_y.tolist()) == [0, 0, 1, 1]
    c = desk.clusters_split(1, n_samples=200, n_labels=20, n_classes=4, n_test=100, corrupt=0.2)
    assert c.n_labeled == 20 and len(c.test_y) == 100 and c.n_classes == 4


def test_run_arm_small():
    s = desk.clusters_split(0, n_samples=200, n_labels=20, n_classes=4, n_test=100)
    out = desk.run_arm(s, "lambda", 0, epochs=2)
    assert 0.0 <= out.accuracy <= 1.0 and out.deepest_recon >= 0
    assert out.result.status == "completed"
    with pytest.raises(KeyError):
        desk.run_arm(s, "nope", 0, epochs=1)
