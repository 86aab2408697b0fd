import struct

import numpy as np
import pytest
from sklearn.linear_model import LogisticRegression

from inversion_ssl import tensor as T
from inversion_ssl.data import (DegenerateSampleError, RawDataset, add_distractors, load_image_dataset,
                                make_clusters, make_half_moons, normalize_sample, normalize_samples,
                                prepare_vectors, read_idx, save_dataset, split_semisupervised,
                                symmetric_lift)


def test_normalize_examples():
    np.testing.assert_array_equal(normalize_sample([1.0, 2.0, 3.0]), [-1.0, 0.0, 1.0])
    np.testing.assert_allclose(normalize_sample([0.0, 0.0, 4.0]), [-0.5, -0.5, 1.0], atol=1e-15)
    with pytest.raises(DegenerateSampleError):
        normalize_sample([5.0, 5.0, 5.0])


def test_normalize_batch_properties():
    X = np.random.default_rng(0).normal(size=(6, 2, 3, 3)) * 7 + 4
    Y = normalize_samples(X)
    flat = Y.reshape(6, -1)
    np.testing.assert_allclose(flat.mean(axis=1), 0.0, atol=1e-15)
    np.testing.assert_allclose(np.abs(flat).max(axis=1), 1.0, atol=0)
    np.testing.assert_allclose(normalize_samples(X * 3.5 - 2.0), Y, atol=1e-14)
    with pytest.raises(DegenerateSampleError, match="sample 1"):
        normalize_samples(np.array([[1.0, 2.0], [3.0, 3.0]]))


def test_symmetric_lift_keeps_vectors_distinct():
    X = np.array([[0.5, -1.0], [1.0, -2.0]])  # collinear: plain normalisation would merge them
    Y = prepare_vectors(X, anchor=4.0)
    np.testing.assert_allclose(Y[:, :2], X / 4.0)
    assert not np.allclose(Y[0], Y[1])
    assert symmetric_lift(X, 4.0).shape == (2, 6)
    with pytest.raises(ValueError):
        symmetric_lift(X, 2.0)


def test_clusters_are_separable():
    data = make_clusters(500, 2, centers=[[-3.0, 0.0], [3.0, 0.0]], spread=0.5, seed=1)
    assert len(data) == 1000 and np.bincount(data.labels).tolist() == [500, 500]
    acc = LogisticRegression().fit(data.samples, data.labels).score(data.samples, data.labels)
    assert acc >= 0.999


def test_clusters_zero_spread_and_determinism():
    c = [[1.0, 2.0], [-1.0, 0.5], [0.0, 0.0]]
    data = make_clusters(4, 3, centers=c, spread=0.0, seed=3)
    np.testing.assert_array_equal(data.samples, np.array(c)[data.labels])
    a, b = make_clusters(20, 4, seed=9), make_clusters(20, 4, seed=9)
    np.testing.assert_array_equal(a.samples, b.samples)
    assert not np.array_equal(a.samples, make_clusters(20, 4, seed=10).samples)
    with pytest.raises(ValueError):
        make_clusters(3, 2, centers=[[0.0, 0.0]])


def test_half_moons():
    data = make_half_moons(200, noise=0.0, seed=0)
    assert data.n_classes == 2 and data.samples.shape == (200, 2)
    upper = data.samples[data.labels == 0]
    np.testing.assert_allclose(np.hypot(*upper.T), 1.0, atol=1e-12)


def test_add_distractors_fraction():
    data = make_clusters(10, 2, seed=0, n_features=8)
    noisy = add_distractors(data, 0.2, seed=1)
    assert noisy.samples.shape == (20, 10)
    np.testing.assert_array_equal(noisy.samples[:, :8], data.samples)


def test_split_counts_and_balance():
    data = make_clusters(100, 10, seed=0)
    split = split_semisupervised(data, 50, seed=4)
    assert split.n_labeled == 50 and split.n_unlabeled == 950
    assert np.bincount(split.labeled_y, minlength=10).tolist() == [5] * 10
    assert not set(split.labeled_index) & set(split.unlabeled_index)
    again = split_semisupervised(data, 50, seed=4)
    np.testing.assert_array_equal(split.labeled_index, again.labeled_index)


def test_split_boundaries_and_errors():
    data = make_clusters(10, 2, seed=0)
    full = split_semisupervised(data, 20)
    assert full.n_unlabeled == 0
    with pytest.raises(ValueError, match="divisible"):
        split_semisupervised(data, 3)
    with pytest.raises(ValueError):
        split_semisupervised(data, 21)
    with pytest.raises(ValueError):
        split_semisupervised(RawDataset(np.ones((3, 2)), None, "x", 2), 2)


def test_rawdataset_validation():
    with pytest.raises(ValueError):
        RawDataset(np.ones((3, 2)), [0, 1], "x", 2)
    with pytest.raises(ValueError):
        RawDataset(np.ones((2, 2)), [0, 2], "x", 2)


def _idx_bytes(arr, code=0x08):
    head = bytes([0, 0, code, arr.ndim]) + struct.pack(f">{arr.ndim}I", *arr.shape)
    return head + arr.astype({0x08: ">u1", 0x0D: ">f4"}[code]).tobytes()


def test_idx_fixture_loads_as_nchw(tmp_path):
    imgs = np.random.default_rng(0).integers(0, 256, size=(4, 28, 28)).astype(np.uint8)
    labels = np.array([3, 1, 4, 1], np.uint8)
    (tmp_path / "img.idx").write_bytes(_idx_bytes(imgs))
    (tmp_path / "lab.idx").write_bytes(_idx_bytes(labels))
    data = load_image_dataset(tmp_path / "img.idx", "idx", tmp_path / "lab.idx", n_classes=10)
    assert data.samples.shape == (4, 1, 28, 28) and data.samples.dtype == np.float64
    np.testing.assert_array_equal(data.samples[:, 0], imgs)
    assert data.labels.tolist() == [3, 1, 4, 1]


def test_idx_errors(tmp_path):
    raw = _idx_bytes(np.zeros((2, 3, 3), np.uint8))
    (tmp_path / "t.idx").write_bytes(raw[:-4])
    with pytest.raises(T.TensorFormatError, match="offset"):
        read_idx(tmp_path / "t.idx")
    (tmp_path / "m.idx").write_bytes(b"\x01\x00\x08\x01" + raw[4:])
    with pytest.raises(T.TensorFormatError, match="magic"):
        read_idx(tmp_path / "m.idx")
    (tmp_path / "f.idx").write_bytes(_idx_bytes(np.ones((2, 2), np.float32), 0x0D))
    assert read_idx(tmp_path / "f.idx").dtype == np.dtype(">f4")


def test_tensor_container_dataset_round_trip(tmp_path):
    X = np.random.default_rng(1).normal(size=(5, 3, 4, 4))
    data = RawDataset(X, [0, 1, 2, 1, 0], "toy", 3)
    save_dataset(data, tmp_path / "toy.tnsr")
    back = load_image_dataset(tmp_path / "toy.tnsr")
    assert back.samples.tobytes() == X.tobytes()
    assert back.labels.tolist() == [0, 1, 2, 1, 0] and back.n_classes == 3


def test_label_count_mismatch(tmp_path):
    T.save_tensor(tmp_path / "x.tnsr", np.ones((3, 1, 2, 2)))
    T.save_tensor(tmp_path / "y.tnsr", np.zeros(2))
    with pytest.raises(ValueError, match="mismatch"):
        load_image_dataset(tmp_path / "x.tnsr", labels_path=tmp_path / "y.tnsr")
