import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from lidarseed.label_init import init_labels, kmeans, read_labels, write_labels, SegmentLabel


def blobs(rng, n_blobs, per, dim=4, sep=20.0):
    centers = rng.normal(size=(n_blobs, dim)) * sep
    x = np.concatenate([c + rng.normal(size=(per, dim)) for c in centers])
    return x, np.repeat(np.arange(n_blobs), per)


def test_single_point():
    model, lab = kmeans(np.array([[1.0, 2.0]]), 10)
    assert np.array_equal(lab, [0])
    assert len(model.centroids) == 1 and np.array_equal(model.centroids[0], [1.0, 2.0])
    assert model.objective_trace[-1] == 0.0


def test_more_clusters_than_points():
    x = np.random.default_rng(0).normal(size=(7, 3))
    model, lab = kmeans(x, 20)
    assert sorted(lab) == list(range(7))
    assert model.objective_trace[-1] == 0.0


def test_two_blobs():
    rng = np.random.default_rng(1)
    x, truth = blobs(rng, 2, 500, sep=10.0)
    _, lab = kmeans(x, 2, seed=3)
    agree = max(np.mean(lab == truth), np.mean(lab != truth))
    assert agree >= 0.99


@pytest.mark.parametrize("seed", range(50))
def test_objective_non_increasing(seed):
    rng = np.random.default_rng(seed)
    x = rng.normal(size=(int(rng.integers(20, 300)), int(rng.integers(1, 8))))
    model, _ = kmeans(x, int(rng.integers(1, 30)), seed=seed)
    trace = np.array(model.objective_trace)
    assert np.all(np.diff(trace) <= 1e-9 * max(trace[0], 1.0))


def test_centroids_are_means():
    rng = np.random.default_rng(2)
    x = rng.normal(size=(300, 3))
    model, lab = kmeans(x, 8, seed=1)
    for k in np.unique(lab):
        assert np.allclose(model.centroids[k], x[lab == k].mean(axis=0))


def test_seed_reproducible():
    x = np.random.default_rng(3).normal(size=(500, 5))
    a = kmeans(x, 16, seed=7)
    b = kmeans(x, 16, seed=7)
    assert np.array_equal(a[1], b[1]) and a[0].objective_trace == b[0].objective_trace


def test_identical_features_share_label():
    refs = [("f", i) for i in range(30)]
    labels = init_labels(np.ones((30, 4)), refs, C=5)
    assert {l.y for l in labels} == {1}


def test_init_labels_never_background():
    rng = np.random.default_rng(4)
    x = rng.normal(size=(200, 3))
    labels = init_labels(x, [("a", i) for i in range(200)], C=50, seed=1)
    ys = np.array([l.y for l in labels])
    assert ys.min() >= 1 and ys.max() <= 50


def test_balanced_blobs_near_uniform():
    rng = np.random.default_rng(5)
    x, _ = blobs(rng, 10, 100)
    labels = init_labels(x, [("a", i) for i in range(len(x))], C=10, seed=2)
    counts = np.unique([l.y for l in labels], return_counts=True)[1]
    assert counts.max() / counts.min() < 3


def test_label_file_roundtrip(tmp_path):
    labels = [SegmentLabel("000001", 3, 17), SegmentLabel("000002", 0, 0)]
    write_labels(tmp_path / "l.txt", labels)
    assert (tmp_path / "l.txt").read_text() == "000001 3 17\n000002 0 0\n"
    assert read_labels(tmp_path / "l.txt") == labels


@settings(max_examples=40, deadline=None)
@given(st.integers(1, 60), st.integers(1, 15), st.integers(0, 1000))
def test_assignment_is_nearest_centroid(n, C, seed):
    x = np.random.default_rng(seed).normal(size=(n, 2)).round(1)
    model, lab = kmeans(x, C, seed=seed)
    d = ((x[:, None, :] - model.centroids[None]) ** 2).sum(-1)
    assert np.all(d[np.arange(n), lab] <= d.min(axis=1) + 1e-9)
    assert len(model.centroids) <= C
