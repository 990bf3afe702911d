import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from conftest import ridge_image
from latentsynth.fpcore import DomainSet, FingerprintImage, LATENT
from latentsynth.stylecluster import (
    FEATURE_DIM, ClusterAssignment, ClusteringError, ConfigurationError, FeatureVector, TextureExtractor,
    export_assignment, extract_features, get_extractor, kmeans_cluster, load_assignment, partition_dataset,
)


def _fv(points):
    return [FeatureVector(p, f"p{i:03d}") for i, p in enumerate(points)]


def test_extractor_deterministic_and_sized():
    ims = [ridge_image(img_id="a"), ridge_image(angle=1.0, img_id="b"), ridge_image(noise=20, img_id="c")]
    a = extract_features(ims, TextureExtractor())
    b = extract_features(ims, TextureExtractor())
    assert len(a) == 3 and all(f.dim == FEATURE_DIM for f in a)
    assert all(np.array_equal(x.values, y.values) for x, y in zip(a, b))


def test_extractor_distinguishes_rotation():
    yy, xx = np.mgrid[0:96, 0:96]
    px = np.where(xx < 30, 40, 220).astype(np.uint8)  # dark band on one side
    im = FingerprintImage(px, "a")
    rot = FingerprintImage(np.ascontiguousarray(px[::-1, ::-1]), "b")
    fa, fb = extract_features([im, rot], TextureExtractor())
    cos = fa.values @ fb.values / (np.linalg.norm(fa.values) * np.linalg.norm(fb.values))
    assert cos < 1.0 - 1e-9


def test_missing_extractor():
    with pytest.raises(ConfigurationError):
        extract_features([ridge_image()], None)
    with pytest.raises(ConfigurationError):
        get_extractor("vgg")


def test_kmeans_k1_centroid_is_mean():
    pts = np.random.default_rng(0).normal(size=(30, 4))
    a = kmeans_cluster(_fv(pts), 1)
    assert a.sizes == [30]
    assert np.allclose(a.centroids[0], pts.mean(0))


def test_kmeans_separated_blobs():
    rng = np.random.default_rng(1)
    centers = np.array([[0.0, 0.0], [20.0, 0.0], [0.0, 20.0]])
    pts = np.concatenate([c + rng.normal(0, 1.0, (20, 2)) for c in centers])
    a = kmeans_cluster(_fv(pts), 3, seed=4)
    labels = np.array([a.labels[f"p{i:03d}"] for i in range(60)])
    # brute-force oracle: nearest true centre
    truth = np.argmin(((pts[:, None, :] - centers[None]) ** 2).sum(-1), axis=1)
    for c in range(3):
        assert len(set(labels[truth == c])) == 1
    assert len(set(labels)) == 3


def test_kmeans_k_equals_n():
    pts = np.random.default_rng(2).normal(size=(7, 3))
    a = kmeans_cluster(_fv(pts), 7)
    assert a.sizes == [1] * 7 and a.objective == pytest.approx(0.0, abs=1e-12)


def test_kmeans_too_few_points():
    with pytest.raises(ClusteringError):
        kmeans_cluster(_fv(np.zeros((2, 2))), 3)


def test_kmeans_duplicate_points_fill_all_clusters():
    pts = np.zeros((6, 2))
    a = kmeans_cluster(_fv(pts), 3)
    assert sorted(a.sizes) == [1, 1, 4] or min(a.sizes) >= 1


@settings(max_examples=25, deadline=None)
@given(seed=st.integers(0, 10_000), k=st.integers(1, 5))
def test_kmeans_assigns_every_point_to_nearest_centroid(seed, k):
    pts = np.random.default_rng(seed).normal(size=(25, 3))
    a = kmeans_cluster(_fv(pts), k, seed=seed)
    labels = np.array([a.labels[f"p{i:03d}"] for i in range(25)])
    d2 = ((pts[:, None, :] - a.centroids[None]) ** 2).sum(-1)
    assert np.allclose(d2[np.arange(25), labels], d2.min(1))
    assert min(a.sizes) >= 1


def test_empty_cluster_rejected():
    with pytest.raises(ClusteringError):
        ClusterAssignment({"a": 0, "b": 0}, np.zeros((2, 2)), 2)


def test_partition_sizes_and_union():
    ims = tuple(FingerprintImage(np.full((4, 4), i, np.uint8), f"im{i}") for i in range(6))
    a = ClusterAssignment({f"im{i}": int(i >= 3) for i in range(6)}, np.zeros((2, 1)), 2)
    parts = partition_dataset(DomainSet("lat", ims, LATENT), a)
    assert [len(p) for p in parts] == [3, 3]
    assert sorted(i for p in parts for i in p.ids) == sorted(im.id for im in ims)


def test_partition_missing_image():
    ims = (FingerprintImage(np.zeros((4, 4), np.uint8), "x"),)
    a = ClusterAssignment({"y": 0}, np.zeros((1, 1)), 1)
    with pytest.raises(ClusteringError):
        partition_dataset(DomainSet("lat", ims, LATENT), a)


def test_assignment_roundtrip(tmp_path):
    pts = np.random.default_rng(3).normal(size=(10, 2))
    a = kmeans_cluster(_fv(pts), 2)
    export_assignment(a, tmp_path / "c.csv")
    assert (tmp_path / "c.csv").read_text().splitlines()[0] == "image_id,cluster_index"
    b = load_assignment(tmp_path / "c.csv")
    assert b.labels == a.labels and np.allclose(b.centroids, a.centroids)
