import csv

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from veriforet import baselines, raster, scenesim


def test_pixel_distance_examples(rng):
    sat = rng.uniform(0, 1, (8, 8, 3))
    drone = raster.resample(sat, 64, 64, "nearest")
    assert baselines.pixel_distance(drone, sat) <= 1e-30
    assert baselines.pixel_distance(np.zeros((64, 64, 3)), np.full((8, 8, 3), 0.5)) == 0.25
    with pytest.raises(baselines.BaselineError):
        baselines.pixel_distance(np.zeros((30, 30, 3)), np.zeros((8, 8, 3)))


def test_pixel_distance_positive_across_jitter():
    w = scenesim.generate_world(scenesim.WorldConfig(grid_size=2, parcel_pixels=32, resolution_ratio=4, seed=3))
    a = scenesim.render_drone(w, (0, 0), 0, 1)
    b = scenesim.render_drone(w, (0, 0), 0, 2)
    assert baselines.pixel_distance(a, raster.resample(b, 8, 8, "box")) > 0


@settings(max_examples=30, deadline=None)
@given(st.integers(0, 2**31))
def test_pixel_distance_symmetric_nonnegative(seed):
    rng = np.random.default_rng(seed)
    a, b = rng.uniform(0, 1, (16, 16, 3)), rng.uniform(0, 1, (16, 16, 3))
    d = baselines.pixel_distance(a, b)
    assert d >= 0 and d == baselines.pixel_distance(b, a)
    assert baselines.pixel_distance(a, a) == 0


@pytest.fixture(scope="module")
def extractor(small_dataset):
    keys = sorted(small_dataset.satellite)
    return baselines.train_feature_extractor([small_dataset.satellite[k] for k in keys],
                                             [small_dataset.covers[k] for k in keys],
                                             baselines.FeatureConfig(epochs=5))


def test_feature_distance_properties(extractor, small_dataset):
    a = small_dataset.truthful((0, 0), 0).image
    b = small_dataset.satellite[(1, 2, 1)]
    assert baselines.feature_distance(extractor, a, a) == 0.0
    d = baselines.feature_distance(extractor, a, b)
    assert d >= 0 and d == baselines.feature_distance(extractor, b, a)
    assert extractor.features(np.zeros((1, 32, 32, 3))).shape == (1, 32)
    assert extractor.meta["bucketEdges"][0] <= extractor.meta["bucketEdges"][1]


def test_untrained_extractor_errors(small_dataset):
    fx = baselines.FeatureExtractor.create(0)
    img = small_dataset.truthful((0, 0), 0).image
    with pytest.raises(baselines.BaselineError):
        baselines.feature_distance(fx, img, img)
    with pytest.raises(baselines.BaselineError):
        baselines.train_feature_extractor([img, img], [0.1, 0.2])


def test_cover_buckets():
    assert list(baselines.cover_buckets([0.1, 0.4, 0.5, 0.9], [0.4, 0.6])) == [0, 1, 1, 2]


def pairwise(x):
    return np.linalg.norm(x[:, None] - x[None], axis=-1)


def test_pca_lossless_on_plane(rng):
    coeffs = rng.normal(size=(12, 2))
    basis = np.linalg.qr(rng.normal(size=(5, 2)))[0].T
    pts = coeffs @ basis + rng.normal(size=5)
    proj = baselines.project2d(pts)
    np.testing.assert_allclose(pairwise(proj), pairwise(pts), atol=1e-9)


def test_pca_collinear(rng):
    direction = np.array([1.0, -2.0, 0.5])
    t = rng.normal(size=10)
    pts = np.outer(t, direction) + np.array([3.0, 1.0, -1.0])
    proj = baselines.project2d(pts)
    np.testing.assert_allclose(proj[:, 1], 0, atol=1e-9)
    assert np.array_equal(np.argsort(proj[:, 0]), np.argsort(t)) or np.array_equal(np.argsort(-proj[:, 0]), np.argsort(t))


def test_pca_residual_matches_eigenvalue_oracle(rng):
    pts = rng.normal(size=(40, 16)) * np.linspace(0.2, 3, 16)
    proj = baselines.project2d(pts)
    centered = pts - pts.mean(axis=0)
    eig = np.sort(np.linalg.eigvalsh(centered.T @ centered))[::-1]
    residual = np.sum(centered**2) - np.sum(proj**2)
    assert residual == pytest.approx(np.sum(centered**2) - eig[0] - eig[1], rel=1e-9)


def test_pca_sign_convention_and_order_invariance(rng):
    pts = rng.normal(size=(20, 6))
    perm = rng.permutation(20)
    a = baselines.project2d(pts)
    b = baselines.project2d(pts[perm])
    np.testing.assert_allclose(a[perm], b, atol=1e-9)


def test_projection_errors():
    with pytest.raises(baselines.BaselineError, match="not implemented"):
        baselines.project2d(np.zeros((5, 3)), "tsne")
    with pytest.raises(baselines.BaselineError):
        baselines.project2d(np.zeros((2, 3)))
    with pytest.raises(baselines.BaselineError):
        baselines.project2d(np.zeros((5, 3)), "umap")


def test_projection_csv(tmp_path):
    baselines.write_projection_csv(tmp_path / "p.csv", ["a", "b"], ["truthful", "wrong_time"],
                                   np.array([[0.5, -1.0], [2.0, 0.25]]))
    rows = list(csv.reader(open(tmp_path / "p.csv")))
    assert rows == [["id", "label", "x", "y"], ["a", "truthful", "0.5", "-1.0"], ["b", "wrong_time", "2.0", "0.25"]]
