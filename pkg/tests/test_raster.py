import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from veriforet import raster


def rasters(h=st.integers(1, 6), w=st.integers(1, 6)):
    return st.tuples(h, w).flatmap(
        lambda hw: arrays(np.float64, (hw[0], hw[1], 3), elements=st.floats(0, 1)))


def test_mse_examples():
    x = np.full((2, 2, 3), 0.3)
    assert raster.mse(x, x) == 0.0
    assert raster.mse(np.zeros((4, 4, 3)), np.full((4, 4, 3), 0.5)) == 0.25
    a = np.array([[[0, 0, 0], [1, 1, 1]]], dtype=float)
    b = np.ones((1, 2, 3))
    assert raster.mse(a, b) == 0.5


def test_mse_dimension_mismatch():
    with pytest.raises(raster.RasterError):
        raster.mse(np.zeros((2, 2, 3)), np.zeros((4, 4, 3)))


@given(rasters(), st.data())
def test_mse_symmetric_nonnegative(a, data):
    b = data.draw(arrays(np.float64, a.shape, elements=st.floats(0, 1)))
    assert raster.mse(a, b) == raster.mse(b, a) >= 0
    assert raster.mse(a, a) == 0
    if raster.mse(a, b) > 0:
        assert not np.array_equal(a, b)


def test_resample_examples():
    x = np.random.default_rng(0).random((4, 6, 3))
    assert np.array_equal(raster.resample(x, 4, 6, "box"), x)
    checker = np.repeat(np.array([[0.0, 1.0], [1.0, 0.0]])[..., None], 3, axis=2)
    assert np.allclose(raster.resample(checker, 1, 1, "box"), 0.5)
    up = raster.resample(np.full((1, 1, 3), 0.5), 2, 2, "nearest")
    assert up.shape == (2, 2, 3) and np.all(up == 0.5)


def test_resample_box_rejects_fractional_ratio():
    with pytest.raises(raster.RasterError):
        raster.resample(np.zeros((5, 5, 3)), 2, 2, "box")


@settings(max_examples=50)
@given(st.integers(1, 4), st.integers(1, 4), st.integers(1, 4), st.integers(1, 4), st.integers(0, 2**31))
def test_box_preserves_mean(oh, ow, fy, fx, seed):
    x = np.random.default_rng(seed).random((oh * fy, ow * fx, 3))
    y = raster.resample(x, oh, ow, "box")
    assert abs(y.mean() - x.mean()) <= 1e-12


def test_nearest_then_box_round_trip():
    x = np.random.default_rng(3).random((8, 8, 3))
    assert np.allclose(raster.resample(raster.resample(x, 64, 64, "nearest"), 8, 8, "box"), x, atol=1e-15)


def test_standardize_examples():
    assert np.all(raster.standardize(np.full((3, 3, 3), 0.7)) == 0.0)
    x = np.zeros((1, 2, 3))
    x[0, 1] = 1.0
    assert np.allclose(raster.standardize(x)[0, :, 0], [-1.0, 1.0])


@given(rasters(h=st.integers(2, 6), w=st.integers(2, 6)))
def test_standardize_moments_and_idempotence(x):
    y = raster.standardize(x)
    for c in range(3):
        if np.ptp(x[..., c]) > 1e-6:
            assert abs(y[..., c].mean()) <= 1e-9
            assert abs(y[..., c].std() - 1.0) <= 1e-6
    assert np.allclose(raster.standardize(y), y, atol=1e-9)


def test_png_round_trip_is_quantized(tmp_path):
    x = np.random.default_rng(1).random((5, 7, 3))
    raster.write_png(x, tmp_path / "a.png")
    back = raster.read_png(tmp_path / "a.png")
    assert back.shape == x.shape
    assert np.max(np.abs(back - x)) <= 0.5 / 255 + 1e-12


def test_quantize_rounds_half_up():
    assert raster.quantize(np.array([0.5 / 255, 1.5 / 255, 1.0])).tolist() == [1, 2, 255]


def test_check_raster_rejects_out_of_range():
    with pytest.raises(raster.RasterError):
        raster.check_raster(np.full((2, 2, 3), 1.5))
    with pytest.raises(raster.RasterError):
        raster.check_raster(np.zeros((2, 2)))
