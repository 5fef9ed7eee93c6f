import json

import numpy as np
import pytest

from veriforet import raster, scenesim
from veriforet.dataset import load_dataset, manifest_bytes, save_dataset


def cfg(**kw):
    base = dict(grid_size=3, parcel_pixels=32, resolution_ratio=4, timesteps=3, seed=42)
    base.update(kw)
    return scenesim.WorldConfig(**base)


def test_saturated_and_empty_worlds():
    full = scenesim.generate_world(cfg(cover_range=(1.0, 1.0), logging_prob=0.0))
    assert np.all(full.covers() == 1.0)
    empty = scenesim.generate_world(cfg(cover_range=(0.0, 0.0)))
    assert np.all(empty.covers() == 0.0)
    soil = scenesim.render_drone(empty, (0, 0), 0, 5)
    forest = scenesim.render_drone(full, (0, 0), 0, 5)
    assert forest[..., 1].mean() > forest[..., 0].mean()
    assert soil[..., 0].mean() > forest[..., 0].mean()


def test_generation_is_deterministic():
    c = cfg(grid_size=4, logging_prob=0.5)
    a, b = scenesim.generate_world(c), scenesim.generate_world(c)
    assert np.array_equal(a.masks, b.masks)
    da, db = scenesim.build_dataset(a, 1), scenesim.build_dataset(b, 1)
    assert manifest_bytes(da.manifest()) == manifest_bytes(db.manifest())


def test_forest_cover_matches_pixel_count(small_world):
    g, t = small_world.config.grid_size, small_world.config.timesteps
    for i in range(g):
        for j in range(g):
            for k in range(t):
                mask = small_world.masks[i, j, k]
                count = sum(bool(v) for v in mask.ravel())
                assert scenesim.forest_cover(small_world, (i, j), k) == count / mask.size


def test_forest_cover_index_errors(small_world):
    with pytest.raises(IndexError):
        scenesim.forest_cover(small_world, (3, 0), 0)
    with pytest.raises(IndexError):
        scenesim.forest_cover(small_world, (0, 0), 3)


def test_monotone_deforestation(small_world):
    m = small_world.masks
    for t in range(m.shape[2] - 1):
        assert not np.any(m[:, :, t + 1] & ~m[:, :, t])


def test_cover_hits_target(small_world):
    achieved = small_world.covers()[:, :, 0]
    assert np.all(np.abs(achieved - small_world.target_covers) <= 0.02)


def test_cover_correlation_keeps_range():
    w = scenesim.generate_world(cfg(grid_size=5, cover_correlation=0.8, cover_range=(0.3, 0.9)))
    assert np.all((w.target_covers >= 0.3) & (w.target_covers <= 0.9))


def test_invalid_configs():
    with pytest.raises(scenesim.WorldError):
        cfg(cover_range=(0.8, 0.2))
    with pytest.raises(scenesim.WorldError):
        cfg(parcel_pixels=30, resolution_ratio=4)
    with pytest.raises(scenesim.WorldError):
        cfg(timesteps=1)


def test_render_drone_properties():
    w = scenesim.generate_world(cfg(cover_range=(1.0, 1.0), logging_prob=0.0))
    img = scenesim.render_drone(w, (1, 1), 0, 9)
    assert img[..., 1].mean() > img[..., 0].mean()
    assert np.array_equal(img, scenesim.render_drone(w, (1, 1), 0, 9))
    raster.check_raster(img)


def test_jitter_seeds_differ():
    w = scenesim.generate_world(cfg(cover_range=(0.5, 0.5)))
    a = scenesim.render_drone(w, (0, 0), 0, 1)
    b = scenesim.render_drone(w, (0, 0), 0, 2)
    assert raster.mse(a, b) > 0


def test_satellite_resolution_and_degenerate_parameters(small_world):
    sat = scenesim.render_satellite(small_world, (0, 1), 1)
    assert sat.shape == (8, 8, 3)
    canonical = scenesim.render_drone(small_world, (0, 1), 1, scenesim.CANONICAL_JITTER_SEED)
    plain = scenesim.render_satellite(small_world, (0, 1), 1, intensity=1.0, noise=0.0)
    assert np.array_equal(plain, raster.resample(canonical, 8, 8, "box"))
    dim = scenesim.render_satellite(small_world, (0, 1), 1, intensity=0.8, noise=0.0)
    assert abs(dim.mean() - 0.8 * canonical.mean()) <= 1e-9


def test_default_satellite_edge():
    c = scenesim.WorldConfig(grid_size=1)
    w = scenesim.generate_world(c)
    assert scenesim.render_satellite(w, (0, 0), 0).shape == (8, 8, 3)
    assert scenesim.render_drone(w, (0, 0), 0, 1).shape == (64, 64, 3)


def test_build_dataset_counts_and_claims():
    w = scenesim.generate_world(cfg(grid_size=2, timesteps=2))
    ds = scenesim.build_dataset(w, 4)
    assert len(ds.submissions) == 8 and len(ds.satellite) == 8
    for s in ds.submissions:
        assert s.truthful
        assert s.provenance[0]["sourceParcel"] == list(s.parcel) and s.provenance[0]["sourceTime"] == s.t
        assert s.cover == scenesim.forest_cover(w, s.parcel, s.t)
    man = ds.manifest()
    assert [r["id"] for r in man["submissions"]] == sorted(r["id"] for r in man["submissions"])
    assert man["nominal"] == {"droneMetersPerPixel": 0.3, "satelliteMetersPerPixel": 4.0}


def test_dataset_directory_round_trip(tmp_path, small_dataset):
    h1 = save_dataset(small_dataset, tmp_path / "a")
    h2 = save_dataset(small_dataset, tmp_path / "b")
    assert h1 == h2
    assert (tmp_path / "a" / "manifest.json").read_bytes() == (tmp_path / "b" / "manifest.json").read_bytes()
    for f in (tmp_path / "a" / "images").iterdir():
        assert f.read_bytes() == (tmp_path / "b" / "images" / f.name).read_bytes()
    back = load_dataset(tmp_path / "a")
    assert len(back.submissions) == len(small_dataset.submissions)
    assert np.array_equal(back.covers, np.round(small_dataset.covers, 12))
    man = json.loads((tmp_path / "a" / "manifest.json").read_text())
    assert set(man) == {"format", "config", "nominal", "captureSeed", "covers", "attack", "submissions", "satellite"}
