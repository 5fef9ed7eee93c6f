"""Procedural forest world and paired drone / satellite rendering."""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import raster
from .dataset import TRUTHFUL, Dataset, Submission
from .rng import Stream, derive

# Stream purposes.
_MASK, _COVER, _LOGGING, _JITTER, _PIXEL, _SENSOR, _CAPTURE, _CANOPY = range(1, 9)

CANONICAL_JITTER_SEED = 0
_BINOMIAL5 = np.array([1.0, 4.0, 6.0, 4.0, 1.0]) / 16.0


class WorldError(ValueError):
    pass


@dataclass(frozen=True)
class WorldConfig:
    grid_size: int = 8
    parcel_pixels: int = 64
    resolution_ratio: int = 8
    timesteps: int = 3
    cover_range: tuple = (0.3, 0.9)
    logging_prob: float = 0.5
    logging_fraction: tuple = (0.4, 0.8)
    seed: int = 42
    cover_correlation: float = 0.8
    # Rendering.
    blob_spacing: tuple = (10.0, 28.0)
    forest_color: tuple = (0.12, 0.26, 0.10)
    soil_color: tuple = (0.28, 0.30, 0.18)
    pixel_noise: float = 0.04
    canopy_texture: float = 0.0
    canopy_scale: float = 3.0
    jitter_range: tuple = (0.9, 1.15)
    channel_jitter: float = 0.1
    haze_range: tuple = (0.0, 0.06)
    satellite_intensity: float = 0.8
    sensor_noise: float = 0.03

    def __post_init__(self):
        lo, hi = self.cover_range
        if not 0.0 <= lo <= hi <= 1.0:
            raise WorldError(f"invalid cover_range {self.cover_range}")
        if self.grid_size < 1 or self.timesteps < 2:
            raise WorldError("grid_size must be >= 1 and timesteps >= 2")
        if self.resolution_ratio < 1 or self.parcel_pixels % self.resolution_ratio:
            raise WorldError("parcel_pixels must be divisible by resolution_ratio")
        if not 0.0 <= self.logging_prob <= 1.0:
            raise WorldError("logging_prob must lie in [0, 1]")
        flo, fhi = self.logging_fraction
        if not 0.0 <= flo <= fhi <= 1.0:
            raise WorldError(f"invalid logging_fraction {self.logging_fraction}")

    @property
    def satellite_pixels(self) -> int:
        return self.parcel_pixels // self.resolution_ratio


@dataclass
class World:
    config: WorldConfig
    masks: np.ndarray  # bool (G, G, T, P, P)
    target_covers: np.ndarray  # (G, G)
    logging_events: list = field(default_factory=list)

    @property
    def parcel_ids(self) -> list[tuple[int, int]]:
        g = self.config.grid_size
        return [(i, j) for i in range(g) for j in range(g)]

    def covers(self) -> np.ndarray:
        return self.masks.mean(axis=(3, 4))


def _blur5(field_: np.ndarray) -> np.ndarray:
    padded = np.pad(field_, 2, mode="reflect")
    n = field_.shape[0]
    rows = sum(_BINOMIAL5[k] * padded[k:k + n, :] for k in range(5))
    return sum(_BINOMIAL5[k] * rows[:, k:k + n] for k in range(5))


def _value_noise(stream: Stream, size: int, spacing: tuple) -> np.ndarray:
    sy, sx = stream.uniform(2, *spacing)
    off_y, off_x = stream.uniform(2)
    ny, nx = int(np.ceil(size / sy)) + 2, int(np.ceil(size / sx)) + 2
    lattice = stream.uniform((ny, nx))
    ys = (np.arange(size) + 0.5) / sy + off_y
    xs = (np.arange(size) + 0.5) / sx + off_x
    iy, ix = np.floor(ys).astype(int), np.floor(xs).astype(int)
    fy, fx = (ys - iy)[:, None], (xs - ix)[None, :]
    v00 = lattice[iy][:, ix]
    v01 = lattice[iy][:, ix + 1]
    v10 = lattice[iy + 1][:, ix]
    v11 = lattice[iy + 1][:, ix + 1]
    return (v00 * (1 - fy) * (1 - fx) + v01 * (1 - fy) * fx
            + v10 * fy * (1 - fx) + v11 * fy * fx)


def threshold_to_cover(field_: np.ndarray, target: float) -> np.ndarray:
    """Bisect a threshold so that ``mean(field > thr)`` is as close to ``target`` as possible."""
    lo, hi = float(field_.min()) - 1.0, float(field_.max()) + 1.0
    for _ in range(200):
        mid = 0.5 * (lo + hi)
        if mid in (lo, hi):
            break
        if np.mean(field_ > mid) > target:
            lo = mid
        else:
            hi = mid
    c_lo, c_hi = np.mean(field_ > lo), np.mean(field_ > hi)
    thr = lo if abs(c_lo - target) <= abs(c_hi - target) else hi
    return field_ > thr


def _log_event(mask: np.ndarray, stream: Stream, fraction_range: tuple):
    """Clear an axis-aligned rectangle removing roughly a drawn fraction of remaining forest."""
    remaining = int(mask.sum())
    if remaining == 0:
        return mask, None
    frac = float(stream.uniform(1, *fraction_range)[0])
    pick = int(stream.integers(0, remaining)[0])
    aspect = float(np.exp(stream.uniform(1, np.log(0.5), np.log(2.0))[0]))
    cy, cx = (int(v) for v in np.argwhere(mask)[pick])
    n = mask.shape[0]
    integral = np.zeros((n + 1, n + 1), dtype=np.int64)
    integral[1:, 1:] = mask.cumsum(0).cumsum(1)
    goal = frac * remaining
    best = None
    for k in range(2 * n + 1):
        hh, hw = int(round(k * np.sqrt(aspect))), int(round(k / np.sqrt(aspect)))
        r0, r1 = max(cy - hh, 0), min(cy + hh + 1, n)
        c0, c1 = max(cx - hw, 0), min(cx + hw + 1, n)
        removed = integral[r1, c1] - integral[r0, c1] - integral[r1, c0] + integral[r0, c0]
        err = abs(removed - goal)
        if best is None or err < best[0]:
            best = (err, (r0, r1, c0, c1))
        if r0 == 0 and c0 == 0 and r1 == n and c1 == n:
            break
    r0, r1, c0, c1 = best[1]
    out = mask.copy()
    out[r0:r1, c0:c1] = False
    return out, {"rect": [r0, r1, c0, c1], "fraction": frac}


def _target_covers(cfg: WorldConfig) -> np.ndarray:
    """Per-parcel target covers, uniform over ``cover_range`` in rank.

    With ``cover_correlation`` > 0 the ranks come from a mix of a 3x3-smoothed
    regional field and independent local draws, so neighbors look alike.
    """
    g = cfg.grid_size
    lo, hi = cfg.cover_range
    local = np.array([[Stream.from_path(cfg.seed, i, j, _COVER).random() for j in range(g)] for i in range(g)])
    if cfg.cover_correlation <= 0 or g == 1:
        return lo + (hi - lo) * local
    regional = Stream.from_path(cfg.seed, _COVER, 0xAE).uniform((g, g))
    padded = np.pad(regional, 1, mode="edge")
    smooth = sum(padded[a:a + g, b:b + g] for a in range(3) for b in range(3)) / 9.0
    z = cfg.cover_correlation * (smooth - smooth.mean()) / (smooth.std() or 1.0) \
        + (1 - cfg.cover_correlation) * (local - local.mean()) / (local.std() or 1.0)
    ranks = np.argsort(np.argsort(z.ravel(), kind="stable"), kind="stable").reshape(g, g)
    return lo + (hi - lo) * (ranks + 0.5) / (g * g)


def generate_world(cfg: WorldConfig) -> World:
    g, n, n_t = cfg.grid_size, cfg.parcel_pixels, cfg.timesteps
    masks = np.zeros((g, g, n_t, n, n), dtype=bool)
    targets = np.zeros((g, g))
    events = []
    target_covers = _target_covers(cfg)
    for i in range(g):
        for j in range(g):
            target = float(target_covers[i, j])
            noise = _blur5(_value_noise(Stream.from_path(cfg.seed, i, j, _MASK), n, cfg.blob_spacing))
            mask = threshold_to_cover(noise, target)
            if abs(mask.mean() - target) > 0.02:
                raise WorldError(f"parcel ({i}, {j}): achieved cover {mask.mean():.4f} "
                                 f"misses target {target:.4f} by more than 2%")
            targets[i, j] = target
            masks[i, j, 0] = mask
            for t in range(1, n_t):
                stream = Stream.from_path(cfg.seed, i, j, t, _LOGGING)
                if stream.random() < cfg.logging_prob:
                    mask, event = _log_event(mask, stream, cfg.logging_fraction)
                    if event is not None:
                        events.append({"parcel": [i, j], "t": t, **event})
                masks[i, j, t] = mask
    return World(cfg, masks, targets, events)


def _check_index(world: World, parcel, t):
    g, n_t = world.config.grid_size, world.config.timesteps
    i, j = parcel
    if not (0 <= i < g and 0 <= j < g and 0 <= t < n_t):
        raise IndexError(f"parcel {tuple(parcel)} / timestep {t} outside {g}x{g} grid with {n_t} steps")


def forest_cover(world: World, parcel, t) -> float:
    _check_index(world, parcel, t)
    return float(world.masks[parcel[0], parcel[1], t].mean())


def render_drone(world: World, parcel, t, jitter_seed: int) -> np.ndarray:
    _check_index(world, parcel, t)
    cfg = world.config
    i, j = parcel
    mask = world.masks[i, j, t]
    base = np.where(mask[..., None], np.asarray(cfg.forest_color), np.asarray(cfg.soil_color))
    pix = Stream.from_path(cfg.seed, i, j, t, jitter_seed, _PIXEL)
    noise = pix.uniform(base.shape, -cfg.pixel_noise, cfg.pixel_noise)
    if cfg.canopy_texture > 0:
        # Crown-scale shading inside forest; fixed per parcel so it survives across captures.
        crowns = _value_noise(Stream.from_path(cfg.seed, i, j, _CANOPY), mask.shape[0],
                              (cfg.canopy_scale, cfg.canopy_scale))
        noise = noise + (mask * cfg.canopy_texture * (crowns - 0.5))[..., None]
    capture = Stream.from_path(cfg.seed, i, j, t, jitter_seed, _JITTER)
    gain = capture.uniform(1, *cfg.jitter_range)[0]
    tint = capture.uniform(3, 1.0 - cfg.channel_jitter, 1.0 + cfg.channel_jitter)
    haze = capture.uniform(1, *cfg.haze_range)[0]
    return np.clip(gain * tint * (base + noise) + haze, 0.0, 1.0)


def render_satellite(world: World, parcel, t, intensity: float | None = None,
                     noise: float | None = None) -> np.ndarray:
    cfg = world.config
    s = cfg.satellite_intensity if intensity is None else intensity
    amp = cfg.sensor_noise if noise is None else noise
    drone = render_drone(world, parcel, t, CANONICAL_JITTER_SEED)
    m = cfg.satellite_pixels
    img = s * raster.resample(drone, m, m, "box")
    if amp > 0:
        img = img + Stream.from_path(cfg.seed, parcel[0], parcel[1], t, _SENSOR).uniform(img.shape, -amp, amp)
    return np.clip(img, 0.0, 1.0)


def submission_id(parcel, t, label: str = TRUTHFUL) -> str:
    return f"p{parcel[0]:02d}_{parcel[1]:02d}_t{t}_{label}"


def build_dataset(world: World, capture_seed: int) -> Dataset:
    """One truthful capture plus the satellite tile for every (parcel, t)."""
    subs, sat = [], {}
    covers = world.covers()
    for (i, j) in world.parcel_ids:
        for t in range(world.config.timesteps):
            jitter = derive(capture_seed, i, j, t, _CAPTURE)
            subs.append(Submission(
                id=submission_id((i, j), t),
                image=render_drone(world, (i, j), t, jitter),
                parcel=(i, j), t=t, label=TRUTHFUL, cover=float(covers[i, j, t]),
                provenance=[{"stage": "capture", "sourceParcel": [i, j], "sourceTime": t,
                             "jitterSeed": jitter}],
            ))
            sat[(i, j, t)] = render_satellite(world, (i, j), t)
    return Dataset(world.config, capture_seed, covers, subs, sat)
