"""Submissions, datasets and the on-disk dataset layout."""
from __future__ import annotations

import hashlib
import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import raster
from ._config import from_dict, to_dict

TRUTHFUL = "truthful"
WRONG_LOCATION = "wrong_location"
WRONG_TIME = "wrong_time"
ADVERSARIAL = "adversarial"
COMBINED = "combined"
LABELS = (TRUTHFUL, WRONG_LOCATION, WRONG_TIME, ADVERSARIAL, COMBINED)

NOMINAL_GSD = {"droneMetersPerPixel": 0.3, "satelliteMetersPerPixel": 4.0}


@dataclass
class Submission:
    """A reported drone image with its claimed parcel and timestep.

    ``label`` and ``provenance`` are evaluation-only ground truth; the verifier
    never reads them.
    """

    id: str
    image: np.ndarray
    parcel: tuple[int, int]
    t: int
    label: str
    cover: float
    provenance: list[dict] = field(default_factory=list)

    @property
    def cell(self) -> tuple[int, int, int]:
        return (self.parcel[0], self.parcel[1], self.t)

    @property
    def truthful(self) -> bool:
        return self.label == TRUTHFUL

    @property
    def vacuous(self) -> bool:
        """True when the attack reproduced the claimed scene (no observable change)."""
        return any(stage.get("vacuous", False) for stage in self.provenance)

    def source_parcels(self) -> set[tuple[int, int]]:
        out = {tuple(self.parcel)}
        for stage in self.provenance:
            if "sourceParcel" in stage:
                out.add(tuple(stage["sourceParcel"]))
        return out

    def record(self) -> dict:
        return {
            "id": self.id,
            "parcel": list(self.parcel),
            "t": self.t,
            "label": self.label,
            "cover": self.cover,
            "file": f"images/{self.id}.png",
            "provenance": self.provenance,
        }


@dataclass
class Dataset:
    config: object  # scenesim.WorldConfig
    capture_seed: int
    covers: np.ndarray  # (G, G, T)
    submissions: list[Submission]
    satellite: dict[tuple[int, int, int], np.ndarray]
    attack_params: dict | None = None

    @property
    def grid_size(self) -> int:
        return self.covers.shape[0]

    @property
    def timesteps(self) -> int:
        return self.covers.shape[2]

    def cover(self, parcel, t) -> float:
        return float(self.covers[parcel[0], parcel[1], t])

    def truthful(self, parcel, t) -> Submission:
        cached = self.__dict__.get("_truthful_index")
        if cached is None or cached[0] != len(self.submissions):
            cached = (len(self.submissions), {s.cell: s for s in self.submissions if s.truthful})
            self.__dict__["_truthful_index"] = cached
        return cached[1][(parcel[0], parcel[1], t)]

    def cells(self):
        g, _, n_t = self.covers.shape
        for i in range(g):
            for j in range(g):
                for t in range(n_t):
                    yield (i, j, t)

    def subset(self, parcels) -> "Dataset":
        """Restrict to ``parcels``, dropping attacks that borrow imagery from elsewhere."""
        keep = {tuple(p) for p in parcels}
        subs = [s for s in self.submissions if s.source_parcels() <= keep]
        sat = {k: v for k, v in self.satellite.items() if (k[0], k[1]) in keep}
        return Dataset(self.config, self.capture_seed, self.covers, subs, sat, self.attack_params)

    def parcels(self) -> set[tuple[int, int]]:
        return {(k[0], k[1]) for k in self.satellite}

    def manifest(self) -> dict:
        subs = sorted(self.submissions, key=lambda s: s.id)
        sat = []
        for key in sorted(self.satellite):
            i, j, t = key
            sat.append({"parcel": [i, j], "t": t, "cover": float(self.covers[i, j, t]),
                        "file": f"satellite/{i}_{j}_{t}.png"})
        return {
            "format": "veriforet-dataset/1",
            "config": to_dict(self.config),
            "nominal": NOMINAL_GSD,
            "captureSeed": self.capture_seed,
            "covers": np.round(self.covers, 12).tolist(),
            "attack": self.attack_params,
            "submissions": [s.record() for s in subs],
            "satellite": sat,
        }


def manifest_bytes(manifest: dict) -> bytes:
    return (json.dumps(manifest, sort_keys=True, indent=1) + "\n").encode("utf-8")


def content_hash(data: bytes) -> str:
    """Git-style blob hash (sha1 over ``blob <len>\\0`` + content)."""
    return hashlib.sha1(b"blob %d\0" % len(data) + data).hexdigest()


def save_dataset(ds: Dataset, out_dir) -> str:
    out = Path(out_dir)
    (out / "images").mkdir(parents=True, exist_ok=True)
    (out / "satellite").mkdir(parents=True, exist_ok=True)
    for s in ds.submissions:
        raster.write_png(s.image, out / "images" / f"{s.id}.png")
    for (i, j, t), img in ds.satellite.items():
        raster.write_png(img, out / "satellite" / f"{i}_{j}_{t}.png")
    data = manifest_bytes(ds.manifest())
    (out / "manifest.json").write_bytes(data)
    return content_hash(data)


def load_dataset(path) -> Dataset:
    from .scenesim import WorldConfig

    root = Path(path)
    man = json.loads((root / "manifest.json").read_text())
    cfg = from_dict(WorldConfig, man["config"], "world")
    covers = np.asarray(man["covers"], dtype=np.float64)
    subs = [
        Submission(
            id=r["id"], image=raster.read_png(root / r["file"]), parcel=tuple(r["parcel"]),
            t=r["t"], label=r["label"], cover=r["cover"], provenance=r["provenance"],
        )
        for r in man["submissions"]
    ]
    sat = {(r["parcel"][0], r["parcel"][1], r["t"]): raster.read_png(root / r["file"]) for r in man["satellite"]}
    return Dataset(cfg, man["captureSeed"], covers, subs, sat, man.get("attack"))


def manifest_hash(path) -> str:
    return content_hash((Path(path) / "manifest.json").read_bytes())
