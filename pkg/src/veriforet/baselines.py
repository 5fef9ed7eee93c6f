"""Nominal (untrained-for-verification) distances and 2-D projection."""
from __future__ import annotations

import csv
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from . import nnet, raster
from .rng import Stream


class BaselineError(ValueError):
    pass


def pixel_distance(drone, sat) -> float:
    """MSE after box-downsampling the finer raster to the coarser one's grid."""
    try:
        a, b = raster.align(drone, sat)
    except raster.RasterError as err:
        raise BaselineError(f"cannot align rasters: {err}") from err
    return raster.mse(a, b)


class FeatureExtractor(nnet.Model):
    """Cover-bucket classifier trained on satellite tiles; features are the pooled trunk output."""

    kind = "feature_extractor"

    @staticmethod
    def default_architecture():
        return nnet.trunk_architecture() + [{"type": "dense", "in": 32, "out": 3}]

    @property
    def trained(self) -> bool:
        return bool(self.meta.get("trained"))

    def _trunk_length(self):
        return len(nnet.trunk_architecture())

    def features(self, prepared) -> np.ndarray:
        x = nnet._to_internal(np.asarray(prepared, dtype=np.float64))
        net = self.network
        for k in range(self._trunk_length()):
            x, _ = net.layers[k].forward(net.views(self.params, k), x)
        return x


@dataclass(frozen=True)
class FeatureConfig:
    lr: float = 3e-3
    epochs: int = 60
    batch_size: int = 32
    seed: int = 5


def cover_buckets(covers, edges) -> np.ndarray:
    return np.searchsorted(np.asarray(edges), np.asarray(covers), side="right")


def train_feature_extractor(tiles, covers, cfg: FeatureConfig = FeatureConfig()) -> FeatureExtractor:
    """Train a {low, mid, high} cover classifier on satellite tiles (softmax cross-entropy)."""
    covers = np.asarray(covers, dtype=np.float64)
    if len(covers) < 3:
        raise BaselineError("need at least 3 tiles to train the feature extractor")
    edges = [float(np.quantile(covers, 1 / 3)), float(np.quantile(covers, 2 / 3))]
    labels = cover_buckets(covers, edges)
    x = np.stack([nnet.prepare(t) for t in tiles])
    model = FeatureExtractor.create(cfg.seed)
    state = nnet.AdamState.zeros(model.params.size)
    order_stream = Stream.from_path(cfg.seed, 0xFE)
    history = []
    for epoch in range(cfg.epochs):
        order = order_stream.permutation(len(x))
        total, correct = 0.0, 0
        for k in range(0, len(x), cfg.batch_size):
            idx = order[k:k + cfg.batch_size]
            y = labels[idx]

            def loss_fn(logits, y=y):
                z = logits - logits.max(axis=1, keepdims=True)
                prob = np.exp(z) / np.exp(z).sum(axis=1, keepdims=True)
                loss = -np.mean(np.log(prob[np.arange(len(y)), y]))
                d = prob.copy()
                d[np.arange(len(y)), y] -= 1.0
                return float(loss), d / len(y)

            loss, g, _ = nnet.grad(model, x[idx], loss_fn)
            total += loss * len(idx)
            correct += int(np.sum(np.argmax(model.forward(x[idx]), axis=1) == y))
            model.params, state = nnet.adam_step(model.params, g, state, lr=cfg.lr)
        history.append({"epoch": epoch, "loss": total / len(x), "accuracy": correct / len(x)})
    model.params = nnet.as_float32(model.params)
    model.history = history
    model.meta = {"trained": True, "bucketEdges": edges}
    return model


def feature_distance(fx: FeatureExtractor, drone, sat) -> float:
    if not fx.trained:
        raise BaselineError("feature extractor is untrained")
    f = fx.features(np.stack([nnet.prepare(drone), nnet.prepare(sat)]))
    return float(np.mean((f[0] - f[1]) ** 2))


def project2d(vectors, method: str = "pca") -> np.ndarray:
    """Project points to 2-D.

    PCA centers the data and projects on the top two right singular vectors;
    each direction is signed so its first non-negligible loading is positive.
    """
    x = np.asarray(vectors, dtype=np.float64)
    if method == "tsne":
        raise BaselineError("t-SNE projection is not implemented; use method='pca'")
    if method != "pca":
        raise BaselineError(f"unknown projection method {method!r}")
    if x.ndim != 2 or x.shape[0] < 3:
        raise BaselineError("PCA projection needs at least 3 points")
    centered = x - x.mean(axis=0)
    _, _, vt = np.linalg.svd(centered, full_matrices=False)
    comps = np.zeros((2, x.shape[1]))
    for k in range(min(2, vt.shape[0])):
        v = vt[k]
        lead = np.flatnonzero(np.abs(v) > 1e-12)
        comps[k] = -v if lead.size and v[lead[0]] < 0 else v
    return centered @ comps.T


def write_projection_csv(path, ids, labels, points) -> None:
    Path(path).parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["id", "label", "x", "y"])
        for i, lab, (px, py) in zip(ids, labels, points):
            w.writerow([i, lab, repr(float(px)), repr(float(py))])
