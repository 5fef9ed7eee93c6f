"""Triplet loss and the metric-learning loop.

Anchors are satellite tiles, positives the truthful drone capture of the same
(parcel, t), negatives the attack images claiming that (parcel, t).  Distances
are squared Euclidean between unit-norm embeddings.
"""
from __future__ import annotations

import logging
from dataclasses import dataclass, field

import numpy as np

from . import nnet, raster
from .attacks import pgd_attack
from .dataset import ADVERSARIAL, Dataset
from .rng import Stream, derive

log = logging.getLogger(__name__)


class TrainingError(ValueError):
    pass


@dataclass(frozen=True)
class TrainConfig:
    margin: float = 0.2
    lr: float = 1e-3
    batch_size: int = 32
    max_epochs: int = 50
    mining: str = "random"
    seed: int = 0
    patience: int = 20
    include_adversarial: bool = True
    augment: bool = True
    # verifier-targeted PGD on negatives during training; only with include_adversarial
    adversarial_epsilon: float = 8 / 255
    adversarial_steps: int = 3

    def __post_init__(self):
        if self.margin <= 0:
            raise TrainingError("margin must be > 0")
        if self.batch_size < 1:
            raise TrainingError("batch_size must be >= 1")
        if self.mining not in ("random", "semi_hard"):
            raise TrainingError(f"unknown mining policy {self.mining!r}")
        if self.adversarial_epsilon < 0 or self.adversarial_steps < 0:
            raise TrainingError("adversarial_epsilon and adversarial_steps must be >= 0")


def sq_dist(a, b) -> np.ndarray:
    return np.sum((np.asarray(a) - np.asarray(b)) ** 2, axis=-1)


def triplet_loss(a, p, n, alpha: float) -> float:
    return max(0.0, float(sq_dist(a, p) - sq_dist(a, n)) + alpha)


def triplet_loss_batch(ea, ep, en, alpha):
    """Mean hinge over rows and its gradient w.r.t. each embedding block."""
    d_ap, d_an = sq_dist(ea, ep), sq_dist(ea, en)
    hinge = d_ap - d_an + alpha
    active = (hinge > 0)[:, None] / len(ea)
    ga = active * 2 * (en - ep)
    gp = active * -2 * (ea - ep)
    gn = active * 2 * (ea - en)
    return float(np.maximum(hinge, 0).mean()), ga, gp, gn


@dataclass
class Triplet:
    anchor: np.ndarray
    positive: np.ndarray
    negative: np.ndarray
    cell: tuple[int, int, int]
    negative_id: str


@dataclass
class TripletSet:
    triplets: list[Triplet]
    skipped: int = 0


def uses_pgd(sub) -> bool:
    return any(stage["stage"] == ADVERSARIAL for stage in sub.provenance)


@dataclass
class TripletPool:
    """Cells that can form triplets, with their candidate negatives."""

    cells: list[tuple[int, int, int]]
    anchors: list[np.ndarray]
    positives: list
    negatives: list[list] = field(default_factory=list)
    skipped: int = 0

    @classmethod
    def from_dataset(cls, ds: Dataset, include_adversarial: bool = True) -> "TripletPool":
        truthful, attacks = {}, {}
        for s in sorted(ds.submissions, key=lambda s: s.id):
            if s.truthful:
                truthful[s.cell] = s
            elif not s.vacuous and (include_adversarial or not uses_pgd(s)):
                attacks.setdefault(s.cell, []).append(s)
        pool = cls([], [], [], [])
        for cell in sorted(truthful):
            if cell not in ds.satellite:
                continue
            if not attacks.get(cell):
                pool.skipped += 1
                continue
            pool.cells.append(cell)
            pool.anchors.append(ds.satellite[cell])
            pool.positives.append(truthful[cell])
            pool.negatives.append(attacks[cell])
        return pool


def select_semi_hard(d_ap: float, d_an) -> int:
    """Closest negative still farther than the positive; else the closest overall."""
    d_an = np.asarray(d_an, dtype=np.float64)
    outside = np.flatnonzero(d_an > d_ap)
    if outside.size:
        return int(outside[np.argmin(d_an[outside])])
    return int(np.argmin(d_an))


def _select(pool: TripletPool, policy: str, seed: int, dists=None) -> list[int]:
    picks = []
    for c, negs in enumerate(pool.negatives):
        if policy == "random":
            picks.append(int(Stream.from_path(seed, c).integers(0, len(negs))[0]))
        else:
            d_ap, d_an = dists[c]
            picks.append(select_semi_hard(d_ap, d_an))
    return picks


def make_triplets(ds: Dataset, policy: str = "random", seed: int = 0, embed_fn=None,
                  include_adversarial: bool = True) -> TripletSet:
    """One triplet per (anchor, positive) cell.

    ``semi_hard`` needs ``embed_fn(raster) -> unit vector``.  Cells without any
    usable attack are skipped and counted.
    """
    pool = TripletPool.from_dataset(ds, include_adversarial)
    dists = None
    if policy == "semi_hard":
        if embed_fn is None:
            raise TrainingError("semi_hard mining needs an embedding function")
        dists = []
        for a, p, negs in zip(pool.anchors, pool.positives, pool.negatives):
            ea = embed_fn(a)
            dists.append((float(sq_dist(ea, embed_fn(p.image))), [float(sq_dist(ea, embed_fn(n.image))) for n in negs]))
    elif policy != "random":
        raise TrainingError(f"unknown mining policy {policy!r}")
    picks = _select(pool, policy, seed, dists)
    triplets = [Triplet(a, p.image, negs[k].image, cell, negs[k].id)
                for a, p, negs, cell, k in zip(pool.anchors, pool.positives, pool.negatives, pool.cells, picks)]
    return TripletSet(triplets, pool.skipped)


def _downsample(img, size: int = nnet.EMBED_SIZE) -> np.ndarray:
    img = np.asarray(img, dtype=np.float64)
    return raster.resample(img, size, size, "box" if img.shape[0] >= size else "nearest")


def distance_objective(model: nnet.Model, anchors: np.ndarray, pool: int = 1):
    """Sum of squared embedding distances to fixed anchors, differentiable in unstandardized images.

    ``pool`` > 1 box-averages the input first, so full-resolution drone rasters
    can be attacked directly.
    """
    head = [{"type": "avgpool", "size": pool}] if pool > 1 else []
    piped = nnet.Model(head + [{"type": "standardize"}] + model.arch, model.params)

    def objective(x):
        def loss_fn(out):
            diff = out - anchors
            return float(np.sum(diff**2)), 2 * diff

        value, _, dx = nnet.grad(piped, x, loss_fn, wrt_input=True)
        return value, dx

    return objective


def perturb_negatives(model, xa, xn_raw, epsilon: float, steps: int) -> np.ndarray:
    """PGD pulling raw negatives toward their anchors' embeddings; returns them standardized."""
    if steps > 0 and epsilon > 0:
        anchors = model.forward(xa)
        xn_raw = pgd_attack(distance_objective(model, anchors), xn_raw, epsilon, epsilon / 2, steps,
                            direction="minimize")
    return np.stack([raster.standardize(x) for x in xn_raw])


class _Prepared:
    """Encoder-ready arrays for a pool: anchors, positives, flat negatives."""

    def __init__(self, pool: TripletPool):
        self.a = np.stack([nnet.prepare(x) for x in pool.anchors])
        self.p = np.stack([nnet.prepare(s.image) for s in pool.positives])
        flat = [s for negs in pool.negatives for s in negs]
        self.n_raw = np.stack([_downsample(s.image) for s in flat])
        self.n = np.stack([raster.standardize(x) for x in self.n_raw])
        offsets = np.cumsum([0] + [len(negs) for negs in pool.negatives])
        self.neg_index = [list(range(offsets[c], offsets[c + 1])) for c in range(len(pool.negatives))]

    def distances(self, model):
        ea, ep, en = (nnet.embed_batch(model, arr) for arr in (self.a, self.p, self.n))
        d_ap = sq_dist(ea, ep)
        d_an = [sq_dist(ea[c], en[idx]) for c, idx in enumerate(self.neg_index)]
        return d_ap, d_an


def validation_margin(model, prepared: _Prepared) -> float:
    d_ap, d_an = prepared.distances(model)
    return float(np.concatenate(d_an).mean() - d_ap.mean())


def _dihedral(x: np.ndarray, k: int) -> np.ndarray:
    if k >= 4:
        x = x[:, ::-1]
    return np.rot90(x, k % 4, axes=(0, 1))


def check_parcel_disjoint(a: Dataset, b: Dataset):
    shared = a.parcels() & b.parcels()
    if shared:
        raise TrainingError(f"parcels leak between splits: {sorted(shared)[:5]}")


def train_metric(train: Dataset, validation: Dataset, cfg: TrainConfig = TrainConfig(),
                 init: nnet.EmbeddingModel | None = None) -> nnet.EmbeddingModel:
    """Adam on mean triplet loss; returns the best-validation-margin snapshot."""
    check_parcel_disjoint(train, validation)
    pool = TripletPool.from_dataset(train, cfg.include_adversarial)
    val_pool = TripletPool.from_dataset(validation, cfg.include_adversarial)
    if not pool.cells:
        raise TrainingError("no valid training triplets")
    if not val_pool.cells:
        raise TrainingError("no valid validation triplets")
    prep, val_prep = _Prepared(pool), _Prepared(val_pool)
    adv_steps = cfg.adversarial_steps if cfg.include_adversarial else 0
    model = init.copy() if init is not None else nnet.EmbeddingModel.create(cfg.seed)
    state = nnet.AdamState.zeros(model.params.size)
    best, best_margin, since_best = model.copy(), -np.inf, 0
    history = []
    for epoch in range(cfg.max_epochs):
        epoch_seed = derive(cfg.seed, epoch)
        dists = None
        if cfg.mining == "semi_hard":
            d_ap, d_an = prep.distances(model)
            dists = list(zip(d_ap, d_an))
        picks = _select(pool, cfg.mining, epoch_seed, dists)
        neg_rows = np.array([prep.neg_index[c][k] for c, k in enumerate(picks)])
        order = Stream.from_path(epoch_seed, 0xB1).permutation(len(picks))
        flips = Stream.from_path(epoch_seed, 0xB2).integers(0, 8, len(picks)) if cfg.augment else None
        total = 0.0
        for start in range(0, len(order), cfg.batch_size):
            rows = order[start:start + cfg.batch_size]
            xa, xp = prep.a[rows], prep.p[rows]
            xn = prep.n_raw[neg_rows[rows]] if adv_steps else prep.n[neg_rows[rows]]
            if flips is not None:
                ks = flips[rows]
                xa, xp, xn = (np.stack([_dihedral(v, k) for v, k in zip(arr, ks)]) for arr in (xa, xp, xn))
            if adv_steps:
                xn = perturb_negatives(model, xa, xn, cfg.adversarial_epsilon, adv_steps)
            b = len(rows)

            def loss_fn(out, b=b):
                loss, ga, gp, gn = triplet_loss_batch(out[:b], out[b:2 * b], out[2 * b:], cfg.margin)
                return loss, np.concatenate([ga, gp, gn])

            loss, g, _ = nnet.grad(model, np.concatenate([xa, xp, xn]), loss_fn)
            total += loss * b
            model.params, state = nnet.adam_step(model.params, g, state, lr=cfg.lr)
        margin = validation_margin(model, val_prep)
        history.append({"epoch": epoch, "trainLoss": total / len(order), "valMargin": margin})
        log.debug("epoch %d loss %.4f val margin %.4f", epoch, total / len(order), margin)
        if margin > best_margin:
            best, best_margin, since_best = model.copy(), margin, 0
        else:
            since_best += 1
            if since_best >= cfg.patience:
                break
    best.params = nnet.as_float32(best.params)
    best.history = history
    best.meta = {"bestValMargin": float(validation_margin(best, val_prep)),
                 "bestEpoch": int(np.argmax([h["valMargin"] for h in history])),
                 "skippedCells": pool.skipped}
    return best
