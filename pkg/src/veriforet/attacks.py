"""Untruthful submissions: wrong location, wrong time, PGD perturbation, combinations."""
from __future__ import annotations

from dataclasses import dataclass, replace

import numpy as np

from . import nnet
from .dataset import (ADVERSARIAL, COMBINED, TRUTHFUL, WRONG_LOCATION, WRONG_TIME,
                      Dataset, Submission)
from .rng import Stream

ATTACK_TYPES = {"loc": WRONG_LOCATION, "time": WRONG_TIME, "adv": ADVERSARIAL, "combined": COMBINED}


class AttackError(ValueError):
    pass


@dataclass(frozen=True)
class PGDParams:
    epsilon: float = 8 / 255
    step_size: float = 2 / 255
    steps: int = 20


def _attack_id(sub: Submission, label: str) -> str:
    base = sub.id.rsplit("_", 1)[0] if sub.id.endswith(f"_{sub.label}") else sub.id
    return f"{base}_{label}"


def _require_truthful(sub: Submission):
    if not sub.truthful:
        raise AttackError(f"attacks start from a truthful submission, got {sub.label!r}")


def neighbors(parcel, grid_size) -> list[tuple[int, int]]:
    """4-neighborhood in row-major order; ``grid_size`` is an int or (rows, cols)."""
    rows, cols = (grid_size, grid_size) if np.isscalar(grid_size) else grid_size
    i, j = parcel
    cand = [(i - 1, j), (i, j - 1), (i, j + 1), (i + 1, j)]
    return [(a, b) for a, b in cand if 0 <= a < rows and 0 <= b < cols]


def best_neighbor(dataset: Dataset, parcel, t) -> tuple[int, int]:
    nbs = neighbors(parcel, dataset.covers.shape[:2])
    if not nbs:
        raise AttackError("wrong-location attack needs a grid with at least 2 parcels")
    best = nbs[0]
    for nb in nbs[1:]:
        # Strict comparison keeps the earliest row-major parcel on ties.
        if dataset.cover(nb, t) > dataset.cover(best, t):
            best = nb
    return best


def earlier_better_time(dataset: Dataset, parcel, t) -> int:
    """Earliest t' < t with strictly more forest, else 0."""
    if t < 1:
        raise AttackError("wrong-time attack needs claimed time >= 1 (no previous flight)")
    now = dataset.cover(parcel, t)
    for tp in range(t):
        if dataset.cover(parcel, tp) > now:
            return tp
    return 0


def attack_wrong_location(dataset: Dataset, sub: Submission) -> Submission:
    _require_truthful(sub)
    src = best_neighbor(dataset, sub.parcel, sub.t)
    return replace(
        sub, id=_attack_id(sub, WRONG_LOCATION), image=dataset.truthful(src, sub.t).image,
        label=WRONG_LOCATION, cover=dataset.cover(src, sub.t),
        provenance=[{"stage": WRONG_LOCATION, "sourceParcel": list(src), "sourceTime": sub.t}],
    )


def attack_wrong_time(dataset: Dataset, sub: Submission) -> Submission:
    _require_truthful(sub)
    tp = earlier_better_time(dataset, sub.parcel, sub.t)
    cover = dataset.cover(sub.parcel, tp)
    return replace(
        sub, id=_attack_id(sub, WRONG_TIME), image=dataset.truthful(sub.parcel, tp).image,
        label=WRONG_TIME, cover=cover,
        provenance=[{"stage": WRONG_TIME, "sourceParcel": list(sub.parcel), "sourceTime": tp,
                     "vacuous": cover == dataset.cover(sub.parcel, sub.t)}],
    )


def pgd_attack(objective, x0, epsilon: float, step_size: float, steps: int,
               direction: str = "maximize") -> np.ndarray:
    """Sign-gradient PGD inside the l-inf ball of radius ``epsilon`` around ``x0``, clipped to [0, 1].

    ``objective(x)`` returns ``(value, dvalue/dx)`` for a raster or a batch of
    rasters; for a batch the value should be a sum of per-image terms.
    """
    if epsilon < 0 or step_size <= 0 or steps < 0:
        raise AttackError("need epsilon >= 0, step_size > 0, steps >= 0")
    if direction not in ("maximize", "minimize"):
        raise AttackError(f"unknown direction {direction!r}")
    sign = 1.0 if direction == "maximize" else -1.0
    x0 = np.asarray(x0, dtype=np.float64)
    lo, hi = np.maximum(x0 - epsilon, 0.0), np.minimum(x0 + epsilon, 1.0)
    x = x0.copy()
    for _ in range(steps):
        _, g = objective(x)
        x = np.clip(x + sign * step_size * np.sign(g), lo, hi)
    return x


class CoverRegressor(nnet.Model):
    """Drone raster -> forest cover fraction, squashed into [0, 1] by a sigmoid."""

    kind = "cover_regressor"

    @staticmethod
    def default_architecture(pool: int = 2):
        head = [{"type": "avgpool", "size": pool}] if pool > 1 else []
        return head + nnet.trunk_architecture() + [{"type": "dense", "in": 32, "out": 1}, {"type": "sigmoid"}]

    def predict(self, images) -> np.ndarray:
        x = np.asarray(images, dtype=np.float64)
        if x.ndim == 3:
            x = x[None]
        return np.concatenate([self.forward(x[k:k + 128])[:, 0] for k in range(0, len(x), 128)])

    def objective(self, x):
        batch = x if x.ndim == 4 else x[None]
        value, _, dx = nnet.grad(self, batch, lambda out: (out.sum(), np.ones_like(out)), wrt_input=True)
        return value, dx.reshape(x.shape)


@dataclass(frozen=True)
class RegressorConfig:
    lr: float = 1e-3
    epochs: int = 150
    batch_size: int = 0  # 0 = full batch
    seed: int = 11


def train_cover_regressor(submissions, cfg: RegressorConfig = RegressorConfig()) -> CoverRegressor:
    """Fit the stand-in valuation model on truthful images by squared error on cover."""
    subs = [s for s in (submissions.submissions if isinstance(submissions, Dataset) else submissions) if s.truthful]
    if not subs:
        raise AttackError("cannot train a cover regressor on an empty dataset")
    x = np.stack([s.image for s in subs])
    y = np.array([s.cover for s in subs])
    pool = x.shape[1] // nnet.EMBED_SIZE if x.shape[1] >= nnet.EMBED_SIZE else 1
    model = CoverRegressor.create(cfg.seed, CoverRegressor.default_architecture(pool))
    # Start at the mean target so early epochs are not spent on the bias.
    bias = model.network.views(model.params, len(model.arch) - 2)[1]
    mean = float(np.clip(y.mean(), 1e-3, 1 - 1e-3))
    bias[...] = np.log(mean / (1 - mean))
    state = nnet.AdamState.zeros(model.params.size)
    batch = cfg.batch_size or len(x)
    order_stream = Stream.from_path(cfg.seed, 0xC0)
    history = []
    for epoch in range(cfg.epochs):
        order = order_stream.permutation(len(x)) if batch < len(x) else np.arange(len(x))
        total = 0.0
        for k in range(0, len(x), batch):
            idx = order[k:k + batch]
            target = y[idx][:, None]

            def loss_fn(out, target=target):
                diff = out - target
                return float(np.mean(diff**2)), 2 * diff / diff.size

            loss, g, _ = nnet.grad(model, x[idx], loss_fn)
            total += loss * len(idx)
            model.params, state = nnet.adam_step(model.params, g, state, lr=cfg.lr)
        history.append({"epoch": epoch, "loss": total / len(x)})
    model.history = history
    model.params = nnet.as_float32(model.params)
    return model


def attack_adversarial(regressor: CoverRegressor, sub: Submission, epsilon=8 / 255,
                       step_size=2 / 255, steps=20) -> Submission:
    _require_truthful(sub)
    return _adversarial(regressor, [sub], PGDParams(epsilon, step_size, steps), ADVERSARIAL)[0]


def _adversarial(regressor, subs, pgd: PGDParams, label, stages=None):
    x0 = np.stack([s.image for s in subs])
    x = pgd_attack(regressor.objective, x0, pgd.epsilon, pgd.step_size, pgd.steps)
    before, after = regressor.predict(x0), regressor.predict(x)
    out = []
    for k, s in enumerate(subs):
        prior = stages[k] if stages else []
        stage = {"stage": ADVERSARIAL, "epsilon": pgd.epsilon, "stepSize": pgd.step_size, "steps": pgd.steps,
                 "predictedBefore": round(float(before[k]), 12), "predictedAfter": round(float(after[k]), 12)}
        out.append(replace(s, id=_attack_id(s, label), image=x[k], label=label, provenance=prior + [stage]))
    return out


def _location_then_time(dataset: Dataset, sub: Submission):
    src = best_neighbor(dataset, sub.parcel, sub.t)
    stages = [{"stage": WRONG_LOCATION, "sourceParcel": list(src), "sourceTime": sub.t}]
    tp = sub.t
    if sub.t >= 1:
        tp = earlier_better_time(dataset, src, sub.t)
        stages.append({"stage": WRONG_TIME, "sourceParcel": list(src), "sourceTime": tp})
    source = dataset.truthful(src, tp)
    return replace(sub, image=source.image, cover=source.cover), stages


def attack_combined(dataset: Dataset, sub: Submission, regressor: CoverRegressor,
                    pgd: PGDParams = PGDParams()) -> Submission:
    _require_truthful(sub)
    return _combined_batch(dataset, [sub], regressor, pgd)[0]


def _combined_batch(dataset, subs, regressor, pgd):
    swapped, stages = zip(*(_location_then_time(dataset, s) for s in subs))
    return _adversarial(regressor, list(swapped), pgd, COMBINED, list(stages))


def generate_attacks(dataset: Dataset, types=("loc", "time", "adv", "combined"),
                     regressor: CoverRegressor | None = None, pgd: PGDParams = PGDParams()) -> Dataset:
    """Return a dataset holding the truthful submissions plus every requested attack."""
    unknown = set(types) - set(ATTACK_TYPES)
    if unknown:
        raise AttackError(f"unknown attack types {sorted(unknown)}; choose from {sorted(ATTACK_TYPES)}")
    if {"adv", "combined"} & set(types) and regressor is None:
        raise AttackError("adversarial and combined attacks need a cover regressor")
    truthful = sorted((s for s in dataset.submissions if s.truthful), key=lambda s: s.id)
    out = list(truthful)
    if "loc" in types:
        out += [attack_wrong_location(dataset, s) for s in truthful]
    if "time" in types:
        out += [attack_wrong_time(dataset, s) for s in truthful if s.t >= 1]
    if "adv" in types:
        out += _adversarial(regressor, truthful, pgd, ADVERSARIAL)
    if "combined" in types:
        out += _combined_batch(dataset, truthful, regressor, pgd)
    params = {"types": sorted(types), "pgd": {"epsilon": pgd.epsilon, "stepSize": pgd.step_size,
                                              "steps": pgd.steps, "direction": "maximize"}}
    return Dataset(dataset.config, dataset.capture_seed, dataset.covers, out, dict(dataset.satellite), params)


__all__ = [
    "ATTACK_TYPES", "AttackError", "CoverRegressor", "PGDParams", "RegressorConfig", "TRUTHFUL",
    "attack_adversarial", "attack_combined", "attack_wrong_location", "attack_wrong_time",
    "generate_attacks", "pgd_attack", "train_cover_regressor",
]
