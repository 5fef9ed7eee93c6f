"""End-to-end experiment: nominal metrics versus the learned metric, plus robustness."""
from __future__ import annotations

import csv
import json
import logging
import math
import os
import time
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np

from . import attacks, baselines, metriclearn, nnet, scenesim
from ._config import from_dict, to_dict
from .attacks import PGDParams
from .dataset import COMBINED, WRONG_LOCATION, WRONG_TIME, ADVERSARIAL, Dataset, content_hash, manifest_bytes
from .rng import derive
from .stats import auc, histogram
from .verifier import Calibration, calibrate, decide

log = logging.getLogger(__name__)

SEED_ENV = "VERIFORET_SEED"
ATTACK_LABELS = (WRONG_LOCATION, WRONG_TIME, ADVERSARIAL, COMBINED)
METRICS = ("pixel", "feature", "learned")

__all__ = ["auc", "evasion_rate", "run_experiment", "ExperimentConfig", "load_config"]


class ExperimentError(RuntimeError):
    pass


@dataclass(frozen=True)
class SplitConfig:
    validation_rows: int = 1
    test_rows: int = 2


@dataclass(frozen=True)
class EvaluationConfig:
    epsilon: float = 8 / 255
    step_size: float = 2 / 255
    steps: int = 20
    robustness_ablation: bool = True
    histogram_bins: int = 30


@dataclass(frozen=True)
class ExperimentConfig:
    seed: int = 42
    world: scenesim.WorldConfig = field(default_factory=scenesim.WorldConfig)
    split: SplitConfig = field(default_factory=SplitConfig)
    attack_types: tuple = ("loc", "time", "adv", "combined")
    attack_pgd: PGDParams = field(default_factory=PGDParams)
    regressor: attacks.RegressorConfig = field(default_factory=attacks.RegressorConfig)
    features: baselines.FeatureConfig = field(default_factory=baselines.FeatureConfig)
    # The benchmark trains longer than the bare TrainConfig default.
    metric: metriclearn.TrainConfig = field(
        default_factory=lambda: metriclearn.TrainConfig(max_epochs=250, patience=50))
    evaluation: EvaluationConfig = field(default_factory=EvaluationConfig)

    def seeded(self) -> "ExperimentConfig":
        """Push the master seed into every component."""
        s = self.seed
        return replace(
            self,
            world=replace(self.world, seed=s),
            regressor=replace(self.regressor, seed=derive(s, 2)),
            features=replace(self.features, seed=derive(s, 3)),
            metric=replace(self.metric, seed=derive(s, 4)),
        )

    @property
    def capture_seed(self) -> int:
        return derive(self.seed, 1)

    def to_dict(self) -> dict:
        def section(obj, drop=("seed",)):
            d = to_dict(obj)
            for k in drop:
                d.pop(k, None)
            return d

        return {
            "seed": self.seed,
            "world": section(self.world),
            "split": section(self.split),
            "attack": {"types": list(self.attack_types), "pgd": section(self.attack_pgd)},
            "regressor": section(self.regressor),
            "features": section(self.features),
            "metric": section(self.metric),
            "evaluation": section(self.evaluation),
        }


_SECTIONS = {"seed", "world", "split", "attack", "regressor", "features", "metric", "evaluation"}


def config_from_dict(data: dict, env=None) -> ExperimentConfig:
    """Parse a config mapping; unknown keys are rejected, ``VERIFORET_SEED`` overrides the seed."""
    env = os.environ if env is None else env
    unknown = set(data) - _SECTIONS
    if unknown:
        raise ValueError(f"unknown config sections {sorted(unknown)}")
    attack = dict(data.get("attack") or {})
    extra = set(attack) - {"types", "pgd"}
    if extra:
        raise ValueError(f"unknown key(s) {sorted(extra)} in config section 'attack'")
    seed = int(data.get("seed", ExperimentConfig.seed))
    if env.get(SEED_ENV):
        seed = int(env[SEED_ENV])
    d = ExperimentConfig()
    cfg = ExperimentConfig(
        seed=seed,
        world=from_dict(scenesim.WorldConfig, data.get("world"), "world", forbid=("seed",), base=d.world),
        split=from_dict(SplitConfig, data.get("split"), "split", base=d.split),
        attack_types=tuple(attack.get("types", ExperimentConfig.attack_types)),
        attack_pgd=from_dict(PGDParams, attack.get("pgd"), "attack.pgd", base=d.attack_pgd),
        regressor=from_dict(attacks.RegressorConfig, data.get("regressor"), "regressor", forbid=("seed",), base=d.regressor),
        features=from_dict(baselines.FeatureConfig, data.get("features"), "features", forbid=("seed",), base=d.features),
        metric=from_dict(metriclearn.TrainConfig, data.get("metric"), "metric", forbid=("seed",), base=d.metric),
        evaluation=from_dict(EvaluationConfig, data.get("evaluation"), "evaluation", base=d.evaluation),
    )
    return cfg.seeded()


def load_config(path=None, env=None) -> ExperimentConfig:
    data = json.loads(Path(path).read_text()) if path else {}
    return config_from_dict(data, env)


def split_parcels(grid_size: int, split: SplitConfig) -> dict[str, list[tuple[int, int]]]:
    """Row bands: train rows first, then validation rows, then test rows."""
    n_train = grid_size - split.validation_rows - split.test_rows
    if n_train < 1 or split.validation_rows < 1 or split.test_rows < 1:
        raise ExperimentError(f"grid of {grid_size} rows cannot host the requested split {split}")
    rows = {"train": range(0, n_train),
            "validation": range(n_train, n_train + split.validation_rows),
            "test": range(n_train + split.validation_rows, grid_size)}
    return {name: [(i, j) for i in r for j in range(grid_size)] for name, r in rows.items()}


def _learned_distances(model, drones, sats):
    ed = nnet.embed_batch(model, np.stack([nnet.prepare(x) for x in drones]))
    es = nnet.embed_batch(model, np.stack([nnet.prepare(x) for x in sats]))
    return np.sum((ed - es) ** 2, axis=1)


def metric_distances(metric: str, subs, satellite, fx=None, model=None) -> np.ndarray:
    sats = [satellite[s.cell] for s in subs]
    if not subs:
        return np.zeros(0)
    if metric == "pixel":
        return np.array([baselines.pixel_distance(s.image, t) for s, t in zip(subs, sats)])
    if metric == "feature":
        fd = fx.features(np.stack([nnet.prepare(s.image) for s in subs]))
        fs = fx.features(np.stack([nnet.prepare(t) for t in sats]))
        return np.mean((fd - fs) ** 2, axis=1)
    if metric == "learned":
        return _learned_distances(model, [s.image for s in subs], sats)
    raise ExperimentError(f"unknown metric {metric!r}")


def evaluable(ds: Dataset):
    """Truthful submissions plus non-vacuous attacks, sorted by id."""
    return sorted((s for s in ds.submissions if s.truthful or not s.vacuous), key=lambda s: s.id)


def evasion_rate(model: nnet.Model, cal: Calibration, submissions, satellite, pgd: PGDParams):
    """White-box PGD on the verifier: minimize distance to the claimed tile, count TRUTHFUL verdicts."""
    subs = [s for s in submissions if not s.truthful]
    if not subs:
        raise ExperimentError("evasion rate needs untruthful submissions")
    x0 = np.stack([s.image for s in subs])
    anchors = nnet.embed_batch(model, np.stack([nnet.prepare(satellite[s.cell]) for s in subs]))
    pool = x0.shape[1] // nnet.EMBED_SIZE if x0.shape[1] >= nnet.EMBED_SIZE else 1
    x = attacks.pgd_attack(metriclearn.distance_objective(model, anchors, pool), x0, pgd.epsilon, pgd.step_size,
                           pgd.steps, direction="minimize")
    before = _learned_distances(model, list(x0), [satellite[s.cell] for s in subs])
    after = _learned_distances(model, list(x), [satellite[s.cell] for s in subs])
    accepted_before = np.array([decide(d, cal.tau) == "TRUTHFUL" for d in before])
    accepted_after = np.array([decide(d, cal.tau) == "TRUTHFUL" for d in after])
    return {
        "evasionRate": float(accepted_after.mean()),
        "falseNegativeRateBefore": float(accepted_before.mean()),
        "count": len(subs),
        "meanDistanceBefore": float(before.mean()),
        "meanDistanceAfter": float(after.mean()),
    }


def _ba(truthful_d, untruthful_d, tau) -> float:
    return 0.5 * (float(np.mean(np.asarray(truthful_d) <= tau)) + float(np.mean(np.asarray(untruthful_d) > tau)))


def _metric_block(test_subs, test_d, cal: Calibration, bins: int) -> dict:
    labels = np.array([s.label for s in test_subs])
    truthful = test_d[labels == "truthful"]
    lo, hi = float(test_d.min()), float(test_d.max())
    block = {"tau": cal.tau, "validationBalancedAccuracy": cal.balanced_accuracy,
             "histogramRange": [lo, hi], "nTruthful": int(truthful.size), "truthfulHistogram": histogram(truthful, lo, hi, bins), "attacks": {}}
    untruthful_all = test_d[labels != "truthful"]
    for lab in ATTACK_LABELS + ("all",):
        d = untruthful_all if lab == "all" else test_d[labels == lab]
        if d.size == 0:
            continue
        block["attacks"][lab] = {
            "n": int(d.size), "rocAuc": auc(truthful, d), "balancedAccuracy": _ba(truthful, d, cal.tau),
            "histogram": histogram(d, lo, hi, bins),
        }
    return block


def run_experiment(cfg: ExperimentConfig, artifacts: dict | None = None) -> dict:
    """Run every stage and return the report; ``artifacts`` (if given) collects models and splits."""
    art = {} if artifacts is None else artifacts
    timings = {}
    stage = "setup"

    def tick(name):
        nonlocal stage
        timings[stage] = time.perf_counter() - tick.t0
        tick.t0, stage = time.perf_counter(), name
    tick.t0 = time.perf_counter()

    try:
        tick("generate")
        world = scenesim.generate_world(cfg.world)
        base = scenesim.build_dataset(world, cfg.capture_seed)
        splits = split_parcels(cfg.world.grid_size, cfg.split)
        train_parcels = set(splits["train"])

        tick("regressor")
        regressor = attacks.train_cover_regressor(
            [s for s in base.submissions if s.parcel in train_parcels], cfg.regressor)
        test_truthful = [s for s in base.submissions if s.parcel in set(splits["test"])]
        regressor_mae = float(np.mean(np.abs(regressor.predict(np.stack([s.image for s in test_truthful]))
                                             - np.array([s.cover for s in test_truthful]))))

        tick("attacks")
        needs_regressor = bool({"adv", "combined"} & set(cfg.attack_types))
        full = attacks.generate_attacks(base, cfg.attack_types, regressor if needs_regressor else None,
                                        cfg.attack_pgd)
        parts = {name: full.subset(parcels) for name, parcels in splits.items()}
        for a in ("train", "validation"):
            if parts[a].parcels() & parts["test"].parcels():
                raise ExperimentError("split hygiene violated: test parcels in a training stage")
            for s in parts[a].submissions:
                if s.source_parcels() & set(splits["test"]):
                    raise ExperimentError(f"split hygiene violated by {s.id}")

        tick("features")
        tr = parts["train"]
        keys = sorted(tr.satellite)
        fx = baselines.train_feature_extractor([tr.satellite[k] for k in keys], [tr.covers[k] for k in keys],
                                               cfg.features)

        tick("metric")
        model = metriclearn.train_metric(parts["train"], parts["validation"], cfg.metric)
        ablation = None
        if cfg.evaluation.robustness_ablation:
            tick("metric_ablation")
            ablation = metriclearn.train_metric(parts["train"], parts["validation"],
                                                replace(cfg.metric, include_adversarial=False))

        tick("calibrate")
        val_subs, test_subs = evaluable(parts["validation"]), evaluable(parts["test"])
        val_truth = [s.truthful for s in val_subs]
        metrics, cals, test_d = {}, {}, {}
        for metric in METRICS:
            vd = metric_distances(metric, val_subs, parts["validation"].satellite, fx, model)
            cals[metric] = calibrate(list(zip(vd, val_truth)))
            test_d[metric] = metric_distances(metric, test_subs, parts["test"].satellite, fx, model)
            metrics[metric] = _metric_block(test_subs, test_d[metric], cals[metric], cfg.evaluation.histogram_bins)

        tick("robustness")
        pgd = PGDParams(cfg.evaluation.epsilon, cfg.evaluation.step_size, cfg.evaluation.steps)
        robustness = {"pgd": to_dict(pgd), "withAdversarialNegatives": evasion_rate(
            model, cals["learned"], test_subs, parts["test"].satellite, pgd)}
        if ablation is not None:
            vd = metric_distances("learned", val_subs, parts["validation"].satellite, model=ablation)
            cal_ab = calibrate(list(zip(vd, val_truth)))
            robustness["withoutAdversarialNegatives"] = evasion_rate(
                ablation, cal_ab, test_subs, parts["test"].satellite, pgd)
            robustness["withoutAdversarialNegatives"]["tau"] = cal_ab.tau
        tick("done")
    except Exception as err:
        raise ExperimentError(f"stage {stage!r} failed: {err}") from err

    vacuity = {}
    for lab in ATTACK_LABELS:
        subs = [s for s in full.submissions if s.label == lab]
        if subs:
            n_vac = sum(s.vacuous for s in subs)
            vacuity[lab] = {"total": len(subs), "vacuous": n_vac, "flagged": n_vac == len(subs)}

    art.update(world=world, dataset=full, parts=parts, regressor=regressor, feature_extractor=fx,
               model=model, ablation=ablation, calibrations=cals, test_subs=test_subs, test_distances=test_d,
               timings=timings)
    return {
        "config": cfg.to_dict(),
        "datasetHash": content_hash(manifest_bytes(full.manifest())),
        "splits": {k: [list(p) for p in v] for k, v in splits.items()},
        "attackVacuity": vacuity,
        "regressor": {"testMae": regressor_mae, "finalLoss": regressor.history[-1]["loss"]},
        "featureExtractor": {"finalAccuracy": fx.history[-1]["accuracy"], "bucketEdges": fx.meta["bucketEdges"]},
        "metricTraining": {"bestValMargin": model.meta["bestValMargin"], "bestEpoch": model.meta["bestEpoch"],
                           "epochs": len(model.history), "margin": cfg.metric.margin},
        "metrics": metrics,
        "robustness": robustness,
        "seeds": {"master": cfg.seed, "capture": cfg.capture_seed, "regressor": cfg.regressor.seed,
                  "features": cfg.features.seed, "metric": cfg.metric.seed},
    }


def report_bytes(report: dict) -> bytes:
    return (json.dumps(report, sort_keys=True, indent=1) + "\n").encode("utf-8")


def write_histograms_csv(report: dict, path) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["metric", "class", "bin", "binLow", "binHigh", "count"])
        for metric, block in report["metrics"].items():
            lo, hi = block["histogramRange"]
            n = len(block["truthfulHistogram"])
            width = (hi - lo) / n if hi > lo else 1.0 / n
            rows = [("truthful", block["truthfulHistogram"])]
            rows += [(lab, a["histogram"]) for lab, a in block["attacks"].items()]
            for cls, counts in rows:
                for b, c in enumerate(counts):
                    w.writerow([metric, cls, b, repr(lo + b * width), repr(lo + (b + 1) * width), c])
