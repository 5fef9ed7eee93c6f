"""Distance-threshold calibration and verdicts."""
from __future__ import annotations

import json
from dataclasses import asdict, dataclass

import numpy as np

from . import nnet
from .stats import auc

TRUTHFUL = "TRUTHFUL"
UNTRUTHFUL = "UNTRUTHFUL"


class CalibrationError(ValueError):
    pass


class MissingTileError(LookupError):
    """No satellite tile for the claimed (parcel, t); the submission cannot be verified."""


@dataclass
class Calibration:
    tau: float
    balanced_accuracy: float
    roc_auc: float
    distance_stats: dict
    dataset_hash: str = ""

    def to_json(self) -> str:
        return json.dumps({
            "tau": self.tau, "balancedAccuracy": self.balanced_accuracy, "rocAuc": self.roc_auc,
            "distanceStats": self.distance_stats, "datasetHash": self.dataset_hash,
        }, sort_keys=True, indent=1) + "\n"

    @classmethod
    def from_json(cls, text: str) -> "Calibration":
        d = json.loads(text)
        return cls(d["tau"], d["balancedAccuracy"], d["rocAuc"], d["distanceStats"], d.get("datasetHash", ""))


@dataclass
class Verdict:
    decision: str
    distance: float
    tau: float
    margin: float
    submission_id: str

    def to_json(self) -> str:
        d = asdict(self)
        d["submissionId"] = d.pop("submission_id")
        return json.dumps(d, sort_keys=True)


def candidate_thresholds(distances) -> np.ndarray:
    """Midpoints between adjacent distinct distances plus one sentinel below and one above."""
    v = np.unique(np.asarray(distances, dtype=np.float64))
    mids = (v[:-1] + v[1:]) / 2.0
    return np.concatenate([[v[0] / 2.0], mids, [v[-1] + 1.0]])


def _stats(values) -> dict:
    v = np.asarray(values, dtype=np.float64)
    return {"n": int(v.size), "mean": float(v.mean()), "std": float(v.std()),
            "min": float(v.min()), "max": float(v.max())}


def calibrate(pairs, dataset_hash: str = "") -> Calibration:
    """Pick the threshold maximizing balanced accuracy (smallest on ties).

    ``pairs`` holds ``(distance, is_truthful)``; accept iff distance <= tau.
    The low sentinel is ``min / 2`` so tau stays non-negative.
    """
    d = np.array([float(p[0]) for p in pairs])
    truth = np.array([bool(p[1]) for p in pairs])
    n_t, n_u = int(truth.sum()), int((~truth).sum())
    if n_t == 0 or n_u == 0:
        raise CalibrationError("calibration needs at least one truthful and one untruthful distance")
    if np.any(d < 0) or not np.all(np.isfinite(d)):
        raise CalibrationError("distances must be finite and non-negative")
    cand = candidate_thresholds(d)
    order = np.argsort(d, kind="stable")
    ds, ts = d[order], truth[order]
    # Counts of accepted points at each candidate (d <= tau).
    upto = np.searchsorted(ds, cand, side="right")
    acc_t = np.concatenate([[0], np.cumsum(ts)])[upto]
    acc_u = np.concatenate([[0], np.cumsum(~ts)])[upto]
    # Balanced accuracy * 2 * n_t * n_u, kept in integers for exact comparison.
    score = acc_t * n_u + (n_u - acc_u) * n_t
    best = int(np.argmax(score))  # first maximum = smallest tau
    tau = float(cand[best])
    return Calibration(
        tau=tau,
        balanced_accuracy=float(score[best]) / (2.0 * n_t * n_u),
        roc_auc=auc(d[truth], d[~truth]),
        distance_stats={"truthful": _stats(d[truth]), "untruthful": _stats(d[~truth])},
        dataset_hash=dataset_hash,
    )


def decide(distance: float, tau: float) -> str:
    return TRUTHFUL if distance <= tau else UNTRUTHFUL


def learned_distance(model: nnet.Model, drone, sat) -> float:
    e = nnet.embed_batch(model, np.stack([nnet.prepare(sat), nnet.prepare(drone)]))
    return float(np.sum((e[0] - e[1]) ** 2))


def verify(model: nnet.Model, cal: Calibration, submission, satellite_store) -> Verdict:
    key = (submission.parcel[0], submission.parcel[1], submission.t)
    if key not in satellite_store:
        raise MissingTileError(f"no satellite tile for parcel {tuple(submission.parcel)} at t={submission.t}")
    dist = learned_distance(model, submission.image, satellite_store[key])
    return Verdict(decide(dist, cal.tau), dist, cal.tau, cal.tau - dist, submission.id)
