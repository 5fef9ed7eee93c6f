"""Separability statistics shared by calibration and evaluation."""
from __future__ import annotations

import numpy as np
from scipy.stats import rankdata


def auc(truthful_distances, untruthful_distances) -> float:
    """P(untruthful distance > truthful distance), ties counted 1/2 (Mann-Whitney U)."""
    t = np.asarray(truthful_distances, dtype=np.float64).ravel()
    u = np.asarray(untruthful_distances, dtype=np.float64).ravel()
    if t.size == 0 or u.size == 0:
        raise ValueError("auc needs non-empty truthful and untruthful samples")
    ranks = rankdata(np.concatenate([t, u]))  # midranks are exact half-integers
    u_stat = ranks[t.size:].sum() - u.size * (u.size + 1) / 2.0
    return float(u_stat / (t.size * u.size))


def histogram(values, lo: float, hi: float, bins: int = 30) -> list[int]:
    counts, _ = np.histogram(np.asarray(values, dtype=np.float64), bins=bins, range=(lo, hi) if hi > lo else (lo, lo + 1.0))
    return counts.astype(int).tolist()
