"""Brute-force reference implementations used as independent test oracles."""
from fractions import Fraction


def brute_force_auc(truthful, untruthful):
    wins = Fraction(0)
    for t in truthful:
        for u in untruthful:
            if u > t:
                wins += 1
            elif u == t:
                wins += Fraction(1, 2)
    return float(wins / (len(truthful) * len(untruthful)))


def sweep_threshold(pairs):
    """Exhaustive threshold sweep with exact rational balanced accuracy; smallest tau wins ties."""
    values = sorted({float(d) for d, _ in pairs})
    cands = [values[0] / 2.0] + [(a + b) / 2.0 for a, b in zip(values, values[1:])] + [values[-1] + 1.0]
    n_t = sum(1 for _, t in pairs if t)
    n_u = len(pairs) - n_t
    best_tau, best_ba = None, None
    for tau in sorted(cands):
        acc_t = sum(1 for d, t in pairs if t and d <= tau)
        rej_u = sum(1 for d, t in pairs if not t and d > tau)
        ba = (Fraction(acc_t, n_t) + Fraction(rej_u, n_u)) / 2
        if best_ba is None or ba > best_ba:
            best_tau, best_ba = tau, ba
    return best_tau, float(best_ba)
