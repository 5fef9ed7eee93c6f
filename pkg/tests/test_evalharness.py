import copy
import json

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from oracles import brute_force_auc
from veriforet import evalharness as eh
from veriforet import nnet
from veriforet.attacks import PGDParams
from veriforet.stats import auc, histogram
from veriforet.verifier import calibrate

TINY = {"world": {"gridSize": 4, "parcelPixels": 32, "resolutionRatio": 4},
        "split": {"validationRows": 1, "testRows": 1},
        "attack": {"pgd": {"steps": 2}},
        "regressor": {"epochs": 5}, "features": {"epochs": 2},
        "metric": {"maxEpochs": 2, "adversarialSteps": 1},
        "evaluation": {"steps": 2}}


def tiny(**overrides):
    data = copy.deepcopy(TINY)
    for section, values in overrides.items():
        data.setdefault(section, {}).update(values)
    return eh.config_from_dict(data, env={})


@pytest.fixture(scope="module")
def tiny_run():
    art = {}
    report = eh.run_experiment(tiny(), art)
    return report, art


def test_auc_examples():
    assert auc([0.1, 0.2], [0.3, 0.4]) == 1.0
    assert auc([0.3, 0.4], [0.1, 0.2]) == 0.0
    assert auc([0.5, 0.5], [0.5]) == 0.5
    assert auc([0.1, 0.3], [0.2, 0.4]) == 0.75
    with pytest.raises(ValueError):
        auc([], [0.1])


@settings(max_examples=100, deadline=None)
@given(st.lists(st.sampled_from([0.0, 0.1, 0.2, 0.3, 0.7]), min_size=1, max_size=30),
       st.lists(st.sampled_from([0.0, 0.1, 0.2, 0.5, 0.7]), min_size=1, max_size=30))
def test_auc_matches_brute_force(t, u):
    assert auc(t, u) == brute_force_auc(t, u)


def test_histogram_counts_sum():
    v = np.linspace(0, 1, 17)
    assert sum(histogram(v, 0.0, 1.0)) == 17
    assert sum(histogram([0.4, 0.4], 0.4, 0.4)) == 2


def test_config_rejects_unknown_keys():
    with pytest.raises(ValueError, match="unknown"):
        eh.config_from_dict({"wrld": {}}, env={})
    with pytest.raises(ValueError):
        eh.config_from_dict({"world": {"gridsize": 4}}, env={})
    with pytest.raises(ValueError):
        eh.config_from_dict({"attack": {"pgd": {"eps": 0.1}}}, env={})
    with pytest.raises(ValueError):
        eh.config_from_dict({"metric": {"seed": 3}}, env={})


def test_seed_env_override():
    base = eh.config_from_dict({"seed": 5}, env={})
    over = eh.config_from_dict({"seed": 5}, env={eh.SEED_ENV: "9"})
    assert base.seed == 5 and over.seed == 9
    assert over.world.seed == 9 and over.metric.seed != base.metric.seed


def test_config_round_trip():
    cfg = tiny()
    again = eh.config_from_dict(cfg.to_dict(), env={})
    assert again == cfg


def test_split_parcels():
    s = eh.split_parcels(8, eh.SplitConfig())
    assert len(s["train"]) == 40 and len(s["validation"]) == 8 and len(s["test"]) == 16
    assert not set(s["train"]) & set(s["test"])
    with pytest.raises(eh.ExperimentError):
        eh.split_parcels(2, eh.SplitConfig())


def test_report_structure(tiny_run):
    report, art = tiny_run
    for metric in eh.METRICS:
        block = report["metrics"][metric]
        assert sum(block["truthfulHistogram"]) == block["nTruthful"] > 0
        per_type = [a for lab, a in block["attacks"].items() if lab != "all"]
        assert sum(a["n"] for a in per_type) == block["attacks"]["all"]["n"]
        for a in block["attacks"].values():
            assert 0 <= a["rocAuc"] <= 1
            assert sum(a["histogram"]) == a["n"]
    rob = report["robustness"]
    assert set(rob) == {"pgd", "withAdversarialNegatives", "withoutAdversarialNegatives"}
    test = {tuple(p) for p in report["splits"]["test"]}
    for name in ("train", "validation"):
        assert not art["parts"][name].parcels() & test
        for s in art["parts"][name].submissions:
            assert not s.source_parcels() & test


def test_evasion_degenerate_budget_matches_fnr(tiny_run):
    _, art = tiny_run
    cal = art["calibrations"]["learned"]
    sat = art["parts"]["test"].satellite
    zero = eh.evasion_rate(art["model"], cal, art["test_subs"], sat, PGDParams(0.0, 2 / 255, 5))
    assert zero["evasionRate"] == zero["falseNegativeRateBefore"]
    none = eh.evasion_rate(art["model"], cal, art["test_subs"], sat, PGDParams(8 / 255, 2 / 255, 0))
    assert none["evasionRate"] == none["falseNegativeRateBefore"]
    full = eh.evasion_rate(art["model"], cal, art["test_subs"], sat, PGDParams(8 / 255, 2 / 255, 3))
    assert full["meanDistanceAfter"] <= full["meanDistanceBefore"]
    with pytest.raises(eh.ExperimentError):
        eh.evasion_rate(art["model"], cal, [s for s in art["test_subs"] if s.truthful], sat, PGDParams())


def test_learned_distances_match_verifier(tiny_run):
    from veriforet.verifier import learned_distance
    _, art = tiny_run
    subs = art["test_subs"][:4]
    sat = art["parts"]["test"].satellite
    d = eh.metric_distances("learned", subs, sat, model=art["model"])
    for s, v in zip(subs, d):
        assert v == pytest.approx(learned_distance(art["model"], s.image, sat[s.cell]), abs=1e-12)


def test_no_logging_flags_wrong_time_vacuous():
    report = eh.run_experiment(tiny(world={"loggingProb": 0.0}, evaluation={"robustnessAblation": False}))
    assert report["attackVacuity"]["wrong_time"]["flagged"]
    assert not report["attackVacuity"]["wrong_location"]["flagged"]
    assert "wrong_time" not in report["metrics"]["learned"]["attacks"]


def test_report_bytes_deterministic(tiny_run):
    report, _ = tiny_run
    again = eh.run_experiment(tiny())
    assert eh.report_bytes(again) == eh.report_bytes(report)


def test_stage_errors_are_named():
    with pytest.raises(eh.ExperimentError, match="generate"):
        eh.run_experiment(tiny(world={"gridSize": 3}, split={"testRows": 2}))


def test_histogram_csv(tiny_run, tmp_path):
    report, _ = tiny_run
    eh.write_histograms_csv(report, tmp_path / "h.csv")
    lines = (tmp_path / "h.csv").read_text().splitlines()
    assert lines[0] == "metric,class,bin,binLow,binHigh,count"
    assert len(lines) > 1
