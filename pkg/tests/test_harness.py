import csv
import json
import math
from pathlib import Path

import numpy as np
import pytest

from abrw import analytics as A
from abrw import harness as H
from abrw.offspring import DEATH1, NN1

CONFIGS = Path(__file__).resolve().parents[1] / "configs"


def cfg(**kw):
    base = dict(law=NN1, p=0.5, horizon=1.0, replicates=200, seed=7, threads=1)
    base.update(kw)
    return H.ExperimentConfig(**base)


# --- configuration ---------------------------------------------------------------

def test_config_load_and_hash():
    c = H.ExperimentConfig.load(CONFIGS / "mean-growth.json")
    assert c.law == NN1
    assert c.config_hash() == c.with_(seed=1, threads=4).config_hash()
    assert c.config_hash() != c.with_(p=0.3).config_hash()
    again = H.ExperimentConfig.from_dict(json.loads(json.dumps(c.to_dict())))
    assert again == c


def test_config_rejects_unknown_fields_and_values(law_doc):
    with pytest.raises(ValueError):
        H.ExperimentConfig.from_dict({"law": law_doc("nn1.json"), "colour": "red"})
    with pytest.raises(ValueError):
        cfg(p=1.5)
    with pytest.raises(ValueError):
        cfg(variant="purple")
    with pytest.raises(ValueError):
        cfg(replicates=0)


@pytest.mark.parametrize("path", sorted(CONFIGS.glob("*.json")), ids=lambda p: p.name)
def test_shipped_configs_load(path):
    H.ExperimentConfig.load(path)


# --- records -------------------------------------------------------------------------

def test_write_records(tmp_path):
    recs = [H.EstimateRecord("a", 1.0, 0.1, 10, 1e-3, 5, True, 1.0, 0.3),
            H.EstimateRecord("b", 2.0, 0.2, 10, 0.0, 5, False)]
    jl, summary = H.write_records(recs, tmp_path / "out", "x")
    rows = [json.loads(line) for line in jl.read_text().splitlines()]
    assert [set(r) for r in rows] == [{"observable", "estimate", "se", "replicates", "epsilon", "seed", "pass"}] * 2
    assert rows[1]["pass"] is False
    table = list(csv.DictReader(summary.open()))
    assert table[0]["observable"] == "a" and table[1]["target"] == ""
    assert not list((tmp_path / "out").glob("*.tmp"))
    assert not H.all_passed(recs) and H.all_passed(recs[:1])


def test_replicates_order_and_thread_independence():
    fn = lambda k, s: (k, s)
    one = H.run_replicates(fn, 50, 3, threads=1)
    many = H.run_replicates(fn, 50, 3, threads=4)
    assert one == many and [k for k, _ in one] == list(range(50))


def test_variance_se_on_bernoulli():
    x = np.random.default_rng(0).random(40_000) < 0.3
    v, se = H.variance_se(x)
    assert abs(v - 0.21) <= 3 * se
    with pytest.raises(H.HarnessError):
        H.variance_se([1.0])


def test_trust_policy():
    r, eps = H.trust(cfg(), 2.0)
    assert eps <= 1e-3 and r == A.choose_radius(NN1, 2.0, 1e-3)
    assert H.trust(cfg(init_radius=3), 0.0) == (3, 0.0)


# --- mean growth and moments ------------------------------------------------------------

def test_mean_growth_trivial_cases():
    zero = H.estimate_mean_growth(cfg(p=0.0, replicates=20), [1.0])
    assert zero[0].estimate == 0.0 and zero[0].se == 0.0 and zero[0].passed
    one = H.estimate_mean_growth(cfg(p=1.0, replicates=300), [0.5, 1.0])
    assert H.all_passed(one)


def test_mean_growth_death_mode():
    recs = H.estimate_mean_growth(cfg(law=DEATH1, replicates=1000), [20.0])
    assert H.all_passed(recs)


def test_reproducible_records():
    c = cfg(replicates=100)
    a = H.estimate_mean_growth(c, [1.0])
    b = H.estimate_mean_growth(c.with_(threads=3), [1.0])
    assert [r.to_json() for r in a] == [r.to_json() for r in b]
    assert a != H.estimate_mean_growth(c.with_(seed=8), [1.0])


def test_single_ball_moments():
    recs = H.single_ball_moments(NN1, 1.0, [np.pi / 2, np.pi], [0, 1], 4000, 3, threads=1)
    assert H.all_passed(recs)
    assert recs[0].target == pytest.approx(1.0)


# --- variance scaling ---------------------------------------------------------------

def test_variance_exact_at_zero_is_bernoulli():
    assert A.variance_exact(DEATH1, 0.5, 0.0) == pytest.approx(0.25)


def test_variance_budget_guard():
    c = H.ExperimentConfig.load(CONFIGS / "variance-scaling.json")
    with pytest.raises(H.BudgetExceeded):
        H.estimate_variance_scaling(c, [25, 50, 100, 200])


def test_variance_small_grid():
    recs = H.estimate_variance_scaling(cfg(replicates=2000), [0.25, 0.5, 1.0, 2.0])
    per_t = [r for r in recs if r.observable.startswith("variance[")]
    assert all(r.passed for r in per_t)
    assert recs[-1].detail["C"] == pytest.approx(1.25)


# --- fixation and colour changes ------------------------------------------------------

def test_fixation_all_red():
    recs = H.fixation_probe(cfg(p=1.0, replicates=20), [1.0, 2.0])
    assert [r.estimate for r in recs[:2]] == [1.0, 1.0]
    assert recs[-1].passed


def test_nonfixation_controls():
    recs = H.nonfixation_probe(cfg(p=1.0, replicates=20), [1.0, 2.0])
    assert [r.estimate for r in recs[:2]] == [0.0, 0.0]
    assert not recs[-1].passed  # constant means are not strictly increasing


def test_nonfixation_counts_grow():
    recs = H.nonfixation_probe(cfg(replicates=150), [0.5, 2.0])
    assert recs[0].estimate < recs[1].estimate


# --- deviation, symmetry, normality --------------------------------------------------

def test_deviation_symmetric_and_huge_threshold():
    c = cfg(replicates=400)
    base = H.deviation_probe(c, [0.5, 1.0])
    for r in base:
        assert r.estimate <= 0.5 + 3 * r.se + r.epsilon
    huge = H.deviation_probe(c, [0.5, 1.0], c_hat=1e3)
    assert all(r.estimate == 0.0 and not r.passed for r in huge)


def test_symmetry_null():
    assert H.symmetry_null(cfg(replicates=600), 1.0).passed


def test_normality():
    good = H.normality_test(NN1, 5.0, 10_000, seed=1)
    assert H.all_passed(good)
    bad = H.normality_test(NN1, 0.0, 10_000, seed=1)
    assert not bad[0].passed and bad[0].estimate < 1e-10


def test_conditional_mean_check():
    assert H.conditional_mean_check(NN1, {(0,): 1}, 1.0, 3000, seed=2).passed
    anti = {(z,): (1 if z > 0 else -1) for z in range(-3, 4) if z}
    rec = H.conditional_mean_check(NN1, anti, 1.0, 2000, seed=2)
    assert rec.target == pytest.approx(0.0, abs=1e-14) and rec.passed


# --- density -------------------------------------------------------------------------

def test_density_trivial_cases():
    recs = H.density_estimate(cfg(p=1.0, replicates=20), [0.0, 1.0], 3)
    assert all(r.estimate == 1.0 and r.detail["ensemble"] == 1.0 for r in recs)
    recs = H.density_estimate(cfg(p=0.6, replicates=400), [0.0], 20)
    r = recs[0]
    assert r.passed and r.epsilon == 0.0
    assert abs(r.detail["ensemble"] - 0.6) <= 3 * math.sqrt(0.24 / 400)


# --- conservative and labelled experiments ------------------------------------------

def test_monochrome_marginal_all_red():
    recs = H.monochrome_marginal_check(cfg(p=1.0, replicates=200, variant="conservative"), 1.0)
    assert recs[0].estimate == 0.0
    assert H.all_passed(recs[:2])


def test_coupling_and_sandwich_experiments():
    assert H.coupling_experiment(NN1, 40, 1.5, seed=1).estimate == 0.0
    recs = H.sandwich_experiment(NN1, 8, 1.0, [1, 2, 4], 20, seed=1)
    assert recs[0].estimate == 0.0 and recs[0].passed
