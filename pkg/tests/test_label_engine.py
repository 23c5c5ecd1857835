import random

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from scipy import stats

from abrw import label_engine as L
from abrw.engine import SimClock, init_bernoulli, run_until
from abrw.harness import random_ordered_pair
from abrw.offspring import DEATH1, NN1
from abrw.rng import Stream, derive_key

RED, BLUE = 1, -1


def from_json(j):
    return (tuple(j[0]), tuple(j[1:]))


def replay_log(initial, log):
    """Rebuild per-site active sets from an event log, checking every annihilation
    picked the smallest opposite-colour label present."""
    active = {RED: {}, BLUE: {}}
    colour = {}
    for site, v in L.validate_configuration(initial).items():
        lab = (site, ())
        active[v].setdefault(site, set()).add(lab)
        colour[lab] = v
    for e in log:
        parent = from_json(e["label"])
        c = colour[parent]
        assert c == (RED if e["colour"] == "R" else BLUE)
        if e.get("parent_removed"):
            active[c][tuple(_site_of(active, parent))].discard(parent)
        killed = {from_json(a): from_json(b) for a, b in e["annihilated"]}
        for site, child in e["placements"]:
            site, child = tuple(site), from_json(child)
            assert child not in colour, "labels must be unique"
            colour[child] = c
            opp = active[-c].get(site, set())
            if child in killed:
                assert killed[child] == min(opp)
                opp.discard(killed[child])
            else:
                assert not opp
                active[c].setdefault(site, set()).add(child)
    return active


def _site_of(active, label):
    for sets in active.values():
        for site, labs in sets.items():
            if label in labs:
                return site
    raise AssertionError(f"{label} not active")


def signed_from(active):
    out = {}
    for c, sets in active.items():
        for site, labs in sets.items():
            if labs:
                out[site] = out.get(site, 0) + c * len(labs)
    return {s: v for s, v in out.items() if v}


def test_monochromatic_start_stays_red():
    run = L.run_labelled({0: 1}, NN1, 2.0, seed=4)
    assert run.process.total_balls >= 1
    assert all(v > 0 for v in run.signed().values())
    assert not run.process.active[BLUE]


def test_event_log_deterministic():
    init = {(z,): (1 if z % 3 else -1) for z in range(-4, 5)}
    a = L.run_labelled(init, NN1, 1.5, seed=11).process
    b = L.run_labelled(init, NN1, 1.5, seed=11).process
    assert a.log_jsonl() == b.log_jsonl() and a.log_hash() == b.log_hash()
    c = L.run_labelled(init, NN1, 1.5, seed=12).process
    assert c.log_hash() != a.log_hash()


@pytest.mark.parametrize("law,T", [(NN1, 1.5), (DEATH1, 8.0)])
def test_log_replay_tie_break_and_aggregate(law, T):
    for seed in range(5):
        init = {(z,): random.Random(seed * 31 + z).choice((-1, 0, 1)) for z in range(-6, 7)}
        run = L.run_labelled(init, law, T, seed)
        active = replay_log(init, run.log)
        assert signed_from(active) == run.signed()
        assert sum(len(v) for s in active.values() for v in s.values()) == run.process.total_balls


def test_log_entry_format():
    run = L.run_labelled({(0,): 1, (1,): -1}, NN1, 1.0, seed=3)
    e = run.log[0]
    assert set(e) == {"t", "label", "colour", "draw", "placements", "annihilated"}
    d = L.run_labelled({(0,): 1}, DEATH1, 50.0, seed=3).log[0]
    assert d["parent_removed"] is True


def test_randomness_is_pure():
    r1, r2 = L.LabelRandomness(5), L.LabelRandomness(5)
    lab = ((1,), (2, 1))
    assert r1.gap(lab, 3) == r2.gap(lab, 3)
    assert r1.draw(lab, 0) != r1.draw(lab, 1)
    assert r1.key(lab) != r1.key(((1,), (1, 2)))


def test_invalid_configurations():
    with pytest.raises(ValueError):
        L.validate_configuration([((0,), 1), ((0,), -1)])
    with pytest.raises(ValueError):
        L.validate_configuration({0: 2})
    with pytest.raises(ValueError):
        L.validate_configuration({(0, 0): 1}, d=1)
    assert L.validate_configuration({0: 1, 1: 0}) == {(0,): 1}


def test_budget():
    with pytest.raises(L.Budget):
        L.run_labelled({0: 1}, NN1, 5.0, seed=1, budget=20)


# --- coupling -------------------------------------------------------------------

def test_couple_equal_configs():
    z = {(x,): (-1) ** x for x in range(-3, 4)}
    res = L.couple(z, z, NN1, 2.0, seed=9)
    assert res.violations == []
    assert res.lower.log_hash() == res.upper.log_hash()


def test_couple_opposite_singletons():
    for seed in range(10):
        assert L.couple({0: -1}, {0: 1}, NN1, 2.0, seed).violations == []


def test_couple_requires_order():
    with pytest.raises(L.PrecondOrder):
        L.couple({0: 1}, {0: -1}, NN1, 1.0, seed=0)


@given(st.integers(0, 2**32), st.integers(0, 2**32))
@settings(max_examples=60)
def test_coupling_property(pair_seed, seed):
    lo, hi = random_ordered_pair(random.Random(pair_seed), 3)
    assert lo.keys() <= set((x,) for x in range(-3, 4))
    assert all(lo.get(s, 0) <= hi.get(s, 0) for s in set(lo) | set(hi))
    assert L.couple(lo, hi, NN1, 1.5, seed, record=False).violations == []


@given(st.integers(0, 2**32), st.integers(0, 2**32))
@settings(max_examples=30)
def test_coupling_property_death_mode(pair_seed, seed):
    lo, hi = random_ordered_pair(random.Random(pair_seed), 3)
    assert L.couple(lo, hi, DEATH1, 6.0, seed, record=False).violations == []


# --- sandwich and stabilisation -----------------------------------------------------

def zeta_on(R, seed):
    g = random.Random(seed)
    return {(x,): g.choice((-1, 1)) for x in range(-R, R + 1)}


def test_boundary_variants():
    z = zeta_on(4, 0)
    minus, mid, plus = L.boundary_variants(z, 2, 4, 1)
    for x in range(-4, 5):
        s = (x,)
        if abs(x) <= 2:
            assert minus[s] == mid[s] == plus[s] == z[s]
        else:
            assert (minus[s], mid.get(s, 0), plus[s]) == (-1, 0, 1)


def test_sandwich_r_equals_R_identical():
    z = zeta_on(5, 1)
    res = L.sandwich(z, 5, 1.5, seed=2, law=NN1)
    assert res.minus == res.middle == res.plus and res.outer_agree


def test_sandwich_orders():
    for seed in range(15):
        res = L.sandwich(zeta_on(8, seed), 3, 1.2, seed, NN1)
        assert all(a <= b <= c for a, b, c in zip(res.minus, res.middle, res.plus))


def test_sandwich_argument_checks():
    with pytest.raises(ValueError):
        L.sandwich(zeta_on(3, 0), 4, 1.0, 0, NN1)


def test_stabilization_radius_t0():
    z = zeta_on(6, 3)
    assert L.stabilization_radius(z, (0,), 0.0, 1, 6, NN1) == 0
    assert L.stabilization_radius(z, (2,), 0.0, 1, 6, NN1) == 2


def test_outer_agreement_monotone_in_r():
    # agreement at r implies agreement at every larger r on the same randomness
    for seed in range(12):
        z = zeta_on(8, seed)
        agree = [L.outer_agreement(z, r, 1.0, seed, NN1) for r in range(0, 9)]
        first = agree.index(True)
        assert all(agree[first:])


def test_stabilization_radius_grows_with_horizon():
    med = []
    for T in (0.25, 0.75, 1.5):
        rs = [L.stabilization_radius(zeta_on(10, s), (0,), T, s, 10, NN1) for s in range(40)]
        med.append(np.median(rs))
    assert med[0] <= med[1] <= med[2]
    with pytest.raises(L.NotFound):
        L.stabilization_radius(zeta_on(10, 0), (0,), 3.0, 0, 0, NN1)


# --- cross-engine consistency --------------------------------------------------------

def test_labelled_and_aggregate_engines_agree_in_law():
    R, T, r = 2000, 1.0, 5
    lab, agg = [], []
    for k in range(R):
        st0 = init_bernoulli(0.5, r, rng=Stream(derive_key("x", k)))
        init = dict(st0.counts)
        lab.append(L.run_labelled(init, NN1, T, seed=k).process.count((0,)))
        agg.append(run_until(st0, NN1, SimClock(key=derive_key("y", k)), T, probe_times=[T]).values[0, 0])
    lab, agg = np.array(lab), np.array(agg)
    assert stats.ks_2samp(lab, agg).pvalue > 0.01
    assert abs(lab.mean() - agg.mean()) <= 3 * np.hypot(lab.std(), agg.std()) / np.sqrt(R)
