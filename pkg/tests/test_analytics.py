import json
import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from scipy import integrate, special

from abrw import analytics as A
from abrw import offspring as O
from abrw.offspring import DEATH1, NN1

# e^{-2} I_0(2) and e^{-2} I_1(2), frozen from the modified Bessel closed form
P0_NN1_T1 = 0.30850832255367105
P1_NN1_T1 = 0.21526928924893768
# e^{-4} I_0(4)
PARSEVAL_NN1_T1 = 0.2070019212239867
# 1 + 4 (e^6 - 1) / 6
M_PI_NN1_T1 = 1 + 4 * (math.exp(6) - 1) / 6


def bessel_pz(rate, t, z):
    """``p_z(t)`` for a symmetric nearest-neighbour mean measure with ``lam - mu_hat(u) = rate (1 - cos u)``."""
    return special.ive(abs(z), rate * t)


def quad_pz(law, t, z):
    f = lambda u: math.exp(-t * (law.lam - O.mu_hat(law, u).real)) * math.cos(u * z) / (2 * math.pi)
    return integrate.quad(f, -math.pi, math.pi, epsabs=1e-14, epsrel=1e-12)[0]


def test_frozen_bessel_values():
    assert special.ive(0, 2.0) == pytest.approx(P0_NN1_T1, rel=1e-14)
    assert special.ive(1, 2.0) == pytest.approx(P1_NN1_T1, rel=1e-14)
    assert special.ive(0, 4.0) == pytest.approx(PARSEVAL_NN1_T1, rel=1e-14)


# --- p_z tables -----------------------------------------------------------------

def test_pz_nn1_matches_bessel():
    tab = A.pz_table(NN1, 1.0, 10)
    assert tab[0] == pytest.approx(P0_NN1_T1, abs=1e-12)
    assert tab[1] == pytest.approx(P1_NN1_T1, abs=1e-12)
    for z in range(-10, 11):
        assert tab[z] == pytest.approx(bessel_pz(2.0, 1.0, z), abs=1e-12)
        assert tab[z] == pytest.approx(quad_pz(NN1, 1.0, z), abs=1e-11)


@pytest.mark.parametrize("t", [0.5, 3.0, 30.0])
def test_pz_death1_matches_bessel(t):
    tab = A.pz_table(DEATH1, t, 12)
    for z in range(-12, 13):
        assert tab[z] == pytest.approx(bessel_pz(1.1, t, z), abs=1e-12)


def test_pz_d2_factorises(nn2):
    tab = A.pz_table(nn2, 0.7, 4)
    for z1 in range(-4, 5):
        for z2 in range(-4, 5):
            assert tab[(z1, z2)] == pytest.approx(bessel_pz(2.0, 0.7, z1) * bessel_pz(2.0, 0.7, z2), abs=1e-12)


def test_pz_t0_is_delta(death2):
    for law in (NN1, death2):
        tab = A.pz_table(law, 0.0, 3)
        assert tab[(0,) * law.dimension] == pytest.approx(1.0, abs=1e-15)
        assert abs(tab.array).sum() == pytest.approx(1.0, abs=1e-14)


@pytest.mark.parametrize("t", [0.1, 1.0, 10.0, 100.0])
def test_table_invariants(t, death2):
    for law in (NN1, DEATH1, death2):
        tab = A.pz_table(law, t, 6)
        assert tab.mass == pytest.approx(1.0, abs=1e-12)
        assert np.all(tab.array >= -tab.wrap_error - 1e-15)
        assert tab.sup <= 1.0 + 1e-12
        assert tab.sum_sq <= tab.sup + 1e-12
        assert tab.wrap_error <= 1e-12


def test_coverage_gap_and_lookup_forms():
    tab = A.pz_table(NN1, 1.0, 3)
    assert tab[(2,)] == tab[2] == tab.values[(2,)]
    with pytest.raises(A.CoverageGap):
        tab[4]
    with pytest.raises(ValueError):
        tab[(0, 0)]
    assert tab.ring_sums()[0] == pytest.approx(P0_NN1_T1, abs=1e-12)
    assert tab.ring_sums()[1] == pytest.approx(2 * P1_NN1_T1, abs=1e-12)


def test_no_convergence(nn2):
    with pytest.raises(A.NoConvergence):
        A.pz_table(nn2, 1.0, 5000)
    with pytest.raises(ValueError):
        A.pz_table(NN1, 1.0, 3, tol=0.0)


def test_csv(tmp_path, nn2):
    path = tmp_path / "pz.csv"
    A.pz_table(nn2, 1.0, 1).to_csv(path)
    lines = path.read_text().splitlines()
    assert lines[0] == "z_1,z_2,p"
    assert len(lines) == 10
    assert not list(tmp_path.glob("*.tmp"))


# --- ODE oracle -----------------------------------------------------------------

@pytest.mark.parametrize("law", [NN1, DEATH1])
@pytest.mark.parametrize("t", [0.5, 1.0, 2.0])
def test_fft_and_ode_agree(law, t):
    tab = A.pz_table(law, t, 8)
    ode = A.pz_ode_oracle(law, t, 30)
    diff = max(abs(tab[z] - ode[z]) for z in tab.values)
    assert diff <= 1e-8


def test_ode_oracle_t0_and_mass():
    assert A.pz_ode_oracle(NN1, 0.0, 5) == {(z,): float(z == 0) for z in range(-5, 6)}
    ode = A.pz_ode_oracle(NN1, 1.0, 25)
    assert sum(ode.values()) == pytest.approx(1.0, abs=1e-9)


def test_ode_oracle_leak():
    with pytest.raises(A.LeakTooLarge):
        A.pz_ode_oracle(NN1, 2.0, 3)


# --- Parseval sum ---------------------------------------------------------------

def test_parseval_values(nn2):
    assert A.parseval_sum(NN1, 1.0) == pytest.approx(PARSEVAL_NN1_T1, rel=1e-10)
    assert A.parseval_sum(NN1, 0.0) == pytest.approx(1.0)
    assert A.parseval_sum(nn2, 0.5) == pytest.approx(special.ive(0, 2.0) ** 2, rel=1e-10)
    assert A.parseval_sum(NN1, 1.0) == pytest.approx(A.pz_table(NN1, 1.0, 0).sum_sq, rel=1e-10)


def test_parseval_decreasing():
    vals = [A.parseval_sum(DEATH1, t) for t in np.geomspace(0.1, 300, 25)]
    assert all(a > b for a, b in zip(vals, vals[1:]))


def test_parseval_slope_death1():
    ts = np.geomspace(20, 200, 8)
    slope, _ = A.scaling_exponent([(t, A.parseval_sum(DEATH1, t)) for t in ts])
    assert slope == pytest.approx(-0.5, abs=0.05)


# --- martingale second moment and variance constants ----------------------------

def test_second_moment_M_examples():
    assert A.second_moment_M(NN1, np.pi, -np.pi, 1.0) == pytest.approx(M_PI_NN1_T1, rel=1e-12)
    for t in (0.3, 1.0, 7.0):
        assert A.second_moment_M(NN1, np.pi / 2, -np.pi / 2, t) == pytest.approx(1.0, abs=1e-12)


@pytest.mark.parametrize("law", [NN1, DEATH1])
def test_second_moment_M_at_zero(law):
    e2 = O.moment(law, "size2") if law.mode == "stay" else A.net_second_moment(law)
    for t in (0.5, 2.0):
        expect = 1 + e2 * (1 - math.exp(-law.lam * t)) / law.lam
        assert A.second_moment_M(law, 0.0, 0.0, t).real == pytest.approx(expect, rel=1e-12)
    assert A.second_moment_M(law, 0.0, 0.0, 400 / law.lam).real == pytest.approx(A.w_second_moment(law), rel=1e-9)


def brute_force_C(law, p):
    e2 = sum(q * (cfg.size - (law.mode == "death")) ** 2 for q, cfg in law.atoms)
    return p * (1 + e2 / law.lam) - p * p


def test_variance_constant():
    assert A.w_second_moment(NN1) == pytest.approx(3.0)
    assert A.variance_constant(NN1, 0.5) == pytest.approx(1.25)
    assert A.variance_constant(NN1, 0.5) == pytest.approx(brute_force_C(NN1, 0.5))
    # death mode uses the net configuration phi - delta_0, whose squared size has mean 1
    assert A.w_second_moment(DEATH1) == pytest.approx(11.0)
    assert A.variance_constant(DEATH1, 0.5) == pytest.approx(5.25)
    assert A.variance_constant(DEATH1, 0.5) == pytest.approx(brute_force_C(DEATH1, 0.5))
    assert A.variance_prediction(NN1, 0.5, 1.0) == pytest.approx(1.25 * PARSEVAL_NN1_T1, rel=1e-10)


def test_variance_exact_limits():
    assert A.variance_exact(NN1, 0.3, 0.0) == pytest.approx(0.3 * 0.7)
    ratios = [A.variance_exact(DEATH1, 0.5, t) / A.variance_prediction(DEATH1, 0.5, t) for t in (25, 50, 100, 200)]
    assert all(a > b for a, b in zip(ratios, ratios[1:]))
    assert 1.0 < ratios[-1] < 1.05


# --- conditional mean -----------------------------------------------------------

def test_conditional_mean_S():
    assert A.conditional_mean_S(NN1, {(0,): 1}, 1.0) == pytest.approx(P0_NN1_T1, abs=1e-12)
    big = {(z,): 1 for z in range(-40, 41)}
    assert A.conditional_mean_S(NN1, big, 1.0) == pytest.approx(1.0, abs=1e-12)
    anti = {(z,): (1 if z > 0 else -1) for z in range(-5, 6) if z}
    assert A.conditional_mean_S(NN1, anti, 2.0) == pytest.approx(0.0, abs=1e-14)
    with pytest.raises(A.CoverageGap):
        A.conditional_mean_S(NN1, {(5,): 1}, 1.0, table=A.pz_table(NN1, 1.0, 3))


def test_clt_params():
    assert A.clt_params(NN1, 1.0) == (0.0, pytest.approx(PARSEVAL_NN1_T1, rel=1e-10))
    assert A.clt_params(NN1, 0.0)[1] == pytest.approx(1.0)


# --- tail bound -----------------------------------------------------------------

def exact_tail_nn1(r, t):
    return 1 - sum(bessel_pz(2.0, t, z) for z in range(-r, r + 1))


def test_tail_bound_values():
    assert A.tail_bound(NN1, 0, 1.0) == pytest.approx(2 * math.e**2 * (1 - P0_NN1_T1), rel=1e-10)
    for r in (1, 3, 5):
        assert A.tail_bound(NN1, r, 1.0) >= 2 * math.e**2 * exact_tail_nn1(r, 1.0) * (1 - 1e-9)


def test_tail_bound_monotone_to_zero():
    b = [A.tail_bound(DEATH1, r, 25.0) for r in range(0, 60, 3)]
    assert all(x >= y for x, y in zip(b, b[1:]))
    assert b[-1] < 1e-3


def test_tail_bound_window_factor():
    assert A.tail_bound(DEATH1, 5, 3.0, window=True) == pytest.approx(math.e**3 * A.tail_bound(DEATH1, 5, 3.0))
    assert A.tail_bound(NN1, 5, 3.0, window=True) == A.tail_bound(NN1, 5, 3.0)


def test_tail_bound_table_checks():
    tab = A.pz_table(NN1, 1.0, 4)
    with pytest.raises(A.CoverageGap):
        A.tail_bound(NN1, 4, 1.0, table=tab)
    with pytest.raises(ValueError):
        A.tail_bound(NN1, 2, 2.0, table=tab)


@given(st.integers(0, 30), st.floats(0.2, 6.0))
@settings(max_examples=30)
def test_chernoff_dominates_exact_tail(r, t):
    assert A.chernoff_tail(NN1, t, r)[0] >= exact_tail_nn1(r, t) - 1e-15


def test_choose_radius():
    r = A.choose_radius(NN1, 2.0, 1e-3)
    assert A.tail_bound(NN1, r, 2.0) <= 1e-3 < A.tail_bound(NN1, r - 1, 2.0)
    assert A.choose_radius(DEATH1, 200.0, 1e-6) >= A.choose_radius(DEATH1, 200.0, 1e-3)


# --- scaling exponents ----------------------------------------------------------

def test_scaling_exponent_exact_series():
    slope, half = A.scaling_exponent([(t, t**-0.5) for t in (1, 2, 4, 8, 16)])
    assert slope == pytest.approx(-0.5, abs=1e-12) and half < 1e-12


def test_scaling_exponent_bad_span():
    with pytest.raises(A.BadSpan):
        A.scaling_exponent([(t, 1 / t) for t in (1, 2, 3, 4)])
    with pytest.raises(A.BadSpan):
        A.scaling_exponent([(t, 1 / t) for t in (1, 2, 3, 4, 5)])


def test_sup_pz_slope_death1():
    series = [(t, A.pz_table(DEATH1, t, 0).sup) for t in (20, 40, 80, 160, 320)]
    assert A.scaling_exponent(series)[0] == pytest.approx(-0.5, abs=0.05)


def test_parseval_slope_d2(death2):
    ts = np.geomspace(10, 100, 6)
    assert A.scaling_exponent([(t, A.parseval_sum(death2, t)) for t in ts])[0] == pytest.approx(-1.0, abs=0.05)


# --- predictions bundle ---------------------------------------------------------

def test_predictions_json(tmp_path):
    pred = A.predictions(NN1, 0.5, 1.0, 8, 1.0)
    doc = json.loads(pred.to_json(tmp_path / "pred.json"))
    assert set(doc) == {"lambda", "C", "parseval", "sup_pz", "var_S", "tail_bound"}
    assert doc["lambda"] == 2.0 and doc["C"] == pytest.approx(1.25)
    assert doc["var_S"] == pytest.approx(PARSEVAL_NN1_T1, rel=1e-10)
    assert doc["sup_pz"] == pytest.approx(P0_NN1_T1, abs=1e-12)
    assert json.loads((tmp_path / "pred.json").read_text()) == doc


@given(st.lists(st.tuples(st.integers(-2, 2), st.integers(-2, 2)), min_size=2, max_size=4),
       st.floats(0.05, 0.95))
@settings(max_examples=25)
def test_gap_positive_for_irreducible_laws(offsets, q):
    offsets = sorted(set(offsets))
    if O.lattice_index(offsets, 2) != 1:
        return
    doc = {"dimension": 2, "atoms": [
        {"p": q, "balls": [{"offset": list(o), "count": 1} for o in offsets]},
        {"p": 1 - q, "balls": [{"offset": list(offsets[0]), "count": 1}]}]}
    law = O.parse_law(doc)
    gmin, _ = O.spectral_gap_scan(law, 32)
    assert gmin > 0
