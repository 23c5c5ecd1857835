"""Replicate orchestration and statistical checks against the analytic predictions.

Every experiment takes an :class:`ExperimentConfig`, runs replicates with seeds
``replicate_seed(master, k)`` (optionally on a thread pool; the event kernels
release the GIL), folds the results in replicate order and returns
:class:`EstimateRecord` objects carrying a PASS/FAIL verdict. Tolerances are
3 standard errors for point comparisons and KS p > 0.01 for distributional
ones, always widened by the truncation certificate ``epsilon``.
"""
from __future__ import annotations

import csv
import hashlib
import io
import json
import math
import os
import random
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path
from typing import Callable, Mapping, Sequence

import numpy as np
from scipy import stats

from . import analytics as A
from .engine import (
    Budget,
    LatticeState,
    SimClock,
    box_sites,
    init_bernoulli,
    run_conservative,
    run_until,
)
from .label_engine import OrderViolation, couple, outer_agreement, sandwich
from .offspring import OffspringLaw, law_to_document, load_law, parse_law
from .rng import DEFAULT_SEED, Stream, derive_key, replicate_seed

VARIANTS = ("annihilating", "monochromatic", "conservative", "labelled")


class HarnessError(RuntimeError):
    pass


class BudgetExceeded(Budget):
    """Raised before a run whose expected event count exceeds the configured budget."""


# ----------------------------------------------------------------------------
# configuration and records


@dataclass(frozen=True)
class ExperimentConfig:
    law: OffspringLaw
    variant: str = "annihilating"
    p: float = 0.5
    init_radius: int | None = None
    horizon: float = 1.0
    probe_times: tuple = ()
    replicates: int = 1000
    seed: int = DEFAULT_SEED
    budget: int = 10**9
    trusted_sites: tuple = ((0,),)
    epsilon_target: float = 1e-3
    threads: int | None = None
    params: Mapping = field(default_factory=dict)

    def __post_init__(self):
        if self.variant not in VARIANTS:
            raise ValueError(f"unknown variant {self.variant!r}")
        if not 0.0 <= self.p <= 1.0:
            raise ValueError("p must lie in [0, 1]")
        if self.replicates < 1:
            raise ValueError("replicates must be >= 1")

    @classmethod
    def from_dict(cls, doc: Mapping, base_dir=None) -> "ExperimentConfig":
        doc = dict(doc)
        law_ref = doc.pop("law")
        if isinstance(law_ref, str):
            path = Path(law_ref)
            if base_dir is not None and not path.is_absolute():
                path = Path(base_dir) / path
            law = load_law(path)
        else:
            law = parse_law(law_ref)
        known = {f for f in cls.__dataclass_fields__ if f != "law"}
        unknown = set(doc) - known
        if unknown:
            raise ValueError(f"unknown config fields: {sorted(unknown)}")
        if "probe_times" in doc:
            doc["probe_times"] = tuple(float(t) for t in doc["probe_times"])
        if "trusted_sites" in doc:
            doc["trusted_sites"] = tuple(tuple(int(x) for x in s) for s in doc["trusted_sites"])
        return cls(law=law, **doc)

    @classmethod
    def load(cls, path) -> "ExperimentConfig":
        path = Path(path)
        return cls.from_dict(json.loads(path.read_text()), path.parent)

    def to_dict(self) -> dict:
        out = {k: getattr(self, k) for k in self.__dataclass_fields__ if k != "law"}
        out["law"] = law_to_document(self.law)
        out["probe_times"] = list(self.probe_times)
        out["trusted_sites"] = [list(s) for s in self.trusted_sites]
        out["params"] = dict(self.params)
        return out

    def config_hash(self) -> str:
        doc = self.to_dict()
        doc.pop("seed")
        doc.pop("threads")
        text = json.dumps(doc, sort_keys=True, default=str)
        return hashlib.sha256(text.encode()).hexdigest()[:16]

    def with_(self, **kw) -> "ExperimentConfig":
        return replace(self, **kw)


@dataclass(frozen=True)
class EstimateRecord:
    observable: str
    estimate: float
    se: float
    replicates: int
    epsilon: float
    seed: int
    passed: bool
    target: float | None = None
    tolerance: float | None = None
    detail: Mapping = field(default_factory=dict)

    def to_json(self) -> str:
        return json.dumps({"observable": self.observable, "estimate": self.estimate, "se": self.se,
                           "replicates": self.replicates, "epsilon": self.epsilon, "seed": self.seed,
                           "pass": self.passed})


SUMMARY_FIELDS = ("observable", "estimate", "se", "replicates", "epsilon", "seed", "pass", "target", "tolerance")


def write_records(records: Sequence[EstimateRecord], out_dir, name: str) -> tuple[Path, Path]:
    """JSON-lines records plus a summary CSV, each written atomically."""
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    jl = out_dir / f"{name}.jsonl"
    _atomic_write(jl, "".join(r.to_json() + "\n" for r in records))
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(SUMMARY_FIELDS)
    for r in records:
        w.writerow([r.observable, repr(r.estimate), repr(r.se), r.replicates, repr(r.epsilon), r.seed,
                    r.passed, "" if r.target is None else repr(r.target),
                    "" if r.tolerance is None else repr(r.tolerance)])
    summary = out_dir / f"{name}_summary.csv"
    _atomic_write(summary, buf.getvalue())
    return jl, summary


def _atomic_write(path: Path, text: str) -> None:
    tmp = path.with_name(path.name + ".tmp")
    tmp.write_text(text)
    tmp.replace(path)


# ----------------------------------------------------------------------------
# replicate plumbing


def run_replicates(fn: Callable[[int, int], object], n: int, master: int, threads: int | None = None) -> list:
    """``[fn(k, replicate_seed(master, k)) for k in range(n)]``, possibly in parallel.

    The fold order is the replicate order regardless of scheduling.
    """
    threads = threads or os.cpu_count() or 1
    seeds = [replicate_seed(master, k) for k in range(n)]
    if threads <= 1 or n <= 1:
        return [fn(k, s) for k, s in enumerate(seeds)]
    with ThreadPoolExecutor(max_workers=threads) as pool:
        return list(pool.map(fn, range(n), seeds))


def mean_se(x) -> tuple[float, float]:
    x = np.asarray(x, dtype=float)
    if x.size < 2:
        return float(x.mean()) if x.size else float("nan"), float("nan")
    return float(x.mean()), float(x.std(ddof=1) / math.sqrt(x.size))


def variance_se(x) -> tuple[float, float]:
    """Sample variance and its large-sample standard error ``sqrt((m4 - s^4) / n)``."""
    x = np.asarray(x, dtype=float)
    n = x.size
    if n < 2:
        raise HarnessError("a variance estimate needs at least 2 replicates")
    c = x - x.mean()
    s2 = float(c @ c / (n - 1))
    m4 = float(np.mean(c**4))
    return s2, math.sqrt(max(m4 - s2 * s2, 0.0) / n)


def trust(cfg: ExperimentConfig, horizon: float, window: bool = False, margin: int = 0) -> tuple[int, float]:
    """Initial radius and certificate for origin observables up to ``horizon``.

    ``margin`` enlarges the radius for observables at sites up to that distance
    from the origin.
    """
    law = cfg.law
    if cfg.init_radius is None:
        r = A.choose_radius(law, horizon, cfg.epsilon_target, window=window) + margin
    else:
        r = int(cfg.init_radius)
    if horizon == 0:
        return r, 0.0
    return r, min(A.tail_bound(law, r - margin, horizon, window=window), 1.0)


def _start(cfg: ExperimentConfig, seed_k: int, radius: int, variant: str | None = None,
           stream: str = "init") -> tuple[LatticeState, SimClock]:
    variant = variant or ("monochromatic" if cfg.variant == "monochromatic" else "two_type")
    state = init_bernoulli(cfg.p, radius, cfg.law.dimension, variant,
                           Stream(derive_key(stream, seed_k)), reach=cfg.law.reach)
    return state, SimClock(key=derive_key("clock", seed_k))


def expected_events(law: OffspringLaw, balls: float, horizon: float) -> float:
    """Expected number of rings of a monochromatic population over ``[0, horizon]``."""
    lam = law.lam
    return balls * (horizon if abs(lam) < 1e-12 else math.expm1(lam * horizon) / lam)


def _origin(law: OffspringLaw) -> tuple:
    return (0,) * law.dimension


# ----------------------------------------------------------------------------
# mean growth and single-ball moments


def estimate_mean_growth(cfg: ExperimentConfig, times: Sequence[float] | None = None) -> list[EstimateRecord]:
    """``e^{-lam t} Y_0(t)`` of the monochromatic p-Bernoulli process against ``p``."""
    law = cfg.law
    times = sorted(times or cfg.probe_times or (cfg.horizon,))
    T = times[-1]
    r, eps = trust(cfg, T)
    n0 = cfg.p * (2 * r + 1) ** law.dimension
    if expected_events(law, n0, T) > cfg.budget:
        raise BudgetExceeded(f"expected {expected_events(law, n0, T):.3g} events per replicate")
    o = _origin(law)

    def one(k, seed_k):
        state, clock = _start(cfg.with_(variant="monochromatic"), seed_k, r)
        frag = run_until(state, law, clock, T, probe_times=times, probe_sites=[o], budget=cfg.budget)
        return frag.values[:, 0].astype(float)

    vals = np.array(run_replicates(one, cfg.replicates, cfg.seed, cfg.threads))
    out = []
    for j, t in enumerate(times):
        x = vals[:, j] * math.exp(-law.lam * t)
        m, se = mean_se(x)
        se = 0.0 if np.all(x == x[0]) else se
        tol = 3 * se + eps
        out.append(EstimateRecord(f"mean_growth[t={t:g}]", m, se, cfg.replicates, eps, cfg.seed,
                                  bool(abs(m - cfg.p) <= tol), cfg.p, tol))
    return out


def single_ball_moments(law: OffspringLaw, t: float, us: Sequence, zs: Sequence, replicates: int,
                        seed: int, threads: int | None = None) -> list[EstimateRecord]:
    """One ball at the origin: ``E|M_u(t)|^2`` against the closed form and
    ``e^{-lam t} E[X_{-z}(t)]`` against ``p_z(t)``."""
    d = law.dimension
    us = [np.atleast_1d(np.asarray(u, dtype=float)) for u in us]
    zs = [tuple(int(x) for x in np.atleast_1d(z)) for z in zs]
    sites = [tuple(-x for x in z) for z in zs]
    mu = [A.mu_hat(law, u) for u in us]

    def one(k, seed_k):
        state = LatticeState(d, "monochromatic", {(0,) * d: 1}, law.reach)
        clock = SimClock(key=derive_key("clock", seed_k))
        run_until(state, law, clock, t, probe_sites=[], budget=10**9)
        nz = np.flatnonzero(state.arr)
        coords = state.window.coords(nz).astype(float)
        cnt = state.arr[nz].astype(float)
        m2 = [abs(np.exp(-m * t) * np.sum(cnt * np.exp(1j * coords @ u))) ** 2 for u, m in zip(us, mu)]
        xs = [state[s] for s in sites]
        return m2 + xs

    res = np.array(run_replicates(one, replicates, seed, threads), dtype=float)
    out = []
    for i, u in enumerate(us):
        target = A.second_moment_M(law, u, -u, t).real
        m, se = mean_se(res[:, i])
        # when M_u is a.s. constant the SE is pure round-off; allow for it
        tol = 3 * se + 1e-9 * max(1.0, abs(target))
        out.append(EstimateRecord(f"second_moment_M[u={np.round(u, 6).tolist()},t={t:g}]", m, se,
                                  replicates, 0.0, seed, bool(abs(m - target) <= tol), target, tol))
    table = A.pz_table(law, t, max((max(abs(x) for x in z) for z in zs), default=0))
    for j, z in enumerate(zs):
        x = res[:, len(us) + j] * math.exp(-law.lam * t)
        m, se = mean_se(x)
        target = table[z]
        out.append(EstimateRecord(f"pz_monte_carlo[z={list(z)},t={t:g}]", m, se, replicates, 0.0, seed,
                                  bool(abs(m - target) <= 3 * se), target, 3 * se))
    return out


# ----------------------------------------------------------------------------
# variance scaling


def _slope_fit(ts, vs, ses) -> tuple[float, float]:
    """Weighted least squares of ``log v`` on ``log t`` with delta-method weights."""
    x = np.log(np.asarray(ts, dtype=float))
    y = np.log(np.asarray(vs, dtype=float))
    sig = np.asarray(ses, dtype=float) / np.asarray(vs, dtype=float)
    w = 1.0 / np.maximum(sig, 1e-300) ** 2
    xb = np.sum(w * x) / np.sum(w)
    sxx = np.sum(w * (x - xb) ** 2)
    slope = float(np.sum(w * (x - xb) * (y - np.sum(w * y) / np.sum(w))) / sxx)
    return slope, float(1.0 / math.sqrt(sxx))


def estimate_variance_scaling(cfg: ExperimentConfig, t_grid: Sequence[float], slope_tol: float = 0.15,
                              ratio_band: tuple[float, float] = (0.7, 1.3)) -> list[EstimateRecord]:
    """``Var[e^{-lam t} Y_0(t)]`` on a time grid: per-t estimates, the log-log slope
    (target ``-d/2``) and the ratio to ``C sum_z p_z(t)^2`` at the largest ``t``.

    Raises :class:`BudgetExceeded` before simulating when the expected event
    count per replicate exceeds ``cfg.budget``.
    """
    law = cfg.law
    d = law.dimension
    ts = sorted(float(t) for t in t_grid)
    if cfg.replicates < 2:
        raise HarnessError("variance estimates need R >= 2")
    T = ts[-1]
    r, eps = trust(cfg, T)
    cost = expected_events(law, cfg.p * (2 * r + 1) ** d, T)
    if cost > cfg.budget:
        raise BudgetExceeded(
            f"variance scaling to t={T:g} needs about {cost:.3g} events per replicate "
            f"(budget {cfg.budget:.3g}, radius {r})")
    o = _origin(law)

    def one(k, seed_k):
        state, clock = _start(cfg.with_(variant="monochromatic"), seed_k, r)
        frag = run_until(state, law, clock, T, probe_times=ts, probe_sites=[o], budget=cfg.budget)
        return frag.values[:, 0].astype(float)

    vals = np.array(run_replicates(one, cfg.replicates, cfg.seed, cfg.threads))
    out, vs, ses = [], [], []
    for j, t in enumerate(ts):
        v, se = variance_se(vals[:, j] * math.exp(-law.lam * t))
        exact = A.variance_exact(law, cfg.p, t)
        vs.append(v)
        ses.append(se)
        out.append(EstimateRecord(f"variance[t={t:g}]", v, se, cfg.replicates, eps, cfg.seed,
                                  bool(abs(v - exact) <= 3 * se + eps), exact, 3 * se + eps))
    slope, slope_se = _slope_fit(ts, vs, ses)
    out.append(EstimateRecord("variance_slope", slope, slope_se, cfg.replicates, eps, cfg.seed,
                              bool(abs(slope + d / 2) <= slope_tol), -d / 2, slope_tol))
    ratio = vs[-1] / A.variance_prediction(law, cfg.p, T)
    ratio_se = ses[-1] / A.variance_prediction(law, cfg.p, T)
    out.append(EstimateRecord(f"variance_ratio[t={T:g}]", ratio, ratio_se, cfg.replicates, eps, cfg.seed,
                              bool(ratio_band[0] <= ratio <= ratio_band[1]), 1.0, None,
                              {"C": A.variance_constant(law, cfg.p)}))
    return out


# ----------------------------------------------------------------------------
# fixation and colour changes at the origin


def _watched_segments(cfg: ExperimentConfig, T_grid: Sequence[float], r: int):
    law = cfg.law
    o = _origin(law)

    def one(k, seed_k):
        state, clock = _start(cfg, seed_k, r, "two_type")
        rows, frag = [], None
        for T in T_grid:
            frag = run_until(state, law, clock, T, probe_sites=[], watch=o, budget=cfg.budget, carry=frag)
            rows.append((frag.watch_value, frag.red_onset, frag.colour_changes))
        return rows

    return run_replicates(one, cfg.replicates, cfg.seed, cfg.threads)


def fixation_probe(cfg: ExperimentConfig, T_grid: Sequence[float], w: float = 0.5,
                   threshold: float = 0.9) -> list[EstimateRecord]:
    """Fraction of replicates whose origin is red (``Z_0 > 0``) throughout ``[wT, T]``.

    One trajectory per replicate is extended through the sorted ``T`` grid.
    PASS per ``T`` is informational (always True); the trend record passes when
    the fractions increase and the last one reaches ``threshold`` (both widened
    by ``epsilon``).
    """
    Ts = sorted(float(t) for t in T_grid)
    r, eps = trust(cfg, Ts[-1], window=True)
    rows = _watched_segments(cfg, Ts, r)
    out, fr = [], []
    for j, T in enumerate(Ts):
        ok = np.array([row[j][0] > 0 and row[j][1] <= w * T for row in rows], dtype=float)
        m, se = mean_se(ok)
        fr.append((m, se))
        out.append(EstimateRecord(f"fixation_fraction[T={T:g}]", m, se, cfg.replicates, eps, cfg.seed, True))
    increasing = all(b[0] > a[0] - eps for a, b in zip(fr, fr[1:]))
    final = fr[-1][0] >= threshold - eps
    out.append(EstimateRecord("fixation_trend", fr[-1][0], fr[-1][1], cfg.replicates, eps, cfg.seed,
                              bool(increasing and final), threshold, None,
                              {"increasing": increasing, "final_above": final}))
    return out


def nonfixation_probe(cfg: ExperimentConfig, T_grid: Sequence[float]) -> list[EstimateRecord]:
    """Mean number of origin colour changes up to each ``T``; PASS when the means
    strictly increase with non-overlapping ``+-2 SE`` intervals."""
    Ts = sorted(float(t) for t in T_grid)
    r, eps = trust(cfg, Ts[-1], window=True)
    rows = _watched_segments(cfg, Ts, r)
    out, stats_ = [], []
    for j, T in enumerate(Ts):
        m, se = mean_se([row[j][2] for row in rows])
        se = 0.0 if math.isnan(se) else se
        stats_.append((m, se))
        out.append(EstimateRecord(f"colour_changes[T={T:g}]", m, se, cfg.replicates, eps, cfg.seed, True))
    separated = all(b[0] - 2 * b[1] > a[0] + 2 * a[1] for a, b in zip(stats_, stats_[1:]))
    out.append(EstimateRecord("colour_change_trend", stats_[-1][0], stats_[-1][1], cfg.replicates, eps,
                              cfg.seed, bool(separated)))
    return out


# ----------------------------------------------------------------------------
# deviation floor


def deviation_probe(cfg: ExperimentConfig, t_grid: Sequence[float], c_hat: float | None = None,
                    quantile: float = 0.7, floor: float = 0.05) -> list[EstimateRecord]:
    """Empirical ``P(e^{-lam t} Z_0(t) > c_hat t^{-d/4})`` per ``t``.

    ``c_hat`` defaults to the empirical ``quantile`` of ``e^{-lam t} Z_0 t^{d/4}``
    at the smallest ``t``. PASS when every probability exceeds ``floor``.
    """
    law = cfg.law
    d = law.dimension
    ts = sorted(float(t) for t in t_grid)
    T = ts[-1]
    r, eps = trust(cfg, T)
    o = _origin(law)

    def one(k, seed_k):
        state, clock = _start(cfg, seed_k, r, "two_type")
        frag = run_until(state, law, clock, T, probe_times=ts, probe_sites=[o], budget=cfg.budget)
        return frag.values[:, 0].astype(float)

    vals = np.array(run_replicates(one, cfg.replicates, cfg.seed, cfg.threads))
    scaled = vals * np.exp(-law.lam * np.array(ts))[None, :]
    if c_hat is None:
        c_hat = float(np.quantile(scaled[:, 0] * ts[0] ** (d / 4), quantile))
    out, ok = [], True
    for j, t in enumerate(ts):
        m, se = mean_se(scaled[:, j] > c_hat * t ** (-d / 4))
        passed = m - eps >= floor
        ok &= passed
        out.append(EstimateRecord(f"deviation[t={t:g}]", m, se, cfg.replicates, eps, cfg.seed, bool(passed),
                                  floor, None, {"c_hat": c_hat}))
    return out


def symmetry_null(cfg: ExperimentConfig, t: float) -> EstimateRecord:
    """At ``p = 1/2`` the laws of ``Z_0(t)`` and ``-Z_0(t)`` agree (split-sample KS)."""
    law = cfg.law
    r, eps = trust(cfg, t)
    o = _origin(law)

    def one(k, seed_k):
        state, clock = _start(cfg, seed_k, r, "two_type")
        return run_until(state, law, clock, t, probe_times=[t], probe_sites=[o], budget=cfg.budget).values[0, 0]

    z = np.array(run_replicates(one, cfg.replicates, cfg.seed, cfg.threads), dtype=float)
    half = len(z) // 2
    ks = stats.ks_2samp(z[:half], -z[half:])
    return EstimateRecord(f"symmetry_ks_pvalue[t={t:g}]", float(ks.pvalue), 0.0, cfg.replicates, eps, cfg.seed,
                          bool(ks.pvalue > 0.01), 0.01)


# ----------------------------------------------------------------------------
# conditional mean functional


def normality_test(law: OffspringLaw, t: float, samples: int, seed: int, tail: float = 1e-12) -> list[EstimateRecord]:
    """KS test of ``S(t) / sqrt(sum_z p_z(t)^2)`` against ``N(0, 1)`` under symmetric ``+-1`` colourings.

    ``S`` is evaluated exactly on a box carrying all but ``tail`` of the kernel mass.
    """
    d = law.dimension
    if t == 0:
        p = np.ones(1)
    else:
        r = 4
        while True:
            table = A.pz_table(law, t, r)
            if table.tail[-1] < tail or r > 512:
                break
            r *= 2
        p = table.array.reshape(-1)
    rng = np.random.default_rng(derive_key("normality", seed))
    out = np.empty(samples)
    chunk = max(1, 2**22 // p.size)
    for i in range(0, samples, chunk):
        k = min(chunk, samples - i)
        zeta = rng.integers(0, 2, size=(k, p.size), dtype=np.int8) * 2 - 1
        out[i:i + k] = zeta @ p
    s = out / math.sqrt(A.parseval_sum(law, t) if t > 0 else 1.0)
    ks = stats.kstest(s, "norm")
    skew = float(stats.skew(s))
    skew_se = math.sqrt(6.0 / samples)
    return [
        EstimateRecord(f"clt_ks_pvalue[t={t:g}]", float(ks.pvalue), 0.0, samples, 0.0, seed,
                       bool(ks.pvalue > 0.01), 0.01, None, {"statistic": float(ks.statistic)}),
        EstimateRecord(f"clt_skewness[t={t:g}]", skew, skew_se, samples, 0.0, seed,
                       bool(abs(skew) <= 3 * skew_se), 0.0, 3 * skew_se),
    ]


def conditional_mean_check(law: OffspringLaw, zeta: Mapping, t: float, replicates: int, seed: int,
                           threads: int | None = None, budget: int = 10**9) -> EstimateRecord:
    """Replicate mean of ``e^{-lam t} Z_0(t, zeta)`` for a fixed ``zeta`` against ``S(t)``."""
    from .label_engine import validate_configuration

    config = validate_configuration(zeta, law.dimension)
    target = A.conditional_mean_S(law, config, t)
    o = _origin(law)

    def one(k, seed_k):
        state = LatticeState(law.dimension, "annihilating", config, law.reach)
        clock = SimClock(key=derive_key("clock", seed_k))
        return run_until(state, law, clock, t, probe_times=[t], probe_sites=[o], budget=budget).values[0, 0]

    x = np.array(run_replicates(one, replicates, seed, threads), dtype=float) * math.exp(-law.lam * t)
    m, se = mean_se(x)
    return EstimateRecord(f"conditional_mean[t={t:g}]", m, se, replicates, 0.0, seed,
                          bool(abs(m - target) <= 3 * se), target, 3 * se)


# ----------------------------------------------------------------------------
# density


def density_estimate(cfg: ExperimentConfig, t_grid: Sequence[float], n: int) -> list[EstimateRecord]:
    """Spatial average of ``{Z_x(t) > 0}`` over ``[-n, n]^d`` against ``P(Z_0(t) > 0)``.

    Each replicate yields a box average and the origin indicator. A single run's
    box average has the cross-replicate SD as its standard error; the ensemble
    probability has the binomial SE. PASS when the replicate-0 box average and
    the ensemble probability agree within 3 combined SE plus epsilon.
    """
    law = cfg.law
    d = law.dimension
    ts = sorted(float(t) for t in t_grid)
    T = ts[-1]
    r_site = A.choose_radius(law, T, cfg.epsilon_target) if T > 0 else 0
    r = max(r_site + n, cfg.init_radius or 0)
    box = box_sites(d, n)
    eps = 0.0
    if T > 0:
        table = A.pz_table(law, T, r + 1, tol=A.TAIL_TOL)
        bounds = A._tail_from_rings(law, table, False)
        eps = float(np.mean([min(bounds[r - max(abs(x) for x in s)], 1.0) for s in box]))
    o = _origin(law)
    origin_col = box.index(o)

    def one(k, seed_k):
        state, clock = _start(cfg, seed_k, r, "two_type")
        frag = run_until(state, law, clock, T, probe_times=ts, probe_sites=box, budget=cfg.budget)
        red = frag.values > 0
        return red.mean(axis=1), red[:, origin_col]

    res = run_replicates(one, cfg.replicates, cfg.seed, cfg.threads)
    avgs = np.array([a for a, _ in res])
    orig = np.array([b for _, b in res], dtype=float)
    out = []
    for j, t in enumerate(ts):
        single = float(avgs[0, j])
        single_se = float(avgs[:, j].std(ddof=1))
        pm, pse = mean_se(orig[:, j])
        comb = math.sqrt(single_se**2 + pse**2)
        passed = abs(single - pm) <= 3 * comb + eps
        out.append(EstimateRecord(f"density[t={t:g}]", single, single_se, cfg.replicates, eps, cfg.seed,
                                  bool(passed), pm, 3 * comb + eps,
                                  {"ensemble": pm, "ensemble_se": pse, "ensemble_box_mean": float(avgs[:, j].mean())}))
    return out


# ----------------------------------------------------------------------------
# conservative process


def monochrome_marginal_check(cfg: ExperimentConfig, t: float) -> list[EstimateRecord]:
    """``e^{-lam t}(R_0 + P_0)(t)`` of the merge process against an independent
    monochromatic run from the red part of a fresh colouring.

    Also reports the exact-identity violation count (``Z = R - B`` checked at
    every event) and the mean of ``e^{-lam t}(B_0 + P_0)(t)`` against ``1 - p``.
    """
    law = cfg.law
    r, eps = trust(cfg, t)
    o = _origin(law)
    scale = math.exp(-law.lam * t)

    def one(k, seed_k):
        state, clock = _start(cfg, seed_k, r, "two_type")
        frag = run_conservative(state, law, clock, t, probe_times=[t], probe_sites=[o], budget=cfg.budget)
        ref, rclock = _start(cfg, derive_key("reference", seed_k), r, "monochromatic")
        yref = run_until(ref, law, rclock, t, probe_times=[t], probe_sites=[o], budget=cfg.budget).values[0, 0]
        return (frag.red_plus_purple[0, 0], frag.blue_plus_purple[0, 0], yref, frag.identity_violations)

    res = np.array(run_replicates(one, cfg.replicates, cfg.seed, cfg.threads), dtype=float)
    rp, bp, y, viol = res[:, 0] * scale, res[:, 1] * scale, res[:, 2] * scale, res[:, 3]
    ks = stats.ks_2samp(rp, y)
    m_rp, se_rp = mean_se(rp)
    m_bp, se_bp = mean_se(bp)
    m_y, se_y = mean_se(y)
    v_rp, vse_rp = variance_se(rp)
    v_y, vse_y = variance_se(y)
    n_viol = int(viol.sum())
    R = cfg.replicates
    return [
        EstimateRecord("identity_violations", float(n_viol), 0.0, R, 0.0, cfg.seed, n_viol == 0, 0.0, 0.0),
        EstimateRecord(f"marginal_ks_pvalue[t={t:g}]", float(ks.pvalue), 0.0, R, eps, cfg.seed,
                       bool(ks.pvalue > 0.01), 0.01),
        EstimateRecord(f"red_plus_purple_mean[t={t:g}]", m_rp, se_rp, R, eps, cfg.seed,
                       bool(abs(m_rp - m_y) <= 3 * math.hypot(se_rp, se_y) + eps), m_y),
        EstimateRecord(f"red_plus_purple_variance[t={t:g}]", v_rp, vse_rp, R, eps, cfg.seed,
                       bool(abs(v_rp - v_y) <= 3 * math.hypot(vse_rp, vse_y) + eps), v_y),
        EstimateRecord(f"blue_plus_purple_mean[t={t:g}]", m_bp, se_bp, R, eps, cfg.seed,
                       bool(abs(m_bp - (1 - cfg.p)) <= 3 * se_bp + eps), 1 - cfg.p),
    ]


# ----------------------------------------------------------------------------
# labelled coupling experiments


def random_ordered_pair(rng: random.Random, radius: int, d: int = 1) -> tuple[dict, dict]:
    """Uniform ``zeta`` on ``{-1,0,1}^B`` and ``zeta' >= zeta`` drawn uniformly above it."""
    sites = box_sites(d, radius)
    a = {s: rng.choice((-1, 0, 1)) for s in sites}
    b = {s: rng.choice([v for v in (-1, 0, 1) if v >= a[s]]) for s in sites}
    return a, b


def coupling_experiment(law: OffspringLaw, pairs: int, horizon: float, seed: int, radius: int = 3,
                        budget: int = 10**6) -> EstimateRecord:
    """Containment violations over random ordered pairs on shared label randomness (target 0)."""
    total = 0
    for k in range(pairs):
        seed_k = replicate_seed(seed, k)
        a, b = random_ordered_pair(random.Random(seed_k), radius, law.dimension)
        total += len(couple(a, b, law, horizon, seed_k, budget, record=False).violations)
    return EstimateRecord("coupling_violations", float(total), 0.0, pairs, 0.0, seed, total == 0, 0.0, 0.0)


def sandwich_experiment(law: OffspringLaw, R: int, horizon: float, radii: Sequence[int], runs: int,
                        seed: int, p: float = 0.5, budget: int = 10**6) -> list[EstimateRecord]:
    """Ordering violations of the three boundary variants, and the probability that the
    ``zeta^{+,r}`` / ``zeta^{-,r}`` origin trajectories differ on ``[0, horizon]``.

    The disagreement bound is ``tail_bound(r)`` plus the slack of realising the
    +-1 exterior only up to ``R`` (``2 tail_bound(R)``) plus 3 SE.
    """
    d = law.dimension
    radii = sorted(radii)
    violations = 0
    differ = np.zeros((runs, len(radii)))
    for k in range(runs):
        seed_k = replicate_seed(seed, k)
        rng = random.Random(seed_k)
        zeta = {s: (1 if rng.random() < p else -1) for s in box_sites(d, R)}
        for j, r in enumerate(radii):
            try:
                sw = sandwich(zeta, r, horizon, seed_k, law, R=R, budget=budget)
            except OrderViolation:
                violations += 1
                continue
            differ[k, j] = not sw.outer_agree
    slack = 2 * min(A.tail_bound(law, R, horizon, window=True), 1.0)
    out = [EstimateRecord("sandwich_order_violations", float(violations), 0.0, runs, 0.0, seed,
                          violations == 0, 0.0, 0.0)]
    probs = []
    for j, r in enumerate(radii):
        m, se = mean_se(differ[:, j])
        bound = A.tail_bound(law, r, horizon, window=True)
        probs.append(m)
        out.append(EstimateRecord(f"disagreement[r={r}]", m, se, runs, slack, seed,
                                  bool(m <= bound + slack + 3 * se), bound, slack + 3 * se))
    mono = all(b <= a for a, b in zip(probs, probs[1:]))
    out.append(EstimateRecord("disagreement_monotone", float(mono), 0.0, runs, slack, seed, bool(mono)))
    return out


def all_passed(records: Sequence[EstimateRecord]) -> bool:
    return all(r.passed for r in records)
