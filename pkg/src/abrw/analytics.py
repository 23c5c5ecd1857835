"""Deterministic evaluation of the closed-form quantities of the model.

Everything here is a pure function of an :class:`~abrw.offspring.OffspringLaw`
and scalar arguments. The central object is the transition kernel

    p_z(t) = exp(-lam t) E[X_{-z}(t)] = int_T^d exp(i u.z) exp(-(lam - mu_hat(u)) t) du,

evaluated by an inverse FFT on a uniform ``M^d`` torus grid. The grid sum is the
*periodized* kernel ``sum_m p_{z + M m}(t)`` exactly, so doubling ``M`` until
two successive tables agree certifies the truncation.
"""
from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Mapping, Sequence

import numpy as np
from scipy import optimize, stats
from scipy.integrate import solve_ivp

from .offspring import OffspringLaw, _grid, mu_hat, phi_hat_product_mean

Site = tuple[int, ...]

MAX_AXIS = 1 << 16
MAX_POINTS = 1 << 25  # memory guard for d >= 2 (about 0.5 GB of complex128)
TAIL_TOL = 1e-15  # tail bounds multiply the table error by exp(lam T) and the box volume


class AnalyticsError(ArithmeticError):
    pass


class NoConvergence(AnalyticsError):
    pass


class LeakTooLarge(AnalyticsError):
    pass


class CoverageGap(AnalyticsError):
    pass


class BadSpan(AnalyticsError):
    pass


# ----------------------------------------------------------------------------
# helpers


def _pow2_at_least(n: int) -> int:
    return 1 << max(int(n) - 1, 1).bit_length()


def _too_big(M: int, d: int) -> bool:
    return M > MAX_AXIS or M**d > MAX_POINTS


def _decay_rate(law: OffspringLaw, M: int) -> np.ndarray:
    """``lam - mu_hat(u)`` on the ``M^d`` grid, in FFT order."""
    pts = _grid(law.dimension, M)
    return law.lam - mu_hat(law, pts.reshape(-1, law.dimension)).reshape((M,) * law.dimension)


def _box_slices(M: int, radius: int, d: int) -> np.ndarray:
    """Gather the ``(2r+1)^d`` box centred at 0 from an FFT-ordered periodic array."""
    idx = np.arange(-radius, radius + 1) % M
    return np.ix_(*([idx] * d))


def _box_sites(radius: int, d: int) -> Iterable[Site]:
    rng = range(-radius, radius + 1)
    return (tuple(s) for s in np.array(np.meshgrid(*([list(rng)] * d), indexing="ij")).reshape(d, -1).T)


# ----------------------------------------------------------------------------
# p_z(t)


@dataclass
class PzTable:
    """``p_z(t)`` on the sup-norm box ``|z| <= radius``.

    ``array`` is indexed by ``z + radius`` along each axis. ``mass`` is the sum
    over one full period of the final grid (1 up to round-off) and ``sup`` /
    ``sum_sq`` are taken over that full period as well.
    """

    t: float
    radius: int
    d: int
    array: np.ndarray
    grid_size: int
    wrap_error: float
    mass: float
    sup: float
    sum_sq: float
    tail: np.ndarray | None = None
    _values: dict | None = field(default=None, repr=False)

    @property
    def values(self) -> dict[Site, float]:
        if self._values is None:
            flat = self.array.reshape(-1)
            self._values = {s: float(v) for s, v in zip(_box_sites(self.radius, self.d), flat)}
        return self._values

    def __getitem__(self, z) -> float:
        z = tuple(int(x) for x in np.atleast_1d(z))
        if len(z) != self.d:
            raise ValueError(f"site {z} has wrong dimension")
        if max(abs(x) for x in z) > self.radius:
            raise CoverageGap(f"site {z} outside table radius {self.radius}")
        return float(self.array[tuple(x + self.radius for x in z)])

    def ring_sums(self) -> np.ndarray:
        """``out[k] = sum_{|z|_inf = k} p_z`` for ``k = 0..radius``."""
        ax = np.abs(np.arange(-self.radius, self.radius + 1))
        dist = ax
        for _ in range(self.d - 1):
            dist = np.maximum.outer(dist, ax)
        return np.bincount(dist.reshape(-1), weights=self.array.reshape(-1), minlength=self.radius + 1)

    def to_csv(self, path) -> None:
        header = ",".join(f"z_{k + 1}" for k in range(self.d)) + ",p"
        lines = [header]
        for s, v in self.values.items():
            lines.append(",".join(str(x) for x in s) + f",{v!r}")
        _atomic_write(path, "\n".join(lines) + "\n")


def _periodized(law: OffspringLaw, t: float, M: int) -> np.ndarray:
    f = np.exp(-_decay_rate(law, M) * t)
    return np.fft.ifftn(f).real


def _outside_sums(full: np.ndarray, radius: int) -> np.ndarray:
    """``out[k] = sum of the periodized values with |z|_inf > k`` over one period, ``k <= radius``.

    Summing the small terms directly avoids the cancellation in ``1 - sum_inside``.
    """
    M = full.shape[0]
    ax = np.minimum(np.arange(M), M - np.arange(M))
    dist = ax
    for _ in range(full.ndim - 1):
        dist = np.maximum.outer(dist, ax)
    rings = np.bincount(dist.reshape(-1), weights=full.reshape(-1))
    beyond = np.cumsum(rings[::-1])[::-1]  # beyond[k] = sum over dist >= k
    out = np.append(beyond[1:], 0.0)[: radius + 1]
    return np.maximum(out, 0.0)


def pz_table(law: OffspringLaw, t: float, radius: int, tol: float = 1e-12) -> PzTable:
    """``p_z(t)`` for ``|z|_inf <= radius`` by grid doubling until the box changes by < tol."""
    if t < 0:
        raise ValueError("t must be non-negative")
    if tol <= 0:
        raise ValueError("tol must be positive")
    d = law.dimension
    radius = int(radius)
    M = _pow2_at_least(max(32, 2 * radius + 2))
    if _too_big(M, d):
        raise NoConvergence(f"radius {radius} needs a grid beyond the cap")
    sl = _box_slices(M, radius, d)
    prev_full = _periodized(law, t, M)
    prev = prev_full[sl]
    while True:
        M2 = 2 * M
        if _too_big(M2, d):
            raise NoConvergence(f"p_z({t}) did not converge to {tol} before grid {M2}")
        full = _periodized(law, t, M2)
        cur = full[_box_slices(M2, radius, d)]
        diff = float(np.max(np.abs(cur - prev)))
        if diff < tol:
            return PzTable(
                t=float(t), radius=radius, d=d, array=cur, grid_size=M2, wrap_error=diff,
                mass=float(full.sum()), sup=float(full.max()), sum_sq=float(np.sum(full**2)),
                tail=_outside_sums(full, radius),
            )
        M, prev = M2, cur


def _shift_add(out: np.ndarray, src: np.ndarray, offset: Sequence[int], weight: float) -> None:
    """``out[z] += weight * src[z - offset]`` with zero fill outside the box."""
    dst_sl, src_sl = [], []
    for o in offset:
        if o >= 0:
            dst_sl.append(slice(o, None))
            src_sl.append(slice(0, src.shape[0] - o))
        else:
            dst_sl.append(slice(0, o))
            src_sl.append(slice(-o, None))
    out[tuple(dst_sl)] += weight * src[tuple(src_sl)]


def pz_ode_oracle(law: OffspringLaw, t: float, box_radius: int, step_tol: float = 1e-10) -> dict[Site, float]:
    """Independent oracle for ``p_z(t)`` from the mean-measure ODE in real space.

    Integrates ``q' = mu' * q - lam q`` (``q = exp(-lam t) m``) on a truncated box
    with an explicit adaptive Runge-Kutta method and returns ``q_{-z}``. Raises
    :class:`LeakTooLarge` when the box loses more than ``10 step_tol`` of mass.
    """
    d = law.dimension
    B = int(box_radius)
    shape = (2 * B + 1,) * d
    q0 = np.zeros(shape)
    q0[(B,) * d] = 1.0
    net = list(law.net_mean().items())
    lam = law.lam

    def rhs(_, y):
        q = y.reshape(shape)
        out = -lam * q
        for off, w in net:
            _shift_add(out, q, off, w)
        return out.reshape(-1)

    if t > 0:
        sol = solve_ivp(rhs, (0.0, float(t)), q0.reshape(-1), method="DOP853",
                        rtol=step_tol, atol=step_tol * 1e-2)
        if not sol.success:
            raise NoConvergence(sol.message)
        q = sol.y[:, -1].reshape(shape)
    else:
        q = q0
    deficit = abs(1.0 - float(q.sum()))
    if deficit > 10 * step_tol:
        raise LeakTooLarge(f"box {B} loses mass {deficit:.3g} at t={t}")
    flipped = q[(slice(None, None, -1),) * d]
    return {s: float(v) for s, v in zip(_box_sites(B, d), flipped.reshape(-1))}


# ----------------------------------------------------------------------------
# Parseval sums and second moments


def _grid_mean(fn, d: int, rtol: float, M0: int = 64) -> float:
    """Mean of a smooth periodic integrand over the torus, doubling the grid to ``rtol``."""
    M = M0
    prev = fn(M)
    while True:
        M *= 2
        if _too_big(M, d):
            raise NoConvergence(f"grid quadrature did not reach rtol {rtol}")
        cur = fn(M)
        if abs(cur - prev) <= rtol * abs(cur):
            return cur
        prev = cur


def parseval_sum(law: OffspringLaw, t: float, rtol: float = 1e-8) -> float:
    """``sum_z p_z(t)^2 = int exp(-2 (lam - Re mu_hat(u)) t) du``."""
    if t < 0:
        raise ValueError("t must be non-negative")
    if t == 0:
        return 1.0
    return _grid_mean(lambda M: float(np.mean(np.exp(-2.0 * _decay_rate(law, M).real * t))),
                      law.dimension, rtol)


def second_moment_M(law: OffspringLaw, u, v, t: float) -> complex:
    """``E[M_u(t) M_v(t)]`` in closed form.

    ``1 + E[phi_hat(u) phi_hat(v)] (exp(a t) - 1)/a`` with
    ``a = mu_hat(u+v) - mu_hat(u) - mu_hat(v)``; the integral is ``t`` when ``|a| < 1e-12``.
    """
    u = np.atleast_1d(np.asarray(u, dtype=float))
    v = np.atleast_1d(np.asarray(v, dtype=float))
    a = mu_hat(law, u + v) - mu_hat(law, u) - mu_hat(law, v)
    integral = t if abs(a) < 1e-12 else (np.exp(a * t) - 1.0) / a
    return complex(1.0 + phi_hat_product_mean(law, u, v) * integral)


def net_second_moment(law: OffspringLaw) -> float:
    """``E|phi_hat'(0)|^2``: ``E||phi||^2`` in stay mode, ``E[(||phi|| - 1)^2]`` in death mode."""
    zero = np.zeros(law.dimension)
    return float(phi_hat_product_mean(law, zero, zero).real)


def w_second_moment(law: OffspringLaw) -> float:
    """``E[W^2]`` for the limit of the normalised population martingale."""
    return 1.0 + net_second_moment(law) / law.lam


def variance_constant(law: OffspringLaw, p: float) -> float:
    """``C = p E[W^2] - p^2``, the leading constant of ``Var[exp(-lam t) Y_0(t)]``."""
    if not 0 < p <= 1:
        raise ValueError("p must lie in (0, 1]")
    return p * w_second_moment(law) - p * p


def variance_prediction(law: OffspringLaw, p: float, t: float) -> float:
    """Leading-order ``C sum_z p_z(t)^2`` (the lower-order remainder is not modelled)."""
    return variance_constant(law, p) * parseval_sum(law, t)


def variance_exact(law: OffspringLaw, p: float, t: float, rtol: float = 1e-8) -> float:
    """Exact ``Var[exp(-lam t) Y_0(t)]`` for the monochromatic p-Bernoulli process.

    Sums second moments of independent single-ball processes by Parseval:
    ``p int exp(-2 g t) (1 + E|phi_hat(u)|^2 int_0^t exp(a x) dx) du - p^2 sum p_z^2``
    with ``g = lam - Re mu_hat(u)`` and ``a = lam - 2 Re mu_hat(u)``.
    """
    lam = law.lam
    d = law.dimension

    def mean_sq(M):
        pts = _grid(d, M).reshape(-1, d)
        re = mu_hat(law, pts).real
        g = lam - re
        a = lam - 2.0 * re
        phi2 = phi_hat_product_mean(law, pts, -pts).real
        # exp(-2 g t) * (exp(a t) - 1) / a, arranged to avoid overflow
        with np.errstate(divide="ignore", invalid="ignore", over="ignore"):
            pos = np.exp(-lam * t) * -np.expm1(-a * t) / a
            neg = np.exp(-2.0 * g * t) * np.expm1(a * t) / a
        tail = np.where(a > 0, pos, neg)
        tail = np.where(np.abs(a) < 1e-12, t * np.exp(-lam * t), tail)
        return float(np.mean(np.exp(-2.0 * g * t) + phi2 * tail))

    second = _grid_mean(mean_sq, d, rtol)
    return p * second - p * p * parseval_sum(law, t, rtol)


# ----------------------------------------------------------------------------
# S(t), CLT parameters and tail bounds


def _support_radius(zeta: Mapping) -> int:
    return max((max(abs(int(x)) for x in np.atleast_1d(s)) for s, v in zeta.items() if v), default=0)


def conditional_mean_S(law: OffspringLaw, zeta: Mapping, t: float, table: PzTable | None = None) -> float:
    """``S(t) = sum_z p_z(t) zeta_z`` for a finite signed configuration ``zeta``."""
    need = _support_radius(zeta)
    if table is None:
        table = pz_table(law, t, need)
    elif table.radius < need:
        raise CoverageGap(f"configuration reaches {need}, table radius {table.radius}")
    return float(sum(table[s] * v for s, v in zeta.items() if v))


def clt_params(law: OffspringLaw, t: float) -> tuple[float, float]:
    """Gaussian parameters of ``S(t)`` under symmetric +-1 colouring: ``(0, sum_z p_z(t)^2)``."""
    return 0.0, parseval_sum(law, t)


def tail_bound(law: OffspringLaw, r: int, T: float, table: PzTable | None = None, window: bool = False) -> float:
    """``2 exp(lam T) sum_{|z|_inf > r} p_z(T)`` plus the table's wrap-error padding.

    Bounds the probability that balls started outside ``B(0, r)`` affect the
    origin at time ``T``. With ``window=True`` the event is "at any time in
    ``[0, T]``", which in death mode costs an extra factor ``exp(T)``
    (a ball present at the origin survives until ``T`` with probability
    at least ``exp(-T)``).
    """
    if table is None:
        table = pz_table(law, T, r + 1, tol=TAIL_TOL)
    elif table.radius <= r:
        raise CoverageGap(f"table radius {table.radius} does not exceed r={r}")
    if abs(table.t - T) > 1e-12:
        raise ValueError("table time does not match T")
    return _tail_from_rings(law, table, window)[int(r)]


def _tail_from_rings(law: OffspringLaw, table: PzTable, window: bool) -> np.ndarray:
    # periodized values dominate the true ones, so the in-box aliasing (at most
    # wrap_error per site) is the only correction to the periodized outside sum
    n_inside = (2 * np.arange(table.radius + 1) + 1) ** table.d
    pad = n_inside * table.wrap_error
    tail = table.tail + pad
    # far out the FFT tail sits on a round-off floor; the exponential-moment
    # bound is rigorous there and much smaller
    tail = np.minimum(tail, chernoff_tail(law, table.t, np.arange(table.radius + 1)))
    # the tail cannot grow with r; enforce it against round-off
    tail = np.minimum.accumulate(tail)
    factor = 2.0 * math.exp(law.lam * table.t)
    if window and law.mode == "death":
        factor *= math.exp(table.t)
    return factor * tail


def chernoff_tail(law: OffspringLaw, t: float, r) -> np.ndarray:
    """Exponential-moment bound on ``sum_{|z|_inf > r} p_z(t)``, vectorised over ``r``.

    Uses ``sum_z p_z(t) exp(theta.z) = exp(t (sum_y mu'_y exp(-theta.y) - lam))``
    and a union bound over the ``2d`` half-spaces ``+-z_k >= r + 1``.
    """
    r = np.atleast_1d(np.asarray(r, dtype=float))
    net = law.net_mean()
    offs = np.array(list(net.keys()), dtype=float).reshape(-1, law.dimension)
    w = np.array(list(net.values()), dtype=float)
    out = np.zeros_like(r)
    for k in range(law.dimension):
        for sgn in (1.0, -1.0):
            y = sgn * offs[:, k]
            for i, ri in enumerate(r):
                def log_bound(theta):
                    return -theta * (ri + 1) + t * (float(np.dot(w, np.exp(-theta * y))) - law.lam)
                res = optimize.minimize_scalar(log_bound, bounds=(0.0, 60.0), method="bounded")
                out[i] += math.exp(min(res.fun, 0.0))
    return np.minimum(out, 1.0)


def choose_radius(law: OffspringLaw, T: float, epsilon: float, window: bool = False, r_max: int = 4096) -> int:
    """Smallest ``r`` whose tail bound at horizon ``T`` is at most ``epsilon``."""
    r_try = 16
    while True:
        table = pz_table(law, T, r_try, tol=TAIL_TOL)
        bounds = _tail_from_rings(law, table, window)[:-1]
        hit = np.flatnonzero(bounds <= epsilon)
        if hit.size:
            return int(hit[0])
        if r_try >= r_max:
            raise NoConvergence(f"no radius <= {r_max} certifies epsilon={epsilon}")
        r_try = min(2 * r_try, r_max)


# ----------------------------------------------------------------------------
# scaling exponents and the predictions bundle


def scaling_exponent(series: Sequence[tuple[float, float]], level: float = 0.95) -> tuple[float, float]:
    """Least-squares slope of ``log value`` against ``log t`` and its confidence half-width."""
    pts = sorted((float(t), float(v)) for t, v in series)
    if len(pts) < 5:
        raise BadSpan("need at least 5 points")
    ts = np.array([p[0] for p in pts])
    vs = np.array([p[1] for p in pts])
    if ts[0] <= 0 or np.any(vs <= 0):
        raise BadSpan("times and values must be positive")
    if ts[-1] / ts[0] < 10.0 * (1 - 1e-12):
        raise BadSpan("series must span at least one decade in t")
    fit = stats.linregress(np.log(ts), np.log(vs))
    half = float(fit.stderr) * float(stats.t.ppf(0.5 + level / 2, len(ts) - 2))
    return float(fit.slope), half


@dataclass(frozen=True)
class Predictions:
    lam: float
    C: float
    parseval: float
    sup_pz: float
    var_S: float
    tail_bound: float

    def to_dict(self) -> dict:
        return {"lambda": self.lam, "C": self.C, "parseval": self.parseval,
                "sup_pz": self.sup_pz, "var_S": self.var_S, "tail_bound": self.tail_bound}

    def to_json(self, path=None) -> str:
        text = json.dumps(self.to_dict(), indent=2)
        if path is not None:
            _atomic_write(path, text + "\n")
        return text


def predictions(law: OffspringLaw, p: float, t: float, r: int, T: float) -> Predictions:
    """Bundle of the deterministic predictions for a p-Bernoulli start."""
    table = pz_table(law, t, 0)
    return Predictions(
        lam=law.lam,
        C=variance_constant(law, p),
        parseval=parseval_sum(law, t),
        sup_pz=table.sup,
        var_S=4.0 * p * (1.0 - p) * parseval_sum(law, t),
        tail_bound=tail_bound(law, r, T),
    )


def _atomic_write(path, text: str) -> None:
    path = Path(path)
    tmp = path.with_name(path.name + ".tmp")
    tmp.write_text(text)
    tmp.replace(path)
