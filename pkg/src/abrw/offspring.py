"""Offspring laws: finite-support distributions over non-negative lattice configurations.

A law is a list of atoms ``(probability, configuration)``. In *stay* mode the
parent survives each nucleation; in *death* mode it is removed and the law is
handled through the shifted configuration ``phi' = phi - delta_0``, so that all
spectral quantities below (``mu_hat``, ``phi_hat_product_mean``) refer to the
net change caused by one clock ring.
"""
from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

PROB_TOL = 1e-12

__all__ = [
    "LawError",
    "NonProbability",
    "Reducible",
    "BadMode",
    "GapNonPositive",
    "Configuration",
    "OffspringLaw",
    "MeanIntensity",
    "parse_law",
    "load_law",
    "law_to_document",
    "moment",
    "mu_hat",
    "phi_hat_product_mean",
    "check_irreducible",
    "lattice_index",
    "spectral_gap_scan",
    "sample",
    "nearest_neighbour",
    "NN1",
    "DEATH1",
]


class LawError(ValueError):
    """Base class for invalid offspring law documents."""


class NonProbability(LawError):
    pass


class Reducible(LawError):
    pass


class BadMode(LawError):
    pass


class GapNonPositive(LawError):
    pass


Offset = tuple[int, ...]


@dataclass(frozen=True)
class Configuration:
    """Finite non-negative configuration, stored as ``((offset, count), ...)``."""

    entries: tuple[tuple[Offset, int], ...] = ()

    def __post_init__(self):
        seen = set()
        for offset, count in self.entries:
            if offset in seen:
                raise LawError(f"duplicate offset {offset} in configuration")
            if int(count) < 1:
                raise LawError(f"count at {offset} must be positive, got {count}")
            seen.add(offset)

    @property
    def size(self) -> int:
        """Total number of balls ``||phi||``."""
        return sum(c for _, c in self.entries)

    def __len__(self):
        return len(self.entries)

    def __iter__(self):
        return iter(self.entries)

    def sorted_entries(self) -> tuple[tuple[Offset, int], ...]:
        return tuple(sorted(self.entries))

    def norm(self, r: int) -> float:
        """``sum_z |z|^r phi(z)`` with the Euclidean norm."""
        return float(sum(math.hypot(*o) ** r * c for o, c in self.entries))

    def fourier(self, u) -> complex:
        u = np.asarray(u, dtype=float)
        return complex(sum(c * np.exp(1j * float(np.dot(u, o))) for o, c in self.entries))


@dataclass(frozen=True)
class MeanIntensity:
    mu: dict
    lam: float


@dataclass(frozen=True)
class OffspringLaw:
    dimension: int
    atoms: tuple[tuple[float, Configuration], ...]
    mode: str = "stay"
    _cache: dict = field(default_factory=dict, compare=False, repr=False, hash=False)

    @property
    def probabilities(self) -> np.ndarray:
        return np.array([p for p, _ in self.atoms], dtype=float)

    @property
    def mean_size(self) -> float:
        """``E||phi||``."""
        return float(sum(p * c.size for p, c in self.atoms))

    @property
    def lam(self) -> float:
        """Malthusian parameter."""
        if self.mode == "death":
            return self.mean_size - 1.0
        return self.mean_size

    @property
    def support(self) -> list[Offset]:
        return sorted({o for p, c in self.atoms if p > 0 for o, _ in c.entries})

    @property
    def reach(self) -> int:
        """Largest sup-norm displacement of any offspring."""
        return max((max(abs(x) for x in o) for o in self.support), default=0)

    def mean_intensity(self) -> MeanIntensity:
        mu: dict[Offset, float] = {}
        for p, c in self.atoms:
            for o, k in c.entries:
                mu[o] = mu.get(o, 0.0) + p * k
        return MeanIntensity(mu=mu, lam=self.lam)

    def net_mean(self) -> dict[Offset, float]:
        """Mean of the net change per ring: ``mu`` (stay) or ``mu - delta_0`` (death)."""
        key = "net_mean"
        if key not in self._cache:
            mu = dict(self.mean_intensity().mu)
            if self.mode == "death":
                zero = (0,) * self.dimension
                mu[zero] = mu.get(zero, 0.0) - 1.0
            self._cache[key] = mu
        return self._cache[key]

    def cumulative(self) -> np.ndarray:
        return np.cumsum(self.probabilities)


def _as_offset(raw, d: int) -> Offset:
    off = tuple(int(x) for x in raw)
    if len(off) != d or any(float(a) != b for a, b in zip(raw, off)):
        raise LawError(f"offset {raw!r} is not an integer {d}-vector")
    return off


def _build(d: int, atoms: Sequence, mode: str) -> OffspringLaw:
    if mode not in ("stay", "death"):
        raise BadMode(f"unknown mode {mode!r}")
    if d < 1:
        raise LawError("dimension must be >= 1")
    if not atoms:
        raise NonProbability("law has no atoms")
    probs = [float(p) for p, _ in atoms]
    if any(not (0.0 < p <= 1.0) for p in probs):
        raise NonProbability(f"atom probabilities must lie in (0, 1]: {probs}")
    total = math.fsum(probs)
    if abs(total - 1.0) > PROB_TOL:
        raise NonProbability(f"probabilities sum to {total!r}, not 1")
    probs = [p / total for p in probs]
    law = OffspringLaw(d, tuple(zip(probs, (c for _, c in atoms))), mode)
    for _, c in law.atoms:
        if c.size == 0 and mode != "death":
            raise BadMode("empty offspring configuration is only allowed in death mode")
    m = law.mean_size
    if mode == "stay" and m <= 0:
        raise BadMode("stay mode requires E||phi|| > 0")
    if mode == "death" and m <= 1:
        raise BadMode(f"death mode requires E||phi|| > 1, got {m}")
    if not check_irreducible(law):
        raise Reducible(f"support {law.support} generates a proper subgroup of Z^{d}")
    return law


def parse_law(document) -> OffspringLaw:
    """Validate a law document (a JSON string or an already decoded mapping)."""
    if isinstance(document, (str, bytes)):
        try:
            document = json.loads(document)
        except json.JSONDecodeError as exc:
            raise LawError(f"malformed JSON: {exc}") from exc
    if not isinstance(document, dict):
        raise LawError("law document must be a JSON object")
    try:
        d = int(document["dimension"])
        mode = document.get("mode", "stay")
        raw_atoms = document["atoms"]
    except (KeyError, TypeError, ValueError) as exc:
        raise LawError(f"missing or invalid field: {exc}") from exc
    atoms = []
    for a in raw_atoms:
        try:
            balls = a.get("balls", [])
            entries = tuple((_as_offset(b["offset"], d), int(b["count"])) for b in balls)
            atoms.append((a["p"], Configuration(entries)))
        except (KeyError, TypeError, AttributeError) as exc:
            raise LawError(f"invalid atom {a!r}: {exc}") from exc
    return _build(d, atoms, mode)


def load_law(path) -> OffspringLaw:
    return parse_law(Path(path).read_text())


def law_to_document(law: OffspringLaw) -> dict:
    return {
        "dimension": law.dimension,
        "mode": law.mode,
        "atoms": [
            {"p": p, "balls": [{"offset": list(o), "count": k} for o, k in c.entries]}
            for p, c in law.atoms
        ],
    }


def moment(law: OffspringLaw, kind: str) -> float:
    """Exact moment of the offspring configuration.

    ``kind`` is one of ``"size1"``, ``"size2"``, ``"size3"`` (``E||phi||^r``),
    ``"m1_squared"`` (``E[m_1(phi)^2]``) or ``"m2"`` (``E[m_2(phi)]``), where
    ``m_r(phi) = sum_z |z|^r phi(z)``.
    """
    if kind.startswith("size"):
        r = int(kind[4:])
        return float(sum(p * c.size**r for p, c in law.atoms))
    if kind == "m1_squared":
        return float(sum(p * c.norm(1) ** 2 for p, c in law.atoms))
    if kind == "m2":
        return float(sum(p * c.norm(2) for p, c in law.atoms))
    raise ValueError(f"unknown moment kind {kind!r}")


def _phase(law: OffspringLaw) -> tuple[np.ndarray, np.ndarray]:
    """Offsets array (n, d) and the matching weights for ``mu_hat`` on a batch of points."""
    mu = law.net_mean()
    offs = np.array(list(mu.keys()), dtype=float).reshape(-1, law.dimension)
    w = np.array(list(mu.values()), dtype=float)
    return offs, w


def mu_hat(law: OffspringLaw, u) -> complex | np.ndarray:
    """Fourier transform of the net mean measure at ``u`` (shape ``(d,)`` or ``(..., d)``).

    Equals ``lam`` at ``u = 0`` in both modes.
    """
    u = np.asarray(u, dtype=float)
    scalar = u.ndim <= 1
    pts = u.reshape(-1, law.dimension)
    offs, w = _phase(law)
    vals = np.exp(1j * pts @ offs.T) @ w
    if scalar:
        return complex(vals[0])
    return vals.reshape(u.shape[:-1])


def _net_fourier(law: OffspringLaw, cfg: Configuration, pts: np.ndarray) -> np.ndarray:
    if cfg.entries:
        offs = np.array([o for o, _ in cfg.entries], dtype=float).reshape(-1, law.dimension)
        cnt = np.array([k for _, k in cfg.entries], dtype=float)
        vals = np.exp(1j * pts @ offs.T) @ cnt
    else:
        vals = np.zeros(len(pts), dtype=complex)
    if law.mode == "death":
        vals = vals - 1.0
    return vals


def phi_hat_product_mean(law: OffspringLaw, u, v) -> complex | np.ndarray:
    """``E[phi_hat(u) phi_hat(v)]`` over the atoms (net change in death mode)."""
    u = np.asarray(u, dtype=float)
    v = np.asarray(v, dtype=float)
    scalar = u.ndim <= 1 and v.ndim <= 1
    pu = np.broadcast_to(u, np.broadcast_shapes(u.shape, v.shape)).reshape(-1, law.dimension)
    pv = np.broadcast_to(v, np.broadcast_shapes(u.shape, v.shape)).reshape(-1, law.dimension)
    total = np.zeros(len(pu), dtype=complex)
    for p, cfg in law.atoms:
        total += p * _net_fourier(law, cfg, pu) * _net_fourier(law, cfg, pv)
    if scalar:
        return complex(total[0])
    return total.reshape(np.broadcast_shapes(u.shape, v.shape)[:-1])


def lattice_index(vectors: Iterable[Sequence[int]], d: int) -> int:
    """Index of the subgroup of ``Z^d`` generated by ``vectors`` (0 if rank < d).

    Integer row reduction to Hermite form; the index is the product of the pivots.
    """
    rows = [list(map(int, v)) for v in vectors if any(v)]
    index = 1
    col = 0
    for col in range(d):
        active = [r for r in rows if r[col] != 0]
        rest = [r for r in rows if r[col] == 0]
        if not active:
            return 0
        while len(active) > 1:
            active.sort(key=lambda r: abs(r[col]))
            piv = active[0]
            nxt = [piv]
            for r in active[1:]:
                q = r[col] // piv[col]
                red = [a - q * b for a, b in zip(r, piv)]
                (nxt if red[col] != 0 else rest).append(red)
            active = nxt
        piv = active[0]
        index *= abs(piv[col])
        rows = [r for r in rest if any(r)]
    return index


def check_irreducible(law: OffspringLaw) -> bool:
    """True iff the support offsets generate all of ``Z^d``."""
    return lattice_index(law.support, law.dimension) == 1


def _grid(d: int, M: int) -> np.ndarray:
    axis = 2 * np.pi * np.fft.fftfreq(M)  # in [-pi, pi)
    mesh = np.meshgrid(*([axis] * d), indexing="ij")
    return np.stack(mesh, axis=-1)


def spectral_gap_scan(law: OffspringLaw, M: int = 64) -> tuple[float, float]:
    """Scan ``g(u) = lam - Re mu_hat(u)`` over the uniform ``M^d`` torus grid.

    Returns ``(min g over grid points u != 0, min g(u)/|u|^2 over 0 < |u| <= 1)``.
    """
    if M < 8:
        raise ValueError("grid size must be >= 8")
    pts = _grid(law.dimension, M).reshape(-1, law.dimension)
    g = law.lam - mu_hat(law, pts).real
    r2 = np.sum(pts**2, axis=1)
    nonzero = r2 > 0
    if np.any(g[nonzero] <= 0):
        raise GapNonPositive("lam - Re mu_hat(u) <= 0 at a nonzero grid point")
    inner = nonzero & (r2 <= 1.0)
    quad = float(np.min(g[inner] / r2[inner])) if np.any(inner) else float("nan")
    return float(np.min(g[nonzero])), quad


def sample(law: OffspringLaw, uniform: float) -> Configuration:
    """Atom whose cumulative-probability cell contains ``uniform``, in document order."""
    return law.atoms[sample_index(law, uniform)][1]


def sample_index(law: OffspringLaw, uniform: float) -> int:
    cum = law.cumulative()
    i = int(np.searchsorted(cum, uniform, side="right"))
    return min(i, len(law.atoms) - 1)


def nearest_neighbour(d: int = 1) -> OffspringLaw:
    """Deterministic law putting one ball at each of the ``2d`` neighbours."""
    entries = []
    for k in range(d):
        for s in (-1, 1):
            e = [0] * d
            e[k] = s
            entries.append((tuple(e), 1))
    return _build(d, [(1.0, Configuration(tuple(entries)))], "stay")


NN1 = nearest_neighbour(1)
DEATH1 = _build(
    1,
    [(0.55, Configuration((((-1,), 1), ((1,), 1)))), (0.45, Configuration(()))],
    "death",
)
