"""Lattice states backed by a growable dense window.

The infinite lattice is represented by a window ``[-h, h]^d`` that is enlarged
whenever a ball lands within ``reach`` of its border, so no ball ever leaves the
window and there is no wrap-around. The public view is a sparse mapping
``site -> count`` with zero entries omitted.
"""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import _kernels as K

Site = tuple[int, ...]


class EngineError(RuntimeError):
    pass


class Overflow(EngineError):
    pass


class Extinct(EngineError):
    pass


class Budget(EngineError):
    pass


class _Window:
    """Geometry of a ``(2h+1)^d`` window; flat index is row-major."""

    def __init__(self, d: int, half: int, reach: int):
        self.d = d
        self.half = half
        self.reach = max(reach, 1)
        self.side = 2 * half + 1
        self.size = self.side**d
        self.strides = np.array([self.side ** (d - 1 - k) for k in range(d)], dtype=np.int64)
        self._near = None

    def index(self, site: Site) -> int:
        if len(site) != self.d:
            raise ValueError(f"site {site} has wrong dimension")
        if any(abs(x) > self.half for x in site):
            raise KeyError(site)
        return int(sum((x + self.half) * s for x, s in zip(site, self.strides)))

    def contains(self, site: Site) -> bool:
        return all(abs(x) <= self.half for x in site)

    def coords(self, idx: np.ndarray) -> np.ndarray:
        idx = np.asarray(idx, dtype=np.int64)
        out = np.empty(idx.shape + (self.d,), dtype=np.int64)
        rem = idx.copy()
        for k in range(self.d):
            out[..., k], rem = np.divmod(rem, self.strides[k])
        return out - self.half

    def delta(self, offset: Site) -> int:
        return int(sum(o * s for o, s in zip(offset, self.strides)))

    @property
    def near_border(self) -> np.ndarray:
        if self._near is None:
            c = self.coords(np.arange(self.size))
            self._near = (np.abs(c).max(axis=-1) > self.half - self.reach).astype(np.uint8)
        return self._near


def _half_for(sites, reach: int, pad: int = 8) -> int:
    extent = max((max(abs(x) for x in s) for s in sites), default=0)
    return extent + 2 * max(reach, 1) + pad


def _compiled_law(law, window: _Window):
    cum = law.cumulative().astype(np.float64)
    cum[-1] = np.inf
    starts = [0]
    deltas, counts = [], []
    for _, cfg in law.atoms:
        for off, k in cfg.sorted_entries():
            deltas.append(window.delta(off))
            counts.append(k)
        starts.append(len(deltas))
    return (cum, np.array(starts, dtype=np.int64), np.array(deltas, dtype=np.int64),
            np.array(counts, dtype=np.int64))


class LatticeState:
    """Signed counts (``annihilating``) or non-negative counts (``monochromatic``)."""

    def __init__(self, d: int, mode: str = "annihilating", counts: dict | None = None, reach: int = 1):
        if mode not in ("annihilating", "monochromatic"):
            raise ValueError(f"unknown mode {mode!r}")
        self.d = d
        self.mode = mode
        counts = {tuple(int(x) for x in k): int(v) for k, v in (counts or {}).items() if v}
        if mode == "monochromatic" and any(v < 0 for v in counts.values()):
            raise ValueError("monochromatic counts must be non-negative")
        self.window = _Window(d, _half_for(counts, reach), reach)
        self.arr = np.zeros(self.window.size, dtype=np.int64)
        for s, v in counts.items():
            self.arr[self.window.index(s)] = v
        self.fen = np.zeros_like(self.arr)
        K.fenwick_build(np.abs(self.arr), self.fen)
        self.total_balls = int(np.abs(self.arr).sum())

    @property
    def counts(self) -> dict[Site, int]:
        nz = np.flatnonzero(self.arr)
        coords = self.window.coords(nz)
        return {tuple(int(x) for x in c): int(self.arr[i]) for c, i in zip(coords, nz)}

    def __getitem__(self, site) -> int:
        site = tuple(site)
        if not self.window.contains(site):
            return 0
        return int(self.arr[self.window.index(site)])

    def values_at(self, sites) -> np.ndarray:
        return np.array([self[s] for s in sites], dtype=np.int64)

    def check(self):
        """Bookkeeping invariants; raises AssertionError on failure."""
        assert self.total_balls == int(np.abs(self.arr).sum())
        if self.mode == "monochromatic":
            assert (self.arr >= 0).all()
        ref = np.zeros_like(self.fen)
        K.fenwick_build(np.abs(self.arr), ref)
        assert np.array_equal(ref, self.fen)

    def ensure_reach(self, reach: int):
        if reach > self.window.reach:
            self._regrow(max(self.window.half, 0), reach)

    def grow(self):
        self._regrow(self.window.half * 2, self.window.reach)

    def _regrow(self, half: int, reach: int):
        old = self.window
        cur = self.counts
        half = max(half, _half_for(cur, reach))
        self.window = _Window(self.d, half, reach)
        self.arr = np.zeros(self.window.size, dtype=np.int64)
        for s, v in cur.items():
            self.arr[self.window.index(s)] = v
        self.fen = np.zeros_like(self.arr)
        K.fenwick_build(np.abs(self.arr), self.fen)
        del old

    def copy(self) -> "LatticeState":
        new = LatticeState(self.d, self.mode, {}, self.window.reach)
        new.window = self.window
        new.arr = self.arr.copy()
        new.fen = self.fen.copy()
        new.total_balls = self.total_balls
        return new


class TriState:
    """Red, blue and purple counts of the conservative process."""

    def __init__(self, d: int, red=None, blue=None, purple=None, reach: int = 1):
        self.d = d
        maps = [{tuple(k): int(v) for k, v in (m or {}).items() if v} for m in (red, blue, purple)]
        for m in maps:
            if any(v < 0 for v in m.values()):
                raise ValueError("colour counts must be non-negative")
        sites = set().union(*maps)
        self.window = _Window(d, _half_for(sites, reach), reach)
        self.rgb = np.zeros((3, self.window.size), dtype=np.int64)
        for c, m in enumerate(maps):
            for s, v in m.items():
                self.rgb[c, self.window.index(s)] = v
        if np.any(np.minimum(self.rgb[0], self.rgb[1]) != 0):
            raise ValueError("red and blue may not share a site")
        self.shadow = self.rgb[0] - self.rgb[1]
        self.fen = np.zeros(self.window.size, dtype=np.int64)
        K.fenwick_build(self.rgb.sum(axis=0), self.fen)
        self.total_balls = int(self.rgb.sum())

    @classmethod
    def from_signed(cls, state: LatticeState) -> "TriState":
        c = state.counts
        return cls(state.d, {s: v for s, v in c.items() if v > 0},
                   {s: -v for s, v in c.items() if v < 0}, None, state.window.reach)

    def _view(self, c) -> dict[Site, int]:
        nz = np.flatnonzero(self.rgb[c])
        coords = self.window.coords(nz)
        return {tuple(int(x) for x in q): int(self.rgb[c, i]) for q, i in zip(coords, nz)}

    @property
    def red(self):
        return self._view(0)

    @property
    def blue(self):
        return self._view(1)

    @property
    def purple(self):
        return self._view(2)

    def signed(self) -> dict[Site, int]:
        z = self.rgb[0] - self.rgb[1]
        nz = np.flatnonzero(z)
        coords = self.window.coords(nz)
        return {tuple(int(x) for x in q): int(z[i]) for q, i in zip(coords, nz)}

    def at(self, site) -> tuple[int, int, int]:
        site = tuple(site)
        if not self.window.contains(site):
            return (0, 0, 0)
        i = self.window.index(site)
        return tuple(int(v) for v in self.rgb[:, i])

    def check(self):
        assert self.total_balls == int(self.rgb.sum())
        assert (np.minimum(self.rgb[0], self.rgb[1]) == 0).all()
        ref = np.zeros_like(self.fen)
        K.fenwick_build(self.rgb.sum(axis=0), ref)
        assert np.array_equal(ref, self.fen)

    def ensure_reach(self, reach: int):
        if reach > self.window.reach:
            self._regrow(self.window.half, reach)

    def grow(self):
        self._regrow(self.window.half * 2, self.window.reach)

    def _regrow(self, half: int, reach: int):
        maps = [self._view(c) for c in range(3)]
        nz = np.flatnonzero(self.shadow)
        shadow = {tuple(int(x) for x in q): int(self.shadow[i])
                  for q, i in zip(self.window.coords(nz), nz)}
        sites = set().union(*maps)
        half = max(half, _half_for(sites, reach))
        self.window = _Window(self.d, half, reach)
        self.rgb = np.zeros((3, self.window.size), dtype=np.int64)
        for c, m in enumerate(maps):
            for s, v in m.items():
                self.rgb[c, self.window.index(s)] = v
        self.shadow = np.zeros(self.window.size, dtype=np.int64)
        for s, v in shadow.items():
            self.shadow[self.window.index(s)] = v
        self.fen = np.zeros(self.window.size, dtype=np.int64)
        K.fenwick_build(self.rgb.sum(axis=0), self.fen)


@dataclass
class SimClock:
    """Simulation time, event count and the counter-based stream position."""

    key: int
    time: float = 0.0
    event_count: int = 0
    counter: int = 0

    @property
    def nb_key(self):
        return np.uint64(self.key & ((1 << 64) - 1))


@dataclass(frozen=True)
class TrustRegion:
    init_radius: int
    horizon: float
    epsilon: float


@dataclass(frozen=True)
class EventRecord:
    time: float
    site: Site
    colour: int
    atom: int
    total_balls: int
