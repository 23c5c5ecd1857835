"""Event-driven simulation of the annihilating, monochromatic and conservative processes."""
from __future__ import annotations

import itertools
from dataclasses import dataclass, field

import numpy as np

from .. import rng as _rng
from . import _kernels as K
from .state import (
    Budget,
    EventRecord,
    Extinct,
    LatticeState,
    Overflow,
    SimClock,
    TriState,
    _compiled_law,
)

DEFAULT_BUDGET = 10**10


def box_sites(d: int, radius: int):
    """Sites of ``[-r, r]^d`` in lexicographic order."""
    rng_ = range(-radius, radius + 1)
    return list(itertools.product(rng_, repeat=d))


def init_bernoulli(p: float, radius: int, d: int = 1, variant: str = "two_type",
                   rng=None, reach: int = 1) -> LatticeState:
    """p-Bernoulli initial data restricted to ``[-r, r]^d``.

    ``rng`` is a :class:`~abrw.rng.Stream` (consumed one uniform per site, in
    lexicographic site order) or an integer key.
    """
    if not 0.0 <= p <= 1.0:
        raise ValueError("p must lie in [0, 1]")
    if radius < 0:
        raise ValueError("radius must be >= 0")
    if rng is None:
        rng = _rng.Stream(_rng.DEFAULT_SEED)
    elif isinstance(rng, int):
        rng = _rng.Stream(rng)
    sites = box_sites(d, radius)
    u = _rng.uniforms(rng.key, rng.counter, len(sites))
    rng.counter += len(sites)
    red = u < p
    if variant == "two_type":
        vals = np.where(red, 1, -1)
        mode = "annihilating"
    elif variant == "monochromatic":
        vals = red.astype(np.int64)
        mode = "monochromatic"
    else:
        raise ValueError(f"unknown variant {variant!r}")
    return LatticeState(d, mode, {s: int(v) for s, v in zip(sites, vals) if v}, reach)


@dataclass
class RunFragment:
    """Observables collected by :func:`run_until`."""

    probe_times: np.ndarray
    probe_sites: list
    values: np.ndarray  # (n_times, n_sites); signed counts, or (.., 3) red/blue/purple
    totals: np.ndarray
    extinct: bool = False
    events: int = 0
    watch: tuple | None = None
    colour_changes: int = 0
    change_times: np.ndarray = field(default_factory=lambda: np.zeros(0))
    red_onset: float = float("inf")
    watch_value: int = 0
    last_sign: int = 0
    stream_times: np.ndarray = field(default_factory=lambda: np.zeros(0))
    stream_values: np.ndarray = field(default_factory=lambda: np.zeros(0, dtype=np.int64))
    identity_violations: int = 0

    def value(self, t_index: int, site) -> int:
        return self.values[t_index, self.probe_sites.index(tuple(site))]


def _prepare(state, law, probe_sites, watch):
    if law.dimension != state.d:
        raise ValueError("law and state dimensions differ")
    state.ensure_reach(law.reach)
    need = [tuple(s) for s in probe_sites] + ([tuple(watch)] if watch is not None else [])
    while need and not all(state.window.contains(s) and
                           max(abs(x) for x in s) <= state.window.half - state.window.reach
                           for s in need):
        state.grow()


def _init_scalars(clock, total, watch_val, carry=None):
    iscal = np.zeros(K.N_ISCAL, dtype=np.int64)
    fscal = np.zeros(K.N_FSCAL, dtype=np.float64)
    iscal[K.I_TOTAL] = total
    iscal[K.I_EVENTS] = clock.event_count
    iscal[K.I_COUNTER] = clock.counter
    iscal[K.I_LAST_SIGN] = int(np.sign(watch_val))
    iscal[K.I_WATCH_VAL] = watch_val
    fscal[K.F_TIME] = clock.time
    fscal[K.F_ONSET] = clock.time if watch_val > 0 else np.inf
    if carry is not None:
        if carry.last_sign:
            iscal[K.I_LAST_SIGN] = carry.last_sign
        if watch_val > 0:
            fscal[K.F_ONSET] = carry.red_onset
    return iscal, fscal


def _raise_status(status, clock):
    if status == K.BUDGET:
        raise Budget(f"event budget exhausted after {clock.event_count} events at t={clock.time:.6g}")
    if status == K.OVERFLOW:
        raise Overflow(f"site count would exceed 2^62 at t={clock.time:.6g}")


def run_until(state: LatticeState, law, clock: SimClock, horizon: float, probe_times=(),
              probe_sites=((0,),), watch=None, record_stream: bool = False,
              budget: int | None = None, max_changes: int = 4096,
              carry: RunFragment | None = None) -> RunFragment:
    """Advance ``state`` to ``horizon``.

    Probes read the state at each sample time after all events strictly before
    it. ``watch`` names one site whose colour changes (last-nonzero-sign rule)
    and red onset time are tracked at every event touching it. Passing the
    previous fragment as ``carry`` continues that watch bookkeeping (last
    colour, change count and times, red onset) across successive calls.
    """
    if carry is not None and carry.watch != (tuple(watch) if watch is not None else None):
        raise ValueError("carry fragment watches a different site")
    probe_times = np.asarray(sorted(probe_times), dtype=np.float64)
    if probe_times.size and probe_times[-1] > horizon:
        raise ValueError("probe times must not exceed the horizon")
    probe_sites = [tuple(s) for s in probe_sites]
    _prepare(state, law, probe_sites, watch)
    budget = DEFAULT_BUDGET if budget is None else budget
    vals = np.zeros((probe_times.size, len(probe_sites)), dtype=np.int64)
    totals = np.zeros(probe_times.size, dtype=np.int64)
    change_times = np.zeros(max_changes, dtype=np.float64)
    stream_cap = 1024 if (record_stream and watch is not None) else 0
    stream_t = np.zeros(stream_cap, dtype=np.float64)
    stream_v = np.zeros(stream_cap, dtype=np.int64)
    watch_val = state[watch] if watch is not None else 0
    iscal, fscal = _init_scalars(clock, state.total_balls, watch_val, carry)
    death = law.mode == "death"
    while True:
        w = state.window
        compiled = _compiled_law(law, w)
        sites_idx = np.array([w.index(s) for s in probe_sites], dtype=np.int64)
        widx = w.index(watch) if watch is not None else -1
        status = K.run_signed(state.arr, state.fen, w.near_border, clock.nb_key, *compiled, death,
                              float(horizon), budget, probe_times, sites_idx, vals, totals, widx,
                              change_times, stream_t, stream_v, iscal, fscal, np.int64(2**62))
        clock.time = float(fscal[K.F_TIME])
        clock.event_count = int(iscal[K.I_EVENTS])
        clock.counter = int(iscal[K.I_COUNTER])
        state.total_balls = int(iscal[K.I_TOTAL])
        if status == K.GROW:
            state.grow()
            continue
        if status == K.STREAM_FULL:
            stream_t = np.concatenate([stream_t, np.zeros_like(stream_t)])
            stream_v = np.concatenate([stream_v, np.zeros_like(stream_v)])
            continue
        _raise_status(status, clock)
        break
    n_changes = int(iscal[K.I_CHANGES])
    m = int(iscal[K.I_STREAM_LEN])
    changes = change_times[:min(n_changes, max_changes)].copy()
    if carry is not None:
        n_changes += carry.colour_changes
        changes = np.concatenate([carry.change_times, changes])
    return RunFragment(
        probe_times=probe_times, probe_sites=probe_sites, values=vals, totals=totals,
        extinct=status == K.EXTINCT, events=clock.event_count,
        watch=tuple(watch) if watch is not None else None,
        colour_changes=n_changes, change_times=changes,
        red_onset=float(fscal[K.F_ONSET]), watch_value=int(iscal[K.I_WATCH_VAL]),
        last_sign=int(iscal[K.I_LAST_SIGN]),
        stream_times=stream_t[:m].copy(), stream_values=stream_v[:m].copy(),
    )


def step(state, law, clock: SimClock) -> EventRecord:
    """Apply exactly one event: a uniformly chosen ball rings and places one offspring draw."""
    if state.total_balls == 0:
        raise Extinct("no balls left")
    if isinstance(state, TriState):
        _, iscal, site, *_ = _tri_loop(state, law, clock, np.inf, (), [], None, True, None,
                                       max_events=1)
        return EventRecord(time=clock.time, site=tuple(int(x) for x in site),
                           colour=int(iscal[K.I_LAST_COLOUR]), atom=int(iscal[K.I_LAST_ATOM]),
                           total_balls=state.total_balls)
    _prepare(state, law, [], None)
    iscal, fscal = _init_scalars(clock, state.total_balls, 0)
    w = state.window
    status = K.run_signed(state.arr, state.fen, w.near_border, clock.nb_key,
                          *_compiled_law(law, w), law.mode == "death", np.inf, DEFAULT_BUDGET,
                          np.zeros(0), np.zeros(0, dtype=np.int64), np.zeros((0, 0), dtype=np.int64),
                          np.zeros(0, dtype=np.int64), -1, np.zeros(0), np.zeros(0),
                          np.zeros(0, dtype=np.int64), iscal, fscal, np.int64(1))
    clock.time = float(fscal[K.F_TIME])
    clock.event_count = int(iscal[K.I_EVENTS])
    clock.counter = int(iscal[K.I_COUNTER])
    state.total_balls = int(iscal[K.I_TOTAL])
    _raise_status(status, clock)
    site = tuple(int(x) for x in w.coords(int(iscal[K.I_LAST_SITE])))
    if status == K.GROW:
        state.grow()
    return EventRecord(time=clock.time, site=site, colour=int(iscal[K.I_LAST_COLOUR]),
                       atom=int(iscal[K.I_LAST_ATOM]), total_balls=state.total_balls)


def _tri_loop(state: TriState, law, clock, horizon, probe_times, probe_sites, watch,
              check_identity, budget, max_events=2**62, max_changes=4096):
    _prepare(state, law, probe_sites, watch)
    budget = DEFAULT_BUDGET if budget is None else budget
    probe_times = np.asarray(probe_times, dtype=np.float64)
    vals = np.zeros((probe_times.size, len(probe_sites), 3), dtype=np.int64)
    totals = np.zeros(probe_times.size, dtype=np.int64)
    change_times = np.zeros(max_changes, dtype=np.float64)
    if watch is not None:
        r, b, _ = state.at(watch)
        watch_val = r - b
    else:
        watch_val = 0
    iscal, fscal = _init_scalars(clock, state.total_balls, watch_val)
    last_site = None
    while True:
        w = state.window
        compiled = _compiled_law(law, w)
        sites_idx = np.array([w.index(s) for s in probe_sites], dtype=np.int64)
        widx = w.index(watch) if watch is not None else -1
        status = K.run_tri(state.rgb[0], state.rgb[1], state.rgb[2], state.shadow, state.fen,
                           w.near_border, clock.nb_key, *compiled, law.mode == "death",
                           float(horizon), budget, probe_times, sites_idx, vals, totals, widx,
                           change_times, iscal, fscal, bool(check_identity), np.int64(max_events))
        clock.time = float(fscal[K.F_TIME])
        clock.event_count = int(iscal[K.I_EVENTS])
        clock.counter = int(iscal[K.I_COUNTER])
        state.total_balls = int(iscal[K.I_TOTAL])
        last_site = w.coords(int(iscal[K.I_LAST_SITE]))
        if status == K.GROW:
            state.grow()
            if max_events == 1:
                break
            continue
        _raise_status(status, clock)
        break
    return (status, iscal, last_site, vals, totals, fscal, change_times)


@dataclass
class ConservativeFragment:
    probe_times: np.ndarray
    probe_sites: list
    red: np.ndarray
    blue: np.ndarray
    purple: np.ndarray
    totals: np.ndarray
    identity_violations: int
    events: int
    extinct: bool = False
    colour_changes: int = 0
    red_onset: float = float("inf")

    @property
    def z(self) -> np.ndarray:
        return self.red - self.blue

    @property
    def red_plus_purple(self) -> np.ndarray:
        return self.red + self.purple

    @property
    def blue_plus_purple(self) -> np.ndarray:
        return self.blue + self.purple


def run_conservative(initial, law, clock: SimClock, horizon: float, probe_times=(),
                     probe_sites=((0,),), watch=None, check_identity: bool = True,
                     budget: int | None = None) -> ConservativeFragment:
    """Merge dynamics: red meeting blue forms purple; purple never interacts.

    With ``check_identity`` the annihilating process driven by the same red/blue
    rings is carried alongside and compared with ``red - blue`` after every event.
    """
    state = initial if isinstance(initial, TriState) else TriState.from_signed(initial)
    probe_times = np.asarray(sorted(probe_times), dtype=np.float64)
    if probe_times.size and probe_times[-1] > horizon:
        raise ValueError("probe times must not exceed the horizon")
    probe_sites = [tuple(s) for s in probe_sites]
    status, iscal, _, vals, totals, fscal, _ = _tri_loop(
        state, law, clock, horizon, probe_times, probe_sites, watch, check_identity, budget)
    return ConservativeFragment(
        probe_times=probe_times, probe_sites=probe_sites, red=vals[..., 0], blue=vals[..., 1],
        purple=vals[..., 2], totals=totals, identity_violations=int(iscal[K.I_VIOLATIONS]),
        events=clock.event_count, extinct=status == K.EXTINCT,
        colour_changes=int(iscal[K.I_CHANGES]), red_onset=float(fscal[K.F_ONSET]),
    )


def colour_change_count(values, times=None):
    """Colour changes in a stream of signed counts at one site.

    A change is counted when a nonzero sign differs from the last nonzero sign;
    zero interludes do not reset the colour. Returns ``(count, change_times)``
    (change positions are indices when ``times`` is omitted).
    """
    last = 0
    changes = []
    for i, v in enumerate(values):
        s = int(v > 0) - int(v < 0)
        if s == 0:
            continue
        if last != 0 and s != last:
            changes.append(times[i] if times is not None else i)
        last = s
    return len(changes), changes
