"""Labelled construction: every ball carries a label and its own clock.

A label is ``(origin, path)``: the initial site of the ancestor and the sequence
of child indices leading to the ball. All randomness attached to a label (ring
times and offspring draws) is a pure function of ``(seed, label, counter)``, so
processes started from different initial configurations can be run on the
*same* randomness. That coupling is what makes containment and sandwich
properties checkable exactly, event by event.

Conventions:

* ring ``k`` of a label happens ``Exp(1)`` (counter ``2k``) after ring ``k-1``
  (or after the label's birth for ``k = 0``); its offspring draw uses the
  uniform at counter ``2k + 1``;
* children are numbered ``1, 2, ...`` consecutively over all rings of the
  parent, in placement order (offsets sorted lexicographically, then the balls
  of one offset);
* an arriving ball annihilates the lexicographically smallest opposite-colour
  label at its site;
* simultaneous events in coupled runs are ordered by ``(time, label)``.
"""
from __future__ import annotations

import hashlib
import heapq
import json
from dataclasses import dataclass, field
from typing import Mapping, Sequence

from .offspring import OffspringLaw, sample_index
from .rng import derive_key, exponential, uniform

Site = tuple[int, ...]
Label = tuple[Site, tuple[int, ...]]

RED, BLUE = 1, -1
DEFAULT_BUDGET = 10**6


class LabelError(RuntimeError):
    pass


class Budget(LabelError):
    pass


class PrecondOrder(ValueError):
    pass


class OrderViolation(LabelError):
    pass


class NotFound(LabelError):
    pass


def label_to_json(label: Label) -> list:
    origin, path = label
    return [list(origin), *path]


class LabelRandomness:
    """Per-label streams derived from one seed."""

    def __init__(self, seed: int):
        self.seed = int(seed)
        self._keys: dict[Label, int] = {}

    def key(self, label: Label) -> int:
        k = self._keys.get(label)
        if k is None:
            k = derive_key("label", self.seed, label[0], label[1])
            self._keys[label] = k
        return k

    def gap(self, label: Label, ring: int) -> float:
        return exponential(self.key(label), 2 * ring)

    def draw(self, label: Label, ring: int) -> float:
        return uniform(self.key(label), 2 * ring + 1)


def validate_configuration(config, d: int | None = None) -> dict[Site, int]:
    """Normalise an initial configuration given as a mapping or as ``(site, value)`` pairs.

    Values must lie in ``{-1, 0, 1}`` and each site may appear once.
    """
    out: dict[Site, int] = {}
    pairs = config.items() if isinstance(config, Mapping) else config
    for raw, v in pairs:
        site = tuple(int(x) for x in (raw if isinstance(raw, (tuple, list)) else (raw,)))
        if d is not None and len(site) != d:
            raise ValueError(f"site {site} has wrong dimension")
        if site in out:
            raise ValueError(f"site {site} listed twice")
        if v not in (-1, 0, 1):
            raise ValueError(f"initial value {v!r} at {site} is not in {{-1, 0, 1}}")
        if v:
            out[site] = int(v)
    return out


@dataclass
class _Ball:
    site: Site
    colour: int
    ring: int
    children: int
    next_time: float


class LabelledProcess:
    """One annihilating process driven by shared label randomness."""

    def __init__(self, initial: Mapping, law: OffspringLaw, randomness: LabelRandomness,
                 budget: int = DEFAULT_BUDGET, record: bool = True):
        self.law = law
        self.rand = randomness
        self.budget = budget
        self.record = record
        self.d = law.dimension
        self.death = law.mode == "death"
        self._entries = [cfg.sorted_entries() for _, cfg in law.atoms]
        self.active: dict[int, dict[Site, set]] = {RED: {}, BLUE: {}}
        self.balls: dict[Label, _Ball] = {}
        self.heap: list[tuple[float, Label]] = []
        self.log: list[dict] = []
        self.events = 0
        self.time = 0.0
        for site, v in sorted(validate_configuration(initial, self.d).items()):
            self._add(((site), ()), site, v, 0.0)

    # -- state views -------------------------------------------------------

    def count(self, site: Site) -> int:
        return len(self.active[RED].get(site, ())) - len(self.active[BLUE].get(site, ()))

    def active_set(self, colour: int, site: Site) -> frozenset:
        return frozenset(self.active[colour].get(site, ()))

    def signed(self) -> dict[Site, int]:
        out: dict[Site, int] = {}
        for colour in (RED, BLUE):
            for site, labels in self.active[colour].items():
                if labels:
                    out[site] = colour * len(labels)
        return out

    @property
    def total_balls(self) -> int:
        return len(self.balls)

    # -- dynamics ----------------------------------------------------------

    def _add(self, label: Label, site: Site, colour: int, birth: float) -> None:
        t = birth + self.rand.gap(label, 0)
        self.balls[label] = _Ball(site, colour, 0, 0, t)
        self.active[colour].setdefault(site, set()).add(label)
        heapq.heappush(self.heap, (t, label))

    def _remove(self, label: Label) -> None:
        ball = self.balls.pop(label)
        s = self.active[ball.colour][ball.site]
        s.discard(label)
        if not s:
            del self.active[ball.colour][ball.site]

    def peek(self) -> tuple[float, Label] | None:
        """Next pending ring ``(time, label)``; stale entries of removed balls are dropped."""
        h = self.heap
        while h:
            t, label = h[0]
            ball = self.balls.get(label)
            if ball is not None and ball.next_time == t:
                return t, label
            heapq.heappop(h)
        return None

    def fire(self) -> set[Site]:
        """Process the next ring; returns the sites whose content changed."""
        t, label = heapq.heappop(self.heap)
        if self.events >= self.budget:
            raise Budget(f"event budget {self.budget} exhausted at t={t}")
        self.events += 1
        self.time = t
        ball = self.balls[label]
        parent_site, colour, k = ball.site, ball.colour, ball.ring
        atom = sample_index(self.law, self.rand.draw(label, k))
        touched = {parent_site}
        if self.death:
            self._remove(label)
        placements, annihilated = [], []
        n = ball.children
        origin, path = label
        opp = self.active[-colour]
        for off, cnt in self._entries[atom]:
            site = tuple(a + b for a, b in zip(parent_site, off))
            touched.add(site)
            for _ in range(cnt):
                n += 1
                child = (origin, path + (n,))
                if self.record:
                    placements.append([list(site), label_to_json(child)])
                targets = opp.get(site)
                if targets:
                    victim = min(targets)
                    self._remove(victim)
                    if self.record:
                        annihilated.append([label_to_json(child), label_to_json(victim)])
                else:
                    self._add(child, site, colour, t)
        if not self.death:
            ball.children = n
            ball.ring = k + 1
            ball.next_time = t + self.rand.gap(label, k + 1)
            heapq.heappush(self.heap, (ball.next_time, label))
        if self.record:
            entry = {"t": t, "label": label_to_json(label), "colour": "R" if colour == RED else "B",
                     "draw": atom, "placements": placements, "annihilated": annihilated}
            if self.death:
                entry["parent_removed"] = True
            self.log.append(entry)
        return touched

    def log_jsonl(self) -> str:
        return "".join(json.dumps(e, separators=(",", ":")) + "\n" for e in self.log)

    def log_hash(self) -> str:
        return hashlib.sha256(self.log_jsonl().encode()).hexdigest()


def _drive(procs: Sequence[LabelledProcess], horizon: float, after_group=None) -> None:
    """Advance coupled processes in global ``(time, label)`` order up to ``horizon``."""
    while True:
        heads = [p.peek() for p in procs]
        live = [h for h in heads if h is not None and h[0] < horizon]
        if not live:
            break
        key = min(live)
        touched: set[Site] = set()
        for p, h in zip(procs, heads):
            if h == key:
                touched |= p.fire()
        if after_group is not None:
            after_group(key[0], touched)
    for p in procs:
        p.time = horizon


@dataclass
class LabelledRun:
    process: LabelledProcess
    horizon: float

    @property
    def log(self) -> list[dict]:
        return self.process.log

    def signed(self) -> dict[Site, int]:
        return self.process.signed()


def run_labelled(initial: Mapping, law: OffspringLaw, horizon: float, seed: int,
                 budget: int = DEFAULT_BUDGET) -> LabelledRun:
    """Labelled dynamics from a finite configuration in ``{-1, 0, 1}`` up to ``horizon``."""
    proc = LabelledProcess(initial, law, LabelRandomness(seed), budget)
    _drive([proc], horizon)
    return LabelledRun(proc, horizon)


# ----------------------------------------------------------------------------
# coupling


@dataclass
class CoupleResult:
    lower: LabelledProcess
    upper: LabelledProcess
    violations: list[dict] = field(default_factory=list)


def _containment_failures(lo: LabelledProcess, hi: LabelledProcess, sites, t: float) -> list[dict]:
    bad = []
    for s in sites:
        if not lo.active_set(RED, s) <= hi.active_set(RED, s):
            bad.append({"t": t, "site": s, "kind": "red"})
        if not hi.active_set(BLUE, s) <= lo.active_set(BLUE, s):
            bad.append({"t": t, "site": s, "kind": "blue"})
    return bad


def _is_ordered(zeta: Mapping, zeta_prime: Mapping) -> bool:
    return all(zeta.get(s, 0) <= zeta_prime.get(s, 0) for s in set(zeta) | set(zeta_prime))


def couple(zeta: Mapping, zeta_prime: Mapping, law: OffspringLaw, horizon: float, seed: int,
           budget: int = DEFAULT_BUDGET, record: bool = True) -> CoupleResult:
    """Run ``zeta <= zeta_prime`` on shared randomness and check the active-set containments

    ``A^R_z(zeta) <= A^R_z(zeta')`` and ``A^B_z(zeta') <= A^B_z(zeta)`` after every event group.
    """
    a = validate_configuration(zeta, law.dimension)
    b = validate_configuration(zeta_prime, law.dimension)
    if not _is_ordered(a, b):
        raise PrecondOrder("initial configurations are not pointwise ordered")
    rand = LabelRandomness(seed)
    lo = LabelledProcess(a, law, rand, budget, record)
    hi = LabelledProcess(b, law, rand, budget, record)
    res = CoupleResult(lo, hi)
    res.violations += _containment_failures(lo, hi, set(a) | set(b), 0.0)

    def check(t, touched):
        res.violations.extend(_containment_failures(lo, hi, touched, t))

    _drive([lo, hi], horizon, check)
    return res


# ----------------------------------------------------------------------------
# sandwich and stabilisation


def _radius(zeta: Mapping) -> int:
    return max((max(abs(x) for x in s) for s in zeta), default=0)


def boundary_variants(zeta: Mapping, r: int, R: int, d: int) -> tuple[dict, dict, dict]:
    """``(zeta^{-,r}, zeta|_r, zeta^{+,r})`` on ``B(0, R)``: inside ``B(0, r)`` all equal ``zeta``;
    outside, -1 / 0 / +1 respectively."""
    import itertools

    base = validate_configuration(zeta, d)
    inner = {s: v for s, v in base.items() if max(abs(x) for x in s) <= r}
    minus, plus = dict(inner), dict(inner)
    for s in itertools.product(range(-R, R + 1), repeat=d):
        if max(abs(x) for x in s) > r:
            minus[s] = BLUE
            plus[s] = RED
    return minus, inner, plus


@dataclass
class SandwichResult:
    times: list[float]
    minus: list[int]
    middle: list[int]
    plus: list[int]
    processes: tuple

    @property
    def outer_agree(self) -> bool:
        return self.minus == self.plus


def sandwich(zeta: Mapping, r: int, horizon: float, seed: int, law: OffspringLaw,
             R: int | None = None, site: Site | None = None, budget: int = DEFAULT_BUDGET) -> SandwichResult:
    """Three coupled runs from ``zeta^{-,r} <= zeta|_r <= zeta^{+,r}``.

    The ±1 exterior is realised on ``B(0, R)`` only (``R`` defaults to the
    radius of ``zeta``'s domain). The signed counts are checked to be ordered
    at every touched site after every event group; any failure raises
    :class:`OrderViolation`. Returns the count trajectories at ``site``
    (default the origin), one entry per event group plus the initial value.
    """
    d = law.dimension
    site = tuple(site) if site is not None else (0,) * d
    R = _radius(zeta) if R is None else R
    if not 0 <= r <= R:
        raise ValueError("need 0 <= r <= R")
    configs = boundary_variants(zeta, r, R, d)
    rand = LabelRandomness(seed)
    procs = tuple(LabelledProcess(c, law, rand, budget, record=False) for c in configs)
    out = SandwichResult([0.0], [procs[0].count(site)], [procs[1].count(site)], [procs[2].count(site)], procs)

    def check(t, touched):
        for s in touched:
            lo, mid, hi = (p.count(s) for p in procs)
            if not lo <= mid <= hi:
                raise OrderViolation(f"ordering fails at site {s}, t={t}: {lo}, {mid}, {hi}")
        if site in touched:
            out.times.append(t)
            out.minus.append(procs[0].count(site))
            out.middle.append(procs[1].count(site))
            out.plus.append(procs[2].count(site))

    for s in set().union(*configs):
        lo, mid, hi = (p.count(s) for p in procs)
        if not lo <= mid <= hi:
            raise OrderViolation(f"initial ordering fails at {s}")
    _drive(procs, horizon, check)
    return out


def outer_agreement(zeta: Mapping, r: int, horizon: float, seed: int, law: OffspringLaw,
                    R: int | None = None, site: Site | None = None, budget: int = DEFAULT_BUDGET) -> bool:
    """Whether ``Z_site`` of ``zeta^{+,r}`` and ``zeta^{-,r}`` agree on ``[0, horizon]``."""
    d = law.dimension
    site = tuple(site) if site is not None else (0,) * d
    R = _radius(zeta) if R is None else R
    minus, _, plus = boundary_variants(zeta, r, R, d)
    rand = LabelRandomness(seed)
    procs = (LabelledProcess(minus, law, rand, budget, record=False),
             LabelledProcess(plus, law, rand, budget, record=False))
    if procs[0].count(site) != procs[1].count(site):
        return False
    state = {"agree": True}

    def check(t, touched):
        if site in touched and procs[0].count(site) != procs[1].count(site):
            state["agree"] = False

    _drive(procs, horizon, check)
    return state["agree"]


def stabilization_radius(zeta: Mapping, site: Site, horizon: float, seed: int, r_max: int,
                         law: OffspringLaw, R: int | None = None, budget: int = DEFAULT_BUDGET) -> int:
    """Smallest ``r <= r_max`` for which ``Z_site`` of ``zeta^{+-,r}`` agree on ``[0, horizon]``."""
    site = tuple(site)
    R = _radius(zeta) if R is None else R
    if r_max > R:
        raise ValueError("r_max exceeds the configuration radius")
    for r in range(max(abs(x) for x in site), r_max + 1):
        if outer_agreement(zeta, r, horizon, seed, law, R, site, budget):
            return r
    raise NotFound(f"no agreement up to r_max={r_max}")
