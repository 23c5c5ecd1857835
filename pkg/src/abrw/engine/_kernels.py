"""numba event loops for the aggregate (count-based) engine.

State lives in a dense window around the origin; a Fenwick tree over per-cell
ball counts gives O(log n) uniform ball selection. Kernels are resumable: they
return a status code and leave every piece of state in the passed arrays.
"""
import numba as nb
import numpy as np

from ..rng import nb_bits, nb_uniform

DONE = 0
GROW = 1
BUDGET = 2
EXTINCT = 3
OVERFLOW = 4
STREAM_FULL = 5

LIMIT = np.int64(1) << np.int64(62)
# below this total a 53-bit uniform times the total picks every ball with relative bias < 2^-13
FLOAT_EXACT = np.int64(1) << np.int64(40)

# iscal slots
I_TOTAL = 0
I_EVENTS = 1
I_COUNTER = 2
I_PROBE = 3
I_LAST_SIGN = 4
I_CHANGES = 5
I_STREAM_LEN = 6
I_LAST_SITE = 7
I_LAST_COLOUR = 8
I_LAST_ATOM = 9
I_VIOLATIONS = 10
I_WATCH_VAL = 11
N_ISCAL = 12

# fscal slots
F_TIME = 0
F_ONSET = 1
N_FSCAL = 2


@nb.njit(cache=True)
def fenwick_build(weights, fen):
    n = weights.shape[0]
    for i in range(n):
        fen[i] = weights[i]
    for i in range(1, n + 1):
        j = i + (i & -i)
        if j <= n:
            fen[j - 1] += fen[i - 1]


@nb.njit(cache=True, inline="always")
def fenwick_add(fen, i, delta):
    n = fen.shape[0]
    i += 1
    while i <= n:
        fen[i - 1] += delta
        i += i & -i


@nb.njit(cache=True, inline="always")
def fenwick_find(fen, r):
    """Smallest index i with prefix(i) > r; returns (i, r - prefix(i-1))."""
    n = fen.shape[0]
    step = 1
    while step * 2 <= n:
        step *= 2
    pos = 0
    while step > 0:
        nxt = pos + step
        if nxt <= n and fen[nxt - 1] <= r:
            pos = nxt
            r -= fen[nxt - 1]
        step //= 2
    return pos, r


@nb.njit(cache=True, inline="always")
def _draw_index(key, ctr, total):
    """Uniform integer in [0, total)."""
    if total < FLOAT_EXACT:
        r = np.int64(nb_uniform(key, ctr) * total)
        return min(r, total - 1)
    return np.int64(nb_bits(key, ctr) % np.uint64(total))


@nb.njit(cache=True, inline="always")
def _pick_atom(cum, u):
    n = cum.shape[0]
    for a in range(n - 1):
        if u < cum[a]:
            return a
    return n - 1


@nb.njit(cache=True, inline="always")
def _sign(v):
    if v > 0:
        return 1
    if v < 0:
        return -1
    return 0


@nb.njit(cache=True, inline="always")
def _watch_update(v, prev, t, iscal, fscal, change_times):
    s = _sign(v)
    if s != 0:
        last = iscal[I_LAST_SIGN]
        if last != 0 and s != last:
            c = iscal[I_CHANGES]
            if c < change_times.shape[0]:
                change_times[c] = t
            iscal[I_CHANGES] = c + 1
        iscal[I_LAST_SIGN] = s
    if prev <= 0 and v > 0:
        fscal[F_ONSET] = t
    iscal[I_WATCH_VAL] = v


@nb.njit(cache=True, inline="always")
def _top_step(n):
    step = 1
    while step * 2 <= n:
        step *= 2
    return step


@nb.njit(cache=True, inline="always")
def _find(fen, r, top):
    n = fen.shape[0]
    pos = 0
    step = top
    while step > 0:
        nxt = pos + step
        if nxt <= n and fen[nxt - 1] <= r:
            pos = nxt
            r -= fen[nxt - 1]
        step >>= 1
    return pos, r


@nb.njit(cache=True, nogil=True)
def run_signed(counts, fen, near_border, key, cum, atom_start, ent_delta, ent_count,
               death, horizon, budget, probe_times, probe_sites, probe_vals, probe_total,
               watch, change_times, stream_t, stream_v, iscal, fscal, max_events):
    """Annihilating / monochromatic dynamics on signed counts.

    Scalars are kept in locals and written back to ``iscal``/``fscal`` on exit.
    """
    n_probe = probe_times.shape[0]
    n_sites = probe_sites.shape[0]
    top = _top_step(fen.shape[0])
    total = iscal[I_TOTAL]
    n_events = iscal[I_EVENTS]
    ctr = np.uint64(iscal[I_COUNTER])
    pi = iscal[I_PROBE]
    stream_len = iscal[I_STREAM_LEN]
    t = fscal[F_TIME]
    next_probe = probe_times[pi] if pi < n_probe else np.inf
    events_here = 0
    status = DONE
    site = iscal[I_LAST_SITE]
    sigma = iscal[I_LAST_COLOUR]
    a = iscal[I_LAST_ATOM]
    while True:
        if total == 0:
            while pi < n_probe and probe_times[pi] <= horizon:
                for s in range(n_sites):
                    probe_vals[pi, s] = counts[probe_sites[s]]
                probe_total[pi] = 0
                pi += 1
            t = horizon
            status = EXTINCT if death else DONE
            break
        if events_here >= max_events:
            break
        if n_events >= budget:
            status = BUDGET
            break
        if watch >= 0 and stream_t.shape[0] > 0 and stream_len >= stream_t.shape[0]:
            status = STREAM_FULL
            break
        u = nb_uniform(key, ctr)
        tnew = t - np.log1p(-u) / total
        if tnew >= next_probe:
            while pi < n_probe and probe_times[pi] <= tnew and probe_times[pi] <= horizon:
                for s in range(n_sites):
                    probe_vals[pi, s] = counts[probe_sites[s]]
                probe_total[pi] = total
                pi += 1
            next_probe = probe_times[pi] if pi < n_probe else np.inf
        if tnew >= horizon:
            t = horizon
            ctr += np.uint64(1)
            break
        r = _draw_index(key, ctr + np.uint64(1), total)
        site, _ = _find(fen, r, top)
        a = _pick_atom(cum, nb_uniform(key, ctr + np.uint64(2)))
        ctr += np.uint64(3)
        c0 = counts[site]
        sigma = 1 if c0 > 0 else -1
        grow = False
        touched_watch = site == watch
        watch_prev = counts[watch] if watch >= 0 else 0
        if death:
            counts[site] = c0 - sigma
            fenwick_add(fen, site, -1)
            total -= 1
        overflow = False
        for e in range(atom_start[a], atom_start[a + 1]):
            j = site + ent_delta[e]
            old = counts[j]
            new = old + sigma * ent_count[e]
            if new > LIMIT or new < -LIMIT:
                overflow = True
                break
            counts[j] = new
            dw = abs(new) - abs(old)
            if dw != 0:
                fenwick_add(fen, j, dw)
                total += dw
            if near_border[j] and new != 0:
                grow = True
            if j == watch:
                touched_watch = True
        if overflow:
            status = OVERFLOW
            break
        n_events += 1
        t = tnew
        events_here += 1
        if touched_watch and watch >= 0:
            v = counts[watch]
            _watch_update(v, watch_prev, tnew, iscal, fscal, change_times)
            if stream_t.shape[0] > 0:
                stream_t[stream_len] = tnew
                stream_v[stream_len] = v
                stream_len += 1
        if grow:
            status = GROW
            break
    iscal[I_TOTAL] = total
    iscal[I_EVENTS] = n_events
    iscal[I_COUNTER] = np.int64(ctr)
    iscal[I_PROBE] = pi
    iscal[I_STREAM_LEN] = stream_len
    iscal[I_LAST_SITE] = site
    iscal[I_LAST_COLOUR] = sigma
    iscal[I_LAST_ATOM] = a
    fscal[F_TIME] = t
    return status


@nb.njit(cache=True, inline="always")
def _tri_arrive(red, blue, purple, j, colour, k):
    """``k`` balls of ``colour`` (1 red, -1 blue, 0 purple) arrive at ``j``; returns weight change."""
    if colour == 0:
        purple[j] += k
        return k
    if colour > 0:
        m = min(k, blue[j])
        blue[j] -= m
        purple[j] += m
        red[j] += k - m
    else:
        m = min(k, red[j])
        red[j] -= m
        purple[j] += m
        blue[j] += k - m
    return k - m


@nb.njit(cache=True, nogil=True)
def run_tri(red, blue, purple, shadow, fen, near_border, key, cum, atom_start, ent_delta,
            ent_count, death, horizon, budget, probe_times, probe_sites, probe_vals,
            probe_total, watch, change_times, iscal, fscal, check_identity, max_events):
    """Conservative (merge) dynamics. ``shadow`` evolves by the annihilating rule
    on red/blue events only and is compared against ``red - blue`` after each event."""
    n_probe = probe_times.shape[0]
    n_sites = probe_sites.shape[0]
    events_here = 0
    while True:
        total = iscal[I_TOTAL]
        t = fscal[F_TIME]
        if total == 0:
            while iscal[I_PROBE] < n_probe and probe_times[iscal[I_PROBE]] <= horizon:
                k = iscal[I_PROBE]
                for s in range(n_sites):
                    q = probe_sites[s]
                    probe_vals[k, s, 0] = red[q]
                    probe_vals[k, s, 1] = blue[q]
                    probe_vals[k, s, 2] = purple[q]
                probe_total[k] = 0
                iscal[I_PROBE] = k + 1
            fscal[F_TIME] = horizon
            if death:
                return EXTINCT
            return DONE
        if events_here >= max_events:
            return DONE
        if iscal[I_EVENTS] >= budget:
            return BUDGET
        ctr = np.uint64(iscal[I_COUNTER])
        u = nb_uniform(key, ctr)
        tnew = t - np.log1p(-u) / total
        while iscal[I_PROBE] < n_probe and probe_times[iscal[I_PROBE]] <= tnew \
                and probe_times[iscal[I_PROBE]] <= horizon:
            k = iscal[I_PROBE]
            for s in range(n_sites):
                q = probe_sites[s]
                probe_vals[k, s, 0] = red[q]
                probe_vals[k, s, 1] = blue[q]
                probe_vals[k, s, 2] = purple[q]
            probe_total[k] = total
            iscal[I_PROBE] = k + 1
        if tnew >= horizon:
            fscal[F_TIME] = horizon
            iscal[I_COUNTER] += 1
            return DONE
        r = _draw_index(key, ctr + np.uint64(1), total)
        site, rr = fenwick_find(fen, r)
        a = _pick_atom(cum, nb_uniform(key, ctr + np.uint64(2)))
        iscal[I_COUNTER] += 3
        if rr < red[site]:
            colour = 1
        elif rr < red[site] + blue[site]:
            colour = -1
        else:
            colour = 0
        grow = False
        watch_prev = red[watch] - blue[watch] if watch >= 0 else 0
        touched_watch = False
        if death:
            if colour > 0:
                red[site] -= 1
            elif colour < 0:
                blue[site] -= 1
            else:
                purple[site] -= 1
            fenwick_add(fen, site, -1)
            total -= 1
            if check_identity and colour != 0:
                shadow[site] -= colour
            if site == watch:
                touched_watch = True
        for e in range(atom_start[a], atom_start[a + 1]):
            j = site + ent_delta[e]
            k = ent_count[e]
            if red[j] + blue[j] + purple[j] + k > LIMIT:
                iscal[I_TOTAL] = total
                return OVERFLOW
            dw = _tri_arrive(red, blue, purple, j, colour, k)
            if dw != 0:
                fenwick_add(fen, j, dw)
                total += dw
            if check_identity and colour != 0:
                shadow[j] += colour * k
            if near_border[j]:
                grow = True
            if j == watch:
                touched_watch = True
        if check_identity:
            bad = False
            if shadow[site] != red[site] - blue[site] or min(red[site], blue[site]) != 0:
                bad = True
            for e in range(atom_start[a], atom_start[a + 1]):
                j = site + ent_delta[e]
                if shadow[j] != red[j] - blue[j] or min(red[j], blue[j]) != 0:
                    bad = True
            if bad:
                iscal[I_VIOLATIONS] += 1
        iscal[I_TOTAL] = total
        iscal[I_EVENTS] += 1
        iscal[I_LAST_SITE] = site
        iscal[I_LAST_COLOUR] = colour
        iscal[I_LAST_ATOM] = a
        fscal[F_TIME] = tnew
        events_here += 1
        if touched_watch:
            _watch_update(red[watch] - blue[watch], watch_prev, tnew, iscal, fscal, change_times)
        if grow:
            return GROW
