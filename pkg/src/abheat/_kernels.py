"""JIT-compiled inner loops for the particle dynamics."""

from __future__ import annotations

import numpy as np
from numba import njit

MOVE = 0
ANNIHILATE = 1

# slots of the int64 ``counters`` array shared with Python
C_EVENTS = 0
C_ANNIHILATIONS = 1
C_VIOLATIONS = 2
C_ABS_MASS = 3
C_SIGNED_MASS = 4
C_RECORDED = 5
N_COUNTERS = 6


@njit(cache=True)
def build_site_lists(pos, n_sites):
    """Doubly linked lists of particle indices per (species, site)."""
    n_species, n = pos.shape
    head = np.full((n_species, n_sites), -1, dtype=np.int64)
    nxt = np.full((n_species, n), -1, dtype=np.int64)
    prv = np.full((n_species, n), -1, dtype=np.int64)
    for s in range(n_species):
        for i in range(n - 1, -1, -1):
            x = pos[s, i]
            h = head[s, x]
            nxt[s, i] = h
            if h >= 0:
                prv[s, h] = i
            head[s, x] = i
    return head, nxt, prv


@njit(cache=True, inline="always")
def _randint(rng, m):
    # floor(U m) with a 53-bit uniform; much cheaper than Generator.integers
    k = int(rng.random() * m)
    return k if k < m else m - 1


@njit(cache=True, inline="always")
def _relocate(s, i, new_site, pos, head, nxt, prv):
    old = pos[s, i]
    if old == new_site:
        return
    a = prv[s, i]
    b = nxt[s, i]
    if a >= 0:
        nxt[s, a] = b
    else:
        head[s, old] = b
    if b >= 0:
        prv[s, b] = a
    h = head[s, new_site]
    nxt[s, i] = h
    prv[s, i] = -1
    if h >= 0:
        prv[s, h] = i
    head[s, new_site] = i
    pos[s, i] = new_site


@njit(cache=True)
def advance(t, t_stop, max_events, rng, eta, pos, head, nxt, prv,
            indptr, indices, cumprob, hinv, hinv_max, uniform,
            counters, rec_t, rec_i, record):
    """Run exact event-driven dynamics until ``t_stop`` or ``max_events``.

    Proposals arrive at rate ``2 N hinv_max``; a proposal by a particle at
    ``x`` is accepted with probability ``hinv[x] / hinv_max`` (always, when
    holding times are uniform). Returns ``(t, status)`` with status 0 when
    ``t_stop`` was reached, 1 when ``max_events`` events were applied and 2
    when the event record buffer filled up.
    """
    n = pos.shape[1]
    total = 2.0 * n * hinv_max
    scale = 1.0 / total
    n_done = 0
    cap = rec_t.shape[0]
    touched = np.empty(4, dtype=np.int64)
    while True:
        if n_done >= max_events:
            return t, 1
        if record and counters[C_RECORDED] >= cap:
            return t, 2
        dt = rng.exponential(scale)
        if t + dt > t_stop:
            return t_stop, 0
        t += dt
        k = _randint(rng, 2 * n)
        s = 0 if k < n else 1
        i = k - s * n
        x = pos[s, i]
        if not uniform:
            if rng.random() * hinv_max >= hinv[x]:
                continue
        r = rng.random()
        j = indptr[x]
        last = indptr[x + 1] - 1
        while j < last and r >= cumprob[j]:
            j += 1
        y = indices[j]
        sign = 1 if s == 0 else -1
        o = 1 - s

        if eta[y] * sign < 0:
            # offspring sites drawn from the pre-event configuration
            u = pos[s, _randint(rng, n)]
            v = pos[o, _randint(rng, n)]
            m = head[o, y]
            nt = 0
            for z in (x, y, u, v):
                dup = False
                for q in range(nt):
                    if touched[q] == z:
                        dup = True
                if not dup:
                    touched[nt] = z
                    nt += 1
            before_abs = 0
            before_sum = 0
            for q in range(nt):
                before_abs += abs(eta[touched[q]])
                before_sum += eta[touched[q]]
            _relocate(s, i, u, pos, head, nxt, prv)
            _relocate(o, m, v, pos, head, nxt, prv)
            eta[x] -= sign
            eta[y] += sign
            eta[u] += sign
            eta[v] -= sign
            after_abs = 0
            after_sum = 0
            for q in range(nt):
                after_abs += abs(eta[touched[q]])
                after_sum += eta[touched[q]]
            counters[C_ANNIHILATIONS] += 1
            kind = ANNIHILATE
        else:
            before_abs = abs(eta[x]) + abs(eta[y])
            before_sum = eta[x] + eta[y]
            _relocate(s, i, y, pos, head, nxt, prv)
            eta[x] -= sign
            eta[y] += sign
            after_abs = abs(eta[x]) + abs(eta[y])
            after_sum = eta[x] + eta[y]
            u = -1
            v = -1
            kind = MOVE

        counters[C_ABS_MASS] += after_abs - before_abs
        counters[C_SIGNED_MASS] += after_sum - before_sum
        # in-loop conservation: sum eta+ = sum eta- = N
        if counters[C_ABS_MASS] != 2 * n or counters[C_SIGNED_MASS] != 0:
            counters[C_VIOLATIONS] += 1
        counters[C_EVENTS] += 1
        n_done += 1

        if record:
            q = counters[C_RECORDED]
            rec_t[q] = t
            rec_i[q, 0] = kind
            rec_i[q, 1] = s
            rec_i[q, 2] = x
            rec_i[q, 3] = y
            rec_i[q, 4] = u
            rec_i[q, 5] = v
            counters[C_RECORDED] = q + 1


@njit(cache=True)
def free_walkers(start, t_end, n_walkers, rng, indptr, indices, cumprob, hinv):
    """Final sites of independent walkers run for time ``t_end`` from ``start``."""
    out = np.empty(n_walkers, dtype=np.int64)
    for w in range(n_walkers):
        x = start
        t = rng.exponential(1.0 / hinv[x])
        while t <= t_end:
            r = rng.random()
            j = indptr[x]
            last = indptr[x + 1] - 1
            while j < last and r >= cumprob[j]:
                j += 1
            x = indices[j]
            t += rng.exponential(1.0 / hinv[x])
        out[w] = x
    return out
