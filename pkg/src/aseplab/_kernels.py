"""Hot Monte Carlo kernels: composite sampling of the Poisson attempt clocks.

The per-directed-edge clocks superpose into one composite stream whose
events pick a uniformly random edge pair and then a direction (right with
probability p).  That composite is exactly equal in law to the independent
per-edge construction, jointly over all coupled layers, which is why the
couplings below read the same event stream.

Draw protocol per replica, all from one counter-based generator:
  1. initial occupancies (one uniform per site, as in sample_config),
  2. the event count over [0, t]: Poisson(n_pairs * (p+q) * t), drawn by
     the caller (state at a fixed time does not depend on event times),
  3. per event: an exact uniform edge index (power-of-two rejection on the
     53-bit uniform), then a direction coin when q > 0, then whatever the
     event type needs.

Trackers follow a virtual second-class particle riding on a base layer:
the tracked site holds a particle in base+delta_Q but is vacant in the
base itself.  Rank counters record how the tracked discrepancy moves
through a reference layer's second-class particles.
"""
from __future__ import annotations

import numpy as np
from numba import njit

TRK_PLAIN = 0
TRK_RANK_LOWEST = 1  # Q has lowest priority: rank falls when base particles with vacant ref pass it
TRK_RANK_OVER = 2  # Q overtakes ref-only particles: rank moves with Q's own jumps onto them

ERR_ORDER = 2  # layer or label ordering violated (internal consistency)
FLAG_BOUNDARY = 1


@njit(cache=True, inline="always")
def _pick(rng, m, mask):
    # exact uniform integer in [0, m): top 53 bits masked down, rejection
    while True:
        j = int(rng.random() * 9007199254740992.0) & mask
        if j < m:
            return j


@njit(cache=True, inline="always")
def _pow2_mask(m):
    k = 1
    while k < m:
        k <<= 1
    return k - 1


@njit(cache=True)
def evolve_layers(
    layers,  # uint8 (L, N), mutated
    act_lo,  # int64 (L,) active array-index bounds, inclusive
    act_hi,
    trk_base,  # int64 (T,) base layer per tracker
    trk_ref,  # int64 (T,) reference layer (rank modes) or -1
    trk_mode,  # int64 (T,)
    trk_q,  # int64 (T,), mutated: tracked positions (array indices)
    trk_rank,  # int64 (T,), mutated
    ring,  # bool
    p,
    q,
    n_events,
    flag_zone,  # int64: watched sites per end (0 disables)
    rng,
):
    """Drive n_events composite clock events; returns status flags."""
    n_layers, n = layers.shape
    n_pairs = n if ring else n - 1
    mask = _pow2_mask(n_pairs)
    n_trk = trk_q.shape[0]
    pre_i = np.empty(n_layers, dtype=np.uint8)
    pre_j = np.empty(n_layers, dtype=np.uint8)
    flags = 0
    q_zero = q <= 0.0
    for _ in range(n_events):
        i = _pick(rng, n_pairs, mask)
        j = i + 1 if i + 1 < n else 0  # ring wrap; segments never pick i = n-1
        right = True if q_zero else (rng.random() < p)
        for l in range(n_layers):
            pre_i[l] = layers[l, i]
            pre_j[l] = layers[l, j]
        for l in range(n_layers):
            if not ring and (i < act_lo[l] or i + 1 > act_hi[l]):
                continue
            if right:
                if pre_i[l] == 1 and pre_j[l] == 0:
                    layers[l, i] = 0
                    layers[l, j] = 1
                    if flag_zone > 0 and (j < flag_zone or j >= n - flag_zone):
                        flags |= FLAG_BOUNDARY
            else:
                if pre_j[l] == 1 and pre_i[l] == 0:
                    layers[l, j] = 0
                    layers[l, i] = 1
                    if flag_zone > 0 and (i < flag_zone or i >= n - flag_zone):
                        flags |= FLAG_BOUNDARY
        for tr in range(n_trk):
            b = trk_base[tr]
            if not ring and (i < act_lo[b] or i + 1 > act_hi[b]):
                continue
            qp = trk_q[tr]
            if qp != i and qp != j:
                continue
            mode = trk_mode[tr]
            ref = trk_ref[tr]
            if right:
                if qp == i:
                    if pre_j[b] == 0:  # tracked particle hops into a base vacancy
                        trk_q[tr] = j
                        if mode == TRK_RANK_OVER and pre_j[ref] == 1:
                            trk_rank[tr] += 1
                elif pre_i[b] == 1:  # base particle displaces the tracked one
                    trk_q[tr] = i
                    if mode == TRK_RANK_LOWEST and pre_i[ref] == 0:
                        trk_rank[tr] -= 1
            else:
                if qp == j:
                    if pre_i[b] == 0:
                        trk_q[tr] = i
                        if mode == TRK_RANK_OVER and pre_i[ref] == 1:
                            trk_rank[tr] -= 1
                elif pre_j[b] == 1:
                    trk_q[tr] = j
                    if mode == TRK_RANK_LOWEST and pre_j[ref] == 0:
                        trk_rank[tr] += 1
    return flags


@njit(cache=True)
def evolve_concavity(
    xi,  # uint8 (N,) sparser layer, mutated
    zeta,  # uint8 (N,) denser layer, mutated
    xpos,  # int64 (n_x,) positions (array indices) of zeta-xi discrepancies, mutated
    site2x,  # int64 (N,) slot at site or -1, mutated
    labels,  # int64 (2,) = [a, b], mutated
    p,
    q,
    n_events,
    flag_zone,
    rng,
):
    """Basic coupling of (xi, zeta) plus the two-label walk on the discrepancies.

    Main events drive both layers through the shared clocks; auxiliary
    events realize the label rates through four slots (label a right/left,
    label b right/left), each slot serving the directed edge currently at
    its label with a fast coin (rate p-q) and a slow coin (rate q).  With
    a == b the b slots are ghosts, which leaves exactly one fast+slow
    stream per relevant directed edge.  Returns (flags, err).
    """
    n = xi.shape[0]
    n_x = xpos.shape[0]
    n_pairs = n - 1
    mask = _pow2_mask(n_pairs)
    slot_mask = 3
    lam_main = float(n_pairs) * (p + q)
    lam_aux = 4.0 * p
    p_main = lam_main / (lam_main + lam_aux)
    de_split = (p - q) / p  # P(fast coin | aux slot)
    flags = 0
    err = 0
    q_zero = q <= 0.0
    for _ in range(n_events):
        if rng.random() < p_main:
            i = _pick(rng, n_pairs, mask)
            j = i + 1
            right = True if q_zero else (rng.random() < p)
            zi = zeta[i]
            zj = zeta[j]
            xii = xi[i]
            xij = xi[j]
            if right:
                z_move = zi == 1 and zj == 0
                x_move = xii == 1 and xij == 0
                if z_move:
                    zeta[i] = 0
                    zeta[j] = 1
                    if flag_zone > 0 and j >= n - flag_zone:
                        flags |= FLAG_BOUNDARY
                if x_move:
                    xi[i] = 0
                    xi[j] = 1
                if z_move and not x_move:  # discrepancy at i advances
                    s = site2x[i]
                    xpos[s] = j
                    site2x[j] = s
                    site2x[i] = -1
                elif x_move and not z_move:  # xi particle takes over the discrepancy at j
                    s = site2x[j]
                    xpos[s] = i
                    site2x[i] = s
                    site2x[j] = -1
            else:
                z_move = zj == 1 and zi == 0
                x_move = xij == 1 and xii == 0
                if z_move:
                    zeta[j] = 0
                    zeta[i] = 1
                    if flag_zone > 0 and i < flag_zone:
                        flags |= FLAG_BOUNDARY
                if x_move:
                    xi[j] = 0
                    xi[i] = 1
                if z_move and not x_move:
                    s = site2x[j]
                    xpos[s] = i
                    site2x[i] = s
                    site2x[j] = -1
                elif x_move and not z_move:
                    s = site2x[i]
                    xpos[s] = j
                    site2x[j] = s
                    site2x[i] = -1
        else:
            slot = _pick(rng, 4, slot_mask)
            a = labels[0]
            b = labels[1]
            same = a == b
            if same and slot >= 2:
                continue  # ghost slots keep the composite rate constant
            fast = True if q_zero else (rng.random() < de_split)
            if slot == 0:  # edge (X_a -> X_a + 1)
                if a + 1 < n_x and xpos[a + 1] == xpos[a] + 1:
                    if same:
                        if fast:
                            labels[1] = b + 1
                        else:
                            labels[0] = a + 1
                            labels[1] = b + 1
                    elif not fast:
                        labels[0] = a + 1
            elif slot == 1:  # edge (X_a -> X_a - 1)
                if a - 1 >= 0 and xpos[a - 1] == xpos[a] - 1:
                    if same:
                        if fast:
                            labels[0] = a - 1
                        else:
                            labels[0] = a - 1
                            labels[1] = b - 1
                    else:
                        labels[0] = a - 1
            elif slot == 2:  # edge (X_b -> X_b + 1), a != b
                if b + 1 < n_x and xpos[b + 1] == xpos[b] + 1:
                    labels[1] = b + 1
            else:  # edge (X_b -> X_b - 1), a != b
                if b - 1 >= 0 and xpos[b - 1] == xpos[b] - 1:
                    if not fast:
                        labels[1] = b - 1
        # per-event hard checks: label order and discrepancy order
        a = labels[0]
        b = labels[1]
        if a > b or xpos[a] > xpos[b]:
            err = ERR_ORDER
            break
    return flags, err


@njit(cache=True)
def evolve_general_ring(occ, reach, p_tables, q_tables, t_end, rng):
    """Bounded-range, table-rate exclusion on a ring; returns net displacement.

    One unit-rate attempt stream per (origin, |k|, direction); acceptance
    is the table rate for the origin's local window (thinning).  Event
    times are drawn explicitly since the total attempt rate is fixed.
    """
    n = occ.shape[0]
    n_slots = n * 2 * reach
    mask = _pow2_mask(n_slots)
    lam = float(n_slots)
    width = 2 * reach + 1
    t = 0.0
    disp = 0
    while True:
        t += -np.log1p(-rng.random()) / lam
        if t > t_end:
            break
        slot = _pick(rng, n_slots, mask)
        i = slot // (2 * reach)
        rest = slot % (2 * reach)
        k = rest // 2 + 1
        d = k if rest % 2 == 0 else -k
        u = rng.random()
        w = 0
        for bit in range(width):
            w |= int(occ[(i - reach + bit) % n]) << bit
        rate = p_tables[k - 1, w] if d > 0 else q_tables[k - 1, w]
        if u >= rate:
            continue
        j = (i + d) % n
        if occ[i] == 1 and occ[j] == 0:
            occ[i] = 0
            occ[j] = 1
            disp += d
    return disp


@njit(cache=True)
def _warm(rng):
    layers = np.zeros((1, 8), dtype=np.uint8)
    layers[0, 0] = 1
    lo = np.zeros(1, dtype=np.int64)
    hi = np.full(1, 7, dtype=np.int64)
    tb = np.zeros(0, dtype=np.int64)
    evolve_layers(layers, lo, hi, tb, tb, tb, tb.copy(), tb.copy(), False, 1.0, 0.0, 4, 0, rng)
    xi = np.zeros(8, dtype=np.uint8)
    zeta = np.zeros(8, dtype=np.uint8)
    zeta[3] = 1
    xpos = np.array([3], dtype=np.int64)
    s2x = np.full(8, -1, dtype=np.int64)
    s2x[3] = 0
    labels = np.zeros(2, dtype=np.int64)
    evolve_concavity(xi, zeta, xpos, s2x, labels, 1.0, 0.0, 4, 0, rng)
    tab = np.full((1, 8), 0.5)
    evolve_general_ring(np.zeros(8, dtype=np.uint8), 1, tab, tab, 0.5, rng)


def warm_up():
    """Compile (or load cached) kernels; call before forking worker pools."""
    _warm(np.random.Generator(np.random.Philox(key=0)))
