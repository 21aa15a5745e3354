"""Compiled event loop for the particle system.

One call simulates one replica to extinction, horizon, or the population
cap, recording counts at the requested snapshot times.  Event selection is
two-stage: a Fenwick tree over types weighted by ``counts[x] * a(x)`` picks
the acting type in O(log k), then one uniform decides creation vs move and a
binary search over the per-type cumulative jump table picks the target.

The RNG is numba's per-thread MT19937 seeded at kernel entry, so a replica
is a pure function of its seed no matter which thread runs it.
"""

import numpy as np
from numba import njit

# Rebuild the weight tree from scratch this often to wash out float drift.
_RESYNC_EVENTS = 1 << 20


@njit(cache=True, nogil=True)
def _fenwick_build(w):
    k = w.size
    tree = np.zeros(k + 1)
    for i in range(1, k + 1):
        tree[i] += w[i - 1]
        j = i + (i & (-i))
        if j <= k:
            tree[j] += tree[i]
    return tree


@njit(cache=True, nogil=True)
def _fenwick_add(tree, leaf, delta):
    j = leaf + 1
    k = tree.size - 1
    while j <= k:
        tree[j] += delta
        j += j & (-j)


@njit(cache=True, nogil=True)
def _fenwick_pick(tree, u):
    """Smallest 0-based leaf whose prefix sum exceeds u."""
    k = tree.size - 1
    bit = 1
    while (bit << 1) <= k:
        bit <<= 1
    pos = 0
    rem = u
    while bit:
        nxt = pos + bit
        if nxt <= k and tree[nxt] < rem:
            pos = nxt
            rem -= tree[nxt]
        bit >>= 1
    if pos >= k:
        pos = k - 1
    return pos


@njit(cache=True, nogil=True)
def run_events(
    counts,
    a,
    p_create,
    row_ptr,
    targets,
    cumprob,
    horizon,
    snap_times,
    cap,
    seed,
):
    """Simulate one replica in place; ``counts`` is modified.

    Returns (snap_counts, snap_events, t_final, events, censored, cap_time)
    where ``events`` stacks (moves, absorptions, creations) and snapshots
    hold the state after the last event at or before each snapshot time.
    """
    np.random.seed(seed)
    k = a.size
    n_snap = snap_times.size
    snap_counts = np.zeros((n_snap, k), dtype=np.int64)
    snap_events = np.zeros((n_snap, 3), dtype=np.int64)

    w = counts.astype(np.float64) * a
    tree = _fenwick_build(w)
    total_rate = w.sum()
    total = counts.sum()
    t = 0.0
    moves = np.int64(0)
    absorbs = np.int64(0)
    creates = np.int64(0)
    censored = False
    cap_time = np.inf
    snap_idx = 0
    since_resync = 0

    while True:
        if total <= 0 or t >= horizon or censored:
            break
        if since_resync >= _RESYNC_EVENTS:
            w = counts.astype(np.float64) * a
            tree = _fenwick_build(w)
            total_rate = w.sum()
            since_resync = 0
        if total_rate <= 0.0:
            break
        dt = np.random.exponential(1.0 / total_rate)
        t_next = t + dt
        while snap_idx < n_snap and snap_times[snap_idx] < t_next:
            for i in range(k):
                snap_counts[snap_idx, i] = counts[i]
            snap_events[snap_idx, 0] = moves
            snap_events[snap_idx, 1] = absorbs
            snap_events[snap_idx, 2] = creates
            snap_idx += 1
        if t_next > horizon:
            t = horizon
            break
        t = t_next
        since_resync += 1

        u = np.random.random() * total_rate
        x = _fenwick_pick(tree, u)
        if counts[x] <= 0:
            # float drift pointed at an empty type: resync and redraw
            w = counts.astype(np.float64) * a
            tree = _fenwick_build(w)
            total_rate = w.sum()
            since_resync = 0
            continue
        if np.random.random() < p_create[x]:
            counts[0] += 1
            _fenwick_add(tree, 0, a[0])
            total_rate += a[0]
            total += 1
            creates += 1
            if cap > 0 and total > cap:
                censored = True
                cap_time = t
        else:
            lo = row_ptr[x]
            hi = row_ptr[x + 1]
            u2 = np.random.random()
            while lo < hi - 1:
                mid = (lo + hi) // 2
                if cumprob[mid] < u2:
                    lo = mid
                else:
                    hi = mid
            if cumprob[lo] < u2:
                lo = hi
            y = targets[lo]
            counts[x] -= 1
            _fenwick_add(tree, x, -a[x])
            total_rate -= a[x]
            if y < 0:
                total -= 1
                absorbs += 1
            else:
                counts[y] += 1
                _fenwick_add(tree, y, a[y])
                total_rate += a[y]
                moves += 1

    while snap_idx < n_snap:
        for i in range(k):
            snap_counts[snap_idx, i] = counts[i]
        snap_events[snap_idx, 0] = moves
        snap_events[snap_idx, 1] = absorbs
        snap_events[snap_idx, 2] = creates
        snap_idx += 1

    events = np.empty(3, dtype=np.int64)
    events[0] = moves
    events[1] = absorbs
    events[2] = creates
    return snap_counts, snap_events, t, events, censored, cap_time
