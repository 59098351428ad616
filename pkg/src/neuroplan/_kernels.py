"""Compiled inner loops: collision tests, grid spatial index and the RRT* step.

Everything here works on plain arrays so the kernels can be cached by numba
and called without the GIL. The Python-facing wrappers live in
``geometry`` and ``smp``.
"""

import math

import numpy as np
from numba import njit

POINT = 0
RIGID = 1

# indices into the float parameter vector of a tree
F_STEP = 0
F_RADIUS_COEF = 1
F_RADIUS_CAP = 2
F_GOAL_RADIUS = 3
F_RESOLUTION = 4
F_CELL = 5
F_BEST = 6
N_FPARAMS = 7

# indices into the int meta vector of a tree
M_COUNT = 0
M_NGOAL = 1
M_NCELLS = 2
N_META = 3

_ANGLE_SCALE = math.pi / 20.0
_EPS_COST = 1e-12


# ---------------------------------------------------------------------------
# configuration and motion validity
# ---------------------------------------------------------------------------


@njit(cache=True, nogil=True)
def point_free(q, lo, hi, bounds):
    d = bounds.shape[0]
    for k in range(d):
        if q[k] < -bounds[k] or q[k] > bounds[k]:
            return False
    for i in range(lo.shape[0]):
        inside = True
        for k in range(d):
            if q[k] < lo[i, k] or q[k] > hi[i, k]:
                inside = False
                break
        if inside:
            return False
    return True


@njit(cache=True, nogil=True)
def rigid_free(q, lo, hi, bounds, half_len, half_wid, margin):
    """Oriented rectangle vs. axis-aligned boxes by separating axes.

    ``margin`` inflates every box (and shrinks the bounds) so that a motion
    sampled at a finite step can be certified conservatively.
    """
    if q[2] < -20.0 or q[2] > 20.0:
        return False
    th = q[2] * _ANGLE_SCALE
    c = math.cos(th)
    s = math.sin(th)
    ac = abs(c)
    as_ = abs(s)
    ext_x = half_len * ac + half_wid * as_
    ext_y = half_len * as_ + half_wid * ac
    if abs(q[0]) + ext_x > bounds[0] - margin or abs(q[1]) + ext_y > bounds[1] - margin:
        return False
    for i in range(lo.shape[0]):
        hx = 0.5 * (hi[i, 0] - lo[i, 0]) + margin
        hy = 0.5 * (hi[i, 1] - lo[i, 1]) + margin
        dx = q[0] - 0.5 * (hi[i, 0] + lo[i, 0])
        dy = q[1] - 0.5 * (hi[i, 1] + lo[i, 1])
        if abs(dx) > hx + ext_x:
            continue
        if abs(dy) > hy + ext_y:
            continue
        if abs(dx * c + dy * s) > half_len + hx * ac + hy * as_:
            continue
        if abs(-dx * s + dy * c) > half_wid + hx * as_ + hy * ac:
            continue
        return False
    return True


@njit(cache=True, nogil=True)
def config_free(kind, q, lo, hi, bounds, half_len, half_wid):
    if kind == POINT:
        return point_free(q, lo, hi, bounds)
    return rigid_free(q, lo, hi, bounds, half_len, half_wid, 0.0)


@njit(cache=True, nogil=True)
def _segment_hits_box(a, b, lo, hi, i):
    t0 = 0.0
    t1 = 1.0
    for k in range(a.shape[0]):
        dk = b[k] - a[k]
        if dk == 0.0:
            if a[k] < lo[i, k] or a[k] > hi[i, k]:
                return False
        else:
            ta = (lo[i, k] - a[k]) / dk
            tb = (hi[i, k] - a[k]) / dk
            if ta > tb:
                ta, tb = tb, ta
            if ta > t0:
                t0 = ta
            if tb < t1:
                t1 = tb
            if t0 > t1:
                return False
    return True


@njit(cache=True, nogil=True)
def _lex_less(a, b):
    for k in range(a.shape[0]):
        if a[k] < b[k]:
            return True
        if a[k] > b[k]:
            return False
    return False


@njit(cache=True, nogil=True)
def motion_free(kind, a, b, resolution, lo, hi, bounds, half_len, half_wid):
    # canonical endpoint order makes the test exactly symmetric
    if _lex_less(b, a):
        a, b = b, a
    d = a.shape[0]
    if kind == POINT:
        if not point_free(a, lo, hi, bounds) or not point_free(b, lo, hi, bounds):
            return False
        for i in range(lo.shape[0]):
            if _segment_hits_box(a, b, lo, hi, i):
                return False
        return True
    length = 0.0
    for k in range(d):
        length += (b[k] - a[k]) ** 2
    length = math.sqrt(length)
    if length == 0.0:
        return rigid_free(a, lo, hi, bounds, half_len, half_wid, 0.0)
    n = int(math.ceil(length / resolution))
    if n < 1:
        n = 1
    trans = math.sqrt((b[0] - a[0]) ** 2 + (b[1] - a[1]) ** 2)
    rot = abs(b[2] - a[2]) * _ANGLE_SCALE
    reach = math.sqrt(half_len * half_len + half_wid * half_wid)
    margin = (trans + rot * reach) / n
    q = np.empty(d)
    for i in range(n + 1):
        t = i / n
        for k in range(d):
            q[k] = a[k] + (b[k] - a[k]) * t
        if not rigid_free(q, lo, hi, bounds, half_len, half_wid, margin):
            return False
    return True


@njit(cache=True, nogil=True)
def batch_config_free(kind, qs, lo, hi, bounds, half_len, half_wid):
    out = np.empty(qs.shape[0], dtype=np.bool_)
    for j in range(qs.shape[0]):
        out[j] = config_free(kind, qs[j], lo, hi, bounds, half_len, half_wid)
    return out


# ---------------------------------------------------------------------------
# grid spatial index
# ---------------------------------------------------------------------------


@njit(cache=True, nogil=True)
def _cell_coord(x, k, origin, cell, ncell):
    c = int(math.floor((x - origin[k]) / cell))
    if c < 0:
        return 0
    if c >= ncell[k]:
        return ncell[k] - 1
    return c


@njit(cache=True, nogil=True)
def _cell_of(q, origin, cell, ncell):
    idx = 0
    for k in range(q.shape[0]):
        idx = idx * ncell[k] + _cell_coord(q[k], k, origin, cell, ncell)
    return idx


@njit(cache=True, nogil=True)
def _sqdist(X, i, q):
    s = 0.0
    for k in range(q.shape[0]):
        t = X[i, k] - q[k]
        s += t * t
    return s


@njit(cache=True, nogil=True)
def _visit_box(q, lo_c, hi_c, ncell, cell_head, node_next, X, out, n_out, r2):
    """Append nodes within sqrt(r2) of q from the cell box [lo_c, hi_c]."""
    d = q.shape[0]
    cur = lo_c.copy()
    while True:
        idx = 0
        for k in range(d):
            idx = idx * ncell[k] + cur[k]
        j = cell_head[idx]
        while j >= 0:
            if _sqdist(X, j, q) <= r2:
                out[n_out] = j
                n_out += 1
            j = node_next[j]
        k = d - 1
        while k >= 0:
            cur[k] += 1
            if cur[k] <= hi_c[k]:
                break
            cur[k] = lo_c[k]
            k -= 1
        if k < 0:
            break
    return n_out


@njit(cache=True, nogil=True)
def grid_near(q, r, X, cell_head, node_next, origin, cell, ncell, out):
    d = q.shape[0]
    lo_c = np.empty(d, dtype=np.int64)
    hi_c = np.empty(d, dtype=np.int64)
    for k in range(d):
        lo_c[k] = _cell_coord(q[k] - r, k, origin, cell, ncell)
        hi_c[k] = _cell_coord(q[k] + r, k, origin, cell, ncell)
    return _visit_box(q, lo_c, hi_c, ncell, cell_head, node_next, X, out, 0, r * r)


@njit(cache=True, nogil=True)
def brute_nearest(q, X, count):
    best = -1
    bd = np.inf
    for i in range(count):
        s = _sqdist(X, i, q)
        if s < bd:
            bd = s
            best = i
    return best


@njit(cache=True, nogil=True)
def grid_nearest(q, X, count, cell_head, node_next, origin, cell, ncell):
    if count <= 64:
        return brute_nearest(q, X, count)
    d = q.shape[0]
    center = np.empty(d, dtype=np.int64)
    maxring = 0
    for k in range(d):
        center[k] = _cell_coord(q[k], k, origin, cell, ncell)
        m = max(center[k], ncell[k] - 1 - center[k])
        if m > maxring:
            maxring = m
    best = -1
    bd = np.inf
    cur = np.empty(d, dtype=np.int64)
    for ring in range(maxring + 1):
        side = 2 * ring + 1
        if side**d > count:
            # sparse tree relative to the grid: a linear scan is cheaper
            return brute_nearest(q, X, count)
        # visit cells at Chebyshev cell-distance exactly `ring`
        lo_c = np.empty(d, dtype=np.int64)
        hi_c = np.empty(d, dtype=np.int64)
        for k in range(d):
            lo_c[k] = center[k] - ring
            hi_c[k] = center[k] + ring
        for k in range(d):
            cur[k] = lo_c[k]
        while True:
            on_shell = False
            valid = True
            for k in range(d):
                if cur[k] == lo_c[k] or cur[k] == hi_c[k]:
                    on_shell = True
                if cur[k] < 0 or cur[k] >= ncell[k]:
                    valid = False
            if on_shell and valid:
                idx = 0
                for k in range(d):
                    idx = idx * ncell[k] + cur[k]
                j = cell_head[idx]
                while j >= 0:
                    s = _sqdist(X, j, q)
                    if s < bd or (s == bd and j < best):
                        bd = s
                        best = j
                    j = node_next[j]
            k = d - 1
            while k >= 0:
                cur[k] += 1
                if cur[k] <= hi_c[k]:
                    break
                cur[k] = lo_c[k]
                k -= 1
            if k < 0:
                break
        # anything in a farther ring is at least ring*cell away
        if best >= 0 and math.sqrt(bd) <= ring * cell:
            break
    return best


# ---------------------------------------------------------------------------
# RRT* tree
# ---------------------------------------------------------------------------


@njit(cache=True, nogil=True)
def _add_child(p, c, child_head, sibling):
    sibling[c] = child_head[p]
    child_head[p] = c


@njit(cache=True, nogil=True)
def _remove_child(p, c, child_head, sibling):
    j = child_head[p]
    if j == c:
        child_head[p] = sibling[c]
        return
    while j >= 0:
        if sibling[j] == c:
            sibling[j] = sibling[c]
            return
        j = sibling[j]


@njit(cache=True, nogil=True)
def _propagate(root, delta, cost, child_head, sibling, stack):
    top = 0
    j = child_head[root]
    while j >= 0:
        stack[top] = j
        top += 1
        j = sibling[j]
    while top > 0:
        top -= 1
        v = stack[top]
        cost[v] -= delta
        j = child_head[v]
        while j >= 0:
            stack[top] = j
            top += 1
            j = sibling[j]


@njit(cache=True, nogil=True)
def tree_insert(q, parent_idx, c, X, parent, cost, child_head, sibling,
                cell_head, node_next, origin, ncell, meta, fparams):
    i = meta[M_COUNT]
    for k in range(q.shape[0]):
        X[i, k] = q[k]
    parent[i] = parent_idx
    cost[i] = c
    child_head[i] = -1
    sibling[i] = -1
    if parent_idx >= 0:
        _add_child(parent_idx, i, child_head, sibling)
    cell = _cell_of(q, origin, fparams[F_CELL], ncell)
    node_next[i] = cell_head[cell]
    cell_head[cell] = i
    meta[M_COUNT] = i + 1
    return i


@njit(cache=True, nogil=True)
def _refresh_best(cost, goal_nodes, meta, fparams):
    b = np.inf
    for g in range(meta[M_NGOAL]):
        c = cost[goal_nodes[g]]
        if c < b:
            b = c
    fparams[F_BEST] = b


@njit(cache=True, nogil=True)
def rrt_star_step(x_rand, X, parent, cost, child_head, sibling, cell_head, node_next,
                  goal_nodes, near_buf, stack, origin, ncell, goal, meta, fparams,
                  kind, lo, hi, bounds, half_len, half_wid):
    """One RRT* iteration. Returns the new node index or -1 on rejection."""
    count = meta[M_COUNT]
    if count >= X.shape[0]:
        return -1
    d = x_rand.shape[0]
    cell = fparams[F_CELL]
    near_i = grid_nearest(x_rand, X, count, cell_head, node_next, origin, cell, ncell)
    dist = math.sqrt(_sqdist(X, near_i, x_rand))
    if dist == 0.0:
        return -1
    step = fparams[F_STEP]
    x_new = np.empty(d)
    if dist <= step:
        for k in range(d):
            x_new[k] = x_rand[k]
    else:
        f = step / dist
        for k in range(d):
            x_new[k] = X[near_i, k] + (x_rand[k] - X[near_i, k]) * f
    res = fparams[F_RESOLUTION]
    if not motion_free(kind, X[near_i], x_new, res, lo, hi, bounds, half_len, half_wid):
        return -1

    n = count + 1.0
    r = fparams[F_RADIUS_COEF] * (math.log(n) / n) ** (1.0 / d)
    if r > fparams[F_RADIUS_CAP]:
        r = fparams[F_RADIUS_CAP]
    m = grid_near(x_new, r, X, cell_head, node_next, origin, cell, ncell, near_buf)

    # choose parent: candidates ordered by (cost through, index)
    best_p = near_i
    best_c = cost[near_i] + math.sqrt(_sqdist(X, near_i, x_new))
    if m > 0:
        cand = np.sort(near_buf[:m])
        through = np.empty(m)
        for t in range(m):
            j = cand[t]
            through[t] = cost[j] + math.sqrt(_sqdist(X, j, x_new))
        order = np.argsort(through, kind="mergesort")
        for t in range(m):
            j = cand[order[t]]
            c = through[order[t]]
            if c > best_c or (c == best_c and j >= best_p):
                break
            if motion_free(kind, X[j], x_new, res, lo, hi, bounds, half_len, half_wid):
                best_p = j
                best_c = c
                break

    i_new = tree_insert(x_new, best_p, best_c, X, parent, cost, child_head, sibling,
                        cell_head, node_next, origin, ncell, meta, fparams)

    # rewire
    for t in range(m):
        j = near_buf[t]
        if j == best_p:
            continue
        c = best_c + math.sqrt(_sqdist(X, j, x_new))
        if c < cost[j] - _EPS_COST:
            if motion_free(kind, x_new, X[j], res, lo, hi, bounds, half_len, half_wid):
                delta = cost[j] - c
                _remove_child(parent[j], j, child_head, sibling)
                parent[j] = i_new
                _add_child(i_new, j, child_head, sibling)
                cost[j] = c
                _propagate(j, delta, cost, child_head, sibling, stack)

    gd = 0.0
    for k in range(d):
        gd += (x_new[k] - goal[k]) ** 2
    if math.sqrt(gd) <= fparams[F_GOAL_RADIUS]:
        goal_nodes[meta[M_NGOAL]] = i_new
        meta[M_NGOAL] += 1
    _refresh_best(cost, goal_nodes, meta, fparams)
    return i_new


@njit(cache=True, nogil=True)
def run_samples(samples, stop_cost, history, X, parent, cost, child_head, sibling,
                cell_head, node_next, goal_nodes, near_buf, stack, origin, ncell, goal,
                meta, fparams, kind, lo, hi, bounds, half_len, half_wid):
    """Feed pre-drawn samples through rrt_star_step.

    ``history[i]`` receives the best goal cost after sample i. Stops after the
    first sample that brings the best cost to ``stop_cost`` or below and
    returns the number of samples consumed.
    """
    for i in range(samples.shape[0]):
        rrt_star_step(samples[i], X, parent, cost, child_head, sibling, cell_head,
                      node_next, goal_nodes, near_buf, stack, origin, ncell, goal, meta,
                      fparams, kind, lo, hi, bounds, half_len, half_wid)
        history[i] = fparams[F_BEST]
        if fparams[F_BEST] <= stop_cost:
            return i + 1
    return samples.shape[0]
