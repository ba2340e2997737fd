"""Hot numeric kernels with a numba path and a pure-numpy fallback.

The numba path is used when numba imports cleanly and the environment
variable ``SMTNAV_NUMBA`` is not set to ``0``.  Both paths compute the same
quantities; they may differ by floating-point reassociation only.
"""

from __future__ import annotations

import math
import os

import numpy as np

_FLAG = os.environ.get("SMTNAV_NUMBA", "1").strip().lower()

try:
    if _FLAG in ("0", "false", "no", "off"):
        raise ImportError("numba disabled by SMTNAV_NUMBA")
    from numba import njit

    HAVE_NUMBA = True
except ImportError:
    HAVE_NUMBA = False

BACKEND = "numba" if HAVE_NUMBA else "numpy"


def _helper(fn):
    # compiled helpers called from inside other compiled kernels
    return njit(cache=True)(fn) if HAVE_NUMBA else fn


# segments with at most this many queries use plain loops instead of BLAS
SMALL_QUERIES = 4


# ---------------------------------------------------------------------------
# segmented multi-head attention
#
# Rows of U are grouped into query segments (q_off), rows of K/V into key
# segments (k_off); segment b of the queries attends only to segment b of
# the keys.  Columns are split into `heads` equal slices.
# ---------------------------------------------------------------------------


def _np_seg_att_fwd(U, K, V, q_off, k_off, heads):
    dk = U.shape[1]
    dv = V.shape[1]
    hk, hv = dk // heads, dv // heads
    out = np.zeros((U.shape[0], dv))
    for b in range(len(q_off) - 1):
        q0, q1, k0, k1 = q_off[b], q_off[b + 1], k_off[b], k_off[b + 1]
        if q1 == q0:
            continue
        u = U[q0:q1].reshape(q1 - q0, heads, hk).transpose(1, 0, 2)
        k = K[k0:k1].reshape(k1 - k0, heads, hk).transpose(1, 2, 0)
        v = V[k0:k1].reshape(k1 - k0, heads, hv).transpose(1, 0, 2)
        s = u @ k
        s -= s.max(axis=2, keepdims=True)
        p = np.exp(s)
        p /= p.sum(axis=2, keepdims=True)
        out[q0:q1] = (p @ v).transpose(1, 0, 2).reshape(q1 - q0, dv)
    return out


def _np_seg_att_bwd(U, K, V, q_off, k_off, heads, dO):
    dk = U.shape[1]
    dv = V.shape[1]
    hk, hv = dk // heads, dv // heads
    dU = np.zeros_like(U)
    dK = np.zeros_like(K)
    dV = np.zeros_like(V)
    for b in range(len(q_off) - 1):
        q0, q1, k0, k1 = q_off[b], q_off[b + 1], k_off[b], k_off[b + 1]
        nq, nk = q1 - q0, k1 - k0
        if nq == 0:
            continue
        u = U[q0:q1].reshape(nq, heads, hk).transpose(1, 0, 2)
        k = K[k0:k1].reshape(nk, heads, hk).transpose(1, 0, 2)
        v = V[k0:k1].reshape(nk, heads, hv).transpose(1, 0, 2)
        g = dO[q0:q1].reshape(nq, heads, hv).transpose(1, 0, 2)
        s = u @ k.transpose(0, 2, 1)
        s -= s.max(axis=2, keepdims=True)
        p = np.exp(s)
        p /= p.sum(axis=2, keepdims=True)
        dp = g @ v.transpose(0, 2, 1)
        ds = p * (dp - (dp * p).sum(axis=2, keepdims=True))
        dU[q0:q1] = (ds @ k).transpose(1, 0, 2).reshape(nq, dk)
        dK[k0:k1] += (ds.transpose(0, 2, 1) @ u).transpose(1, 0, 2).reshape(nk, dk)
        dV[k0:k1] += (p.transpose(0, 2, 1) @ g).transpose(1, 0, 2).reshape(nk, dv)
    return dU, dK, dV


@_helper
def _nb_small_fwd(U, K, V, q0, q1, k0, k1, c0, hk, v0, hv, out):
    # explicit loops: for one or a few queries this beats per-head BLAS calls
    nk = k1 - k0
    s = np.empty(nk)
    for i in range(q0, q1):
        m = -np.inf
        for j in range(nk):
            acc = 0.0
            for c in range(hk):
                acc += U[i, c0 + c] * K[k0 + j, c0 + c]
            s[j] = acc
            if acc > m:
                m = acc
        tot = 0.0
        for j in range(nk):
            s[j] = math.exp(s[j] - m)
            tot += s[j]
        for j in range(nk):
            w = s[j] / tot
            for c in range(hv):
                out[i, v0 + c] += w * V[k0 + j, v0 + c]


def _nb_seg_att_fwd(U, K, V, q_off, k_off, heads):
    dk = U.shape[1]
    dv = V.shape[1]
    hk = dk // heads
    hv = dv // heads
    out = np.zeros((U.shape[0], dv))
    for b in range(q_off.shape[0] - 1):
        q0 = q_off[b]
        q1 = q_off[b + 1]
        k0 = k_off[b]
        k1 = k_off[b + 1]
        if q1 == q0:
            continue
        for h in range(heads):
            if q1 - q0 <= SMALL_QUERIES:
                _nb_small_fwd(U, K, V, q0, q1, k0, k1, h * hk, hk, h * hv, hv, out)
                continue
            u = np.ascontiguousarray(U[q0:q1, h * hk:(h + 1) * hk])
            kt = np.ascontiguousarray(K[k0:k1, h * hk:(h + 1) * hk].T)
            v = np.ascontiguousarray(V[k0:k1, h * hv:(h + 1) * hv])
            s = np.dot(u, kt)
            _nb_softmax_rows(s)
            out[q0:q1, h * hv:(h + 1) * hv] = np.dot(s, v)
    return out


@_helper
def _nb_softmax_rows(s):
    for i in range(s.shape[0]):
        m = s[i, 0]
        for j in range(1, s.shape[1]):
            if s[i, j] > m:
                m = s[i, j]
        tot = 0.0
        for j in range(s.shape[1]):
            e = math.exp(s[i, j] - m)
            s[i, j] = e
            tot += e
        for j in range(s.shape[1]):
            s[i, j] /= tot


@_helper
def _nb_small_bwd(U, K, V, dO, q0, q1, k0, k1, c0, hk, v0, hv, dU, dK, dV):
    nk = k1 - k0
    p = np.empty(nk)
    dp = np.empty(nk)
    for i in range(q0, q1):
        m = -np.inf
        for j in range(nk):
            acc = 0.0
            for c in range(hk):
                acc += U[i, c0 + c] * K[k0 + j, c0 + c]
            p[j] = acc
            if acc > m:
                m = acc
        tot = 0.0
        for j in range(nk):
            p[j] = math.exp(p[j] - m)
            tot += p[j]
        r = 0.0
        for j in range(nk):
            p[j] /= tot
            acc = 0.0
            for c in range(hv):
                acc += dO[i, v0 + c] * V[k0 + j, v0 + c]
            dp[j] = acc
            r += acc * p[j]
        for j in range(nk):
            ds = p[j] * (dp[j] - r)
            for c in range(hk):
                dU[i, c0 + c] += ds * K[k0 + j, c0 + c]
                dK[k0 + j, c0 + c] += ds * U[i, c0 + c]
            for c in range(hv):
                dV[k0 + j, v0 + c] += p[j] * dO[i, v0 + c]


def _nb_seg_att_bwd(U, K, V, q_off, k_off, heads, dO):
    dk = U.shape[1]
    dv = V.shape[1]
    hk = dk // heads
    hv = dv // heads
    dU = np.zeros_like(U)
    dK = np.zeros_like(K)
    dV = np.zeros_like(V)
    for b in range(q_off.shape[0] - 1):
        q0 = q_off[b]
        q1 = q_off[b + 1]
        k0 = k_off[b]
        k1 = k_off[b + 1]
        if q1 == q0:
            continue
        for h in range(heads):
            if q1 - q0 <= SMALL_QUERIES:
                _nb_small_bwd(U, K, V, dO, q0, q1, k0, k1, h * hk, hk, h * hv, hv, dU, dK, dV)
                continue
            u = np.ascontiguousarray(U[q0:q1, h * hk:(h + 1) * hk])
            k = np.ascontiguousarray(K[k0:k1, h * hk:(h + 1) * hk])
            v = np.ascontiguousarray(V[k0:k1, h * hv:(h + 1) * hv])
            g = np.ascontiguousarray(dO[q0:q1, h * hv:(h + 1) * hv])
            p = np.dot(u, np.ascontiguousarray(k.T))
            _nb_softmax_rows(p)
            dp = np.dot(g, np.ascontiguousarray(v.T))
            for i in range(p.shape[0]):
                r = 0.0
                for j in range(p.shape[1]):
                    r += dp[i, j] * p[i, j]
                for j in range(p.shape[1]):
                    dp[i, j] = p[i, j] * (dp[i, j] - r)
            dU[q0:q1, h * hk:(h + 1) * hk] = np.dot(dp, k)
            dK[k0:k1, h * hk:(h + 1) * hk] += np.dot(np.ascontiguousarray(dp.T), u)
            dV[k0:k1, h * hv:(h + 1) * hv] += np.dot(np.ascontiguousarray(p.T), g)
    return dU, dK, dV


# ---------------------------------------------------------------------------
# segmented column max (ties -> lowest row)
# ---------------------------------------------------------------------------


def _np_seg_max(X, off):
    nseg = len(off) - 1
    out = np.empty((nseg, X.shape[1]))
    arg = np.empty((nseg, X.shape[1]), dtype=np.int64)
    for b in range(nseg):
        blk = X[off[b]:off[b + 1]]
        a = np.argmax(blk, axis=0)
        arg[b] = a + off[b]
        out[b] = blk[a, np.arange(X.shape[1])]
    return out, arg


def _nb_seg_max(X, off):
    nseg = off.shape[0] - 1
    d = X.shape[1]
    out = np.empty((nseg, d))
    arg = np.empty((nseg, d), dtype=np.int64)
    for b in range(nseg):
        for c in range(d):
            best = off[b]
            m = X[best, c]
            for r in range(off[b] + 1, off[b + 1]):
                if X[r, c] > m:
                    m = X[r, c]
                    best = r
            out[b, c] = m
            arg[b, c] = best
    return out, arg


# ---------------------------------------------------------------------------
# farthest point sampling
# ---------------------------------------------------------------------------


def _np_fps(X, k, seed):
    n = X.shape[0]
    idx = np.empty(k, dtype=np.int64)
    idx[0] = seed
    dist = np.sqrt(((X - X[seed]) ** 2).sum(axis=1))
    for i in range(1, k):
        nxt = int(np.argmax(dist))
        idx[i] = nxt
        dist = np.minimum(dist, np.sqrt(((X - X[nxt]) ** 2).sum(axis=1)))
    return idx


def _nb_fps(X, k, seed):
    n = X.shape[0]
    d = X.shape[1]
    idx = np.empty(k, dtype=np.int64)
    idx[0] = seed
    dist = np.empty(n)
    for r in range(n):
        acc = 0.0
        for c in range(d):
            t = X[r, c] - X[seed, c]
            acc += t * t
        dist[r] = math.sqrt(acc)
    for i in range(1, k):
        nxt = 0
        m = dist[0]
        for r in range(1, n):
            if dist[r] > m:
                m = dist[r]
                nxt = r
        idx[i] = nxt
        for r in range(n):
            acc = 0.0
            for c in range(d):
                t = X[r, c] - X[nxt, c]
                acc += t * t
            e = math.sqrt(acc)
            if e < dist[r]:
                dist[r] = e
    return idx


# ---------------------------------------------------------------------------
# grid ray casting (exact DDA over square cells)
#
# grid[i, j] > 0 marks an occupied cell; i indexes x, j indexes y.  Returns
# the distance to the first occupied cell boundary along each ray (capped at
# max_range, label 0 when nothing is hit within range).
# ---------------------------------------------------------------------------


def _np_raycast(grid, x, y, angles, cell, max_range):
    nx, ny = grid.shape
    n = angles.shape[0]
    dx = np.cos(angles)
    dy = np.sin(angles)
    ci = np.full(n, int(math.floor(x / cell)), dtype=np.int64)
    cj = np.full(n, int(math.floor(y / cell)), dtype=np.int64)
    step_i = np.where(dx > 0, 1, -1)
    step_j = np.where(dy > 0, 1, -1)
    with np.errstate(divide="ignore", invalid="ignore"):
        inv_dx = np.where(dx != 0.0, 1.0 / np.abs(dx), np.inf)
        inv_dy = np.where(dy != 0.0, 1.0 / np.abs(dy), np.inf)
        bx = np.where(dx > 0, (ci + 1) * cell, ci * cell)
        by = np.where(dy > 0, (cj + 1) * cell, cj * cell)
        # inf * 0 on the excluded branch is discarded by np.where
        tmax_x = np.where(dx != 0.0, np.abs(bx - x) * inv_dx, np.inf)
        tmax_y = np.where(dy != 0.0, np.abs(by - y) * inv_dy, np.inf)
    tdx = cell * inv_dx
    tdy = cell * inv_dy
    dist = np.full(n, max_range)
    label = np.zeros(n, dtype=np.int64)
    active = np.ones(n, dtype=bool)
    while active.any():
        use_x = tmax_x < tmax_y
        t = np.where(use_x, tmax_x, tmax_y)
        over = active & (t > max_range)
        active &= ~over
        ci = np.where(active & use_x, ci + step_i, ci)
        cj = np.where(active & ~use_x, cj + step_j, cj)
        out = active & ((ci < 0) | (ci >= nx) | (cj < 0) | (cj >= ny))
        active &= ~out
        safe_i = np.clip(ci, 0, nx - 1)
        safe_j = np.clip(cj, 0, ny - 1)
        lab = grid[safe_i, safe_j]
        hit = active & (lab > 0)
        dist = np.where(hit, t, dist)
        label = np.where(hit, lab, label)
        active &= ~hit
        tmax_x = np.where(active & use_x, tmax_x + tdx, tmax_x)
        tmax_y = np.where(active & ~use_x, tmax_y + tdy, tmax_y)
    return dist, label


def _nb_raycast(grid, x, y, angles, cell, max_range):
    nx, ny = grid.shape
    n = angles.shape[0]
    dist = np.full(n, max_range)
    label = np.zeros(n, dtype=np.int64)
    ci0 = int(math.floor(x / cell))
    cj0 = int(math.floor(y / cell))
    for r in range(n):
        dx = math.cos(angles[r])
        dy = math.sin(angles[r])
        ci = ci0
        cj = cj0
        si = 1 if dx > 0 else -1
        sj = 1 if dy > 0 else -1
        if dx != 0.0:
            bx = (ci + 1) * cell if dx > 0 else ci * cell
            tmx = abs(bx - x) / abs(dx)
            tdx = cell / abs(dx)
        else:
            tmx = np.inf
            tdx = np.inf
        if dy != 0.0:
            by = (cj + 1) * cell if dy > 0 else cj * cell
            tmy = abs(by - y) / abs(dy)
            tdy = cell / abs(dy)
        else:
            tmy = np.inf
            tdy = np.inf
        while True:
            if tmx < tmy:
                t = tmx
                if t > max_range:
                    break
                ci += si
                tmx += tdx
            else:
                t = tmy
                if t > max_range:
                    break
                cj += sj
                tmy += tdy
            if ci < 0 or ci >= nx or cj < 0 or cj >= ny:
                break
            lab = grid[ci, cj]
            if lab > 0:
                dist[r] = t
                label[r] = lab
                break
    return dist, label


def _py_segment_blocked(grid, x0, y0, x1, y1, cell):
    """True when the straight segment touches an occupied or off-grid cell."""
    nx, ny = grid.shape
    ci = int(math.floor(x0 / cell))
    cj = int(math.floor(y0 / cell))
    ei = int(math.floor(x1 / cell))
    ej = int(math.floor(y1 / cell))
    if ci < 0 or ci >= nx or cj < 0 or cj >= ny or grid[ci, cj] > 0:
        return True
    if ei < 0 or ei >= nx or ej < 0 or ej >= ny or grid[ei, ej] > 0:
        return True
    dx = x1 - x0
    dy = y1 - y0
    length = math.sqrt(dx * dx + dy * dy)
    if length == 0.0:
        return False
    dx /= length
    dy /= length
    si = 1 if dx > 0 else -1
    sj = 1 if dy > 0 else -1
    if dx != 0.0:
        bx = (ci + 1) * cell if dx > 0 else ci * cell
        tmx = abs(bx - x0) / abs(dx)
        tdx = cell / abs(dx)
    else:
        tmx = np.inf
        tdx = np.inf
    if dy != 0.0:
        by = (cj + 1) * cell if dy > 0 else cj * cell
        tmy = abs(by - y0) / abs(dy)
        tdy = cell / abs(dy)
    else:
        tmy = np.inf
        tdy = np.inf
    while ci != ei or cj != ej:
        if tmx < tmy:
            if tmx > length:
                break
            ci += si
            tmx += tdx
        else:
            if tmy > length:
                break
            cj += sj
            tmy += tdy
        if ci < 0 or ci >= nx or cj < 0 or cj >= ny or grid[ci, cj] > 0:
            return True
    return False


if HAVE_NUMBA:
    seg_att_fwd = njit(cache=True)(_nb_seg_att_fwd)
    seg_att_bwd = njit(cache=True)(_nb_seg_att_bwd)
    seg_max = njit(cache=True)(_nb_seg_max)
    fps = njit(cache=True)(_nb_fps)
    raycast = njit(cache=True)(_nb_raycast)
    segment_blocked = njit(cache=True)(_py_segment_blocked)
else:
    seg_att_fwd = _np_seg_att_fwd
    seg_att_bwd = _np_seg_att_bwd
    seg_max = _np_seg_max
    fps = _np_fps
    raycast = _np_raycast
    segment_blocked = _py_segment_blocked

# both paths stay importable for cross-checks and the benchmark
NUMPY_KERNELS = {
    "seg_att_fwd": _np_seg_att_fwd,
    "seg_att_bwd": _np_seg_att_bwd,
    "seg_max": _np_seg_max,
    "fps": _np_fps,
    "raycast": _np_raycast,
    "segment_blocked": _py_segment_blocked,
}


def numba_kernels():
    """Compiled kernels keyed like ``NUMPY_KERNELS`` (empty without numba)."""
    if not HAVE_NUMBA:
        return {}
    return {
        "seg_att_fwd": seg_att_fwd,
        "seg_att_bwd": seg_att_bwd,
        "seg_max": seg_max,
        "fps": fps,
        "raycast": raycast,
        "segment_blocked": segment_blocked,
    }
