"""Hot numeric loops, each in two flavors.

``*_nb`` functions are compiled with numba; ``*_np`` are plain numpy.  The
public names (``nms_sorted``, ``top2_update``, ``col_argmax``,
``ransac_p3p``) point to the
numba flavor unless numba is missing or ``HFLOC_DISABLE_NUMBA=1``.  Both
flavors stay importable so tests and benchmarks can compare them.

Loop bodies that must run under both flavors (the P3P solver) are written
in the restricted numba subset.
"""
import math
import os

import numpy as np

try:
    import numba

    HAS_NUMBA = True
except ImportError:  # pragma: no cover
    numba = None
    HAS_NUMBA = False

USE_NUMBA = HAS_NUMBA and os.environ.get("HFLOC_DISABLE_NUMBA", "0").lower() not in ("1", "true", "yes")


def _jit(fn):
    if not HAS_NUMBA:
        return fn
    return numba.njit(cache=True, nogil=True)(fn)


# ---------------------------------------------------------------------------
# greedy radius NMS over keypoints pre-sorted by priority

def _nms_sorted_loop(xy, radius, k):
    n = xy.shape[0]
    r2 = radius * radius
    kept = np.empty(min(n, k), dtype=np.int64)
    nk = 0
    for i in range(n):
        if nk >= k:
            break
        x = xy[i, 0]
        y = xy[i, 1]
        ok = True
        for j in range(nk):
            dx = xy[kept[j], 0] - x
            dy = xy[kept[j], 1] - y
            if dx * dx + dy * dy <= r2:
                ok = False
                break
        if ok:
            kept[nk] = i
            nk += 1
    return kept[:nk]


nms_sorted_nb = _jit(_nms_sorted_loop)


def nms_sorted_np(xy, radius, k):
    n = len(xy)
    suppressed = np.zeros(n, dtype=bool)
    kept = []
    r2 = radius * radius
    for i in range(n):
        if len(kept) >= k:
            break
        if suppressed[i]:
            continue
        kept.append(i)
        d2 = np.sum((xy[i + 1:] - xy[i]) ** 2, axis=1)
        suppressed[i + 1:] |= d2 <= r2
    return np.asarray(kept, dtype=np.int64)


# ---------------------------------------------------------------------------
# running top-2 (largest similarity, smallest index on ties) over column blocks

def _top2_update_loop(sim, offset, best_sim, best_idx):
    n, m = sim.shape
    for i in range(n):
        s1 = best_sim[i, 0]
        s2 = best_sim[i, 1]
        i1 = best_idx[i, 0]
        i2 = best_idx[i, 1]
        for j in range(m):
            s = sim[i, j]
            if s > s1:
                s2 = s1
                i2 = i1
                s1 = s
                i1 = offset + j
            elif s > s2:
                s2 = s
                i2 = offset + j
        best_sim[i, 0] = s1
        best_sim[i, 1] = s2
        best_idx[i, 0] = i1
        best_idx[i, 1] = i2


top2_update_nb = _jit(_top2_update_loop)


def top2_update_np(sim, offset, best_sim, best_idx):
    n, m = sim.shape
    rows = np.arange(n)
    j1 = np.argmax(sim, axis=1)
    s1 = sim[rows, j1]
    if m > 1:
        masked = sim.copy()
        masked[rows, j1] = -np.inf
        j2 = np.argmax(masked, axis=1)
        s2 = masked[rows, j2]
    else:
        j2 = np.full(n, -1)
        s2 = np.full(n, -np.inf, dtype=sim.dtype)
    cand_s = np.concatenate([best_sim, s1[:, None], s2[:, None]], axis=1)
    cand_i = np.concatenate([best_idx, (j1 + offset)[:, None], np.where(j2 >= 0, j2 + offset, -1)[:, None]], axis=1)
    # existing entries always have smaller indices than the new block, so a
    # stable sort on similarity alone keeps the smaller index first on ties
    order = np.argsort(-cand_s, axis=1, kind="stable")[:, :2]
    best_sim[:] = np.take_along_axis(cand_s, order, axis=1)
    best_idx[:] = np.take_along_axis(cand_i, order, axis=1)


def _col_argmax_loop(sim):
    n, m = sim.shape
    best = np.full(m, -np.inf, dtype=sim.dtype)
    arg = np.zeros(m, dtype=np.int64)
    for i in range(n):
        for j in range(m):
            if sim[i, j] > best[j]:
                best[j] = sim[i, j]
                arg[j] = i
    return arg


col_argmax_nb = _jit(_col_argmax_loop)


def col_argmax_np(sim):
    return np.argmax(sim, axis=0)


# ---------------------------------------------------------------------------
# P3P (Grunert's distance formulation) shared by both flavors

def _p3p_solve(X, f):
    """X: (3, 3) world points (rows), f: (3, 3) unit bearings (rows).

    Returns (Rs, ts, n) with up to four world-to-camera candidates.
    """
    Rs = np.zeros((4, 3, 3))
    ts = np.zeros((4, 3))
    e1 = X[1] - X[0]
    e2 = X[2] - X[0]
    cr = np.cross(e1, e2)
    if 0.5 * math.sqrt(cr[0] ** 2 + cr[1] ** 2 + cr[2] ** 2) <= 1e-9:
        return Rs, ts, 0
    a2 = np.sum((X[1] - X[2]) ** 2)
    b2 = np.sum((X[0] - X[2]) ** 2)
    c2 = np.sum((X[0] - X[1]) ** 2)
    ca = np.sum(f[1] * f[2])
    cb = np.sum(f[0] * f[2])
    cg = np.sum(f[0] * f[1])
    amc = (a2 - c2) / b2
    apc = (a2 + c2) / b2
    coeffs = np.empty(5)
    coeffs[0] = (amc - 1) ** 2 - 4 * c2 / b2 * ca * ca
    coeffs[1] = 4 * (amc * (1 - amc) * cb - (1 - apc) * ca * cg + 2 * c2 / b2 * ca * ca * cb)
    coeffs[2] = 2 * (amc * amc - 1 + 2 * amc * amc * cb * cb + 2 * (b2 - c2) / b2 * ca * ca
                     - 4 * apc * ca * cb * cg + 2 * (b2 - a2) / b2 * cg * cg)
    coeffs[3] = 4 * (-amc * (1 + amc) * cb + 2 * a2 / b2 * cg * cg * cb - (1 - apc) * ca * cg)
    coeffs[4] = (1 + amc) ** 2 - 4 * a2 / b2 * cg * cg
    scale = np.max(np.abs(coeffs))
    if not scale > 0 or not np.isfinite(scale):
        return Rs, ts, 0
    coeffs = coeffs / scale
    if abs(coeffs[0]) < 1e-14:
        return Rs, ts, 0
    roots = np.roots(coeffs.astype(np.complex128))
    n = 0
    for r in roots:
        if abs(r.imag) > 1e-3 * (1.0 + abs(r.real)):
            continue
        v = r.real
        # Newton polish on the quartic
        for _ in range(3):
            p = (((coeffs[0] * v + coeffs[1]) * v + coeffs[2]) * v + coeffs[3]) * v + coeffs[4]
            dp = ((4 * coeffs[0] * v + 3 * coeffs[1]) * v + 2 * coeffs[2]) * v + coeffs[3]
            if dp == 0:
                break
            v -= p / dp
        if v <= 0:
            continue
        den = 2 * (cg - v * ca)
        if abs(den) < 1e-14:
            continue
        u = ((-1 + amc) * v * v - 2 * amc * cb * v + 1 + amc) / den
        if u <= 0:
            continue
        q = 1 + v * v - 2 * v * cb
        if q <= 0:
            continue
        s1 = math.sqrt(b2 / q)
        s = np.array([s1, u * s1, v * s1])
        # Gauss-Newton on the three law-of-cosines equations
        for _ in range(4):
            g = np.array([
                s[1] * s[1] + s[2] * s[2] - 2 * s[1] * s[2] * ca - a2,
                s[0] * s[0] + s[2] * s[2] - 2 * s[0] * s[2] * cb - b2,
                s[0] * s[0] + s[1] * s[1] - 2 * s[0] * s[1] * cg - c2,
            ])
            J = np.array([
                [0.0, 2 * s[1] - 2 * s[2] * ca, 2 * s[2] - 2 * s[1] * ca],
                [2 * s[0] - 2 * s[2] * cb, 0.0, 2 * s[2] - 2 * s[0] * cb],
                [2 * s[0] - 2 * s[1] * cg, 2 * s[1] - 2 * s[0] * cg, 0.0],
            ])
            if abs(np.linalg.det(J)) < 1e-300:
                break
            s = s - np.linalg.solve(J, g)
        if s[0] <= 0 or s[1] <= 0 or s[2] <= 0:
            continue
        Y = np.empty((3, 3))
        for i in range(3):
            Y[i] = s[i] * f[i]
        # absolute orientation (Kabsch) mapping X onto Y
        mx = (X[0] + X[1] + X[2]) / 3.0
        my = (Y[0] + Y[1] + Y[2]) / 3.0
        H = np.zeros((3, 3))
        for i in range(3):
            H += np.outer(X[i] - mx, Y[i] - my)
        U, _, Vt = np.linalg.svd(H)
        D = np.eye(3)
        if np.linalg.det(Vt.T @ U.T) < 0:
            D[2, 2] = -1.0
        R = Vt.T @ D @ U.T
        t = my - R @ mx
        # reject spurious roots: every input point must lie on its bearing
        bad = False
        for i in range(3):
            y = R @ X[i] + t
            ny = math.sqrt(y[0] ** 2 + y[1] ** 2 + y[2] ** 2)
            if ny <= 0:
                bad = True
                break
            cosang = (y[0] * f[i, 0] + y[1] * f[i, 1] + y[2] * f[i, 2]) / ny
            if cosang < 1.0 - 1e-10:
                bad = True
                break
        if bad:
            continue
        dup = False
        for j in range(n):
            if np.max(np.abs(Rs[j] - R)) < 1e-9 and np.max(np.abs(ts[j] - t)) < 1e-9:
                dup = True
        if dup:
            continue
        Rs[n] = R
        ts[n] = t
        n += 1
        if n == 4:
            break
    return Rs, ts, n


p3p_solve_nb = _jit(_p3p_solve)
p3p_solve_np = _p3p_solve


# ---------------------------------------------------------------------------
# RANSAC over pre-drawn minimal samples

def _needed_iterations(inliers, n, confidence, max_iters):
    w = inliers / n
    w3 = w * w * w
    if w3 >= 1.0:
        return 1
    if w3 <= 0.0:
        return max_iters
    denom = math.log(1.0 - w3)
    if denom >= 0.0:
        return max_iters
    est = math.log(1.0 - confidence) / denom
    if est >= max_iters:
        return max_iters
    return max(1, int(math.ceil(est)))


_needed_iterations_nb = _jit(_needed_iterations)


def _ransac_loop(bearings, world, obs, fx, fy, cx, cy, thresh, samples, confidence):
    n = world.shape[0]
    T = samples.shape[0]
    th2 = thresh * thresh
    best_R = np.eye(3)
    best_t = np.zeros(3)
    best_count = -1
    best_mean = np.inf
    limit = T
    it = 0
    Xs = np.empty((3, 3))
    fs = np.empty((3, 3))
    while it < limit:
        for j in range(3):
            Xs[j] = world[samples[it, j]]
            fs[j] = bearings[samples[it, j]]
        it += 1
        Rs, ts, nc = p3p_solve_nb(Xs, fs)
        for c in range(nc):
            R = Rs[c]
            t = ts[c]
            count = 0
            ssum = 0.0
            for i in range(n):
                z = R[2, 0] * world[i, 0] + R[2, 1] * world[i, 1] + R[2, 2] * world[i, 2] + t[2]
                if z <= 1e-9:
                    continue
                x = R[0, 0] * world[i, 0] + R[0, 1] * world[i, 1] + R[0, 2] * world[i, 2] + t[0]
                y = R[1, 0] * world[i, 0] + R[1, 1] * world[i, 1] + R[1, 2] * world[i, 2] + t[1]
                du = fx * x / z + cx - obs[i, 0]
                dv = fy * y / z + cy - obs[i, 1]
                e2 = du * du + dv * dv
                if e2 <= th2:
                    count += 1
                    ssum += math.sqrt(e2)
            if count == 0:
                continue
            mean = ssum / count
            if count > best_count or (count == best_count and mean < best_mean):
                best_count = count
                best_mean = mean
                best_R = R.copy()
                best_t = t.copy()
                limit = min(T, _needed_iterations_nb(count, n, confidence, T))
    return best_R, best_t, max(best_count, 0), best_mean, it


ransac_p3p_nb = _jit(_ransac_loop)


def ransac_p3p_np(bearings, world, obs, fx, fy, cx, cy, thresh, samples, confidence):
    n = world.shape[0]
    T = samples.shape[0]
    th2 = thresh * thresh
    best_R, best_t = np.eye(3), np.zeros(3)
    best_count, best_mean = -1, np.inf
    limit = T
    it = 0
    while it < limit:
        idx = samples[it]
        it += 1
        Rs, ts, nc = p3p_solve_np(world[idx], bearings[idx])
        for c in range(nc):
            xc = world @ Rs[c].T + ts[c]
            z = xc[:, 2]
            front = z > 1e-9
            zs = np.where(front, z, 1.0)
            du = fx * xc[:, 0] / zs + cx - obs[:, 0]
            dv = fy * xc[:, 1] / zs + cy - obs[:, 1]
            e2 = du * du + dv * dv
            inl = front & (e2 <= th2)
            count = int(inl.sum())
            if count == 0:
                continue
            mean = float(np.sqrt(e2[inl]).sum() / count)
            if count > best_count or (count == best_count and mean < best_mean):
                best_count, best_mean = count, mean
                best_R, best_t = Rs[c].copy(), ts[c].copy()
                limit = min(T, _needed_iterations(count, n, confidence, T))
    return best_R, best_t, max(best_count, 0), best_mean, it


if USE_NUMBA:
    nms_sorted = nms_sorted_nb
    top2_update = top2_update_nb
    col_argmax = col_argmax_nb
    ransac_p3p = ransac_p3p_nb
    p3p_solve = p3p_solve_nb
else:
    nms_sorted = nms_sorted_np
    top2_update = top2_update_np
    col_argmax = col_argmax_np
    ransac_p3p = ransac_p3p_np
    p3p_solve = p3p_solve_np
