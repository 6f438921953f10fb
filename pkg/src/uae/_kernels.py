"""Hot numeric kernels with a numba path and a pure-numpy fallback.

The numba path is used when numba imports cleanly and the environment
variable ``UAE_DISABLE_NUMBA`` is unset (or "0").  Both paths implement
the same contract; ``benchmarks/bench_kernels.py`` times them against each
other and the test-suite runs both.

Kernels report failures through status values instead of raising so the
compiled path stays nopython; the public wrappers in ``gaussian_core`` and
``gmm`` turn statuses into exceptions.
"""
import math
import os

import numpy as np
from scipy.linalg import solve_triangular

try:
    from numba import njit

    HAVE_NUMBA = True
except ImportError:  # pragma: no cover - numba is a declared dependency
    HAVE_NUMBA = False

LOG_2PI = math.log(2.0 * math.pi)


def _env_disabled():
    return os.environ.get("UAE_DISABLE_NUMBA", "0").strip().lower() not in ("", "0", "false", "no")


# ---------------------------------------------------------------------------
# numpy reference path
# ---------------------------------------------------------------------------

def _cholesky_batched_np(a, floor):
    """Batched lower Cholesky. Returns (L, status) with status[b] = index of
    the first failing pivot, or -1."""
    b, n, _ = a.shape
    out = np.zeros_like(a)
    status = np.full(b, -1, dtype=np.int64)
    for j in range(n):
        d = a[:, j, j] - np.einsum("bk,bk->b", out[:, j, :j], out[:, j, :j])
        bad = (d <= floor) & (status < 0)
        status[bad] = j
        d = np.where(d > floor, d, 1.0)
        ljj = np.sqrt(d)
        out[:, j, j] = ljj
        if j + 1 < n:
            s = a[:, j + 1:, j] - np.einsum("bik,bk->bi", out[:, j + 1:, :j], out[:, j, :j])
            out[:, j + 1:, j] = s / ljj[:, None]
    return out, status


def _power_iteration_np(s, v0, tol, max_iter):
    b, n, _ = s.shape
    v = np.broadcast_to(v0, (b, n)).copy()
    lam = np.einsum("bi,bij,bj->b", v, s, v)
    iters = np.zeros(b, dtype=np.int64)
    active = np.ones(b, dtype=bool)
    for it in range(1, max_iter + 1):
        if not active.any():
            break
        w = np.einsum("bij,bj->bi", s[active], v[active])
        norm = np.sqrt(np.einsum("bi,bi->b", w, w))
        zero = norm == 0.0
        norm = np.where(zero, 1.0, norm)
        vn = w / norm[:, None]
        new_lam = np.einsum("bi,bij,bj->b", vn, s[active], vn)
        new_lam = np.where(zero, 0.0, new_lam)
        done = zero | (np.abs(new_lam - lam[active]) <= tol * np.abs(new_lam))
        idx = np.flatnonzero(active)
        v[idx] = np.where(zero[:, None], v[idx], vn)
        lam[idx] = new_lam
        iters[idx] = it
        active[idx[done]] = False
    iters[active] = -1
    return lam, v, iters


def _gmm_log_prob_np(x, means, chols):
    n_pts, d = x.shape
    k = means.shape[0]
    out = np.empty((n_pts, k))
    for c in range(k):
        diff = (x - means[c]).T
        y = solve_triangular(chols[c], diff, lower=True)
        maha = np.einsum("ij,ij->j", y, y)
        logdet = np.sum(np.log(np.diag(chols[c])))
        out[:, c] = -0.5 * maha - logdet - 0.5 * d * LOG_2PI
    return out


# ---------------------------------------------------------------------------
# numba path
# ---------------------------------------------------------------------------

if HAVE_NUMBA:

    @njit(cache=True)
    def _cholesky_batched_nb(a, floor):
        b, n, _ = a.shape
        out = np.zeros_like(a)
        status = np.full(b, -1, dtype=np.int64)
        for m in range(b):
            for j in range(n):
                d = a[m, j, j]
                for k in range(j):
                    d -= out[m, j, k] * out[m, j, k]
                if d <= floor:
                    if status[m] < 0:
                        status[m] = j
                    d = 1.0
                ljj = math.sqrt(d)
                out[m, j, j] = ljj
                for i in range(j + 1, n):
                    s = a[m, i, j]
                    for k in range(j):
                        s -= out[m, i, k] * out[m, j, k]
                    out[m, i, j] = s / ljj
        return out, status

    @njit(cache=True)
    def _power_iteration_nb(s, v0, tol, max_iter):
        b, n, _ = s.shape
        lam = np.zeros(b)
        vecs = np.zeros((b, n))
        iters = np.full(b, -1, dtype=np.int64)
        w = np.zeros(n)
        for m in range(b):
            v = v0.copy()
            cur = 0.0
            for i in range(n):
                acc = 0.0
                for j in range(n):
                    acc += s[m, i, j] * v[j]
                cur += v[i] * acc
            for it in range(1, max_iter + 1):
                norm = 0.0
                for i in range(n):
                    acc = 0.0
                    for j in range(n):
                        acc += s[m, i, j] * v[j]
                    w[i] = acc
                    norm += acc * acc
                if norm == 0.0:
                    cur = 0.0
                    iters[m] = it
                    break
                norm = math.sqrt(norm)
                for i in range(n):
                    v[i] = w[i] / norm
                new = 0.0
                for i in range(n):
                    acc = 0.0
                    for j in range(n):
                        acc += s[m, i, j] * v[j]
                    new += v[i] * acc
                if abs(new - cur) <= tol * abs(new):
                    cur = new
                    iters[m] = it
                    break
                cur = new
            lam[m] = cur
            vecs[m] = v
        return lam, vecs, iters

    @njit(cache=True)
    def _gmm_log_prob_nb(x, means, chols):
        n_pts, d = x.shape
        k = means.shape[0]
        out = np.empty((n_pts, k))
        y = np.empty(d)
        for c in range(k):
            logdet = 0.0
            for i in range(d):
                logdet += math.log(chols[c, i, i])
            for p in range(n_pts):
                maha = 0.0
                for i in range(d):
                    acc = x[p, i] - means[c, i]
                    for j in range(i):
                        acc -= chols[c, i, j] * y[j]
                    y[i] = acc / chols[c, i, i]
                    maha += y[i] * y[i]
                out[p, c] = -0.5 * maha - logdet - 0.5 * d * 1.8378770664093453
        return out


_BACKEND = {"numba": HAVE_NUMBA and not _env_disabled()}


def use_numba(flag=None):
    """Query, or with ``flag`` set, select the kernel backend. Returns the
    active state."""
    if flag is not None:
        _BACKEND["numba"] = bool(flag) and HAVE_NUMBA
    return _BACKEND["numba"]


def cholesky_batched(a, floor):
    a = np.ascontiguousarray(a, dtype=np.float64)
    if _BACKEND["numba"]:
        return _cholesky_batched_nb(a, float(floor))
    return _cholesky_batched_np(a, float(floor))


def power_iteration(s, v0, tol, max_iter):
    s = np.ascontiguousarray(s, dtype=np.float64)
    v0 = np.ascontiguousarray(v0, dtype=np.float64)
    if _BACKEND["numba"]:
        return _power_iteration_nb(s, v0, float(tol), int(max_iter))
    return _power_iteration_np(s, v0, float(tol), int(max_iter))


def gmm_log_prob(x, means, chols):
    x = np.ascontiguousarray(x, dtype=np.float64)
    means = np.ascontiguousarray(means, dtype=np.float64)
    chols = np.ascontiguousarray(chols, dtype=np.float64)
    if _BACKEND["numba"]:
        return _gmm_log_prob_nb(x, means, chols)
    return _gmm_log_prob_np(x, means, chols)
