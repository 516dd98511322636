"""Hot hard-label kernels: forward/label, segment bisection, boundary walking.

Two interchangeable implementations of the same kernel signatures:

  * ``NUMBA_IMPL``  -- ``@njit`` scalar kernels over flat-packed parameters
    (see ``network.pack``); this is the default when numba imports.
  * ``NUMPY_IMPL``  -- pure-numpy reference path.

Setting the environment variable ``RELUSTEAL_NO_NUMBA=1`` before import
selects the numpy path. ``benchmarks/bench_kernels.py`` times both.

Every query-issuing kernel returns its query count so the oracle session can
keep exact accounting even when probes run inside compiled loops.
"""

from __future__ import annotations

import os
from types import SimpleNamespace

import numpy as np

__all__ = ["ACTIVE", "NUMBA_IMPL", "NUMPY_IMPL", "USING_NUMBA"]


# ---------------------------------------------------------------------------
# pure-numpy reference implementations
# ---------------------------------------------------------------------------

def _np_forward(w_flat, b_flat, dims, removed, x):
    cur = x
    w_off = 0
    b_off = 0
    h_off = 0
    L = dims.shape[0] - 1
    for ell in range(L):
        n_in = int(dims[ell])
        n_out = int(dims[ell + 1])
        W = w_flat[w_off : w_off + n_out * n_in].reshape(n_out, n_in)
        pre = W @ cur + b_flat[b_off : b_off + n_out]
        if ell < L - 1:
            keep = removed[h_off : h_off + n_out].astype(bool)
            cur = np.where((pre > 0) | keep, pre, 0.0)
            h_off += n_out
        else:
            cur = pre
        w_off += n_out * n_in
        b_off += n_out
    return cur


def np_logits_at(w_flat, b_flat, dims, removed, x):
    return _np_forward(w_flat, b_flat, dims, removed, np.asarray(x, dtype=float))


def np_label_at(w_flat, b_flat, dims, removed, x):
    return int(np.argmax(_np_forward(w_flat, b_flat, dims, removed, np.asarray(x, dtype=float))))


def np_bisect_segment(w_flat, b_flat, dims, removed, xa, xb, tol, max_iter):
    lo = np.array(xa, dtype=float)
    hi = np.array(xb, dtype=float)
    la = np_label_at(w_flat, b_flat, dims, removed, lo)
    lb = np_label_at(w_flat, b_flat, dims, removed, hi)
    n = 2
    if la == lb:
        return lo, hi, n, 1
    for _ in range(max_iter):
        if np.linalg.norm(hi - lo) <= tol:
            break
        mid = 0.5 * (lo + hi)
        lm = np_label_at(w_flat, b_flat, dims, removed, mid)
        n += 1
        if lm == la:
            lo = mid
        else:
            hi = mid
    return lo, hi, n, 0


def np_first_flip_scan(w_flat, b_flat, dims, removed, x0, u, ref_label, t0, tmax, growth):
    x0 = np.asarray(x0, dtype=float)
    u = np.asarray(u, dtype=float)
    t_prev = 0.0
    t = t0
    n = 0
    while t <= tmax:
        lab = np_label_at(w_flat, b_flat, dims, removed, x0 + t * u)
        n += 1
        if lab != ref_label:
            return t_prev, t, n, 1
        t_prev = t
        t *= growth
    return t_prev, tmax, n, 0


def np_walk_to_bend(w_flat, b_flat, dims, removed, a, b, u, step0, max_dist, alpha_tol):
    a = np.asarray(a, dtype=float)
    b = np.asarray(b, dtype=float)
    u = np.asarray(u, dtype=float)
    la = np_label_at(w_flat, b_flat, dims, removed, a)
    lb = np_label_at(w_flat, b_flat, dims, removed, b)
    n = 2

    def on(alpha):
        p = np_label_at(w_flat, b_flat, dims, removed, a + alpha * u)
        q = np_label_at(w_flat, b_flat, dims, removed, b + alpha * u)
        return p == la and q == lb

    if la == lb:
        return 0.0, 0.0, n, 2
    alpha_on = 0.0
    step = step0
    alpha_off = -1.0
    while True:
        alpha_next = alpha_on + step
        if alpha_next > max_dist:
            return alpha_on, max_dist, n, 1
        ok = on(alpha_next)
        n += 2
        if ok:
            alpha_on = alpha_next
            step *= 2.0
        else:
            alpha_off = alpha_next
            break
    while alpha_off - alpha_on > alpha_tol:
        mid = 0.5 * (alpha_on + alpha_off)
        ok = on(mid)
        n += 2
        if ok:
            alpha_on = mid
        else:
            alpha_off = mid
    return alpha_on, alpha_off, n, 0


NUMPY_IMPL = SimpleNamespace(
    name="numpy",
    logits_at=np_logits_at,
    label_at=np_label_at,
    bisect_segment=np_bisect_segment,
    first_flip_scan=np_first_flip_scan,
    walk_to_bend=np_walk_to_bend,
)


# ---------------------------------------------------------------------------
# numba implementations
# ---------------------------------------------------------------------------

def _env_disabled() -> bool:
    return os.environ.get("RELUSTEAL_NO_NUMBA", "").strip().lower() not in ("", "0", "false")


NUMBA_IMPL = None
try:
    from numba import njit as _njit

    @_njit(cache=True)
    def _nb_label(w_flat, b_flat, dims, removed, x, buf_a, buf_b):
        L = dims.shape[0] - 1
        n_cur = dims[0]
        for i in range(n_cur):
            buf_a[i] = x[i]
        cur = buf_a
        nxt = buf_b
        w_off = 0
        b_off = 0
        h_off = 0
        for ell in range(L):
            n_in = dims[ell]
            n_out = dims[ell + 1]
            for k in range(n_out):
                acc = b_flat[b_off + k]
                row = w_off + k * n_in
                for j in range(n_in):
                    acc += w_flat[row + j] * cur[j]
                if ell < L - 1 and acc <= 0.0 and removed[h_off + k] == 0:
                    acc = 0.0
                nxt[k] = acc
            w_off += n_out * n_in
            b_off += n_out
            if ell < L - 1:
                h_off += n_out
            tmp = cur
            cur = nxt
            nxt = tmp
            n_cur = n_out
        best = 0
        bv = cur[0]
        for k in range(1, n_cur):
            if cur[k] > bv:
                bv = cur[k]
                best = k
        return best

    @_njit(cache=True)
    def _nb_buffers(dims):
        maxw = dims[0]
        for i in range(1, dims.shape[0]):
            if dims[i] > maxw:
                maxw = dims[i]
        return np.empty(maxw, dtype=np.float64), np.empty(maxw, dtype=np.float64)

    @_njit(cache=True)
    def nb_logits_at(w_flat, b_flat, dims, removed, x):
        ba, bb = _nb_buffers(dims)
        L = dims.shape[0] - 1
        n_cur = dims[0]
        for i in range(n_cur):
            ba[i] = x[i]
        cur = ba
        nxt = bb
        w_off = 0
        b_off = 0
        h_off = 0
        for ell in range(L):
            n_in = dims[ell]
            n_out = dims[ell + 1]
            for k in range(n_out):
                acc = b_flat[b_off + k]
                row = w_off + k * n_in
                for j in range(n_in):
                    acc += w_flat[row + j] * cur[j]
                if ell < L - 1 and acc <= 0.0 and removed[h_off + k] == 0:
                    acc = 0.0
                nxt[k] = acc
            w_off += n_out * n_in
            b_off += n_out
            if ell < L - 1:
                h_off += n_out
            tmp = cur
            cur = nxt
            nxt = tmp
            n_cur = n_out
        return cur[:n_cur].copy()

    @_njit(cache=True)
    def nb_label_at(w_flat, b_flat, dims, removed, x):
        ba, bb = _nb_buffers(dims)
        return _nb_label(w_flat, b_flat, dims, removed, x, ba, bb)

    @_njit(cache=True)
    def nb_bisect_segment(w_flat, b_flat, dims, removed, xa, xb, tol, max_iter):
        ba, bb = _nb_buffers(dims)
        d0 = dims[0]
        lo = xa.copy()
        hi = xb.copy()
        mid = np.empty(d0, dtype=np.float64)
        la = _nb_label(w_flat, b_flat, dims, removed, lo, ba, bb)
        lb = _nb_label(w_flat, b_flat, dims, removed, hi, ba, bb)
        n = 2
        if la == lb:
            return lo, hi, n, 1
        for _ in range(max_iter):
            acc = 0.0
            for i in range(d0):
                diff = hi[i] - lo[i]
                acc += diff * diff
            if acc <= tol * tol:
                break
            for i in range(d0):
                mid[i] = 0.5 * (lo[i] + hi[i])
            lm = _nb_label(w_flat, b_flat, dims, removed, mid, ba, bb)
            n += 1
            if lm == la:
                for i in range(d0):
                    lo[i] = mid[i]
            else:
                for i in range(d0):
                    hi[i] = mid[i]
        return lo, hi, n, 0

    @_njit(cache=True)
    def nb_first_flip_scan(w_flat, b_flat, dims, removed, x0, u, ref_label, t0, tmax, growth):
        ba, bb = _nb_buffers(dims)
        d0 = dims[0]
        p = np.empty(d0, dtype=np.float64)
        t_prev = 0.0
        t = t0
        n = 0
        while t <= tmax:
            for i in range(d0):
                p[i] = x0[i] + t * u[i]
            lab = _nb_label(w_flat, b_flat, dims, removed, p, ba, bb)
            n += 1
            if lab != ref_label:
                return t_prev, t, n, 1
            t_prev = t
            t *= growth
        return t_prev, tmax, n, 0

    @_njit(cache=True)
    def nb_walk_to_bend(w_flat, b_flat, dims, removed, a, b, u, step0, max_dist, alpha_tol):
        ba, bb = _nb_buffers(dims)
        d0 = dims[0]
        p = np.empty(d0, dtype=np.float64)
        q = np.empty(d0, dtype=np.float64)
        la = _nb_label(w_flat, b_flat, dims, removed, a, ba, bb)
        lb = _nb_label(w_flat, b_flat, dims, removed, b, ba, bb)
        n = 2
        if la == lb:
            return 0.0, 0.0, n, 2
        alpha_on = 0.0
        step = step0
        alpha_off = -1.0
        while True:
            alpha_next = alpha_on + step
            if alpha_next > max_dist:
                return alpha_on, max_dist, n, 1
            for i in range(d0):
                p[i] = a[i] + alpha_next * u[i]
                q[i] = b[i] + alpha_next * u[i]
            ok = (
                _nb_label(w_flat, b_flat, dims, removed, p, ba, bb) == la
                and _nb_label(w_flat, b_flat, dims, removed, q, ba, bb) == lb
            )
            n += 2
            if ok:
                alpha_on = alpha_next
                step *= 2.0
            else:
                alpha_off = alpha_next
                break
        while alpha_off - alpha_on > alpha_tol:
            mid = 0.5 * (alpha_on + alpha_off)
            for i in range(d0):
                p[i] = a[i] + mid * u[i]
                q[i] = b[i] + mid * u[i]
            ok = (
                _nb_label(w_flat, b_flat, dims, removed, p, ba, bb) == la
                and _nb_label(w_flat, b_flat, dims, removed, q, ba, bb) == lb
            )
            n += 2
            if ok:
                alpha_on = mid
            else:
                alpha_off = mid
        return alpha_on, alpha_off, n, 0

    NUMBA_IMPL = SimpleNamespace(
        name="numba",
        logits_at=nb_logits_at,
        label_at=nb_label_at,
        bisect_segment=nb_bisect_segment,
        first_flip_scan=nb_first_flip_scan,
        walk_to_bend=nb_walk_to_bend,
    )
except ImportError:  # pragma: no cover - exercised only without numba
    NUMBA_IMPL = None

USING_NUMBA = NUMBA_IMPL is not None and not _env_disabled()
ACTIVE = NUMBA_IMPL if USING_NUMBA else NUMPY_IMPL
