# cython: boundscheck=False, wraparound=False, cdivision=True, language_level=3
"""Compiled Newton power-flow kernel.

Same contract as ``cellgrid._newton_py.newton_solve``; the whole iteration
(injections, Jacobian assembly, dense LU with partial pivoting) runs in C
loops, which matters because the dispatch optimizer evaluates hundreds of
thousands of small power flows per experiment.
"""

import numpy as np

cimport numpy as cnp
from libc.math cimport cos, sin, fabs

cnp.import_array()

COMPILED = True


cdef void _injections(double[:, ::1] g, double[:, ::1] b, double[::1] v,
                      double[::1] cd, double[::1] sd,
                      double[::1] p_out, double[::1] q_out) noexcept nogil:
    cdef Py_ssize_t n = v.shape[0]
    cdef Py_ssize_t i, j
    cdef double ct, st, sp, sq, vj
    for i in range(n):
        sp = 0.0
        sq = 0.0
        for j in range(n):
            # cos/sin of (delta_i - delta_j) from per-bus tables
            ct = cd[i] * cd[j] + sd[i] * sd[j]
            st = sd[i] * cd[j] - cd[i] * sd[j]
            vj = v[j]
            sp += vj * (g[i, j] * ct + b[i, j] * st)
            sq += vj * (g[i, j] * st - b[i, j] * ct)
        p_out[i] = v[i] * sp
        q_out[i] = v[i] * sq


cdef int _lu_solve(double[:, ::1] a, double[::1] rhs, Py_ssize_t m) noexcept nogil:
    """In-place LU with partial pivoting; solution left in rhs.

    Returns the 1-based elimination step of a (numerically) zero pivot, or 0.
    """
    cdef Py_ssize_t k, i, j, piv
    cdef double max_abs = 0.0, mag, factor, tmp
    for i in range(m):
        for j in range(m):
            mag = fabs(a[i, j])
            if mag > max_abs:
                max_abs = mag
    cdef double eps = 1e-13 * max_abs if max_abs > 0.0 else 1e-300
    for k in range(m):
        piv = k
        mag = fabs(a[k, k])
        for i in range(k + 1, m):
            if fabs(a[i, k]) > mag:
                mag = fabs(a[i, k])
                piv = i
        if mag < eps:
            return <int>(k + 1)
        if piv != k:
            for j in range(m):
                tmp = a[k, j]
                a[k, j] = a[piv, j]
                a[piv, j] = tmp
            tmp = rhs[k]
            rhs[k] = rhs[piv]
            rhs[piv] = tmp
        for i in range(k + 1, m):
            factor = a[i, k] / a[k, k]
            if factor != 0.0:
                for j in range(k + 1, m):
                    a[i, j] -= factor * a[k, j]
                rhs[i] -= factor * rhs[k]
            a[i, k] = 0.0
    for k in range(m - 1, -1, -1):
        tmp = rhs[k]
        for j in range(k + 1, m):
            tmp -= a[k, j] * rhs[j]
        rhs[k] = tmp / a[k, k]
    return 0


def newton_solve(object g_in, object b_in, object p_sched_in, object q_sched_in,
                 object v0, object delta0, object kinds_in, double tol, int max_iter):
    """See ``cellgrid._newton_py.newton_solve``."""
    cdef cnp.ndarray[double, ndim=2, mode="c"] g = np.ascontiguousarray(g_in, dtype=np.float64)
    cdef cnp.ndarray[double, ndim=2, mode="c"] b = np.ascontiguousarray(b_in, dtype=np.float64)
    cdef cnp.ndarray[double, ndim=1] p_sched = np.ascontiguousarray(p_sched_in, dtype=np.float64)
    cdef cnp.ndarray[double, ndim=1] q_sched = np.ascontiguousarray(q_sched_in, dtype=np.float64)
    cdef cnp.ndarray[double, ndim=1] v = np.array(v0, dtype=np.float64)
    cdef cnp.ndarray[double, ndim=1] delta = np.array(delta0, dtype=np.float64)
    cdef cnp.ndarray[long long, ndim=1] kinds = np.ascontiguousarray(kinds_in, dtype=np.int64)

    cdef Py_ssize_t n = v.shape[0]
    cdef Py_ssize_t n_ns = 0, n_pq = 0
    cdef Py_ssize_t i, j, r, c
    for i in range(n):
        if kinds[i] != 0:
            n_ns += 1
        if kinds[i] == 2:
            n_pq += 1
    cdef cnp.ndarray[long long, ndim=1] ns_idx = np.empty(n_ns, dtype=np.int64)
    cdef cnp.ndarray[long long, ndim=1] pq_idx = np.empty(n_pq, dtype=np.int64)
    r = 0
    c = 0
    for i in range(n):
        if kinds[i] != 0:
            ns_idx[r] = i
            r += 1
        if kinds[i] == 2:
            pq_idx[c] = i
            c += 1

    cdef Py_ssize_t m = n_ns + n_pq
    cdef cnp.ndarray[double, ndim=1] p_calc = np.empty(n)
    cdef cnp.ndarray[double, ndim=1] q_calc = np.empty(n)
    cdef cnp.ndarray[double, ndim=1] cd = np.empty(n)
    cdef cnp.ndarray[double, ndim=1] sd = np.empty(n)
    cdef cnp.ndarray[double, ndim=2, mode="c"] jac = np.empty((m, m))
    cdef cnp.ndarray[double, ndim=1] rhs = np.empty(m)

    cdef double[:, ::1] gv = g
    cdef double[:, ::1] bv = b
    cdef double[::1] vv = v
    cdef double[::1] dv = delta
    cdef double[::1] pv = p_calc
    cdef double[::1] qv = q_calc
    cdef double[::1] cdv = cd
    cdef double[::1] sdv = sd
    cdef double[:, ::1] jv = jac
    cdef double[::1] rv = rhs
    cdef long long[::1] nsv = ns_idx
    cdef long long[::1] pqv = pq_idx

    cdef int it, sing
    cdef double ct, st, mism, f, vi, vj
    cdef Py_ssize_t bi, bj

    for it in range(1, max_iter + 1):
        for i in range(n):
            cdv[i] = cos(dv[i])
            sdv[i] = sin(dv[i])
        _injections(gv, bv, vv, cdv, sdv, pv, qv)

        mism = 0.0
        for r in range(n_ns):
            bi = nsv[r]
            f = p_sched[bi] - pv[bi]
            rv[r] = f
            if fabs(f) > mism:
                mism = fabs(f)
        for r in range(n_pq):
            bi = pqv[r]
            f = q_sched[bi] - qv[bi]
            rv[n_ns + r] = f
            if fabs(f) > mism:
                mism = fabs(f)
        if mism <= tol:
            return v, delta, p_calc, q_calc, it, True, -1

        # Jacobian of the injections, sliced to [dP/dd dP/dv; dQ/dd dQ/dv]
        for r in range(n_ns):
            bi = nsv[r]
            vi = vv[bi]
            for c in range(n_ns):
                bj = nsv[c]
                if bi == bj:
                    jv[r, c] = -qv[bi] - bv[bi, bi] * vi * vi
                else:
                    ct = cdv[bi] * cdv[bj] + sdv[bi] * sdv[bj]
                    st = sdv[bi] * cdv[bj] - cdv[bi] * sdv[bj]
                    jv[r, c] = vi * vv[bj] * (gv[bi, bj] * st - bv[bi, bj] * ct)
            for c in range(n_pq):
                bj = pqv[c]
                if bi == bj:
                    jv[r, n_ns + c] = pv[bi] / vi + gv[bi, bi] * vi
                else:
                    ct = cdv[bi] * cdv[bj] + sdv[bi] * sdv[bj]
                    st = sdv[bi] * cdv[bj] - cdv[bi] * sdv[bj]
                    jv[r, n_ns + c] = vi * (gv[bi, bj] * ct + bv[bi, bj] * st)
        for r in range(n_pq):
            bi = pqv[r]
            vi = vv[bi]
            for c in range(n_ns):
                bj = nsv[c]
                if bi == bj:
                    jv[n_ns + r, c] = pv[bi] - gv[bi, bi] * vi * vi
                else:
                    ct = cdv[bi] * cdv[bj] + sdv[bi] * sdv[bj]
                    st = sdv[bi] * cdv[bj] - cdv[bi] * sdv[bj]
                    jv[n_ns + r, c] = -vi * vv[bj] * (gv[bi, bj] * ct + bv[bi, bj] * st)
            for c in range(n_pq):
                bj = pqv[c]
                if bi == bj:
                    jv[n_ns + r, n_ns + c] = qv[bi] / vi - bv[bi, bi] * vi
                else:
                    ct = cdv[bi] * cdv[bj] + sdv[bi] * sdv[bj]
                    st = sdv[bi] * cdv[bj] - cdv[bi] * sdv[bj]
                    jv[n_ns + r, n_ns + c] = vi * (gv[bi, bj] * st - bv[bi, bj] * ct)

        sing = _lu_solve(jv, rv, m)
        if sing != 0:
            return v, delta, p_calc, q_calc, it, False, it
        for r in range(n_ns):
            dv[nsv[r]] += rv[r]
        for r in range(n_pq):
            vv[pqv[r]] += rv[n_ns + r]

    for i in range(n):
        cdv[i] = cos(dv[i])
        sdv[i] = sin(dv[i])
    _injections(gv, bv, vv, cdv, sdv, pv, qv)
    return v, delta, p_calc, q_calc, max_iter, False, -1
