# cython: language_level=3, boundscheck=False, wraparound=False, cdivision=True, initializedcheck=False
"""Compiled batched log-domain Sinkhorn solver.

Mirrors ``knot._kernels._sinkhorn_py.solve_batch`` step for step; see that
module for the algorithm description.
"""
import numpy as np
cimport numpy as cnp
from libc.math cimport exp, log, fabs, sqrt, INFINITY, isfinite
from libc.stdlib cimport malloc, free

cnp.import_array()


cdef inline void _f_from_g(int n, int m, const double* lnu, const double* g,
                           const double* C, double eps, double* buf, double* out) noexcept nogil:
    cdef int i, j
    cdef double mx, s, v
    for i in range(n):
        mx = -INFINITY
        for j in range(m):
            v = lnu[j] + (g[j] - C[i * m + j]) / eps
            buf[j] = v
            if v > mx:
                mx = v
        s = 0.0
        for j in range(m):
            s += exp(buf[j] - mx)
        out[i] = -eps * (mx + log(s))


cdef inline void _g_from_f(int n, int m, const double* lmu, const double* f,
                           const double* C, double eps, double* buf, double* out) noexcept nogil:
    cdef int i, j
    cdef double mx, s, v
    for j in range(m):
        mx = -INFINITY
        for i in range(n):
            v = lmu[i] + (f[i] - C[i * m + j]) / eps
            buf[i] = v
            if v > mx:
                mx = v
        s = 0.0
        for i in range(n):
            s += exp(buf[i] - mx)
        out[j] = -eps * (mx + log(s))


cdef inline double _semi_dual(int n, int m, const double* mu, const double* lnu, const double* nu,
                              const double* g, const double* C, double eps,
                              double* buf, double* fbuf) noexcept nogil:
    # value of <mu, F(g)> + <nu, g>; leaves F(g) in fbuf
    cdef int i, j
    cdef double val = 0.0
    _f_from_g(n, m, lnu, g, C, eps, buf, fbuf)
    for i in range(n):
        val += mu[i] * fbuf[i]
    for j in range(m):
        val += nu[j] * g[j]
    return val


cdef int _newton_step(int n, int m, const double* mu, const double* lmu,
                      const double* nu, const double* lnu, double* g,
                      const double* C, double eps, double cap,
                      double* buf, double* fbuf, double* P, double* col,
                      double* M, double* d, double* gt, int* ix) noexcept nogil:
    """One damped Newton ascent step on the semi-dual in g. Returns 1 if taken.

    The gauge is fixed on the heaviest teacher-side label; the Hessian gets a
    regularizer relative to each column mass so near-empty labels keep their
    full Newton step.
    """
    cdef int i, j, k, r = m - 1, it, jg = 0, a, c
    cdef double phi, phit, s, slope, t, dmax, piv
    if r < 1:
        return 0
    for j in range(1, m):
        if nu[j] > nu[jg]:
            jg = j
    k = 0
    for j in range(m):
        if j != jg:
            ix[k] = j
            k += 1
    phi = _semi_dual(n, m, mu, lnu, nu, g, C, eps, buf, fbuf)
    for j in range(m):
        col[j] = 0.0
    for i in range(n):
        for j in range(m):
            # P stores pi_ij / mu_i
            P[i * m + j] = exp(lnu[j] + (fbuf[i] + g[j] - C[i * m + j]) / eps)
            col[j] += mu[i] * P[i * m + j]
    # reduced Hessian: diag(col) - P^T diag(mu) P
    for a in range(r):
        for c in range(a + 1):
            s = 0.0
            for i in range(n):
                s += mu[i] * P[i * m + ix[a]] * P[i * m + ix[c]]
            M[a * r + c] = -s
        M[a * r + a] += col[ix[a]] * (1.0 + 1e-10) + 1e-300
    # Cholesky in place (lower)
    for j in range(r):
        s = M[j * r + j]
        for k in range(j):
            s -= M[j * r + k] * M[j * r + k]
        if not (s > 0.0):
            return 0
        piv = sqrt(s)
        M[j * r + j] = piv
        for i in range(j + 1, r):
            s = M[i * r + j]
            for k in range(j):
                s -= M[i * r + k] * M[j * r + k]
            M[i * r + j] = s / piv
    # solve M d = eps * grad
    for j in range(r):
        s = eps * (nu[ix[j]] - col[ix[j]])
        for k in range(j):
            s -= M[j * r + k] * d[k]
        d[j] = s / M[j * r + j]
    for j in range(r - 1, -1, -1):
        s = d[j]
        for k in range(j + 1, r):
            s -= M[k * r + j] * d[k]
        d[j] = s / M[j * r + j]
    slope = 0.0
    dmax = 0.0
    for j in range(r):
        slope += (nu[ix[j]] - col[ix[j]]) * d[j]
        if fabs(d[j]) > dmax:
            dmax = fabs(d[j])
    if not (slope > 0.0) or not isfinite(dmax):
        return 0
    t = 1.0
    if dmax * t > cap:
        t = cap / dmax
    gt[jg] = g[jg]
    for it in range(60):
        for j in range(r):
            gt[ix[j]] = g[ix[j]] + t * d[j]
        phit = _semi_dual(n, m, mu, lnu, nu, gt, C, eps, buf, fbuf)
        if phit >= phi + 1e-4 * t * slope - 1e-14 * (1.0 + fabs(phi)):
            for j in range(m):
                g[j] = gt[j]
            return 1
        t *= 0.5
    return 0


def solve_batch(const double[:, ::1] mu, const double[:, ::1] nu, const double[:, ::1] C, double eps,
                int max_iters, double tol, object init_f=None, object init_g=None,
                double scale_factor=0.2, int stage_sweeps=3, int newton_after=5):
    cdef Py_ssize_t B = mu.shape[0]
    cdef int n = <int>mu.shape[1], m = <int>nu.shape[1]
    cdef Py_ssize_t b
    cdef int i, j, it, k, warm = init_f is not None
    cdef double e, delta, cap = 0.0, mean_f, v

    f_arr = np.zeros((B, n), dtype=np.float64)
    g_arr = np.zeros((B, m), dtype=np.float64)
    if warm:
        f_arr[...] = init_f
        g_arr[...] = init_g
    iters_arr = np.zeros(B, dtype=np.int64)
    conv_arr = np.zeros(B, dtype=np.bool_)
    cdef double[:, ::1] F = f_arr
    cdef double[:, ::1] G = g_arr
    cdef long long[::1] iters = iters_arr
    cdef cnp.npy_bool[::1] conv = conv_arr
    cdef int bad = 0

    for i in range(n):
        for j in range(m):
            if C[i, j] > cap:
                cap = C[i, j]
    if cap <= 0.0:
        cap = 1.0

    cdef int big = n if n > m else m
    cdef double* lmu = <double*>malloc(n * sizeof(double))
    cdef double* lnu = <double*>malloc(m * sizeof(double))
    cdef double* fn = <double*>malloc(n * sizeof(double))
    cdef double* gn = <double*>malloc(m * sizeof(double))
    cdef double* buf = <double*>malloc(big * sizeof(double))
    cdef double* fbuf = <double*>malloc(n * sizeof(double))
    cdef double* P = <double*>malloc(n * m * sizeof(double))
    cdef double* col = <double*>malloc(m * sizeof(double))
    cdef double* Mw = <double*>malloc(m * m * sizeof(double))
    cdef double* dw = <double*>malloc(m * sizeof(double))
    cdef double* gt = <double*>malloc(m * sizeof(double))
    cdef int* ixw = <int*>malloc(m * sizeof(int))
    cdef const double* Cp = &C[0, 0]
    try:
        with nogil:
            for b in range(B):
                for i in range(n):
                    lmu[i] = log(mu[b, i])
                for j in range(m):
                    lnu[j] = log(nu[b, j])
                k = 0
                if not warm:
                    e = cap
                    while e > eps:
                        for it in range(stage_sweeps):
                            # averaged simultaneous update
                            _f_from_g(n, m, lnu, &G[b, 0], Cp, e, buf, fn)
                            _g_from_f(n, m, lmu, &F[b, 0], Cp, e, buf, gn)
                            for i in range(n):
                                fn[i] = 0.5 * (F[b, i] + fn[i])
                            for j in range(m):
                                gn[j] = 0.5 * (G[b, j] + gn[j])
                            delta = 0.0
                            for i in range(n):
                                v = fabs(fn[i] - F[b, i])
                                if v > delta:
                                    delta = v
                                F[b, i] = fn[i]
                            for j in range(m):
                                v = fabs(gn[j] - G[b, j])
                                if v > delta:
                                    delta = v
                                G[b, j] = gn[j]
                            k += 1
                            if delta < 1e-2 * e:
                                break
                        e *= scale_factor
                it = 0
                while it < max_iters:
                    if it >= newton_after:
                        # Newton may move potentials of near-zero-mass labels along
                        # flat directions; an unmeasured sweep re-projects them.
                        _newton_step(n, m, &mu[b, 0], lmu, &nu[b, 0], lnu, &G[b, 0], Cp, eps,
                                     cap, buf, fbuf, P, col, Mw, dw, gt, ixw)
                        _f_from_g(n, m, lnu, &G[b, 0], Cp, eps, buf, fn)
                        _g_from_f(n, m, lmu, fn, Cp, eps, buf, gn)
                        for i in range(n):
                            F[b, i] = fn[i]
                        for j in range(m):
                            G[b, j] = gn[j]
                        k += 1
                        it += 1
                        if it >= max_iters:
                            break
                    if it < newton_after:
                        # averaged sweeps first: a one-sided sweep right after the
                        # last scaling stage would lock in an O(eps change) drift
                        _f_from_g(n, m, lnu, &G[b, 0], Cp, eps, buf, fn)
                        _g_from_f(n, m, lmu, &F[b, 0], Cp, eps, buf, gn)
                        for i in range(n):
                            fn[i] = 0.5 * (F[b, i] + fn[i])
                        for j in range(m):
                            gn[j] = 0.5 * (G[b, j] + gn[j])
                    else:
                        _f_from_g(n, m, lnu, &G[b, 0], Cp, eps, buf, fn)
                        _g_from_f(n, m, lmu, fn, Cp, eps, buf, gn)
                    it += 1
                    delta = 0.0
                    for i in range(n):
                        v = fabs(fn[i] - F[b, i])
                        if v > delta:
                            delta = v
                        F[b, i] = fn[i]
                    for j in range(m):
                        v = fabs(gn[j] - G[b, j])
                        if v > delta:
                            delta = v
                        G[b, j] = gn[j]
                    k += 1
                    if not isfinite(delta):
                        bad = 1
                        break
                    if delta < tol:
                        conv[b] = 1
                        # one more Newton round: the residual left at the tol
                        # exit would otherwise perturb the primal value
                        _newton_step(n, m, &mu[b, 0], lmu, &nu[b, 0], lnu, &G[b, 0], Cp, eps,
                                     cap, buf, fbuf, P, col, Mw, dw, gt, ixw)
                        _f_from_g(n, m, lnu, &G[b, 0], Cp, eps, buf, fn)
                        _g_from_f(n, m, lmu, fn, Cp, eps, buf, gn)
                        for i in range(n):
                            F[b, i] = fn[i]
                        for j in range(m):
                            G[b, j] = gn[j]
                        k += 1
                        break
                iters[b] = k
                if bad:
                    break
                mean_f = 0.0
                for i in range(n):
                    mean_f += F[b, i]
                mean_f /= n
                for i in range(n):
                    F[b, i] -= mean_f
                for j in range(m):
                    G[b, j] += mean_f
    finally:
        free(lmu); free(lnu); free(fn); free(gn); free(buf); free(fbuf)
        free(P); free(col); free(Mw); free(dw); free(gt); free(ixw)
    if bad:
        raise FloatingPointError("non-finite Sinkhorn potentials; cost/epsilon ratio overflows")
    return f_arr, g_arr, iters_arr, conv_arr
