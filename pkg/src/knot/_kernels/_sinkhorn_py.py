"""Pure numpy batched log-domain Sinkhorn solver.

Each sample in the batch solves the entropic problem with its own marginals
and a shared cost matrix:

1. epsilon-scaling warm-up, unless initial potentials are given: a few
   averaged simultaneous sweeps ``f <- (f + F(g)) / 2``, ``g <- (g + G(f)) / 2``
   at eps = max(C), max(C) * factor, ... while above the target epsilon.
   At small eps the dual has directions the marginals no longer see; the
   symmetric form keeps them where a larger eps determined them instead of
   letting one-sided sweeps drift along them (for mu == nu it keeps f == g);
2. sweeps at the target epsilon with
   ``F(g) = -eps * LSE_j(log nu_j + (g_j - C_ij) / eps)``,
   ``G(f) = -eps * LSE_i(log mu_i + (f_i - C_ij) / eps)``
   until the sup-norm change of both potentials drops below ``tol``. The
   first ``newton_after`` sweeps are averaged like the warm-up, later ones
   alternate ``f = F(g)``, ``g = G(f)``;
3. once ``newton_after`` sweeps have passed without converging, each sweep is
   preceded by a damped Newton ascent step on the semi-dual in ``g``. Plain
   sweeps stall for exponentially long when the optimal plan is nearly
   block-diagonal (small eps, 1-D costs); the Newton step removes that;
4. a final Newton step and sweep after the tolerance is met, so the recovered
   plan's marginals are accurate well beyond ``tol``.

Returned potentials are centered so that ``mean(f) == 0``.
"""
from __future__ import annotations

import numpy as np


def _lse(v: np.ndarray, axis: int) -> np.ndarray:
    mx = v.max(axis=axis, keepdims=True)
    return (mx + np.log(np.exp(v - mx).sum(axis=axis, keepdims=True))).squeeze(axis)


def _f_from_g(lnu, g, C, eps):
    return -eps * _lse(lnu[:, None, :] + (g[:, None, :] - C) / eps, axis=2)


def _g_from_f(lmu, f, C, eps):
    return -eps * _lse(lmu[:, :, None] + (f[:, :, None] - C) / eps, axis=1)


def _semi_dual(mu, nu, lnu, g, C, eps):
    f = _f_from_g(lnu, g, C, eps)
    return (mu * f).sum(1) + (nu * g).sum(1), f


def _newton_step(mu, nu, lnu, g, C, eps, cap):
    """Damped Newton ascent on the semi-dual for every row of ``g`` (in place).

    The gauge is fixed on the heaviest teacher-side label; the Hessian gets a
    regularizer relative to each column mass so near-empty labels keep their
    full Newton step.
    """
    B, m = g.shape
    if m < 2:
        return
    phi, f = _semi_dual(mu, nu, lnu, g, C, eps)
    # P holds pi_ij / mu_i
    P = np.exp(lnu[:, None, :] + (f[:, :, None] + g[:, None, :] - C) / eps)
    col = np.einsum("bi,bij->bj", mu, P)
    H = np.einsum("bi,bij,bik->bjk", mu, P, P)
    gauge = nu.argmax(1)
    d = np.zeros((B, m))
    ok = np.ones(B, dtype=bool)
    for b in range(B):
        keep = np.arange(m) != gauge[b]
        M = -H[b][np.ix_(keep, keep)]
        M[np.diag_indices(m - 1)] += col[b, keep] * (1.0 + 1e-10) + 1e-300
        try:
            L = np.linalg.cholesky(M)
        except np.linalg.LinAlgError:
            ok[b] = False
            continue
        y = np.linalg.solve(L, eps * (nu[b, keep] - col[b, keep]))
        d[b, keep] = np.linalg.solve(L.T, y)
    slope = ((nu - col) * d).sum(1)
    dmax = np.abs(d).max(1)
    ok &= (slope > 0) & np.isfinite(dmax)
    t = np.where(ok, np.minimum(1.0, cap / np.where(dmax > 0, dmax, 1.0)), 0.0)
    pending = ok.copy()
    for _ in range(60):
        if not pending.any():
            break
        rows = np.flatnonzero(pending)
        gt = g[rows] + t[rows, None] * d[rows]
        phit, _ = _semi_dual(mu[rows], nu[rows], lnu[rows], gt, C, eps)
        accept = phit >= phi[rows] + 1e-4 * t[rows] * slope[rows] - 1e-14 * (1.0 + np.abs(phi[rows]))
        g[rows[accept]] = gt[accept]
        pending[rows[accept]] = False
        t[rows[~accept]] *= 0.5


def solve_batch(mu, nu, C, eps, max_iters, tol, init_f=None, init_g=None,
                scale_factor=0.2, stage_sweeps=3, newton_after=5):
    mu = np.ascontiguousarray(mu, dtype=np.float64)
    nu = np.ascontiguousarray(nu, dtype=np.float64)
    C = np.ascontiguousarray(C, dtype=np.float64)
    B, n = mu.shape
    m = nu.shape[1]
    lmu, lnu = np.log(mu), np.log(nu)
    cap = float(C.max()) if C.max() > 0 else 1.0
    if init_f is not None:
        f = np.array(init_f, dtype=np.float64).reshape(B, n)
        g = np.array(init_g, dtype=np.float64).reshape(B, m)
    else:
        f = np.zeros((B, n))
        g = np.zeros((B, m))
    iters = np.zeros(B, dtype=np.int64)
    conv = np.zeros(B, dtype=bool)

    if init_f is None:
        e = cap
        while e > eps:
            active = np.ones(B, dtype=bool)
            for _ in range(stage_sweeps):
                rows = np.flatnonzero(active)
                if rows.size == 0:
                    break
                fn = 0.5 * (f[rows] + _f_from_g(lnu[rows], g[rows], C, e))
                gn = 0.5 * (g[rows] + _g_from_f(lmu[rows], f[rows], C, e))
                delta = np.maximum(np.abs(fn - f[rows]).max(1), np.abs(gn - g[rows]).max(1))
                f[rows], g[rows] = fn, gn
                iters[rows] += 1
                active[rows[delta < 1e-2 * e]] = False
            e *= scale_factor

    active = np.ones(B, dtype=bool)
    it = 0
    while it < max_iters:
        rows = np.flatnonzero(active)
        if rows.size == 0:
            break
        if it >= newton_after:
            # Newton may move potentials of near-zero-mass labels along flat
            # directions; an unmeasured sweep re-projects them.
            gr = g[rows]
            _newton_step(mu[rows], nu[rows], lnu[rows], gr, C, eps, cap)
            fn = _f_from_g(lnu[rows], gr, C, eps)
            f[rows], g[rows] = fn, _g_from_f(lmu[rows], fn, C, eps)
            iters[rows] += 1
            it += 1
            if it >= max_iters:
                break
        if it < newton_after:
            # averaged sweeps first: a one-sided sweep right after the last
            # scaling stage would lock in an O(eps change) drift
            fn = 0.5 * (f[rows] + _f_from_g(lnu[rows], g[rows], C, eps))
            gn = 0.5 * (g[rows] + _g_from_f(lmu[rows], f[rows], C, eps))
        else:
            fn = _f_from_g(lnu[rows], g[rows], C, eps)
            gn = _g_from_f(lmu[rows], fn, C, eps)
        it += 1
        delta = np.maximum(np.abs(fn - f[rows]).max(1), np.abs(gn - g[rows]).max(1))
        f[rows], g[rows] = fn, gn
        iters[rows] += 1
        if not np.isfinite(delta).all():
            raise FloatingPointError("non-finite Sinkhorn potentials; cost/epsilon ratio overflows")
        done = delta < tol
        if done.any():
            # one more Newton round: the residual left at the tol exit would
            # otherwise perturb the primal value
            dr = rows[done]
            gr = g[dr]
            _newton_step(mu[dr], nu[dr], lnu[dr], gr, C, eps, cap)
            fn = _f_from_g(lnu[dr], gr, C, eps)
            f[dr], g[dr] = fn, _g_from_f(lmu[dr], fn, C, eps)
            iters[dr] += 1
        conv[rows[done]] = True
        active[rows[done]] = False

    shift = f.mean(1, keepdims=True)
    return f - shift, g + shift, iters, conv
