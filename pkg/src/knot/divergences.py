"""Discrepancies between label distributions.

* entropic optimal transport (Sinkhorn) with dual-potential gradients;
* KL divergence, the entropy-based baseline;
* the closed-form 1-D Wasserstein-1 distance, used as an oracle.

The student distribution is always the first argument.
"""
from __future__ import annotations

import os
from dataclasses import dataclass

import numpy as np

from . import _kernels
from .label_space import LabelSpace
from .prob import LOG_FLOOR, as_array, clamp_rows

# Checked on every Sinkhorn value when set (the test suite turns it on).
CHECK_INVARIANTS = os.environ.get("KNOT_CHECK_INVARIANTS", "") not in ("", "0")


class InvariantViolation(AssertionError):
    pass


@dataclass(frozen=True)
class SinkhornConfig:
    epsilon: float = 1e-3
    max_iters: int = 5000
    tol: float = 1e-9

    def __post_init__(self):
        if not self.epsilon > 0:
            raise ValueError(f"epsilon must be > 0, got {self.epsilon}")
        if int(self.max_iters) < 1:
            raise ValueError(f"max_iters must be >= 1, got {self.max_iters}")
        if not self.tol > 0:
            raise ValueError(f"tol must be > 0, got {self.tol}")


@dataclass(frozen=True)
class DualPotentials:
    f: np.ndarray
    g: np.ndarray
    converged: bool
    iters_used: int


@dataclass(frozen=True)
class BatchPotentials:
    """Potentials for a batch of problems sharing one cost matrix."""

    f: np.ndarray  # (B, n)
    g: np.ndarray  # (B, m)
    converged: np.ndarray  # (B,) bool
    iters_used: np.ndarray  # (B,) int


def _cost_matrix(cost) -> np.ndarray:
    if isinstance(cost, LabelSpace):
        return cost.cost
    C = np.ascontiguousarray(cost, dtype=np.float64)
    if not np.isfinite(C).all():
        raise ValueError("cost matrix has non-finite entries")
    return C


def _rows(x) -> np.ndarray:
    a = as_array(x)
    return a[None, :] if a.ndim == 1 else a


def sinkhorn_batch(mu, nu, cost, cfg: SinkhornConfig | None = None, init=None) -> BatchPotentials:
    """Solve ``B`` entropic OT problems, one per row of ``mu``/``nu``.

    Rows are clamped away from zero first. ``init`` is an optional ``(f, g)``
    pair of warm-start potentials, which skips epsilon-scaling.
    """
    cfg = cfg or SinkhornConfig()
    C = _cost_matrix(cost)
    mu, nu = clamp_rows(_rows(mu)), clamp_rows(_rows(nu))
    if mu.shape[1] != C.shape[0] or nu.shape[1] != C.shape[1]:
        raise ValueError(f"marginal sizes {mu.shape[1]}x{nu.shape[1]} do not match cost {C.shape}")
    if mu.shape[0] != nu.shape[0]:
        raise ValueError("mu and nu must have the same number of rows")
    init_f = init_g = None
    if init is not None:
        init_f = np.ascontiguousarray(init[0], dtype=np.float64)
        init_g = np.ascontiguousarray(init[1], dtype=np.float64)
    f, g, iters, conv = _kernels.solve_batch(
        mu, nu, C, float(cfg.epsilon), int(cfg.max_iters), float(cfg.tol), init_f, init_g
    )
    if not (np.isfinite(f).all() and np.isfinite(g).all()):
        raise FloatingPointError("Sinkhorn potentials became non-finite")
    return BatchPotentials(f=f, g=g, converged=conv.astype(bool), iters_used=iters)


def sinkhorn_potentials(mu, nu, cost, cfg: SinkhornConfig | None = None) -> DualPotentials:
    """Dual potentials ``(f, g)`` of the entropic problem, ``f`` centered."""
    res = sinkhorn_batch(mu, nu, cost, cfg)
    return DualPotentials(
        f=res.f[0], g=res.g[0], converged=bool(res.converged[0]), iters_used=int(res.iters_used[0])
    )


def _log_plan(mu, nu, C, f, g, eps):
    return np.log(mu)[:, :, None] + np.log(nu)[:, None, :] + (f[:, :, None] + g[:, None, :] - C) / eps


def plan_from_potentials(mu, nu, cost, f, g, epsilon: float) -> np.ndarray:
    """``pi_ij = mu_i nu_j exp((f_i + g_j - C_ij) / eps)``; batched when inputs are 2-D."""
    C = _cost_matrix(cost)
    single = np.ndim(f) == 1
    mu, nu = clamp_rows(_rows(mu)), clamp_rows(_rows(nu))
    P = np.exp(_log_plan(mu, nu, C, np.atleast_2d(f), np.atleast_2d(g), epsilon))
    return P[0] if single else P


def _objective_terms(mu, nu, C, pot: BatchPotentials, eps: float):
    """Transport term <pi, C> and entropic term eps * KL(pi | mu x nu) per row."""
    mu, nu = clamp_rows(mu), clamp_rows(nu)
    S = (pot.f[:, :, None] + pot.g[:, None, :] - C) / eps
    P = np.exp(np.log(mu)[:, :, None] + np.log(nu)[:, None, :] + S)
    transport = (P * C).sum((1, 2))
    # log(pi / (mu nu)) == S exactly, so no log of tiny plan entries is needed
    entropic = eps * ((P * S).sum((1, 2)) - P.sum((1, 2)) + 1.0)
    if CHECK_INVARIANTS:
        cmax = float(C.max())
        slack = 1e-6 * max(cmax, 1.0)
        if (transport < -slack).any() or (transport > cmax + slack).any():
            raise InvariantViolation(
                f"transport term outside [0, {cmax}]: {transport.min()}..{transport.max()}"
            )
    return transport, entropic


def sinkhorn_terms(mu, nu, cost, cfg: SinkhornConfig | None = None, pot: BatchPotentials | None = None):
    """Return ``(transport, entropic, potentials)`` for a batch of rows."""
    cfg = cfg or SinkhornConfig()
    C = _cost_matrix(cost)
    mu, nu = _rows(mu), _rows(nu)
    if pot is None:
        pot = sinkhorn_batch(mu, nu, C, cfg)
    transport, entropic = _objective_terms(mu, nu, C, pot, cfg.epsilon)
    return transport, entropic, pot


def sinkhorn_distance_batch(mu, nu, cost, cfg: SinkhornConfig | None = None, pot=None) -> np.ndarray:
    transport, entropic, _ = sinkhorn_terms(mu, nu, cost, cfg, pot)
    return transport + entropic


def sinkhorn_distance(mu, nu, cost, cfg: SinkhornConfig | None = None) -> float:
    """Entropic OT value: the primal objective at the plan recovered from the potentials."""
    return float(sinkhorn_distance_batch(mu, nu, cost, cfg)[0])


def transport_cost(mu, nu, cost, cfg: SinkhornConfig | None = None) -> float:
    """The transport part ``<pi, C>`` of the entropic solution."""
    transport, _, _ = sinkhorn_terms(mu, nu, cost, cfg)
    return float(transport[0])


def sinkhorn_grad_student(mu, nu, cost, cfg: SinkhornConfig | None = None) -> np.ndarray:
    """Gradient of the entropic OT value w.r.t. the student marginal ``mu``.

    This is the student-side potential ``f``, centered; the constant it is
    defined up to is annihilated by the simplex constraint.
    """
    return sinkhorn_potentials(mu, nu, cost, cfg).f.copy()


def w1_exact_1d(mu, nu, space: LabelSpace) -> float:
    """Closed-form Wasserstein-1 distance on a one-dimensional label space."""
    if space.dim != 1:
        raise ValueError(f"w1_exact_1d needs a 1-D space, {space.name!r} has dimension {space.dim}")
    x = space.coords[:, 0]
    order = np.argsort(x, kind="stable")
    a, b = as_array(mu)[order], as_array(nu)[order]
    gaps = np.diff(x[order])
    cdf_gap = np.abs(np.cumsum(a) - np.cumsum(b))[:-1]
    return float((cdf_gap * gaps).sum())


def kl_rows(p, q) -> np.ndarray:
    """Row-wise KL(p || q) with 0 log 0 = 0; ``q`` is clamped away from zero."""
    p, q = _rows(p), clamp_rows(_rows(q))
    with np.errstate(divide="ignore", invalid="ignore"):
        terms = np.where(p > 0, p * (np.log(p) - np.log(q)), 0.0)
    return terms.sum(1)


def kl_grad_rows(p, q) -> np.ndarray:
    """Centered ``d KL(p || q) / d p = log(p / q) + 1``, row-wise."""
    p, q = clamp_rows(_rows(p), LOG_FLOOR), clamp_rows(_rows(q))
    g = np.log(p) - np.log(q)
    return g - g.mean(1, keepdims=True)


def kl_divergence(p, q) -> float:
    return float(kl_rows(p, q)[0])


def kl_grad_student(p, q) -> np.ndarray:
    return kl_grad_rows(p, q)[0]


def divergence_rows(name: str, student, teacher, cost, cfg: SinkhornConfig | None = None, init=None):
    """Values, centered student gradients and (for Sinkhorn) potentials, row-wise."""
    if name == "kl":
        return kl_rows(student, teacher), kl_grad_rows(student, teacher), None
    if name == "sinkhorn":
        pot = sinkhorn_batch(student, teacher, cost, cfg, init=init)
        vals = sinkhorn_distance_batch(student, teacher, cost, cfg, pot)
        return vals, pot.f, pot
    raise ValueError(f"unknown divergence {name!r}; expected 'sinkhorn' or 'kl'")


DIVERGENCES = ("sinkhorn", "kl")
