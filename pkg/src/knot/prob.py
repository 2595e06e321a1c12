"""Probability-simplex vectors over a label space.

The numerical modules work on plain ``numpy`` arrays for speed; the
:class:`Distribution` and :class:`LogitVector` wrappers carry the label space
along and validate the simplex invariants at the API boundary.
"""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .label_space import LabelSpace

SIMPLEX_TOL = 1e-9
LOG_FLOOR = 1e-12


@dataclass(frozen=True)
class Distribution:
    space: LabelSpace
    p: np.ndarray = field(repr=False)

    def __post_init__(self):
        p = np.array(self.p, dtype=np.float64).reshape(-1)
        if p.size != self.space.n_labels:
            raise ValueError(f"expected {self.space.n_labels} probabilities, got {p.size}")
        if not np.isfinite(p).all() or (p < 0).any():
            raise ValueError("probabilities must be finite and non-negative")
        if abs(p.sum() - 1.0) > SIMPLEX_TOL:
            raise ValueError(f"probabilities sum to {p.sum()!r}, not 1")
        p.setflags(write=False)
        object.__setattr__(self, "p", p)

    def __array__(self, dtype=None, copy=None):
        return self.p if dtype is None else self.p.astype(dtype)

    def __len__(self) -> int:
        return self.p.size

    @classmethod
    def one_hot(cls, space: LabelSpace, index: int) -> "Distribution":
        p = np.zeros(space.n_labels)
        p[index] = 1.0
        return cls(space, p)

    @classmethod
    def uniform(cls, space: LabelSpace) -> "Distribution":
        return cls(space, np.full(space.n_labels, 1.0 / space.n_labels))


@dataclass(frozen=True)
class LogitVector:
    space: LabelSpace
    z: np.ndarray = field(repr=False)

    def __post_init__(self):
        z = np.array(self.z, dtype=np.float64).reshape(-1)
        if z.size != self.space.n_labels:
            raise ValueError(f"expected {self.space.n_labels} logits, got {z.size}")
        if not np.isfinite(z).all():
            raise ValueError("logits must be finite")
        z.setflags(write=False)
        object.__setattr__(self, "z", z)


def softmax_rows(z: np.ndarray) -> np.ndarray:
    """Row-wise stable softmax of a 1-D or 2-D array."""
    z = np.asarray(z, dtype=np.float64)
    e = np.exp(z - z.max(axis=-1, keepdims=True))
    return e / e.sum(axis=-1, keepdims=True)


def softmax(z: LogitVector) -> Distribution:
    return Distribution(z.space, softmax_rows(z.z))


def clamp_rows(p: np.ndarray, floor: float = LOG_FLOOR) -> np.ndarray:
    """Array version of :func:`clamp_simplex`, row-wise for 2-D input."""
    p = np.asarray(p, dtype=np.float64)
    if (p < 0).any() or not np.isfinite(p).all():
        raise ValueError("entries must be finite and non-negative")
    if (p.sum(axis=-1) <= 0).any():
        raise ValueError("cannot clamp an all-zero vector")
    q = np.maximum(p, floor)
    return q / q.sum(axis=-1, keepdims=True)


def clamp_simplex(p, floor: float = LOG_FLOOR, space: LabelSpace | None = None):
    """Floor every entry at ``floor`` and renormalize.

    Returns a :class:`Distribution` when the input is one (or ``space`` is
    given), otherwise an array.
    """
    if isinstance(p, Distribution):
        return Distribution(p.space, clamp_rows(p.p, floor))
    q = clamp_rows(p, floor)
    return Distribution(space, q) if space is not None else q


def expectation_in_space(p, space: LabelSpace | None = None) -> np.ndarray:
    """Probability-weighted mean of the label coordinates.

    Accepts a :class:`Distribution` or an array of shape ``(L,)``/``(N, L)``
    together with ``space``.
    """
    if isinstance(p, Distribution):
        space, p = p.space, p.p
    if space is None:
        raise TypeError("space is required for array input")
    return np.asarray(p, dtype=np.float64) @ space.coords


def as_array(p) -> np.ndarray:
    if isinstance(p, Distribution):
        return p.p
    return np.asarray(p, dtype=np.float64)
