"""Sinkhorn kernel backend selection.

The compiled extension is used when importable; ``KNOT_BACKEND=python``
forces the numpy implementation.
"""
from __future__ import annotations

import os

from . import _sinkhorn_py

python_solve_batch = _sinkhorn_py.solve_batch

try:
    from ._sinkhorn_cy import solve_batch as compiled_solve_batch
except ImportError:  # extension not built
    compiled_solve_batch = None

if compiled_solve_batch is not None and os.environ.get("KNOT_BACKEND", "").lower() != "python":
    BACKEND = "cython"
    solve_batch = compiled_solve_batch
else:
    BACKEND = "python"
    solve_batch = python_solve_batch

__all__ = ["BACKEND", "solve_batch", "python_solve_batch", "compiled_solve_batch"]
