"""Label semantic coordinate spaces and their transport cost matrices."""
from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

# Sentiment labels sit on a line, emotions in valence-arousal space and NLI
# labels at hand-picked 3-D points.
_BUILTIN = {
    "SA": (
        ["1", "2", "3", "4", "5"],
        [[1.0], [2.0], [3.0], [4.0], [5.0]],
    ),
    "ERC": (
        ["anger", "happiness", "no-emotion", "sadness", "surprise"],
        [[-0.4, 0.8], [0.9, 0.2], [0.0, 0.0], [-0.9, -0.4], [0.4, 0.9]],
    ),
    "NLI": (
        ["entailment", "neutral", "contradiction"],
        [[1.0, 0.0, 0.0], [0.5, 1.0, 0.5], [0.0, 0.0, 1.0]],
    ),
}

BUILTIN_TASKS = tuple(_BUILTIN)


@dataclass(frozen=True)
class LabelSpace:
    """Ordered labels with Euclidean coordinates and the induced cost matrix.

    Use :func:`build_space` rather than the constructor; it validates the
    inputs and precomputes ``cost``.
    """

    name: str
    labels: tuple[str, ...]
    coords: np.ndarray = field(repr=False)
    cost: np.ndarray = field(repr=False)

    @property
    def n_labels(self) -> int:
        return len(self.labels)

    @property
    def dim(self) -> int:
        return self.coords.shape[1]

    @property
    def max_cost(self) -> float:
        """Largest entry of the cost matrix (C_M)."""
        return float(self.cost.max())

    def index(self, label: str) -> int:
        return self.labels.index(label)

    def to_dict(self) -> dict:
        return {"name": self.name, "labels": list(self.labels), "coords": self.coords.tolist()}

    def __eq__(self, other: object) -> bool:
        if not isinstance(other, LabelSpace):
            return NotImplemented
        return (
            self.name == other.name
            and self.labels == other.labels
            and np.array_equal(self.coords, other.coords)
        )

    def __hash__(self) -> int:
        return hash((self.name, self.labels, self.coords.tobytes()))


def build_space(name: str, labels, coords) -> LabelSpace:
    labels = tuple(str(x) for x in labels)
    if len(labels) < 2:
        raise ValueError("a label space needs at least 2 labels")
    if len(set(labels)) != len(labels):
        raise ValueError(f"duplicate label names in {labels}")
    rows = [np.atleast_1d(np.asarray(c, dtype=np.float64)) for c in coords]
    if len(rows) != len(labels):
        raise ValueError(f"{len(labels)} labels but {len(rows)} coordinate vectors")
    dims = {r.shape for r in rows}
    if len(dims) != 1 or rows[0].ndim != 1 or rows[0].size < 1:
        raise ValueError(f"coordinate vectors must share one dimension, got shapes {sorted(dims)}")
    X = np.vstack(rows)
    if not np.isfinite(X).all():
        raise ValueError("coordinates must be finite")
    diff = X[:, None, :] - X[None, :, :]
    cost = np.sqrt((diff * diff).sum(-1))
    X.setflags(write=False)
    cost.setflags(write=False)
    return LabelSpace(name=str(name), labels=labels, coords=X, cost=cost)


def builtin_space(task: str) -> LabelSpace:
    """Return the SA, ERC or NLI label space."""
    key = str(task).upper()
    if key not in _BUILTIN:
        raise ValueError(f"unknown task {task!r}; expected one of {', '.join(BUILTIN_TASKS)}")
    labels, coords = _BUILTIN[key]
    return build_space(key, labels, coords)


def space_from_dict(doc: dict) -> LabelSpace:
    try:
        return build_space(doc["name"], doc["labels"], doc["coords"])
    except KeyError as exc:
        raise ValueError(f"label space document missing field {exc}") from None


def load_space(path) -> LabelSpace:
    """Load a custom space from ``{"name", "labels": [...], "coords": [[...], ...]}``."""
    with open(Path(path)) as fh:
        return space_from_dict(json.load(fh))


def resolve_space(spec) -> LabelSpace:
    """Accept a LabelSpace, a builtin task name, a space dict, or a JSON path."""
    if isinstance(spec, LabelSpace):
        return spec
    if isinstance(spec, dict):
        return space_from_dict(spec)
    if isinstance(spec, str) and spec.upper() in _BUILTIN:
        return builtin_space(spec)
    return load_space(spec)
