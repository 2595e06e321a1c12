"""Linear-softmax classifiers: h(x) = softmax(W x + b).

Teachers, the pretrained global model and the distilled student all use this
hypothesis class. Gradients coming from the divergences live in probability
space; :meth:`LinearSoftmaxClassifier.backward_from_prob_grad` chains them
through the softmax Jacobian down to ``(W, b)``.
"""
from __future__ import annotations

import json
from dataclasses import dataclass

import numpy as np

from ._io import write_json_atomic
from .label_space import LabelSpace, resolve_space
from .prob import Distribution, softmax_rows


@dataclass(frozen=True)
class OptimizerConfig:
    learning_rate: float = 0.1
    batch_size: int = 256
    epochs: int = 20
    seed: int = 0

    def __post_init__(self):
        if not self.learning_rate > 0:
            raise ValueError(f"learning_rate must be > 0, got {self.learning_rate}")
        if int(self.batch_size) < 1:
            raise ValueError(f"batch_size must be >= 1, got {self.batch_size}")
        if int(self.epochs) < 0:
            raise ValueError(f"epochs must be >= 0, got {self.epochs}")


def _as_batch(X, feature_dim: int) -> tuple[np.ndarray, bool]:
    X = np.asarray(X, dtype=np.float64)
    single = X.ndim == 1
    if single:
        X = X[None, :]
    if X.ndim != 2 or X.shape[1] != feature_dim:
        raise ValueError(f"expected inputs with {feature_dim} features, got shape {X.shape}")
    return X, single


class LinearSoftmaxClassifier:
    def __init__(self, space: LabelSpace, feature_dim: int, W=None, b=None):
        self.space = space
        self.feature_dim = int(feature_dim)
        L = space.n_labels
        self.W = np.zeros((L, self.feature_dim)) if W is None else np.array(W, dtype=np.float64)
        self.b = np.zeros(L) if b is None else np.array(b, dtype=np.float64).reshape(-1)
        if self.W.shape != (L, self.feature_dim) or self.b.shape != (L,):
            raise ValueError(
                f"parameter shapes W{self.W.shape}, b{self.b.shape} do not match "
                f"{L} labels x {self.feature_dim} features"
            )
        if not (np.isfinite(self.W).all() and np.isfinite(self.b).all()):
            raise ValueError("parameters must be finite")

    @classmethod
    def initialize(cls, space: LabelSpace, feature_dim: int, seed: int = 0, std: float = 0.01):
        """Gaussian(0, std) weights and biases from ``seed``."""
        rng = np.random.default_rng(seed)
        W = rng.normal(0.0, std, size=(space.n_labels, int(feature_dim)))
        b = rng.normal(0.0, std, size=space.n_labels)
        return cls(space, feature_dim, W, b)

    def copy(self) -> "LinearSoftmaxClassifier":
        return LinearSoftmaxClassifier(self.space, self.feature_dim, self.W.copy(), self.b.copy())

    # -- inference ---------------------------------------------------------
    def logits(self, X) -> np.ndarray:
        X, single = _as_batch(X, self.feature_dim)
        z = X @ self.W.T + self.b
        return z[0] if single else z

    def predict_proba(self, X) -> np.ndarray:
        """Class probabilities, ``(L,)`` for one input or ``(N, L)`` for a batch."""
        return softmax_rows(self.logits(X))

    __call__ = predict_proba

    def forward(self, x) -> Distribution:
        return Distribution(self.space, self.predict_proba(np.asarray(x, dtype=np.float64).reshape(-1)))

    def predict_argmax(self, X):
        # np.argmax returns the first maximum, i.e. ties go to the lowest index
        p = self.predict_proba(X)
        return int(np.argmax(p)) if p.ndim == 1 else np.argmax(p, axis=1)

    # -- gradients ---------------------------------------------------------
    def backward_from_prob_grad(self, X, dL_dp) -> tuple[np.ndarray, np.ndarray]:
        """Chain ``dL/dp`` through softmax: ``dL/dz = (diag(p) - p p^T) dL/dp``.

        For a batch, the per-sample parameter gradients are summed; scale
        ``dL_dp`` beforehand to get a mean.
        """
        X, _ = _as_batch(X, self.feature_dim)
        G = np.asarray(dL_dp, dtype=np.float64)
        G = G[None, :] if G.ndim == 1 else G
        if G.shape != (X.shape[0], self.space.n_labels):
            raise ValueError(f"dL_dp has shape {G.shape}, expected {(X.shape[0], self.space.n_labels)}")
        if not np.isfinite(G).all():
            raise ValueError("dL_dp must be finite")
        P = softmax_rows(X @ self.W.T + self.b)
        dz = P * (G - (P * G).sum(1, keepdims=True))
        return dz.T @ X, dz.sum(0)

    # -- persistence -------------------------------------------------------
    def to_dict(self) -> dict:
        return {
            "space": self.space.to_dict(),
            "feature_dim": self.feature_dim,
            "W": self.W.tolist(),
            "b": self.b.tolist(),
        }

    @classmethod
    def from_dict(cls, doc: dict) -> "LinearSoftmaxClassifier":
        try:
            # the space may be stored inline or as a builtin task name
            space = resolve_space(doc["space"])
            return cls(space, doc["feature_dim"], doc["W"], doc["b"])
        except KeyError as exc:
            raise ValueError(f"model document missing field {exc}") from None

    def save(self, path) -> None:
        write_json_atomic(path, self.to_dict())

    @classmethod
    def load(cls, path) -> "LinearSoftmaxClassifier":
        with open(path) as fh:
            return cls.from_dict(json.load(fh))


def cross_entropy(model: LinearSoftmaxClassifier, X, y) -> float:
    P = model.predict_proba(np.atleast_2d(X))
    y = np.asarray(y, dtype=np.int64).reshape(-1)
    return float(-np.log(np.maximum(P[np.arange(y.size), y], 1e-300)).mean())


def train_ce(model: LinearSoftmaxClassifier, X, y, opt: OptimizerConfig | None = None):
    """Mini-batch SGD on mean cross-entropy; returns ``(trained copy, accuracy curve)``.

    The curve holds the training accuracy before training (entry 0) and after
    every epoch.
    """
    opt = opt or OptimizerConfig()
    X, _ = _as_batch(X, model.feature_dim)
    y = np.asarray(y, dtype=np.int64).reshape(-1)
    if X.shape[0] == 0:
        raise ValueError("cannot train on an empty dataset")
    if y.shape[0] != X.shape[0]:
        raise ValueError(f"{X.shape[0]} inputs but {y.shape[0]} labels")
    L = model.space.n_labels
    if y.min() < 0 or y.max() >= L:
        raise ValueError(f"labels must be in [0, {L})")
    out = model.copy()
    rng = np.random.default_rng(opt.seed)
    onehot = np.eye(L)[y]
    curve = [float((out.predict_argmax(X) == y).mean())]
    n = X.shape[0]
    for _ in range(int(opt.epochs)):
        order = rng.permutation(n)
        for start in range(0, n, int(opt.batch_size)):
            idx = order[start:start + int(opt.batch_size)]
            Xb = X[idx]
            dz = (softmax_rows(Xb @ out.W.T + out.b) - onehot[idx]) / idx.size
            out.W -= opt.learning_rate * (dz.T @ Xb)
            out.b -= opt.learning_rate * dz.sum(0)
        curve.append(float((out.predict_argmax(X) == y).mean()))
    return out, curve
