"""Weighted ensemble distillation into a linear-softmax student.

For a transfer sample x the loss is

    L(x) = sum_k  w_k(x) / sum_j w_j(x) * D(student(x), teacher_k(x))

with D either the entropic OT value (``"sinkhorn"``) or KL (``"kl"``) and
w_k(x) from one of the A/D/U/E schemes. Only teacher *predictions* cross into
this module; teacher parameters and training data never do.
"""
from __future__ import annotations

import io
from dataclasses import dataclass, field, replace
from typing import Callable

import numpy as np

from .confidence import ProbabilityBias, WeightScheme, estimate_bias, weight_rows
from .divergences import SinkhornConfig, divergence_rows
from .label_space import LabelSpace
from .model import LinearSoftmaxClassifier, OptimizerConfig
from .prob import as_array


@dataclass(frozen=True)
class Teacher:
    teacher_id: str
    predict: Callable[[np.ndarray], np.ndarray]
    bias: ProbabilityBias | None = None
    dataset_size: int = 1


class CachedPredictions:
    """Frozen predictions on a fixed input set; other inputs are rejected."""

    def __init__(self, X, P):
        self._X = np.array(X, dtype=np.float64)
        self._P = np.array(P, dtype=np.float64)
        self._X.setflags(write=False)
        self._P.setflags(write=False)
        self._index = None

    @property
    def predictions(self) -> np.ndarray:
        return self._P

    def __call__(self, X) -> np.ndarray:
        X = np.asarray(X, dtype=np.float64)
        if X.shape == self._X.shape and np.array_equal(X, self._X):
            return self._P.copy()
        if self._index is None:
            self._index = {row.tobytes(): i for i, row in enumerate(self._X)}
        try:
            rows = [self._index[r.tobytes()] for r in np.atleast_2d(X)]
        except KeyError:
            raise KeyError("input not in the cached transfer set") from None
        out = self._P[rows]
        return out[0] if X.ndim == 1 else out


@dataclass(frozen=True)
class TeacherEnsemble:
    space: LabelSpace
    teachers: tuple[Teacher, ...]
    scheme: WeightScheme = WeightScheme.A
    includes_lwf_teacher: bool = False

    def __post_init__(self):
        object.__setattr__(self, "teachers", tuple(self.teachers))
        object.__setattr__(self, "scheme", WeightScheme.parse(self.scheme))
        if not self.teachers:
            raise ValueError("an ensemble needs at least one teacher")
        ids = [t.teacher_id for t in self.teachers]
        if len(set(ids)) != len(ids):
            raise ValueError(f"duplicate teacher ids {ids}")
        for t in self.teachers:
            if t.bias is not None and t.bias.b.space != self.space:
                raise ValueError(f"teacher {t.teacher_id!r} has a bias over a different label space")
            if self.scheme is WeightScheme.E and t.bias is None:
                raise ValueError(f"scheme E needs a probability bias for teacher {t.teacher_id!r}")

    @property
    def total_size(self) -> int:
        return sum(int(t.dataset_size) for t in self.teachers)

    def with_scheme(self, scheme) -> "TeacherEnsemble":
        return replace(self, scheme=WeightScheme.parse(scheme))

    def predictions(self, X) -> np.ndarray:
        """``(K, N, L)`` teacher probabilities."""
        out = np.stack([np.atleast_2d(np.asarray(t.predict(X), dtype=np.float64)) for t in self.teachers])
        if out.shape[2] != self.space.n_labels:
            raise ValueError(f"teachers predict {out.shape[2]} labels, space has {self.space.n_labels}")
        return out

    def weights(self, T: np.ndarray) -> np.ndarray:
        """``(N, K)`` sample weights for teacher predictions ``T`` of shape ``(K, N, L)``."""
        total = self.total_size
        cols = [
            weight_rows(self.scheme, T[k], t.bias, int(t.dataset_size), total)
            for k, t in enumerate(self.teachers)
        ]
        return np.stack(cols, axis=1)


@dataclass(frozen=True)
class DistillBatchResult:
    mean_loss: float
    per_sample_loss: np.ndarray = field(repr=False)
    per_sample_weights: np.ndarray = field(repr=False)
    grad_wrt_student_probs: np.ndarray = field(repr=False)


def _normalized(W: np.ndarray) -> np.ndarray:
    W = np.asarray(W, dtype=np.float64)
    if (W < 0).any() or not np.isfinite(W).all():
        raise ValueError("weights must be finite and non-negative")
    s = W.sum(1, keepdims=True)
    if (s <= 0).any():
        raise ValueError("teacher weights sum to zero for some sample")
    return W / s


def ensemble_terms(S, T, W, divergence: str = "sinkhorn", space: LabelSpace | None = None,
                   cfg: SinkhornConfig | None = None, init=None):
    """Batched loss and student gradient.

    ``S`` is ``(N, L)`` student probabilities, ``T`` is ``(K, N, L)`` teacher
    probabilities and ``W`` is ``(N, K)`` raw weights. ``init`` optionally
    holds ``(f, g)`` warm starts of shape ``(K, N, L)``. Returns the batch
    result and the final potentials (``None`` for KL).
    """
    S = np.atleast_2d(np.asarray(S, dtype=np.float64))
    T = np.asarray(T, dtype=np.float64)
    K, N, L = T.shape
    if S.shape != (N, L):
        raise ValueError(f"student batch {S.shape} does not match teachers {T.shape}")
    Wn = _normalized(np.asarray(W, dtype=np.float64).reshape(N, K))
    if divergence == "sinkhorn" and space is None:
        raise ValueError("the sinkhorn divergence needs a label space")
    loss = np.zeros(N)
    grad = np.zeros((N, L))
    pots = []
    for k in range(K):
        warm = None if init is None else (init[0][k], init[1][k])
        vals, g, pot = divergence_rows(divergence, S, T[k], space, cfg, init=warm)
        loss += Wn[:, k] * vals
        grad += Wn[:, k, None] * g
        pots.append(pot)
    grad -= grad.mean(1, keepdims=True)
    potentials = None
    if divergence == "sinkhorn":
        potentials = (np.stack([p.f for p in pots]), np.stack([p.g for p in pots]))
    result = DistillBatchResult(
        mean_loss=float(loss.mean()), per_sample_loss=loss, per_sample_weights=Wn, grad_wrt_student_probs=grad
    )
    return result, potentials


def _single(student, teachers, weights):
    S = as_array(student)[None, :]
    T = np.stack([as_array(t)[None, :] for t in teachers])
    W = np.asarray(weights, dtype=np.float64).reshape(1, -1)
    if W.shape[1] != T.shape[0]:
        raise ValueError(f"{T.shape[0]} teachers but {W.shape[1]} weights")
    return S, T, W


def ensemble_loss(student, teachers, weights, divergence: str = "sinkhorn", space: LabelSpace | None = None,
                  cfg: SinkhornConfig | None = None) -> float:
    """Weight-normalized sum of divergences from the student to each teacher."""
    res, _ = ensemble_terms(*_single(student, teachers, weights), divergence, space, cfg)
    return float(res.per_sample_loss[0])


def ensemble_grad(student, teachers, weights, divergence: str = "sinkhorn", space: LabelSpace | None = None,
                  cfg: SinkhornConfig | None = None) -> np.ndarray:
    """Centered gradient of :func:`ensemble_loss` w.r.t. the student distribution."""
    res, _ = ensemble_terms(*_single(student, teachers, weights), divergence, space, cfg)
    return res.grad_wrt_student_probs[0]


LWF_TEACHER_ID = "lwf"


def augment_with_lwf(ensemble: TeacherEnsemble, snapshot, transfer_X, *, dataset_size: int,
                     noise_source=None, n_noise: int = 10000,
                     bias: ProbabilityBias | None = None) -> TeacherEnsemble:
    """Add a frozen pseudo-teacher holding ``snapshot``'s transfer-set predictions.

    The snapshot's bias is either passed in or estimated from
    ``noise_source`` exactly like the real teachers' (scheme E needs one).
    ``dataset_size`` is the size of the data the snapshot was pretrained on.
    """
    X = np.asarray(getattr(transfer_X, "X", transfer_X), dtype=np.float64)
    if X.ndim != 2 or X.shape[0] == 0:
        raise ValueError("the transfer set is empty")
    if ensemble.includes_lwf_teacher:
        raise ValueError("the ensemble already has a learning-without-forgetting teacher")
    cache = CachedPredictions(X, np.atleast_2d(snapshot(X)))
    if bias is None and noise_source is not None:
        bias = estimate_bias(snapshot, noise_source, n_noise, space=ensemble.space, teacher_id=LWF_TEACHER_ID)
    pseudo = Teacher(LWF_TEACHER_ID, cache, bias, int(dataset_size))
    return TeacherEnsemble(ensemble.space, ensemble.teachers + (pseudo,), ensemble.scheme, True)


@dataclass
class LossCurve:
    divergence: str
    scheme: str
    mean_loss: list[float]

    def to_csv_text(self) -> str:
        buf = io.StringIO()
        buf.write("epoch,mean_loss,divergence,scheme\n")
        for e, v in enumerate(self.mean_loss):
            buf.write(f"{e},{v!r},{self.divergence},{self.scheme}\n")
        return buf.getvalue()


def distill(student: LinearSoftmaxClassifier, ensemble: TeacherEnsemble, transfer_X, divergence: str = "sinkhorn",
            cfg: SinkhornConfig | None = None, opt: OptimizerConfig | None = None):
    """Mini-batch SGD on the mean ensemble loss over the transfer set.

    Returns ``(trained copy, LossCurve)``. Entry 0 of the curve is the loss
    of the initial student on the whole transfer set; entry ``e`` is the mean
    of the batch losses seen during epoch ``e``. Sinkhorn potentials are kept
    per (sample, teacher) and reused as warm starts in later epochs.
    """
    if divergence not in ("sinkhorn", "kl"):
        raise ValueError(f"unknown divergence {divergence!r}; expected 'sinkhorn' or 'kl'")
    if student.space != ensemble.space:
        raise ValueError("student and teachers use different label spaces")
    cfg = cfg or SinkhornConfig()
    opt = opt or OptimizerConfig()
    X = np.asarray(getattr(transfer_X, "X", transfer_X), dtype=np.float64)
    if X.ndim != 2 or X.shape[0] == 0:
        raise ValueError("the transfer set is empty")
    space = ensemble.space
    T = ensemble.predictions(X)
    W = ensemble.weights(T)
    out = student.copy()
    K, N, L = T.shape
    sink = divergence == "sinkhorn"
    f_store = np.zeros((K, N, L)) if sink else None
    g_store = np.zeros((K, N, L)) if sink else None

    res, pots = ensemble_terms(out.predict_proba(X), T, W, divergence, space, cfg)
    if sink:
        f_store[:], g_store[:] = pots
    curve = [res.mean_loss]
    rng = np.random.default_rng(opt.seed)
    bs = int(opt.batch_size)
    for _ in range(int(opt.epochs)):
        order = rng.permutation(N)
        total = 0.0
        for start in range(0, N, bs):
            idx = order[start:start + bs]
            Xb = X[idx]
            init = (f_store[:, idx], g_store[:, idx]) if sink else None
            res, pots = ensemble_terms(out.predict_proba(Xb), T[:, idx], W[idx], divergence, space, cfg, init)
            if sink:
                f_store[:, idx], g_store[:, idx] = pots
            total += res.mean_loss * idx.size
            dW, db = out.backward_from_prob_grad(Xb, res.grad_wrt_student_probs / idx.size)
            out.W -= opt.learning_rate * dW
            out.b -= opt.learning_rate * db
        curve.append(total / N)
    return out, LossCurve(divergence, ensemble.scheme.value, curve)
