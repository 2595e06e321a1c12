"""Teacher probability bias and the A/D/U/E sample weighting schemes.

A teacher's probability bias ``B`` is the distribution of its argmax
predictions on pure-noise inputs. Scheme E trusts a prediction in proportion
to how far it sits from that bias.
"""
from __future__ import annotations

import enum
import json
from dataclasses import dataclass

import numpy as np

from ._io import write_json_atomic
from .label_space import LabelSpace, resolve_space
from .prob import Distribution


@dataclass(frozen=True)
class ProbabilityBias:
    teacher_id: str
    b: Distribution
    n_noise_samples: int

    def __post_init__(self):
        if int(self.n_noise_samples) < 1:
            raise ValueError(f"n_noise_samples must be >= 1, got {self.n_noise_samples}")

    def to_dict(self) -> dict:
        return {
            "teacher_id": self.teacher_id,
            "b": self.b.p.tolist(),
            "n_noise_samples": int(self.n_noise_samples),
        }

    @classmethod
    def from_dict(cls, doc: dict, space: LabelSpace) -> "ProbabilityBias":
        try:
            return cls(str(doc["teacher_id"]), Distribution(space, doc["b"]), int(doc["n_noise_samples"]))
        except KeyError as exc:
            raise ValueError(f"bias document missing field {exc}") from None

    def save(self, path) -> None:
        write_json_atomic(path, self.to_dict())

    @classmethod
    def load(cls, path, space) -> "ProbabilityBias":
        with open(path) as fh:
            return cls.from_dict(json.load(fh), resolve_space(space))


class SamplerExhausted(RuntimeError):
    pass


def _draw(noise_source, n: int) -> np.ndarray:
    if hasattr(noise_source, "sample"):
        X = np.asarray(noise_source.sample(n), dtype=np.float64)
    else:
        rows = []
        it = iter(noise_source)
        for _ in range(n):
            try:
                rows.append(np.asarray(next(it), dtype=np.float64))
            except StopIteration:
                raise SamplerExhausted(f"noise sampler ran out after {len(rows)} of {n} samples") from None
        X = np.array(rows)
    if X.shape[0] < n:
        raise SamplerExhausted(f"noise sampler ran out after {X.shape[0]} of {n} samples")
    return X


def estimate_bias(teacher, noise_source, n: int = 10000, *, space: LabelSpace | None = None,
                  teacher_id: str = "teacher", chunk: int = 8192) -> ProbabilityBias:
    """Fraction of noise inputs on which each label is the teacher's argmax.

    ``teacher`` maps an ``(N, F)`` batch to ``(N, L)`` probabilities.
    ``noise_source`` is either an object with ``sample(k)`` or an iterable of
    feature vectors. Ties in the argmax go to the lowest label index.
    """
    n = int(n)
    if n < 1:
        raise ValueError(f"n must be >= 1, got {n}")
    space = space if space is not None else getattr(teacher, "space", None)
    if space is None:
        raise TypeError("space is required when the teacher does not carry one")
    counts = np.zeros(space.n_labels, dtype=np.int64)
    done = 0
    while done < n:
        k = min(chunk, n - done)
        P = np.atleast_2d(teacher(_draw(noise_source, k)))
        counts += np.bincount(np.argmax(P, axis=1), minlength=space.n_labels)
        done += k
    return ProbabilityBias(teacher_id, Distribution(space, counts / n), n)


class WeightScheme(str, enum.Enum):
    A = "A"  # constant
    D = "D"  # local dataset size
    U = "U"  # distance from uniform
    E = "E"  # distance from the teacher's probability bias

    @classmethod
    def parse(cls, value) -> "WeightScheme":
        if isinstance(value, cls):
            return value
        try:
            return cls(str(value).upper())
        except ValueError:
            raise ValueError(f"unknown weighting scheme {value!r}; expected A, D, U or E") from None


def weight_rows(scheme, P, bias: ProbabilityBias | None = None, dataset_size: int | None = None,
                total_size: int | None = None) -> np.ndarray:
    """Per-sample weights for one teacher's ``(N, L)`` predictions."""
    scheme = WeightScheme.parse(scheme)
    P = np.atleast_2d(np.asarray(P, dtype=np.float64))
    if scheme is WeightScheme.A:
        return np.ones(P.shape[0])
    if scheme is WeightScheme.D:
        if not total_size:
            raise ValueError("scheme D needs a positive total_size")
        if dataset_size is None or not 0 <= dataset_size <= total_size:
            raise ValueError(f"scheme D needs 0 <= dataset_size <= total_size, got {dataset_size}/{total_size}")
        return np.full(P.shape[0], dataset_size / total_size)
    if scheme is WeightScheme.U:
        ref = np.full(P.shape[1], 1.0 / P.shape[1])
    else:
        if bias is None:
            raise ValueError("scheme E needs the teacher's probability bias")
        ref = bias.b.p
    return np.sqrt(((P - ref) ** 2).sum(1))


def weight(scheme, prediction, bias: ProbabilityBias | None = None, dataset_size: int | None = None,
           total_size: int | None = None) -> float:
    return float(weight_rows(scheme, np.asarray(prediction), bias, dataset_size, total_size)[0])
