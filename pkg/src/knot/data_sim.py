"""Synthetic federations with label-space structure.

Class centers are the label coordinates embedded in the first ``d`` feature
dimensions, so nearby labels in the label space are also the ones a classifier
confuses. Local datasets get Dirichlet-skewed class proportions, the global
(server) pretraining set is class-balanced by default, and the transfer set is
an unlabeled i.i.d. draw from the size-weighted mixture of all partitions.
"""
from __future__ import annotations

import io
from dataclasses import dataclass, field

import numpy as np
from scipy.stats import spearmanr

from ._io import write_text_atomic
from .label_space import LabelSpace


@dataclass(frozen=True)
class Dataset:
    """Feature matrix with optional integer labels (``None`` for transfer sets)."""

    X: np.ndarray = field(repr=False)
    y: np.ndarray | None = field(default=None, repr=False)

    def __post_init__(self):
        X = np.asarray(self.X, dtype=np.float64)
        if X.ndim != 2:
            raise ValueError(f"features must be 2-D, got shape {X.shape}")
        object.__setattr__(self, "X", X)
        if self.y is not None:
            y = np.asarray(self.y, dtype=np.int64).reshape(-1)
            if y.size != X.shape[0]:
                raise ValueError(f"{X.shape[0]} rows but {y.size} labels")
            object.__setattr__(self, "y", y)

    def __len__(self) -> int:
        return self.X.shape[0]

    @property
    def labeled(self) -> bool:
        return self.y is not None

    def to_csv_text(self) -> str:
        F = self.X.shape[1]
        header = [f"x{i}" for i in range(F)] + (["label"] if self.labeled else [])
        buf = io.StringIO()
        buf.write(",".join(header) + "\n")
        for i in range(len(self)):
            row = [repr(float(v)) for v in self.X[i]]
            if self.labeled:
                row.append(str(int(self.y[i])))
            buf.write(",".join(row) + "\n")
        return buf.getvalue()

    def save_csv(self, path) -> None:
        write_text_atomic(path, self.to_csv_text())

    @classmethod
    def load_csv(cls, path) -> "Dataset":
        with open(path) as fh:
            header = fh.readline().strip().split(",")
            body = np.loadtxt(fh, delimiter=",", ndmin=2)
        if body.size == 0:
            body = np.zeros((0, len(header)))
        if header and header[-1] == "label":
            return cls(body[:, :-1], body[:, -1].astype(np.int64))
        return cls(body)


@dataclass(frozen=True)
class SyntheticTask:
    space: LabelSpace
    feature_dim: int
    class_centers: np.ndarray = field(repr=False)
    noise_std: float
    seed: int

    def sample(self, labels, rng: np.random.Generator) -> np.ndarray:
        labels = np.asarray(labels, dtype=np.int64)
        noise = rng.normal(0.0, 1.0, size=(labels.size, self.feature_dim)) * self.noise_std
        return self.class_centers[labels] + noise

    def generate(self, n: int, seed: int | None = None) -> Dataset:
        """``n`` samples with uniformly drawn labels."""
        rng = np.random.default_rng(self.seed if seed is None else seed)
        y = rng.integers(0, self.space.n_labels, size=int(n))
        return Dataset(self.sample(y, rng), y)


def center_cost_spearman(task: SyntheticTask) -> float:
    """Rank correlation between pairwise center distances and label costs."""
    C = task.class_centers
    D = np.sqrt(((C[:, None, :] - C[None, :, :]) ** 2).sum(-1))
    iu = np.triu_indices(task.space.n_labels, k=1)
    a, b = D[iu], task.space.cost[iu]
    if np.ptp(a) == 0 and np.ptp(b) == 0:
        return 1.0
    return float(spearmanr(a, b).statistic)


def make_task(space: LabelSpace, feature_dim: int = 8, noise_std: float = 0.6, seed: int = 0) -> SyntheticTask:
    feature_dim = int(feature_dim)
    if feature_dim < space.dim:
        raise ValueError(f"feature_dim {feature_dim} is smaller than the label-space dimension {space.dim}")
    if noise_std < 0:
        raise ValueError("noise_std must be >= 0")
    centers = np.zeros((space.n_labels, feature_dim))
    centers[:, : space.dim] = space.coords
    task = SyntheticTask(space, feature_dim, centers, float(noise_std), int(seed))
    rho = center_cost_spearman(task)
    assert abs(rho - 1.0) < 1e-12, f"center geometry does not mirror label costs (rho={rho})"
    return task


@dataclass(frozen=True)
class FederationLayout:
    n_locals: int = 3
    dirichlet_alpha: float = 0.3
    sizes: tuple[int, ...] = (2000, 3000, 5000)
    global_size: int = 4000
    transfer_size: int = 4000
    test_size: int = 2000
    # total samples available per class; None generates exactly what is needed
    pool_per_class: int | None = None
    # the server's pretraining set is class-balanced; False draws its
    # proportions from Dirichlet(alpha) like the locals
    balanced_global: bool = True

    def __post_init__(self):
        object.__setattr__(self, "sizes", tuple(int(s) for s in self.sizes))
        if int(self.n_locals) < 1:
            raise ValueError("n_locals must be >= 1")
        if len(self.sizes) != int(self.n_locals):
            raise ValueError(f"{self.n_locals} locals but {len(self.sizes)} sizes")
        if not self.dirichlet_alpha > 0:
            raise ValueError("dirichlet_alpha must be > 0")
        for name in ("global_size", "transfer_size", "test_size"):
            if int(getattr(self, name)) < 1:
                raise ValueError(f"{name} must be >= 1")
        if min(self.sizes) < 1:
            raise ValueError("all local sizes must be >= 1")


@dataclass
class Federation:
    locals: list[Dataset]
    global_train: Dataset
    transfer: Dataset
    local_tests: list[Dataset]
    global_test: Dataset
    proportions: np.ndarray  # (n_locals + 1, L); the last row is the global partition


def _counts(p: np.ndarray, n: int) -> np.ndarray:
    """Largest-remainder rounding of ``n * p`` to integers summing to ``n``."""
    raw = p * n
    c = np.floor(raw).astype(np.int64)
    short = n - int(c.sum())
    if short > 0:
        # stable sort keeps ties on the lowest label index
        order = np.argsort(-(raw - c), kind="stable")
        c[order[:short]] += 1
    return c


def partition_non_iid(task: SyntheticTask, layout: FederationLayout | None = None,
                      seed: int | None = None) -> Federation:
    layout = layout or FederationLayout()
    L = task.space.n_labels
    rng = np.random.default_rng(task.seed if seed is None else seed)
    props = rng.dirichlet(np.full(L, layout.dirichlet_alpha), size=layout.n_locals + 1)
    if layout.balanced_global:
        props[-1] = 1.0 / L
    sizes = list(layout.sizes) + [int(layout.global_size)]
    train_counts = [_counts(props[k], sizes[k]) for k in range(len(sizes))]
    test_counts = [_counts(props[k], int(layout.test_size)) for k in range(len(sizes))]
    mixture = (props * np.array(sizes, dtype=np.float64)[:, None]).sum(0) / sum(sizes)
    transfer_counts = np.bincount(rng.choice(L, size=int(layout.transfer_size), p=mixture), minlength=L)

    need = sum(train_counts) + sum(test_counts) + transfer_counts
    pool = np.maximum(need, 0) if layout.pool_per_class is None else np.full(L, int(layout.pool_per_class))
    if (need > pool).any():
        j = int(np.argmax(need - pool))
        raise ValueError(
            f"layout needs {int(need[j])} samples of label {task.space.labels[j]!r} "
            f"but the pool holds {int(pool[j])}"
        )
    # one i.i.d. pool per class, handed out without replacement: partitions are disjoint
    pools = []
    for j in range(L):
        Xj = task.sample(np.full(int(pool[j]), j), rng)
        pools.append(Xj[rng.permutation(Xj.shape[0])])
    cursor = np.zeros(L, dtype=np.int64)

    def take(counts) -> Dataset:
        parts, labels = [], []
        for j in range(L):
            c = int(counts[j])
            parts.append(pools[j][cursor[j]:cursor[j] + c])
            labels.append(np.full(c, j, dtype=np.int64))
            cursor[j] += c
        X, y = np.vstack(parts), np.concatenate(labels)
        order = rng.permutation(y.size)
        return Dataset(X[order], y[order])

    trains = [take(c) for c in train_counts]
    tests = [take(c) for c in test_counts]
    transfer = take(transfer_counts)
    return Federation(
        locals=trains[:-1],
        global_train=trains[-1],
        transfer=Dataset(transfer.X),
        local_tests=tests[:-1],
        global_test=tests[-1],
        proportions=props,
    )


class NoiseSampler:
    """I.i.d. uniform vectors over the per-dimension range of a reference set."""

    def __init__(self, X, seed: int = 0):
        X = np.asarray(X, dtype=np.float64)
        if X.ndim != 2 or X.shape[0] == 0:
            raise ValueError("reference set must be a non-empty 2-D array")
        self.low = X.min(0)
        self.high = X.max(0)
        self._rng = np.random.default_rng(seed)

    def sample(self, n: int) -> np.ndarray:
        return self._rng.uniform(self.low, self.high, size=(int(n), self.low.size))

    def __iter__(self):
        while True:
            yield self.sample(1)[0]


def noise_sampler(transfer, seed: int = 0) -> NoiseSampler:
    X = transfer.X if isinstance(transfer, Dataset) else transfer
    return NoiseSampler(X, seed)
