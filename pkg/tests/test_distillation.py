import numpy as np
import pytest

from conftest import random_simplex
from knot.confidence import ProbabilityBias, WeightScheme, estimate_bias
from knot.data_sim import make_task, noise_sampler, partition_non_iid
from knot.distillation import (
    LWF_TEACHER_ID,
    CachedPredictions,
    Teacher,
    TeacherEnsemble,
    distill,
    ensemble_grad,
    ensemble_loss,
    ensemble_terms,
    augment_with_lwf,
)
from knot.divergences import SinkhornConfig, kl_divergence, sinkhorn_distance
from knot.label_space import builtin_space
from knot.model import LinearSoftmaxClassifier, OptimizerConfig, train_ce
from knot.prob import Distribution, clamp_rows

SA = builtin_space("SA")


def fd_transfer(fun, mu, a, b, h=1e-5):
    e = np.zeros_like(mu)
    e[a], e[b] = h, -h
    return (fun(mu + e) - fun(mu - e)) / (2 * h)


# -- loss and gradient ------------------------------------------------------

def test_single_teacher_reduces_to_the_divergence(rng):
    s, t = random_simplex(rng, 5, 0.01), random_simplex(rng, 5, 0.01)
    assert ensemble_loss(s, [t], [3.0], "sinkhorn", SA) == pytest.approx(sinkhorn_distance(s, t, SA), abs=1e-12)
    assert ensemble_loss(s, [t], [1.0], "kl") == pytest.approx(kl_divergence(s, t), abs=1e-12)


def test_equal_weights_average(rng):
    s, t1, t2 = (random_simplex(rng, 5, 0.01) for _ in range(3))
    a, b = sinkhorn_distance(s, t1, SA), sinkhorn_distance(s, t2, SA)
    assert ensemble_loss(s, [t1, t2], [1, 1], "sinkhorn", SA) == pytest.approx((a + b) / 2, abs=1e-12)


def test_middle_student_between_opposite_teachers():
    s = Distribution.one_hot(SA, 2)
    teachers = [Distribution.one_hot(SA, 0), Distribution.one_hot(SA, 4)]
    assert ensemble_loss(s, teachers, [1, 1], "sinkhorn", SA) == pytest.approx(2.0, abs=0.03)


def test_student_equal_to_teacher_is_stationary():
    p = np.array([0.05, 0.4, 0.3, 0.15, 0.1])
    assert np.linalg.norm(ensemble_grad(p, [p], [1.0], "sinkhorn", SA)) < 1e-2


def test_grad_matches_finite_differences(rng):
    cfg = SinkhornConfig(epsilon=0.01)
    for _ in range(20):
        s = random_simplex(rng, 5)
        ts = [random_simplex(rng, 5), random_simplex(rng, 5)]
        w = rng.uniform(0.1, 1.0, size=2)
        g = ensemble_grad(s, ts, w, "sinkhorn", SA, cfg)
        num = np.array([fd_transfer(lambda m: ensemble_loss(m, ts, w, "sinkhorn", SA, cfg), s, a, b)
                        for a in range(5) for b in range(5) if a != b])
        ana = np.array([g[a] - g[b] for a in range(5) for b in range(5) if a != b])
        assert np.abs(num - ana).max() / np.abs(ana).max() < 1e-3


@pytest.mark.parametrize("divergence", ["sinkhorn", "kl"])
def test_weight_scale_invariance(divergence, rng):
    s, ts = random_simplex(rng, 5, 0.01), [random_simplex(rng, 5, 0.01) for _ in range(3)]
    w = np.array([0.2, 0.5, 0.9])
    for c in (2.0, 1e-3, 1e4):
        assert ensemble_loss(s, ts, c * w, divergence, SA) == pytest.approx(
            ensemble_loss(s, ts, w, divergence, SA), abs=1e-9)
        np.testing.assert_allclose(ensemble_grad(s, ts, c * w, divergence, SA),
                                   ensemble_grad(s, ts, w, divergence, SA), atol=1e-9)


@pytest.mark.parametrize("divergence", ["sinkhorn", "kl"])
def test_teacher_permutation_invariance(divergence, rng):
    s, ts = random_simplex(rng, 5, 0.01), [random_simplex(rng, 5, 0.01) for _ in range(3)]
    w = np.array([0.2, 0.5, 0.9])
    perm = [2, 0, 1]
    a = ensemble_loss(s, ts, w, divergence, SA)
    b = ensemble_loss(s, [ts[i] for i in perm], w[perm], divergence, SA)
    assert a == pytest.approx(b, abs=1e-12)
    np.testing.assert_allclose(ensemble_grad(s, ts, w, divergence, SA),
                               ensemble_grad(s, [ts[i] for i in perm], w[perm], divergence, SA), atol=1e-12)


def test_batch_result_invariants(rng):
    S = clamp_rows(random_simplex(rng, 5, size=30))
    T = np.stack([random_simplex(rng, 5, size=30) for _ in range(2)])
    res, pots = ensemble_terms(S, T, rng.uniform(size=(30, 2)), "sinkhorn", SA)
    assert (res.per_sample_weights >= 0).all()
    np.testing.assert_allclose(res.per_sample_weights.sum(1), 1.0)
    assert np.abs(res.grad_wrt_student_probs.sum(1)).max() < 1e-9
    assert pots[0].shape == (2, 30, 5)


def test_loss_errors(rng):
    s, t = random_simplex(rng, 5), random_simplex(rng, 5)
    with pytest.raises(ValueError, match="sum to zero"):
        ensemble_loss(s, [t, t], [0, 0], "kl")
    with pytest.raises(ValueError):
        ensemble_loss(s, [t, t], [1.0], "kl")
    with pytest.raises(ValueError, match="label space"):
        ensemble_loss(s, [t], [1.0], "sinkhorn")
    with pytest.raises(ValueError, match="non-negative"):
        ensemble_loss(s, [t], [-1.0], "kl")


# -- ensembles ---------------------------------------------------------------

def const(p):
    p = np.asarray(p, dtype=np.float64)
    return lambda X: np.tile(p, (np.atleast_2d(X).shape[0], 1))


def test_ensemble_validation():
    t = Teacher("a", const(np.ones(5) / 5))
    with pytest.raises(ValueError, match="at least one"):
        TeacherEnsemble(SA, [])
    with pytest.raises(ValueError, match="duplicate"):
        TeacherEnsemble(SA, [t, t])
    with pytest.raises(ValueError, match="'a'"):
        TeacherEnsemble(SA, [t], "E")
    erc = builtin_space("ERC")
    bias = ProbabilityBias("a", Distribution.uniform(erc), 1)
    with pytest.raises(ValueError, match="different label space"):
        TeacherEnsemble(SA, [Teacher("a", const(np.ones(5) / 5), bias)])


def test_ensemble_weights_per_scheme():
    p = np.array([0.6, 0.1, 0.1, 0.1, 0.1])
    bias = ProbabilityBias("x", Distribution.uniform(SA), 1)
    ens = TeacherEnsemble(SA, [Teacher("a", const(p), bias, 1), Teacher("b", const(p), bias, 3)])
    T = ens.predictions(np.zeros((4, 2)))
    assert T.shape == (2, 4, 5)
    np.testing.assert_allclose(ens.weights(T), 1.0)
    np.testing.assert_allclose(ens.with_scheme("D").weights(T), [[0.25, 0.75]] * 4)
    u = np.linalg.norm(p - 0.2)
    np.testing.assert_allclose(ens.with_scheme("U").weights(T), u)
    np.testing.assert_allclose(ens.with_scheme("E").weights(T), u)


def test_cached_predictions_are_frozen(rng):
    X = rng.normal(size=(6, 2))
    P = random_simplex(rng, 5, size=6)
    c = CachedPredictions(X, P)
    np.testing.assert_array_equal(c(X), P)
    np.testing.assert_array_equal(c(X[[3, 1]]), P[[3, 1]])
    np.testing.assert_array_equal(c(X[2]), P[2])
    with pytest.raises(KeyError):
        c(X + 1)
    with pytest.raises(ValueError):
        c.predictions[0, 0] = 1.0


# -- learning without forgetting --------------------------------------------

@pytest.fixture(scope="module")
def fed():
    task = make_task(SA, seed=0)
    from knot.data_sim import FederationLayout
    layout = FederationLayout(sizes=(400, 600, 1000), global_size=800, transfer_size=800, test_size=400)
    return task, partition_non_iid(task, layout)


@pytest.fixture(scope="module")
def teachers(fed):
    _, f = fed
    opt = OptimizerConfig(learning_rate=0.5, batch_size=64, epochs=30)
    out = []
    for k, d in enumerate(f.locals):
        m, _ = train_ce(LinearSoftmaxClassifier.initialize(SA, 8, seed=k), d.X, d.y, opt)
        out.append(Teacher(f"teacher_{k}", m.predict_proba, None, len(d)))
    return out


def test_lwf_adds_a_frozen_pseudo_teacher(fed, teachers):
    _, f = fed
    snap = LinearSoftmaxClassifier.initialize(SA, 8, seed=9)
    ens = augment_with_lwf(TeacherEnsemble(SA, teachers), snap.predict_proba, f.transfer,
                           dataset_size=len(f.global_train), noise_source=noise_sampler(f.transfer), n_noise=500)
    assert len(ens.teachers) == len(teachers) + 1 and ens.includes_lwf_teacher
    lwf = ens.teachers[-1]
    assert lwf.teacher_id == LWF_TEACHER_ID and lwf.dataset_size == len(f.global_train)
    assert lwf.bias is not None and lwf.bias.n_noise_samples == 500
    before = lwf.predict(f.transfer.X)
    snap.W += 1.0  # later changes to the live model do not leak into the snapshot
    np.testing.assert_array_equal(lwf.predict(f.transfer.X), before)
    with pytest.raises(ValueError, match="already"):
        augment_with_lwf(ens, snap.predict_proba, f.transfer, dataset_size=1)
    with pytest.raises(ValueError, match="empty"):
        augment_with_lwf(TeacherEnsemble(SA, teachers), snap.predict_proba, np.zeros((0, 8)), dataset_size=1)


def test_self_distillation_does_not_drift(fed):
    _, f = fed
    g, _ = train_ce(LinearSoftmaxClassifier.initialize(SA, 8), f.global_train.X, f.global_train.y,
                    OptimizerConfig(epochs=5))
    solo = TeacherEnsemble(SA, [Teacher("stub", const(np.ones(5) / 5))])
    ens = augment_with_lwf(solo, g.predict_proba, f.transfer, dataset_size=len(f.global_train))
    only = TeacherEnsemble(SA, ens.teachers[1:], "A", True)
    student = LinearSoftmaxClassifier.initialize(SA, 8, seed=3)
    out, curve = distill(student, only, f.transfer, "kl", opt=OptimizerConfig(epochs=1))
    assert curve.mean_loss[1] < curve.mean_loss[0]


# -- training loop -----------------------------------------------------------

def test_zero_epochs_leaves_student_unchanged(fed, teachers):
    _, f = fed
    s = LinearSoftmaxClassifier.initialize(SA, 8)
    out, curve = distill(s, TeacherEnsemble(SA, teachers), f.transfer, "sinkhorn", opt=OptimizerConfig(epochs=0))
    np.testing.assert_array_equal(out.W, s.W)
    assert len(curve.mean_loss) == 1


@pytest.mark.parametrize("divergence", [
    "kl",
    pytest.param("sinkhorn", marks=pytest.mark.xfail(strict=True, reason=(
        "entropic OT against the product reference is smooth only on a mass scale of about "
        "exp(-C_min/eps), so near mu == nu it behaves like the W1 kink and fixed-step SGD "
        "leaves the starting point"))),
])
def test_copy_of_student_as_teacher(fed, divergence):
    _, f = fed
    s = LinearSoftmaxClassifier.initialize(SA, 8, seed=1)
    ens = TeacherEnsemble(SA, [Teacher("self", s.copy().predict_proba)])
    _, curve = distill(s, ens, f.transfer, divergence, opt=OptimizerConfig(epochs=3))
    assert curve.mean_loss[-1] <= curve.mean_loss[0] + 1e-12


def test_objective_is_kinked_at_the_teacher():
    # documents the behaviour behind the xfail above: a 1e-6 mass shift away
    # from the teacher already moves the gradient by orders of magnitude more
    q = np.ones(5) / 5
    cfg = SinkhornConfig(epsilon=0.1)
    p = q + 1e-6 * (np.eye(5)[1] - np.eye(5)[0])
    from knot.divergences import sinkhorn_grad_student
    jump = np.abs(sinkhorn_grad_student(p, q, SA, cfg) - sinkhorn_grad_student(q, q, SA, cfg)).max()
    assert jump > 1e-3


@pytest.mark.parametrize("divergence", ["sinkhorn", "kl"])
def test_desk_scale_loss_halves(fed, teachers, divergence):
    task, _ = fed
    full = partition_non_iid(task)
    opt = OptimizerConfig(learning_rate=0.5, batch_size=64, epochs=30)
    ts = []
    for k, d in enumerate(full.locals):
        m, _ = train_ce(LinearSoftmaxClassifier.initialize(SA, 8, seed=k), d.X, d.y, opt)
        ts.append(Teacher(f"teacher_{k}", m.predict_proba, None, len(d)))
    s = LinearSoftmaxClassifier.initialize(SA, 8)
    _, curve = distill(s, TeacherEnsemble(SA, ts), full.transfer, divergence, opt=OptimizerConfig(epochs=20))
    c = curve.mean_loss
    assert c[20] <= 0.5 * c[0]
    assert all(b <= a * 1.05 for a, b in zip(c, c[1:]))
    text = curve.to_csv_text().splitlines()
    assert text[0] == "epoch,mean_loss,divergence,scheme" and len(text) == 22


def test_scheme_e_with_estimated_biases(fed, teachers):
    _, f = fed
    noise = noise_sampler(f.transfer, seed=1)
    ts = [Teacher(t.teacher_id, t.predict, estimate_bias(t.predict, noise, 2000, space=SA, teacher_id=t.teacher_id),
                  t.dataset_size) for t in teachers]
    ens = TeacherEnsemble(SA, ts, WeightScheme.E)
    s = LinearSoftmaxClassifier.initialize(SA, 8)
    _, curve = distill(s, ens, f.transfer, "sinkhorn", opt=OptimizerConfig(epochs=3))
    assert curve.scheme == "E" and curve.mean_loss[-1] < curve.mean_loss[0]


def test_distill_argument_errors(fed, teachers):
    _, f = fed
    s = LinearSoftmaxClassifier.initialize(SA, 8)
    ens = TeacherEnsemble(SA, teachers)
    with pytest.raises(ValueError, match="unknown divergence"):
        distill(s, ens, f.transfer, "js")
    with pytest.raises(ValueError, match="empty"):
        distill(s, ens, np.zeros((0, 8)))
    with pytest.raises(ValueError, match="label spaces"):
        distill(LinearSoftmaxClassifier(builtin_space("NLI"), 8), ens, f.transfer)
