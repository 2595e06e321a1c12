import numpy as np
import pytest

from knot.data_sim import (
    Dataset,
    FederationLayout,
    center_cost_spearman,
    make_task,
    noise_sampler,
    partition_non_iid,
)
from knot.label_space import builtin_space
from knot.metrics import confusion_matrix
from knot.model import LinearSoftmaxClassifier, OptimizerConfig, train_ce

SA = builtin_space("SA")
SMALL = FederationLayout(sizes=(200, 300, 500), global_size=400, transfer_size=400, test_size=200)


def test_zero_noise_puts_samples_on_their_label():
    task = make_task(SA, feature_dim=4, noise_std=0.0, seed=1)
    d = task.generate(200)
    np.testing.assert_array_equal(d.X[:, 0], SA.coords[d.y, 0])
    assert (d.X[:, 1:] == 0).all()


@pytest.mark.parametrize("name", ["SA", "ERC", "NLI"])
def test_centers_mirror_label_costs(name):
    task = make_task(builtin_space(name), feature_dim=6)
    assert center_cost_spearman(task) == pytest.approx(1.0)


def test_feature_dim_too_small():
    with pytest.raises(ValueError, match="smaller"):
        make_task(builtin_space("ERC"), feature_dim=1)


def test_neighbouring_labels_are_confused_more_often():
    task = make_task(SA, feature_dim=8, noise_std=0.6, seed=0)
    train, test = task.generate(10000, seed=1), task.generate(10000, seed=2)
    m, _ = train_ce(LinearSoftmaxClassifier.initialize(SA, 8), train.X, train.y, OptimizerConfig(epochs=5))
    cm = confusion_matrix(m.predict_argmax(test.X), test.y, 5)
    assert cm[0, 1] > cm[0, 4]
    assert cm[0, 1] + cm[1, 0] > cm[0, 4] + cm[4, 0]


def test_same_seed_same_data():
    a = partition_non_iid(make_task(SA, seed=4), SMALL)
    b = partition_non_iid(make_task(SA, seed=4), SMALL)
    for x, y in zip(a.locals + [a.transfer, a.global_test], b.locals + [b.transfer, b.global_test]):
        assert x.to_csv_text() == y.to_csv_text()
    c = partition_non_iid(make_task(SA, seed=5), SMALL)
    assert c.transfer.to_csv_text() != a.transfer.to_csv_text()


def test_large_alpha_is_nearly_uniform():
    for seed in range(5):
        fed = partition_non_iid(make_task(SA, seed=seed), FederationLayout(dirichlet_alpha=100.0))
        for d in fed.locals:
            frac = np.bincount(d.y, minlength=5) / len(d)
            assert np.abs(frac - 0.2).max() <= 0.05


def test_small_alpha_has_a_dominant_class():
    for seed in range(10):
        fed = partition_non_iid(make_task(SA, seed=seed), FederationLayout(dirichlet_alpha=0.1))
        top = max(np.bincount(d.y, minlength=5).max() / len(d) for d in fed.locals)
        assert top > 0.5


def test_partition_sizes_and_schema():
    fed = partition_non_iid(make_task(SA, seed=0), SMALL)
    assert [len(d) for d in fed.locals] == [200, 300, 500]
    assert len(fed.global_train) == 400 and len(fed.transfer) == 400
    assert all(len(d) == 200 for d in fed.local_tests + [fed.global_test])
    assert fed.transfer.y is None and not fed.transfer.labeled
    assert "label" not in fed.transfer.to_csv_text().splitlines()[0]
    assert fed.proportions.shape == (4, 5)
    # the server's partition is balanced by default
    np.testing.assert_array_equal(np.bincount(fed.global_train.y), [80] * 5)


def test_partitions_are_disjoint():
    fed = partition_non_iid(make_task(SA, seed=2), SMALL)
    rows = np.vstack([d.X for d in fed.locals + fed.local_tests + [fed.global_train, fed.global_test, fed.transfer]])
    assert np.unique(rows, axis=0).shape[0] == rows.shape[0]


def test_pool_too_small():
    layout = FederationLayout(sizes=(200, 300, 500), global_size=400, transfer_size=400, test_size=200,
                              pool_per_class=50)
    with pytest.raises(ValueError, match="pool holds 50"):
        partition_non_iid(make_task(SA, seed=0), layout)


@pytest.mark.parametrize("kw", [
    {"n_locals": 0, "sizes": ()}, {"sizes": (1, 2)}, {"dirichlet_alpha": 0}, {"transfer_size": 0},
    {"sizes": (0, 1, 1)},
])
def test_layout_validation(kw):
    with pytest.raises(ValueError):
        FederationLayout(**kw)


def test_csv_round_trip(tmp_path):
    d = make_task(SA, seed=0).generate(20)
    d.save_csv(tmp_path / "d.csv")
    back = Dataset.load_csv(tmp_path / "d.csv")
    np.testing.assert_array_equal(back.X, d.X)
    np.testing.assert_array_equal(back.y, d.y)
    Dataset(d.X).save_csv(tmp_path / "t.csv")
    assert Dataset.load_csv(tmp_path / "t.csv").y is None


def test_noise_sampler_range_and_mean():
    fed = partition_non_iid(make_task(SA, seed=0), SMALL)
    s = noise_sampler(fed.transfer, seed=3)
    Z = s.sample(100_000)
    lo, hi = fed.transfer.X.min(0), fed.transfer.X.max(0)
    assert (Z >= lo).all() and (Z <= hi).all()
    mid = (lo + hi) / 2
    assert (np.abs(Z.mean(0) - mid) <= 0.02 * (hi - lo)).all()
    a = noise_sampler(fed.transfer, seed=3).sample(5)
    np.testing.assert_array_equal(a, noise_sampler(fed.transfer, seed=3).sample(5))
    assert next(iter(s)).shape == (8,)
