import json

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from bitqoe.trees import (EnsembleParams, ForestModel, TreeParams, feature_importance,
                          fit_bagging, fit_cart, fit_random_forest, load_forest,
                          predict_ensemble, predict_tree)

from conftest import make_dataset


def _sse(y):
    return float(((y - y.mean()) ** 2).sum()) if y.size else 0.0


def brute_root(X, y):
    """Best (feature, threshold) over every midpoint; None for pure or unsplittable nodes."""
    parent = _sse(y)
    if y.size < 2 or np.ptp(y) == 0:
        return None
    best, best_gain = None, -np.inf
    tol = 1e-9 * parent
    for f in range(X.shape[1]):
        vals = np.unique(X[:, f])
        for lo, hi in zip(vals[:-1], vals[1:]):
            t = (lo + hi) / 2
            m = X[:, f] <= t
            gain = parent - _sse(y[m]) - _sse(y[~m])
            if gain > best_gain + tol:
                best, best_gain = (f, t), gain
    return best


def _depth(tree, node=0):
    if tree.feature[node] < 0:
        return 0
    return 1 + max(_depth(tree, tree.left[node]), _depth(tree, tree.right[node]))


def test_root_split_matches_brute_force_continuous():
    rng = np.random.default_rng(0)
    for _ in range(300):
        n, f = int(rng.integers(2, 25)), int(rng.integers(1, 5))
        X = np.round(rng.uniform(0, 1, (n, f)), 1)
        y = rng.uniform(1, 5, n)
        tree = fit_cart(make_dataset(X, y), TreeParams(max_depth=1))
        want = brute_root(X, y)
        if want is None:
            assert tree.node_count == 1
        else:
            assert (tree.feature[0], tree.threshold[0]) == (want[0], pytest.approx(want[1]))


def test_leaf_values_are_means():
    X = np.array([[0.0], [0.0], [1.0], [1.0]])
    y = np.array([1.0, 2.0, 4.0, 5.0])
    tree = fit_cart(make_dataset(X, y), TreeParams(max_depth=1))
    assert tree.threshold[0] == 0.5
    np.testing.assert_allclose(tree.predict(X), [1.5, 1.5, 4.5, 4.5])
    assert predict_tree(tree, [0.2]) == 1.5


def test_full_tree_interpolates_distinct_rows():
    rng = np.random.default_rng(1)
    X = rng.normal(size=(50, 3))
    y = rng.uniform(1, 5, 50)
    tree = fit_cart(make_dataset(X, y))
    np.testing.assert_allclose(tree.predict(X), y)


def test_constant_target_is_single_leaf():
    tree = fit_cart(make_dataset(np.arange(10.0), np.full(10, 3.0)))
    assert tree.node_count == 1 and tree.value[0] == 3.0


def test_max_depth_and_min_split_respected():
    rng = np.random.default_rng(2)
    ds = make_dataset(rng.normal(size=(200, 4)), rng.uniform(1, 5, 200))
    for d in (1, 2, 3, 5):
        assert _depth(fit_cart(ds, TreeParams(max_depth=d))) <= d
    tree = fit_cart(ds, TreeParams(min_samples_split=50))
    internal = tree.feature >= 0
    assert np.all(tree.n_samples[internal] >= 50)


def test_param_validation():
    with pytest.raises(ValueError):
        TreeParams(max_depth=0)
    with pytest.raises(ValueError):
        EnsembleParams(n_trees=0)
    with pytest.raises(ValueError):
        EnsembleParams(sample_fraction=1.5)


@given(st.integers(2, 30), st.integers(1, 4), st.integers(0, 2**31 - 1))
@settings(max_examples=40, deadline=None)
def test_predictions_within_target_range(n, f, seed):
    rng = np.random.default_rng(seed)
    ds = make_dataset(rng.normal(size=(n, f)), rng.uniform(1, 5, n))
    Xq = rng.normal(scale=3, size=(20, f))
    lo, hi = ds.mos.min(), ds.mos.max()
    for model in (fit_cart(ds, TreeParams(seed=seed, feature_fraction=0.5)),
                  fit_random_forest(ds, EnsembleParams.random_forest(n_trees=5, seed=seed)),
                  fit_bagging(ds, EnsembleParams.bagging(n_trees=5, seed=seed))):
        p = model.predict(Xq)
        assert np.all(p >= lo - 1e-12) and np.all(p <= hi + 1e-12)


def test_ensemble_determinism(small_ds):
    a = fit_random_forest(small_ds, EnsembleParams.random_forest(n_trees=20, seed=9))
    b = fit_random_forest(small_ds, EnsembleParams.random_forest(n_trees=20, seed=9))
    c = fit_random_forest(small_ds, EnsembleParams.random_forest(n_trees=20, seed=10))
    assert a.to_json() == b.to_json()
    assert a.to_json() != c.to_json()


def test_ensemble_is_mean_of_members(small_ds):
    m = fit_bagging(small_ds, EnsembleParams.bagging(n_trees=7))
    np.testing.assert_allclose(m.predict(small_ds.X),
                               m.member_predictions(small_ds.X).mean(axis=0))
    assert predict_ensemble(m, small_ds.X[0]) == pytest.approx(m.predict(small_ds.X[:1])[0])


def test_importance_finds_informative_feature(small_ds):
    for fit in (fit_random_forest, fit_bagging):
        m = fit(small_ds)
        imp = feature_importance(m)
        assert imp.sum() == pytest.approx(1.0) and np.all(imp >= 0)
        assert int(np.argmax(imp)) == 2


def test_bagging_column_subset_per_tree(small_ds):
    m = fit_bagging(small_ds, EnsembleParams.bagging(n_trees=30, feature_fraction=0.5))
    for t in m.trees:
        assert len(set(t.feature[t.feature >= 0].tolist())) <= 2


def test_rf_per_node_subset_still_uses_many_features(small_ds):
    m = fit_random_forest(small_ds, EnsembleParams.random_forest(n_trees=10))
    used = set()
    for t in m.trees:
        used |= set(t.feature[t.feature >= 0].tolist())
    assert used == {0, 1, 2, 3}


def test_json_round_trip(tmp_path, small_ds):
    m = fit_random_forest(small_ds, EnsembleParams.random_forest(n_trees=12, max_depth=4))
    path = tmp_path / "rf.json"
    m.save(path)
    back = load_forest(path)
    np.testing.assert_array_equal(back.predict(small_ds.X), m.predict(small_ds.X))
    assert back.params == m.params and back.feature_names == m.feature_names
    bad = json.loads(m.to_json())
    bad["version"] = 99
    with pytest.raises(ValueError):
        ForestModel.from_json(json.dumps(bad))


def test_predict_arity_checked(small_ds):
    m = fit_random_forest(small_ds, EnsembleParams.random_forest(n_trees=2))
    with pytest.raises(ValueError):
        m.predict(np.zeros((3, 2)))


@given(st.integers(2, 40), st.integers(1, 4), st.integers(0, 2**31 - 1),
       st.sampled_from([None, 1, 3]))
@settings(max_examples=60, deadline=None)
def test_training_rmse_beats_mean_predictor(n, f, seed, depth):
    rng = np.random.default_rng(seed)
    ds = make_dataset(rng.normal(size=(n, f)), rng.uniform(1, 5, n))
    base = np.sqrt(np.mean((ds.mos - ds.mos.mean()) ** 2))
    tree = fit_cart(ds, TreeParams(max_depth=depth, seed=seed))
    assert np.sqrt(np.mean((predict_tree(tree, ds.X) - ds.mos) ** 2)) <= base + 1e-12
    m = fit_random_forest(ds, EnsembleParams.random_forest(n_trees=10, seed=seed))
    assert np.sqrt(np.mean((m.predict(ds.X) - ds.mos) ** 2)) <= base + 1e-12


def test_bagging_beats_mean_predictor_on_signal(synth_ds):
    # tiny bootstrap draws on pure noise can miss the mean, so check real signal only
    m = fit_bagging(synth_ds, EnsembleParams.bagging(n_trees=20))
    base = np.sqrt(np.mean((synth_ds.mos - synth_ds.mos.mean()) ** 2))
    assert np.sqrt(np.mean((m.predict(synth_ds.X) - synth_ds.mos) ** 2)) < base


def test_constant_target_forest_has_zero_importance():
    ds = make_dataset(np.random.default_rng(0).normal(size=(20, 3)), np.full(20, 2.0))
    m = fit_random_forest(ds, EnsembleParams.random_forest(n_trees=5))
    assert np.all(m.importances == 0.0)


def test_more_trees_do_not_increase_rmse_variance(synth_ds):
    from scipy import stats
    from bitqoe.data import shuffle
    data = shuffle(synth_ds, 0)
    train, test = data.take_rows(range(128)), data.take_rows(range(128, 160))

    def spread(n_trees):
        errs = []
        for seed in range(20):
            m = fit_random_forest(train, EnsembleParams.random_forest(n_trees=n_trees,
                                                                      seed=seed))
            errs.append(np.sqrt(np.mean((m.predict(test.X) - test.mos) ** 2)))
        return np.var(errs, ddof=1)

    v1, v166 = spread(1), spread(166)
    # one-sided F test of "166 trees vary more than 1 tree"
    p = stats.f.sf(v166 / v1, 19, 19)
    assert p > 0.05 and v166 <= v1
