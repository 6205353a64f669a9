import json

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from paretotune.space import bundled_space, parse_space, sample_indices
from paretotune.surrogate import ForestParams, fit_forest, predict, predict_batch, predict_grid

SINGLE_TREE = ForestParams(n_trees=1, bootstrap=False, max_depth=None, min_samples_leaf=1)


def step_data():
    xs = np.round(np.arange(21) * 0.05, 10).reshape(-1, 1)
    ys = np.where(xs[:, 0] < 0.5, 1.0, 2.0)
    return xs, ys


def test_constant_target():
    rng = np.random.default_rng(0)
    xs = rng.random((40, 3))
    model = fit_forest(xs, np.full(40, 5.0))
    assert predict(model, [0.3, 0.1, 0.9]) == 5.0
    assert set(predict_batch(model, rng.random((100, 3)) * 10 - 5)) == {5.0}


def test_single_tree_interpolates():
    rng = np.random.default_rng(1)
    xs = rng.integers(0, 6, size=(60, 4)).astype(float)
    xs = np.unique(xs, axis=0)
    ys = rng.normal(size=len(xs))
    model = fit_forest(xs, ys, SINGLE_TREE)
    assert predict_batch(model, xs) == ys.tolist()
    assert predict(model, xs[3]) == ys[3]


def test_step_function():
    xs, ys = step_data()
    model = fit_forest(xs, ys)
    preds = np.asarray(predict_batch(model, xs))
    assert np.mean(np.abs(preds - ys)) < 0.05
    p = predict(model, [0.25])
    assert 1.0 <= p <= 2.0
    assert abs(p - 1.0) < 0.1


def test_predict_batch_edge_cases():
    xs, ys = step_data()
    model = fit_forest(xs, ys)
    assert predict_batch(model, []) == []
    a, b = predict_batch(model, [[0.41], [0.41]])
    assert a == b


def test_batch_equals_pointwise_on_grid():
    rng = np.random.default_rng(2)
    xs = rng.random((300, 2))
    ys = np.sin(6 * xs[:, 0]) + xs[:, 1] ** 2
    model = fit_forest(xs, ys, ForestParams(n_trees=20, seed=4))
    g = np.linspace(0, 1, 100)
    grid = np.array([(a, b) for a in g for b in g])
    batch = predict_batch(model, grid)
    assert batch == [predict(model, x) for x in grid]


def test_width_mismatch():
    xs, ys = step_data()
    model = fit_forest(xs, ys)
    with pytest.raises(ValueError, match="width"):
        predict(model, [0.1, 0.2])
    with pytest.raises(ValueError, match="width"):
        predict_batch(model, [[0.1, 0.2]])


@pytest.mark.parametrize(
    "xs, ys, message",
    [
        (np.empty((0, 2)), [], "empty"),
        ([[0.0], [1.0]], [1.0], "mismatch"),
        ([[0.0], [1.0]], [1.0, float("nan")], "non-finite"),
        ([[0.0], [1.0]], [1.0, float("inf")], "non-finite"),
    ],
)
def test_fit_errors(xs, ys, message):
    with pytest.raises(ValueError, match=message):
        fit_forest(xs, ys)


@pytest.mark.parametrize("kwargs", [{"n_trees": 0}, {"min_samples_leaf": 0}, {"feature_subsample": 0.0},
                                    {"feature_subsample": 1.5}])
def test_forest_params_validation(kwargs):
    with pytest.raises(ValueError):
        ForestParams(**kwargs)


def test_features_per_split_rounding():
    assert ForestParams().features_per_split(9) == 3
    assert ForestParams().features_per_split(1) == 1
    assert ForestParams(feature_subsample=1.0).features_per_split(7) == 7


def test_mean_of_trees():
    rng = np.random.default_rng(3)
    xs = rng.random((120, 3))
    ys = xs @ [1.0, -2.0, 0.5] + rng.normal(scale=0.1, size=120)
    model = fit_forest(xs, ys, ForestParams(n_trees=17, seed=9))
    probe = rng.random((200, 3))
    per_tree = np.array([t.predict(probe) for t in model.trees])
    expected = []
    for col in per_tree.T:
        s = 0.0
        for v in col:
            s += v
        expected.append(s / len(model.trees))
    assert predict_batch(model, probe) == expected


def test_permutation_invariance():
    rng = np.random.default_rng(5)
    xs = rng.integers(0, 10, size=(150, 3)).astype(float)
    ys = xs.sum(axis=1) + rng.normal(size=150)
    perm = rng.permutation(150)
    params = ForestParams(n_trees=25, seed=11)
    a = fit_forest(xs, ys, params)
    b = fit_forest(xs[perm], ys[perm], params)
    probe = rng.random((500, 3)) * 10
    assert predict_batch(a, probe) == predict_batch(b, probe)


def test_seed_changes_model():
    rng = np.random.default_rng(6)
    xs = rng.random((100, 3))
    ys = rng.random(100)
    probe = rng.random((50, 3))
    a = predict_batch(fit_forest(xs, ys, ForestParams(n_trees=10, seed=1)), probe)
    b = predict_batch(fit_forest(xs, ys, ForestParams(n_trees=10, seed=2)), probe)
    assert a != b


def test_tree_structure_invariants():
    rng = np.random.default_rng(8)
    xs = rng.integers(0, 4, size=(80, 3)).astype(float)
    ys = rng.random(80)
    model = fit_forest(xs, ys, ForestParams(n_trees=5, min_samples_leaf=3, seed=2))
    for tree in model.trees:
        leaves = tree.feature == -1
        assert np.all(tree.value[leaves] >= ys.min()) and np.all(tree.value[leaves] <= ys.max())
        # every internal threshold separates at least one training point on each side
        for node in np.flatnonzero(~leaves):
            col = xs[:, tree.feature[node]]
            assert np.any(col <= tree.threshold[node]) and np.any(col > tree.threshold[node])


def test_max_depth_zero_is_mean():
    xs, ys = step_data()
    model = fit_forest(xs, ys, ForestParams(n_trees=1, bootstrap=False, max_depth=0))
    assert predict(model, [0.9]) == pytest.approx(ys.mean())


def test_one_hot_features_split():
    space = parse_space({"parameters": [
        {"name": "c", "type": "categorical", "labels": ["a", "b", "c"]},
        {"name": "n", "type": "ordinal", "values": [1, 2, 3, 4]},
    ]})
    flat = np.arange(space.cardinality)
    X = space.encode_flat(flat)
    ys = np.where(X[:, 1] == 1.0, 10.0, 0.0) + X[:, 3]
    model = fit_forest(X, ys, SINGLE_TREE)
    assert predict_batch(model, X) == ys.tolist()
    assert np.array_equal(predict_grid(model, space), model.predict_matrix(X))


def test_predict_grid_matches_traversal():
    space = bundled_space("synth-elasticfusion")
    rng = np.random.default_rng(0)
    flat = sample_indices(space, 400, rng)
    X = space.encode_flat(flat)
    ys = X[:, 0] * 0.3 - X[:, 1] + 2 * X[:, 6] + rng.normal(size=400)
    model = fit_forest(X, ys, ForestParams(n_trees=30, seed=3))
    full = space.encode_flat(np.arange(space.cardinality))
    assert np.array_equal(predict_grid(model, space), model.predict_matrix(full))


def test_json_dump():
    xs, ys = step_data()
    model = fit_forest(xs, ys, ForestParams(n_trees=2), objective_name="runtime_s")
    doc = json.loads(model.to_json())
    assert doc["objective"] == "runtime_s"
    assert len(doc["trees"]) == 2
    assert "threshold" in doc["trees"][0]


def test_fit_quality_on_smooth_runtime():
    """Smooth part of the synthetic KFusion runtime, 10^4 configurations, 2,000 training points."""
    space = bundled_space("synth-kfusion")
    rng = np.random.default_rng(2024)
    flat = sample_indices(space, 10_000, rng)
    X = space.encode_flat(flat)
    v, r, t, g, m, e, p1, p2, p3 = X.T
    y = 0.008 * (v / 64) ** 3 / r + 0.002 * (p1 + 2 * p2 + 4 * p3) / r + 0.010 / g + 0.006 / t + 0.020
    model = fit_forest(X[:2000], y[:2000])
    pred = model.predict_matrix(X[2000:])
    resid = np.sum((y[2000:] - pred) ** 2)
    total = np.sum((y[2000:] - y[2000:].mean()) ** 2)
    assert 1 - resid / total >= 0.8


@settings(max_examples=40, deadline=None)
@given(
    st.integers(2, 60),
    st.integers(1, 4),
    st.integers(0, 2**31),
    st.sampled_from([1, 2, 5]),
    st.booleans(),
)
def test_range_containment(n, d, seed, leaf, bootstrap):
    rng = np.random.default_rng(seed)
    xs = rng.integers(0, 5, size=(n, d)).astype(float)
    ys = rng.normal(size=n) * 10.0 ** rng.integers(-3, 3)
    model = fit_forest(xs, ys, ForestParams(n_trees=7, min_samples_leaf=leaf, bootstrap=bootstrap, seed=seed % 1000))
    preds = np.asarray(predict_batch(model, rng.normal(size=(300, d)) * 4 + 2))
    assert np.all(preds >= ys.min()) and np.all(preds <= ys.max())


@pytest.mark.parametrize("depth", [0, 1, 3, None])
def test_predict_grid_random_spaces(depth):
    rng = np.random.default_rng(depth or 17)
    kinds = ["ordinal", "boolean", "categorical"]
    for _ in range(15):
        params = []
        for i in range(int(rng.integers(1, 5))):
            kind = kinds[int(rng.integers(0, 3))]
            p = {"name": f"p{i}", "type": kind}
            if kind == "ordinal":
                p["values"] = sorted(rng.choice(20, size=int(rng.integers(1, 6)), replace=False).tolist())
            elif kind == "categorical":
                p["labels"] = list("abcd"[: int(rng.integers(1, 5))])
            params.append(p)
        space = parse_space({"parameters": params})
        X = space.encode_flat(np.arange(space.cardinality))
        n = min(space.cardinality, 30)
        rows = rng.choice(space.cardinality, size=n, replace=False)
        model = fit_forest(X[rows], rng.normal(size=n), ForestParams(n_trees=5, max_depth=depth, seed=1))
        assert np.array_equal(predict_grid(model, space), model.predict_matrix(X))
