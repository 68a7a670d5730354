import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from mpcdistill.datagen import Dataset
from mpcdistill.errors import DomainError, FormatError
from mpcdistill.learner import (
    ForestConfig,
    ForestModel,
    Tree,
    _best_split,
    confusion,
    fit_forest,
    label_to_control,
    load_model,
    predict,
    predict_many,
    quantize_label,
    quantize_labels,
    save_model,
    train_test_split,
)


def toy_dataset(n, d=4, seed=0):
    rng = np.random.default_rng(seed)
    X = rng.uniform(size=(n, d))
    labels = np.where(X[:, 0] < 0.3, 1, np.where(X[:, 0] < 0.6, 2, 3))
    return Dataset(X, np.zeros(n), labels, np.arange(n), np.zeros(n, int))


def leaf(counts):
    return Tree(np.array([-1]), np.array([0.0]), np.array([-1]), np.array([-1]), np.array([counts]))


def walk(tree, x):
    """Reference single-tree prediction."""
    node = 0
    while tree.feature[node] >= 0:
        node = tree.left[node] if x[tree.feature[node]] <= tree.threshold[node] else tree.right[node]
    c = tree.counts[node]
    return 1 + int(np.flatnonzero(c == c.max())[0])


def reference_forest_predict(model, x):
    votes = [walk(t, x) for t in model.trees]
    tally = [votes.count(c) for c in (1, 2, 3)]
    return 1 + tally.index(max(tally))


def reference_best_gain(X, y, idx, features):
    """Exhaustive Gini gain over all midpoints, in plain Python."""

    def gini_mass(labels):
        n = len(labels)
        return n - sum(labels.count(c) ** 2 for c in set(labels)) / n if n else 0.0

    ys = [int(y[i]) for i in idx]
    parent = gini_mass(ys)
    best = None
    for f in features:
        vals = sorted(set(float(X[i, f]) for i in idx))
        for a, b in zip(vals, vals[1:]):
            thr = (a + b) / 2
            left = [int(y[i]) for i in idx if X[i, f] <= thr]
            right = [int(y[i]) for i in idx if X[i, f] > thr]
            gain = parent - gini_mass(left) - gini_mass(right)
            if best is None or gain > best + 1e-12:
                best = gain
    return best


# ---------------------------------------------------------------- labels


def test_control_levels_map_to_their_labels():
    assert [quantize_label(u) for u in (0.049, 0.11, 0.449)] == [1, 2, 3]


def test_threshold_boundaries_are_inclusive_below():
    assert quantize_label(0.075) == 1
    assert quantize_label(0.0750001) == 2
    assert quantize_label(0.14) == 2
    assert quantize_label(0.140001) == 3


@pytest.mark.parametrize("u", [0.0, 0.048, 0.45, float("nan")])
def test_out_of_box_control_rejected(u):
    with pytest.raises(DomainError):
        quantize_label(u)


@given(st.floats(0.049, 0.449), st.floats(0.049, 0.449))
def test_quantization_is_monotone(a, b):
    if a <= b:
        assert quantize_label(a) <= quantize_label(b)


def test_vectorized_labels_agree():
    u = np.random.default_rng(0).uniform(0.049, 0.449, 500)
    np.testing.assert_array_equal(quantize_labels(u), [quantize_label(v) for v in u])


def test_label_to_control_roundtrip():
    for lab in (1, 2, 3):
        assert quantize_label(label_to_control(lab)) == lab
    with pytest.raises(ValueError):
        label_to_control(0)


# ---------------------------------------------------------------- split


def test_split_sizes():
    train, test = train_test_split(toy_dataset(100), 0.33, seed=0)
    assert (len(test), len(train)) == (33, 67)


def test_split_is_deterministic_partition():
    ds = toy_dataset(50)
    tr1, te1 = train_test_split(ds, 0.33, seed=4)
    tr2, te2 = train_test_split(ds, 0.33, seed=4)
    np.testing.assert_array_equal(te1.q_index, te2.q_index)
    ids = np.concatenate([tr1.q_index, te1.q_index])
    np.testing.assert_array_equal(np.sort(ids), np.arange(50))
    _, te3 = train_test_split(ds, 0.33, seed=5)
    assert not np.array_equal(te1.q_index, te3.q_index)


# ---------------------------------------------------------------- splitting rule


def test_best_split_matches_exhaustive_search():
    rng = np.random.default_rng(1)
    for _ in range(20):
        X = np.round(rng.uniform(size=(25, 3)), 1)
        y = rng.integers(0, 3, 25)
        idx = np.arange(25)
        got = _best_split(X, y, idx, np.arange(3))
        ref = reference_best_gain(X, y, idx, range(3))
        if ref is None:
            assert got is None
        else:
            assert got[0] == pytest.approx(ref, abs=1e-9)


def test_threshold_is_midpoint_and_left_is_inclusive():
    X = np.array([[0.0], [1.0], [2.0], [3.0]])
    y = np.array([0, 0, 2, 2])
    gain, f, thr = _best_split(X, y, np.arange(4), np.array([0]))
    assert (f, thr) == (0, 1.5)
    assert gain == pytest.approx(2.0)


# ---------------------------------------------------------------- forest


def test_separable_data_fits_perfectly():
    ds = toy_dataset(300)
    model = fit_forest(ds.windows, ds.labels, ForestConfig(n_trees=10, bootstrap=False, feature_subset_size=4))
    np.testing.assert_array_equal(predict_many(model, ds.windows), ds.labels)


def test_single_class_training_set():
    X = np.random.default_rng(0).uniform(size=(20, 3))
    model = fit_forest(X, np.full(20, 2), ForestConfig(n_trees=5))
    assert all(t.n_leaves == 1 for t in model.trees)
    assert set(predict_many(model, X)) == {2}


def test_fixed_seed_gives_identical_forest():
    ds = toy_dataset(200)
    cfg = ForestConfig(n_trees=8, seed=3)
    a, b = fit_forest(ds.windows, ds.labels, cfg), fit_forest(ds.windows, ds.labels, cfg)
    assert a.to_dict() == b.to_dict()


def test_leaf_cap_respected():
    rng = np.random.default_rng(2)
    X = rng.uniform(size=(400, 5))
    y = rng.integers(1, 4, 400)
    model = fit_forest(X, y, ForestConfig(n_trees=4, max_leaf_nodes=7))
    assert all(t.n_leaves == 7 for t in model.trees)


def test_prediction_agrees_with_reference_walk():
    ds = toy_dataset(200, seed=5)
    noisy = ds.labels.copy()
    noisy[::7] = 1 + noisy[::7] % 3
    model = fit_forest(ds.windows, noisy, ForestConfig(n_trees=9, max_leaf_nodes=20))
    X = np.random.default_rng(6).uniform(size=(100, 4))
    np.testing.assert_array_equal(predict_many(model, X), [reference_forest_predict(model, x) for x in X])


def test_tree_order_does_not_matter():
    ds = toy_dataset(200, seed=7)
    model = fit_forest(ds.windows, ds.labels, ForestConfig(n_trees=11, max_leaf_nodes=10))
    shuffled = ForestModel(list(reversed(model.trees)), model.config, model.n_features)
    X = np.random.default_rng(8).uniform(size=(200, 4))
    np.testing.assert_array_equal(predict_many(model, X), predict_many(shuffled, X))


def test_vote_tie_goes_to_smaller_label():
    model = ForestModel([leaf([0, 0, 5]), leaf([4, 0, 0])], ForestConfig(n_trees=2), 1)
    assert predict(model, [0.3]) == 1
    model = ForestModel([leaf([0, 3, 3])], ForestConfig(n_trees=1), 1)
    assert predict(model, [0.3]) == 2


def test_single_tree_predicts_leaf_majority():
    t = Tree(np.array([0, -1, -1]), np.array([0.5, 0.0, 0.0]), np.array([1, -1, -1]), np.array([2, -1, -1]),
             np.array([[3, 3, 4], [1, 5, 0], [0, 1, 6]]))
    model = ForestModel([t], ForestConfig(n_trees=1), 1)
    assert predict(model, [0.5]) == 2
    assert predict(model, [0.51]) == 3


def test_model_json_roundtrip(tmp_path):
    ds = toy_dataset(150)
    model = fit_forest(ds.windows, ds.labels, ForestConfig(n_trees=5))
    save_model(model, tmp_path / "m.json")
    again = load_model(tmp_path / "m.json")
    X = np.random.default_rng(9).uniform(size=(300, 4))
    np.testing.assert_array_equal(predict_many(model, X), predict_many(again, X))
    assert again.config == model.config


def test_model_rejects_unknown_version():
    d = ForestModel([leaf([1, 0, 0])], ForestConfig(n_trees=1), 1).to_dict()
    d["version"] = "2.0"
    with pytest.raises(FormatError, match="version"):
        ForestModel.from_dict(d)


def test_predict_rejects_wrong_width():
    model = ForestModel([leaf([1, 0, 0])], ForestConfig(n_trees=1), 3)
    with pytest.raises(ValueError):
        predict(model, [0.1, 0.2])


# ---------------------------------------------------------------- confusion


def test_perfect_model_confusion_is_diagonal():
    ds = toy_dataset(300)
    model = fit_forest(ds.windows, ds.labels, ForestConfig(n_trees=5, bootstrap=False, feature_subset_size=4))
    cm = confusion(model, ds.windows, ds.labels)
    assert np.count_nonzero(cm.counts - np.diag(np.diag(cm.counts))) == 0
    np.testing.assert_array_equal(np.diag(cm.counts), np.bincount(ds.labels, minlength=4)[1:])
    assert cm.accuracy == 1.0


def test_constant_prediction_fills_one_column():
    ds = toy_dataset(90)
    model = ForestModel([leaf([0, 7, 0])], ForestConfig(n_trees=1), 4)
    cm = confusion(model, ds.windows, ds.labels)
    assert cm.counts[:, [0, 2]].sum() == 0
    assert cm.accuracy == pytest.approx(np.mean(ds.labels == 2))
    assert cm.total == 90


def test_train_accuracy_at_least_test_accuracy_on_average():
    gaps = []
    for seed in range(10):
        ds = toy_dataset(300, seed=seed)
        labels = ds.labels.copy()
        flip = np.random.default_rng(seed).random(300) < 0.2
        labels[flip] = 1 + labels[flip] % 3
        ds = Dataset(ds.windows, ds.u_values, labels, ds.q_index, ds.k)
        tr, te = train_test_split(ds, 0.33, seed)
        model = fit_forest(tr.windows, tr.labels, ForestConfig(n_trees=15, seed=seed))
        gaps.append(confusion(model, tr.windows, tr.labels).accuracy - confusion(model, te.windows, te.labels).accuracy)
    assert np.mean(gaps) >= 0
