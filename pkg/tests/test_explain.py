import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from jsguide.explain import ShapExplanation, shap_values, top_shap_subset
from jsguide.model import GbdtModel, ModelError, TrainParams, Tree, fit, predict_score
from oracles import brute_force_shapley


def _random_model(seed, d=4, trees=3, depth=3):
    rng = np.random.default_rng(seed)
    n = 60
    X = rng.integers(0, 4, size=(n, d)).astype(float)
    y = ((X[:, 0] + X[:, 1] * rng.random(n)) > 2.5).astype(int)
    y[0], y[1] = 0, 1
    return fit(X, y, TrainParams(num_trees=trees, max_depth=depth, learning_rate=0.5)), X


def _expl(values):
    return ShapExplanation(0.0, np.array(values, dtype=float), float(sum(values)),
                           [f"f{i}" for i in range(len(values))])


def test_zero_tree_model():
    m = GbdtModel([], -1.25, 0.1, 1.0, ["a", "b"])
    e = shap_values(m, [1, 2])
    assert e.base_value == -1.25 and not e.contributions.any()


def test_depth_one_closed_form():
    a, b, ca, cb = 0.7, -0.3, 3.0, 1.0
    tree = Tree(np.array([1, -1, -1]), np.array([0.5, 0, 0.0]), np.array([1, -1, -1]),
                np.array([2, -1, -1]), np.array([0.0, a, b]), np.array([ca + cb, ca, cb]),
                np.array([1.0, 0, 0]), np.ones(3, dtype=bool))
    m = GbdtModel([tree], 0.0, 1.0, 1.0, ["x", "y", "z"])
    e = shap_values(m, [9.0, 0.0, 9.0])
    expected = a - (ca * a + cb * b) / (ca + cb)
    assert e.contributions[1] == pytest.approx(expected, abs=1e-12)
    assert e.contributions[0] == 0.0 and e.contributions[2] == 0.0


@pytest.mark.parametrize("seed", range(10))
def test_matches_brute_force_shapley(seed):
    m, X = _random_model(seed)
    for x in X[:5]:
        ours = shap_values(m, x).contributions
        assert np.allclose(ours, brute_force_shapley(m, x), atol=1e-9, rtol=0)


@pytest.mark.parametrize("seed", range(10))
def test_additivity_and_score_consistency(seed):
    m, X = _random_model(seed, d=6, trees=5, depth=4)
    for x in X[:10]:
        e = shap_values(m, x)
        assert abs(e.base_value + e.contributions.sum() - e.margin) < 1e-9
        assert 1 / (1 + np.exp(-e.margin)) == pytest.approx(predict_score(m, x), abs=1e-12)


def test_unused_feature_gets_zero():
    rng = np.random.default_rng(0)
    X = rng.integers(0, 4, size=(80, 3)).astype(float)
    X[:, 2] = 1.0  # constant, never split on
    y = (X[:, 0] > 1).astype(int)
    m = fit(X, y, TrainParams(num_trees=5, max_depth=3))
    for x in X[:10]:
        assert shap_values(m, x).contributions[2] == 0.0


def test_zero_cover_rejected():
    tree = Tree(np.array([0, -1, -1]), np.array([0.5, 0, 0.0]), np.array([1, -1, -1]),
                np.array([2, -1, -1]), np.array([0.0, 1, -1]), np.array([1.0, 1.0, 0.0]),
                np.zeros(3), np.ones(3, dtype=bool))
    with pytest.raises(ModelError):
        shap_values(GbdtModel([tree], 0.0, 1.0, 1.0, ["a"]), [0.0])
    with pytest.raises(ModelError):
        shap_values(GbdtModel([], 0.0, 1.0, 1.0, ["a"]), [0.0, 1.0])


def test_subset_worked_example():
    s = top_shap_subset(_expl([5, 3, 1, -2]), 0.9)
    assert s.ids == ["f0", "f1", "f2"] and s.coverage_achieved == pytest.approx(1.0)
    s = top_shap_subset(_expl([5, 3, 1, -2]), 0.8)
    assert s.ids == ["f0", "f1"]


def test_subset_edge_cases():
    assert top_shap_subset(_expl([0, 2.0, -1]), 0.5).ids == ["f1"]
    empty = top_shap_subset(_expl([0, -1, -3]), 0.9)
    assert empty.ids == [] and empty.coverage_achieved == 1.0
    assert top_shap_subset(_expl([1, 2, 2]), 0.3).ids == ["f1"]  # tie -> lower index
    with pytest.raises(ValueError):
        top_shap_subset(_expl([1]), 0.0)


@settings(max_examples=80, deadline=None)
@given(st.lists(st.floats(-5, 5, allow_nan=False), min_size=1, max_size=12),
       st.floats(0.01, 1.0), st.floats(0.01, 1.0))
def test_subset_monotone_in_coverage(values, c1, c2):
    lo, hi = sorted((c1, c2))
    a = top_shap_subset(_expl(values), lo)
    b = top_shap_subset(_expl(values), hi)
    assert set(a.ids) <= set(b.ids)
    assert all(values[i] > 0 for i in b.indices)
