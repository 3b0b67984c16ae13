import json
from fractions import Fraction

import numpy as np
import pytest
from conftest import make_sample
from hypothesis import given, settings
from hypothesis import strategies as st

from hydra_power.errors import ConfigurationError, HydraError, ModelFormatError
from hydra_power.selector import (
    CandidateSpec,
    DecisionTree,
    ForestConfig,
    SelectorExample,
    SelectorForest,
    examples_to_csv,
    forest_predict,
    gini,
    label_windows,
    lightest_adequate,
    train_forest,
    train_tree,
)
from hydra_power.stats import FeatureVector, NormalizationStats
from hydra_power.trace import ServerProfile, Trace

AN, MLP = CandidateSpec("analytical", 0), CandidateSpec("mlp", 1)
PROFILE = ServerProfile("t", 100.0, 200.0)


# --- brute-force CART oracle -------------------------------------------------

def _gini_exact(labels, k):
    n = len(labels)
    return 1 - sum(Fraction(labels.count(c), n) ** 2 for c in range(k))


def oracle_tree(rows, labels, k, max_depth, min_split, depth=0):
    """Exhaustive CART in exact arithmetic; ties go to lowest feature, then lowest threshold."""
    counts = [labels.count(c) for c in range(k)]
    if sum(1 for c in counts if c) <= 1 or depth >= max_depth or len(labels) < min_split:
        return ("leaf", counts.index(max(counts)))
    best = None
    for f in range(len(rows[0])):
        vals = sorted(set(r[f] for r in rows))
        for lo, hi in zip(vals, vals[1:]):
            thr = (lo + hi) / 2
            thr = thr if lo <= thr < hi else lo
            left = [y for r, y in zip(rows, labels) if r[f] <= thr]
            right = [y for r, y in zip(rows, labels) if r[f] > thr]
            n = len(labels)
            score = Fraction(len(left), n) * _gini_exact(left, k) + Fraction(len(right), n) * _gini_exact(right, k)
            if best is None or score < best[0]:
                best = (score, f, thr)
    if best is None:
        return ("leaf", counts.index(max(counts)))
    _, f, thr = best
    li = [i for i, r in enumerate(rows) if r[f] <= thr]
    ri = [i for i, r in enumerate(rows) if r[f] > thr]
    return (
        "split", f, thr,
        oracle_tree([rows[i] for i in li], [labels[i] for i in li], k, max_depth, min_split, depth + 1),
        oracle_tree([rows[i] for i in ri], [labels[i] for i in ri], k, max_depth, min_split, depth + 1),
    )


def oracle_predict(node, x):
    while node[0] == "split":
        node = node[3] if x[node[1]] <= node[2] else node[4]
    return node[1]


def _random_task(rng, n, k=3, grid=6):
    # coarse grid values force many equal-impurity ties
    X = rng.integers(0, grid, (n, 11)) / (grid - 1)
    y = ((X[:, 2] > 0.5).astype(int) + (X[:, 7] > 0.3).astype(int) + rng.integers(0, 2, n)) % k
    return X, y


def _examples(X, y, ids=("a", "b", "c")):
    return [SelectorExample(FeatureVector(x), ids[int(c)]) for x, c in zip(X, y)]


class TestGini:
    def test_examples(self):
        assert gini([10, 0]) == 0.0
        assert gini([5, 5]) == 0.5
        assert gini([1, 1, 1, 1]) == 0.75

    def test_empty(self):
        with pytest.raises(ValueError):
            gini([0, 0])

    @given(st.lists(st.integers(0, 50), min_size=1, max_size=6).filter(lambda c: sum(c) > 0))
    def test_bounds(self, counts):
        g = gini(counts)
        assert -1e-12 <= g <= 1 - 1 / len(counts) + 1e-12


class TestLabeling:
    def test_rule_examples(self):
        assert lightest_adequate([2.00, 1.98], [AN, MLP], 0.05) == "analytical"
        assert lightest_adequate([30.0, 2.0], [AN, MLP], 0.05) == "mlp"
        assert lightest_adequate([5.0], [MLP], 0.05) == "mlp"

    def test_rank_not_list_order(self):
        assert lightest_adequate([1.0, 1.0], [MLP, AN], 0.05) == "analytical"

    class _Fixed:
        def __init__(self, watts):
            self.watts = np.asarray(watts, dtype=float)

        def predict_trace_watts(self, trace, profile):
            return self.watts

    def _trace(self, n):
        return Trace("s", 1.0, [make_sample(t=float(i), util=float(i % 100), power=150.0) for i in range(n)])

    def test_windows_hand_built(self):
        tr = self._trace(60)
        # window 0: analytical off by 2.00 W, mlp by 1.98 W; window 1: 30 W vs 2 W
        an = self._Fixed(np.r_[np.full(30, 152.0), np.full(30, 180.0)])
        ml = self._Fixed(np.r_[np.full(30, 151.98), np.full(30, 148.0)])
        norm = NormalizationStats(np.zeros(11), np.full(11, 1e12))
        ex = label_windows(tr, [(AN, an), (MLP, ml)], PROFILE, norm, window=30, epsilon_rel=0.05)
        assert [e.label for e in ex] == ["analytical", "mlp"]
        # features come from the window midpoints (samples 15 and 45)
        assert ex[0].features.values[2] == pytest.approx(15.0 / 1e12)
        assert ex[1].features.values[2] == pytest.approx(45.0 / 1e12)

    def test_stride_drops_partial_window(self):
        tr = self._trace(75)
        one = [(AN, self._Fixed(np.full(75, 150.0)))]
        norm = NormalizationStats(np.zeros(11), np.full(11, 1e12))
        ex = label_windows(tr, one, PROFILE, norm, window=30)
        assert len(ex) == 2 and all(e.label == "analytical" for e in ex)

    def test_errors(self):
        norm = NormalizationStats(np.zeros(11), np.full(11, 1e12))
        with pytest.raises(HydraError):
            label_windows(self._trace(10), [(AN, self._Fixed(np.zeros(10)))], PROFILE, norm, window=30)
        with pytest.raises(ConfigurationError):
            label_windows(self._trace(30), [(AN, None), (CandidateSpec("analytical", 1), None)], PROFILE, norm)
        no_power = Trace("s", 1.0, [make_sample(t=float(i)) for i in range(30)])
        with pytest.raises(HydraError):
            label_windows(no_power, [(AN, self._Fixed(np.zeros(30)))], PROFILE, norm)


class TestTree:
    def test_matches_brute_force_oracle(self):
        rng = np.random.default_rng(0)
        for trial in range(25):
            n = int(rng.integers(5, 40))
            X, y = _random_task(rng, n)
            depth = int(rng.integers(1, 6))
            tree = train_tree(X, y, 3, max_depth=depth, min_samples_split=2, feature_subsample_k=11)
            ref = oracle_tree([list(r) for r in X], list(y), 3, depth, 2)
            Xt, _ = _random_task(rng, 200)
            for x in np.vstack([X, Xt]):
                assert tree.predict_index(x) == oracle_predict(ref, x), trial

    def test_linearly_separable(self):
        rng = np.random.default_rng(1)
        X = rng.uniform(0, 1, (100, 11))
        y = (X[:, 4] > 0.6).astype(int)
        forest = train_forest(_examples(X, y), ForestConfig(n_trees=1, bootstrap=False, feature_subsample_k=11))
        pred = forest.predict_index_batch(X)
        assert np.array_equal(pred, y)
        assert forest.trees[0].depth == 1 and forest.trees[0].feature[0] == 4

    def test_pure_data_gives_single_leaf(self):
        X = np.random.default_rng(2).uniform(0, 1, (20, 11))
        forest = train_forest(_examples(X, np.zeros(20)), ForestConfig(n_trees=5))
        assert all(t.n_nodes == 1 for t in forest.trees)

    def test_validate_rejects_broken(self):
        tree = train_tree(*_random_task(np.random.default_rng(3), 30), 3, 4, 2, 11)
        doc = tree.to_doc()
        doc["left"][0] = 0
        with pytest.raises(ModelFormatError):
            DecisionTree.from_doc(doc, 3)


class TestForest:
    def test_single_tree_no_bootstrap_equals_plain_tree(self):
        rng = np.random.default_rng(4)
        X, y = _random_task(rng, 120)
        forest = train_forest(_examples(X, y), ForestConfig(n_trees=1, bootstrap=False, feature_subsample_k=11,
                                                            max_depth=6), candidate_ids=("a", "b", "c"))
        tree = train_tree(X, y, 3, max_depth=6, min_samples_split=2, feature_subsample_k=11)
        Xt, _ = _random_task(rng, 500)
        for x in np.vstack([X, Xt]):
            assert forest.predict_index_batch(x)[0] == tree.predict_index(x)

    def test_vectorized_votes_match_per_tree_walk(self):
        rng = np.random.default_rng(5)
        X, y = _random_task(rng, 200)
        forest = train_forest(_examples(X, y), ForestConfig(n_trees=15, max_depth=5, seed=3),
                              candidate_ids=("a", "b", "c"))
        for x in rng.uniform(0, 1, (100, 11)):
            expect = np.bincount([t.predict_index(x) for t in forest.trees], minlength=3)
            assert np.array_equal(forest.votes(x), expect)

    def test_tie_goes_to_cheapest(self):
        leaf_a = DecisionTree(np.array([-1]), np.array([0.0]), np.array([-1]), np.array([-1]), np.array([[1, 0]]))
        leaf_b = DecisionTree(np.array([-1]), np.array([0.0]), np.array([-1]), np.array([-1]), np.array([[0, 1]]))
        forest = SelectorForest((leaf_b, leaf_a), ("analytical", "mlp"), 4, 0)
        cid, votes = forest_predict(forest, FeatureVector(np.full(11, 0.5)))
        assert cid == "analytical" and votes == (1, 1)

    def test_unanimous(self):
        leaf = DecisionTree(np.array([-1]), np.array([0.0]), np.array([-1]), np.array([-1]), np.array([[0, 3]]))
        forest = SelectorForest((leaf,) * 4, ("analytical", "mlp"), 4, 0)
        assert forest_predict(forest, FeatureVector(np.zeros(11)))[0] == "mlp"

    def test_deterministic_and_doc_roundtrip(self):
        rng = np.random.default_rng(6)
        X, y = _random_task(rng, 150)
        cfg = ForestConfig(n_trees=10, seed=42)
        a = train_forest(_examples(X, y), cfg)
        b = train_forest(_examples(X, y), cfg)
        assert a == b
        back = SelectorForest.from_doc(json.loads(json.dumps(a.to_doc())))
        assert back == a
        assert np.array_equal(back.predict_index_batch(X), a.predict_index_batch(X))
        assert a != train_forest(_examples(X, y), ForestConfig(n_trees=10, seed=43))

    def test_forest_at_least_single_tree_on_regime_task(self):
        # noisy two-regime task: regime decided by cache-miss and shared-memory features
        rng = np.random.default_rng(7)

        def task(n):
            X = rng.uniform(0, 1, (n, 11))
            y = ((X[:, 6] + 0.3 * X[:, 10] + rng.normal(0, 0.15, n)) > 0.65).astype(int)
            return X, y

        Xtr, ytr = task(300)
        Xte, yte = task(2000)
        data = _examples(Xtr, ytr, ids=("analytical", "mlp"))
        ids = ("analytical", "mlp")
        forest = train_forest(data, ForestConfig(n_trees=100, seed=0), ids)
        single = train_forest(data, ForestConfig(n_trees=1, bootstrap=False, feature_subsample_k=11), ids)
        acc_f = np.mean(forest.predict_index_batch(Xte) == yte)
        acc_1 = np.mean(single.predict_index_batch(Xte) == yte)
        assert acc_f >= acc_1

    def test_config_and_data_errors(self):
        with pytest.raises(ConfigurationError):
            ForestConfig(feature_subsample_k=12)
        with pytest.raises(ConfigurationError):
            ForestConfig(n_trees=0)
        with pytest.raises(HydraError):
            train_forest([], ForestConfig())
        ex = _examples(np.zeros((2, 11)), np.array([0, 1]), ids=("a", "b"))
        with pytest.raises(ConfigurationError):
            train_forest(ex, ForestConfig(), candidate_ids=("a",))

    def test_examples_csv(self):
        ex = _examples(np.zeros((2, 11)), np.array([0, 1]), ids=("a", "b"))
        lines = examples_to_csv(ex).splitlines()
        assert lines[0].split(",")[-1] == "label" and len(lines[0].split(",")) == 12
        assert lines[2].endswith(",b")


@settings(max_examples=30, deadline=None)
@given(st.integers(0, 10**6), st.integers(4, 30), st.integers(1, 5))
def test_tree_oracle_property(seed, n, depth):
    rng = np.random.default_rng(seed)
    X, y = _random_task(rng, n, grid=4)
    tree = train_tree(X, y, 3, max_depth=depth, min_samples_split=2, feature_subsample_k=11)
    ref = oracle_tree([list(r) for r in X], list(y), 3, depth, 2)
    for x in _random_task(rng, 50, grid=4)[0]:
        assert tree.predict_index(x) == oracle_predict(ref, x)
