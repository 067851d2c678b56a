"""Expected predictions against exhaustive-enumeration oracles."""

import json

import numpy as np
import pytest

from helpers import (
    oracle_conditional_expectation,
    random_density,
    random_evidence,
    random_partition_tree,
    random_small_schema,
)

from exptrees.data import FeatureSchema
from exptrees.density import MixtureDensity, ZeroEvidenceError
from exptrees.expectation import (
    expected_cross_prediction,
    expected_prediction,
    expected_prediction_forest,
    expected_squared_prediction,
    leaf_posterior,
)
from exptrees.trees import (
    DecisionNode,
    ForestModel,
    Leaf,
    TreeModel,
    evaluate,
    forest_of,
    parse_dump,
)


@pytest.fixture
def schema1():
    return FeatureSchema((("x1", 2),), "y")


@pytest.fixture
def schema2():
    return FeatureSchema((("x1", 2), ("x2", 2)), "y")


def split_tree(schema, feature, low, high, leaf_base=0):
    card = schema.cardinalities[feature]
    root = DecisionNode(
        feature,
        (frozenset({0}), frozenset(range(1, card))),
        (Leaf(leaf_base, low), Leaf(leaf_base + 1, high)),
    )
    return TreeModel(schema, root)


def uniform_density(schema):
    tables = tuple(
        np.full((1, c), 1.0 / c) for c in schema.cardinalities
    )
    return MixtureDensity(schema, np.array([1.0]), tables)


def quarter_density(schema1):
    return MixtureDensity(schema1, np.array([1.0]), (np.array([[0.75, 0.25]]),))


class TestLeafPosterior:
    def test_fully_observed_is_point_mass(self, schema1):
        t = split_tree(schema1, 0, 1.0, 3.0)
        post = leaf_posterior(t, quarter_density(schema1), (1,))
        assert post.weight_of(1) == 1.0
        assert post.weight_of(0) == 0.0
        assert post.excluded_mass == 0.0

    def test_empty_evidence_weights_match_brute_force(self, schema1):
        t = split_tree(schema1, 0, 1.0, 3.0)
        d = quarter_density(schema1)
        post = leaf_posterior(t, d, (None,))
        # brute force over both completions
        w_left = oracle_conditional_expectation(d, lambda x: float(x[0] == 0), (None,))
        assert post.weights == pytest.approx([w_left, 1 - w_left], abs=1e-12)
        assert post.weights == pytest.approx([0.75, 0.25], abs=1e-12)

    def test_evidence_contradicting_all_observed_paths(self, schema1):
        # dumped tree whose only observed-data path requires x1=0
        text = json.dumps(
            {
                "format": "exptree-dump/1",
                "trees": [
                    {
                        "root": {
                            "split": "x1",
                            "branches": [[0], []],
                            "default": 1,
                            "children": [{"leaf": 1.0}, {"leaf": 2.0}],
                        }
                    }
                ],
            }
        )
        with pytest.warns(UserWarning):
            t = parse_dump(text, schema1).trees[0]
        post = leaf_posterior(t, quarter_density(schema1), (1,))
        assert np.all(post.weights == 0.0)
        assert post.excluded_mass == 1.0

    def test_weights_plus_excluded_mass_sum_to_one(self):
        rng = np.random.default_rng(0)
        for _ in range(40):
            schema = random_small_schema(rng)
            t = random_partition_tree(rng, schema)
            d = random_density(rng, schema)
            xo = random_evidence(rng, schema)
            post = leaf_posterior(t, d, xo)
            assert float(post.weights.sum()) + post.excluded_mass == pytest.approx(
                1.0, abs=1e-9
            )
            assert np.all(post.weights >= 0)

    def test_zero_probability_evidence_raises(self, schema1):
        d = MixtureDensity(schema1, np.array([1.0]), (np.array([[1.0, 0.0]]),))
        t = split_tree(schema1, 0, 1.0, 3.0)
        with pytest.raises(ZeroEvidenceError, match="row 0"):
            leaf_posterior(t, d, (1,))


class TestExpectedPrediction:
    def test_constant_tree(self, schema1):
        t = TreeModel(schema1, Leaf(0, 5.0))
        assert expected_prediction(t, quarter_density(schema1), (None,)) == 5.0
        assert expected_prediction(t, quarter_density(schema1), (0,)) == 5.0

    def test_split_tree_brute_force_value(self, schema1):
        t = split_tree(schema1, 0, 1.0, 3.0)
        d = quarter_density(schema1)
        oracle = oracle_conditional_expectation(d, lambda x: evaluate(t, x), (None,))
        got = expected_prediction(t, d, (None,))
        assert got == pytest.approx(oracle, abs=1e-12)
        assert got == pytest.approx(0.75 * 1.0 + 0.25 * 3.0, abs=1e-12)

    def test_fully_observed_reduces_to_evaluate_exactly(self, schema1):
        t = split_tree(schema1, 0, 1.0, 3.0)
        d = quarter_density(schema1)
        assert expected_prediction(t, d, (1,)) == evaluate(t, (1,))
        assert expected_prediction(t, d, (0,)) == evaluate(t, (0,))

    def test_collapse_is_exact_on_random_instances(self):
        rng = np.random.default_rng(1)
        for _ in range(50):
            schema = random_small_schema(rng)
            t = random_partition_tree(rng, schema)
            d = random_density(rng, schema)
            x = tuple(int(rng.integers(0, c)) for c in schema.cardinalities)
            assert expected_prediction(t, d, x) == evaluate(t, x)

    def test_stays_within_leaf_value_range(self):
        rng = np.random.default_rng(2)
        for _ in range(40):
            schema = random_small_schema(rng)
            t = random_partition_tree(rng, schema)
            d = random_density(rng, schema)
            xo = random_evidence(rng, schema)
            values = [l.value for l in t.leaves]
            got = expected_prediction(t, d, xo)
            assert min(values) - 1e-12 <= got <= max(values) + 1e-12


class TestRenormalization:
    def dumped_tree_with_excluded_leaf(self, schema1):
        text = json.dumps(
            {
                "format": "exptree-dump/1",
                "trees": [
                    {
                        "root": {
                            "split": "x1",
                            "branches": [[0], []],
                            "default": 1,
                            "children": [{"leaf": 4.0}, {"leaf": 9.0}],
                        }
                    }
                ],
            }
        )
        with pytest.warns(UserWarning):
            return parse_dump(text, schema1).trees[0]

    def test_default_drops_excluded_mass(self, schema1):
        t = self.dumped_tree_with_excluded_leaf(schema1)
        d = quarter_density(schema1)
        # p(x1=0) = 0.75 lands on the only included leaf; the rest is dropped
        assert expected_prediction(t, d, (None,)) == pytest.approx(0.75 * 4.0)

    def test_renormalize_rescales_onto_included_leaves(self, schema1):
        t = self.dumped_tree_with_excluded_leaf(schema1)
        d = quarter_density(schema1)
        got = expected_prediction(t, d, (None,), renormalize=True)
        assert got == pytest.approx(4.0, abs=1e-12)

    def test_renormalize_with_nothing_covered_raises(self, schema1):
        t = self.dumped_tree_with_excluded_leaf(schema1)
        d = quarter_density(schema1)
        with pytest.raises(ZeroEvidenceError, match="no included leaf"):
            expected_prediction(t, d, (1,), renormalize=True)

    def test_no_effect_on_partition_trees(self, schema1):
        t = split_tree(schema1, 0, 1.0, 3.0)
        d = quarter_density(schema1)
        assert expected_prediction(t, d, (None,), renormalize=True) == pytest.approx(
            expected_prediction(t, d, (None,)), abs=1e-12
        )


class TestExpectedSquared:
    def test_fully_observed_squares_evaluate(self, schema1):
        t = split_tree(schema1, 0, 1.0, 3.0)
        d = quarter_density(schema1)
        assert expected_squared_prediction(t, d, (1,)) == evaluate(t, (1,)) ** 2

    def test_hand_value(self, schema1):
        t = split_tree(schema1, 0, 1.0, 3.0)
        d = quarter_density(schema1)
        got = expected_squared_prediction(t, d, (None,))
        assert got == pytest.approx(0.75 * 1.0 + 0.25 * 9.0, abs=1e-12)
        assert got == pytest.approx(3.0, abs=1e-12)

    def test_jensen_gap_nonnegative(self):
        rng = np.random.default_rng(3)
        for _ in range(40):
            schema = random_small_schema(rng)
            t = random_partition_tree(rng, schema)
            d = random_density(rng, schema)
            xo = random_evidence(rng, schema)
            e1 = expected_prediction(t, d, xo)
            e2 = expected_squared_prediction(t, d, xo)
            assert e2 - e1 * e1 >= -1e-12


class TestForestExpectation:
    def test_singleton_matches_tree(self, schema1):
        t = split_tree(schema1, 0, 1.0, 3.0)
        d = quarter_density(schema1)
        assert expected_prediction_forest(forest_of(t), d, (None,)) == expected_prediction(
            t, d, (None,)
        )

    def test_zero_weight_tree_is_ignored(self, schema1):
        t1 = split_tree(schema1, 0, 1.0, 3.0)
        t2 = TreeModel(schema1, Leaf(0, 100.0))
        f = ForestModel((t1, t2), (2.0, 0.0))
        d = quarter_density(schema1)
        assert expected_prediction_forest(f, d, (None,)) == pytest.approx(
            2.0 * expected_prediction(t1, d, (None,)), abs=0
        )

    def test_two_trees_brute_force(self, schema2):
        t1 = split_tree(schema2, 0, 1.0, 3.0)
        t2 = split_tree(schema2, 1, 2.0, 4.0, leaf_base=10)
        f = ForestModel((t1, t2), (1.0, 1.0))
        d = uniform_density(schema2)
        oracle = oracle_conditional_expectation(
            d, lambda x: evaluate(t1, x) + evaluate(t2, x), (None, None)
        )
        got = expected_prediction_forest(f, d, (None, None))
        assert got == pytest.approx(oracle, abs=1e-12)

    def test_linearity_is_bit_exact(self):
        rng = np.random.default_rng(4)
        for _ in range(20):
            schema = random_small_schema(rng)
            trees = tuple(random_partition_tree(rng, schema) for _ in range(3))
            omegas = tuple(float(w) for w in rng.normal(size=3))
            f = ForestModel(trees, omegas)
            d = random_density(rng, schema)
            xo = random_evidence(rng, schema)
            by_hand = 0.0
            for w, t in zip(omegas, trees):
                by_hand += w * expected_prediction(t, d, xo)
            assert expected_prediction_forest(f, d, xo) == by_hand


class TestCrossPrediction:
    def test_same_tree_equals_expected_squared(self, schema1):
        t = split_tree(schema1, 0, 1.0, 3.0)
        d = quarter_density(schema1)
        got = expected_cross_prediction(t, t, d, (None,))
        assert got == pytest.approx(
            expected_squared_prediction(t, d, (None,)), abs=1e-12
        )

    def test_constant_tree_factors_out(self, schema2):
        c = TreeModel(schema2, Leaf(0, 2.5))
        t = split_tree(schema2, 0, 1.0, 3.0)
        d = uniform_density(schema2)
        got = expected_cross_prediction(c, t, d, (None, None))
        assert got == pytest.approx(
            2.5 * expected_prediction(t, d, (None, None)), abs=1e-12
        )

    def test_independent_features_factorize(self, schema2):
        t1 = split_tree(schema2, 0, 1.0, 3.0)
        t2 = split_tree(schema2, 1, 2.0, 4.0, leaf_base=10)
        d = uniform_density(schema2)
        got = expected_cross_prediction(t1, t2, d, (None, None))
        # E[f] = 2, E[f'] = 3 under the uniform density, independent features
        assert got == pytest.approx(6.0, abs=1e-12)
        oracle = oracle_conditional_expectation(
            d, lambda x: evaluate(t1, x) * evaluate(t2, x), (None, None)
        )
        assert got == pytest.approx(oracle, abs=1e-12)

    def test_symmetry(self):
        rng = np.random.default_rng(5)
        for _ in range(30):
            schema = random_small_schema(rng)
            t1 = random_partition_tree(rng, schema)
            t2 = random_partition_tree(rng, schema)
            d = random_density(rng, schema)
            xo = random_evidence(rng, schema)
            a = expected_cross_prediction(t1, t2, d, xo)
            b = expected_cross_prediction(t2, t1, d, xo)
            assert a == pytest.approx(b, abs=1e-12)


class TestOracleEquivalence:
    def test_randomized_instances_match_enumeration(self):
        rng = np.random.default_rng(6)
        for _ in range(150):
            schema = random_small_schema(rng)
            d = random_density(rng, schema)
            t1 = random_partition_tree(rng, schema)
            t2 = random_partition_tree(rng, schema)
            xo = random_evidence(rng, schema)

            got = expected_prediction(t1, d, xo)
            want = oracle_conditional_expectation(d, lambda x: evaluate(t1, x), xo)
            assert got == pytest.approx(want, abs=1e-10)

            got = expected_squared_prediction(t1, d, xo)
            want = oracle_conditional_expectation(d, lambda x: evaluate(t1, x) ** 2, xo)
            assert got == pytest.approx(want, abs=1e-10)

            got = expected_cross_prediction(t1, t2, d, xo)
            want = oracle_conditional_expectation(
                d, lambda x: evaluate(t1, x) * evaluate(t2, x), xo
            )
            assert got == pytest.approx(want, abs=1e-10)
