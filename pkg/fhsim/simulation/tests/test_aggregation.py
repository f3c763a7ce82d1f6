from django.test import SimpleTestCase
import time

import numpy as np
from numpy.testing import assert_allclose, assert_array_equal

from simulation.aggregation import CenterUpdate, WeightScheme, aggregate, effective_weights, weight_table
from simulation.classifier import ModelKind, ModelSpec, ParameterVector
from simulation.exceptions import AggregationError, LayoutMismatchError

LAYOUT = ModelSpec(ModelKind.LOGISTIC, (1, 1, 1, 1)).layout_id
OTHER_LAYOUT = ModelSpec(ModelKind.LOGISTIC, (1, 2, 1, 1)).layout_id

TABLE_ONE_SIZES = {'vall_dhebron': 46, 'sagrada_familia': 70, 'santpau': 24, 'acdc': 40}


def _update(center_id, values, count, layout=LAYOUT):
    return CenterUpdate(center_id, ParameterVector(values=np.atleast_1d(values), layout_id=layout), count)


def _table_one_updates():
    ordered = ['vall_dhebron', 'sagrada_familia', 'santpau', 'acdc']
    return [_update(c, float(i + 1), TABLE_ONE_SIZES[c]) for i, c in enumerate(ordered)]


class AggregateTest(SimpleTestCase):
    """Weighted averaging of center updates"""

    def test_sample_proportional_matches_hand_computation(self):
        """Test sample-proportional averaging against a hand-computed mean"""
        result = aggregate(_table_one_updates(), WeightScheme.SAMPLE_PROPORTIONAL)
        self.assertAlmostEqual(result.values[0], 418 / 180, delta=1e-12)

    def test_equal_vote(self):
        """Test equal-vote averaging ignores sample counts"""
        result = aggregate(_table_one_updates(), WeightScheme.EQUAL_VOTE)
        self.assertAlmostEqual(result.values[0], 2.5, delta=1e-12)

    def test_identical_updates_are_a_fixed_point(self):
        """Test averaging identical updates returns that update"""
        v = np.array([0.25, -1.5, 3.0])
        updates = [_update(c, v, n) for c, n in TABLE_ONE_SIZES.items()]
        for scheme in (WeightScheme.SAMPLE_PROPORTIONAL, WeightScheme.EQUAL_VOTE):
            assert_allclose(aggregate(updates, scheme).values, v, rtol=1e-15, atol=1e-15)

    def test_single_update_returned_unchanged(self):
        """Test a single update comes back unchanged"""
        update = _update('solo', [1.0, 2.0], 3)
        for scheme in (WeightScheme.SAMPLE_PROPORTIONAL, WeightScheme.EQUAL_VOTE):
            self.assertTrue(aggregate([update], scheme).same_as(update.params))
        self.assertTrue(aggregate([update], WeightScheme.FIXED, {'solo': 2.0}).same_as(update.params))

    def test_order_of_updates_does_not_matter(self):
        """Test aggregation is bit-identical under any update order"""
        updates = _table_one_updates()
        forward = aggregate(updates, WeightScheme.SAMPLE_PROPORTIONAL)
        backward = aggregate(list(reversed(updates)), WeightScheme.SAMPLE_PROPORTIONAL)
        assert_array_equal(forward.values, backward.values)

    def test_fixed_weights_are_normalized(self):
        """Test fixed weights are normalized over the participating centers"""
        updates = [_update('a', 0.0, 1), _update('b', 10.0, 100)]
        result = aggregate(updates, WeightScheme.FIXED, {'a': 3.0, 'b': 1.0})
        self.assertAlmostEqual(result.values[0], 2.5, delta=1e-12)

    def test_errors(self):
        """Test empty, zero-count and mismatched update sets are rejected"""
        with self.assertRaises(AggregationError):
            aggregate([], WeightScheme.EQUAL_VOTE)
        with self.assertRaises(AggregationError):
            _update('a', 1.0, 0)
        with self.assertRaises(LayoutMismatchError):
            aggregate([_update('a', 1.0, 1), _update('b', 1.0, 1, OTHER_LAYOUT)], WeightScheme.EQUAL_VOTE)
        with self.assertRaises(LayoutMismatchError):
            aggregate([_update('a', [1.0, 2.0], 1), _update('b', 1.0, 1)], WeightScheme.EQUAL_VOTE)
        with self.assertRaises(AggregationError):
            aggregate([_update('a', 1.0, 1), _update('a', 2.0, 1)], WeightScheme.EQUAL_VOTE)
        with self.assertRaises(AggregationError):
            aggregate([_update('a', 1.0, 1)], WeightScheme.FIXED)
        with self.assertRaises(AggregationError):
            aggregate([_update('a', 1.0, 1), _update('b', 1.0, 1)], WeightScheme.FIXED, {'a': 1.0})
        with self.assertRaises(AggregationError):
            aggregate([_update('a', 1.0, 1)], WeightScheme.FIXED, {'a': 0.0})


class EffectiveWeightsTest(SimpleTestCase):

    def test_sample_proportional(self):
        """Test effective weights follow the sample counts"""
        weights = dict(effective_weights(_table_one_updates(), WeightScheme.SAMPLE_PROPORTIONAL))
        for center, n in TABLE_ONE_SIZES.items():
            self.assertAlmostEqual(weights[center], n / 180, delta=1e-15)

    def test_canonical_order(self):
        """Test effective weights are keyed in sorted center order"""
        ids = [c for c, _ in effective_weights(_table_one_updates(), WeightScheme.EQUAL_VOTE)]
        self.assertEqual(ids, sorted(TABLE_ONE_SIZES))

    def test_equal_vote_three_centers(self):
        """Test three equal-vote centers each get one third"""
        updates = [_update(c, 0.0, n) for c, n in (('a', 5), ('b', 50), ('c', 500))]
        for _, weight in effective_weights(updates, WeightScheme.EQUAL_VOTE):
            self.assertAlmostEqual(weight, 1 / 3, delta=1e-15)

    def test_single_update_weight(self):
        """Test a lone center gets weight one"""
        for scheme in (WeightScheme.SAMPLE_PROPORTIONAL, WeightScheme.EQUAL_VOTE):
            self.assertEqual(weight_table([_update('x', 1.0, 9)], scheme), {'x': 1.0})


class AggregationPropertyTest(SimpleTestCase):
    """Algebraic laws over random update sets"""

    def test_random_update_sets(self):
        """Test weight sums, scheme agreement, idempotence and scaling on random update sets"""
        rng = np.random.default_rng(1000)
        started = time.perf_counter()
        for trial in range(1000):
            k = int(rng.integers(1, 6))
            dim = int(rng.integers(1, 8))
            counts = rng.integers(1, 100, size=k)
            values = rng.uniform(-1.0, 1.0, size=(k, dim))
            updates = [_update(f"c{i}", values[i], int(counts[i])) for i in range(k)]

            for scheme in (WeightScheme.SAMPLE_PROPORTIONAL, WeightScheme.EQUAL_VOTE):
                weights = [w for _, w in effective_weights(updates, scheme)]
                self.assertTrue(all(w >= 0 for w in weights))
                self.assertAlmostEqual(sum(weights), 1.0, delta=1e-12)

            # equal sample counts make both schemes agree
            equal = [_update(u.center_id, u.params.values, 7) for u in updates]
            assert_allclose(aggregate(equal, WeightScheme.SAMPLE_PROPORTIONAL).values,
                            aggregate(equal, WeightScheme.EQUAL_VOTE).values, rtol=0, atol=1e-15)

            # idempotence
            same = [_update(u.center_id, values[0], u.sample_count) for u in updates]
            assert_allclose(aggregate(same, WeightScheme.SAMPLE_PROPORTIONAL).values, values[0],
                            rtol=1e-15, atol=1e-15)

            # homogeneity
            c = float(rng.uniform(0.5, 2.0))
            scaled = [_update(u.center_id, c * u.params.values, u.sample_count) for u in updates]
            assert_allclose(aggregate(scaled, WeightScheme.SAMPLE_PROPORTIONAL).values,
                            c * aggregate(updates, WeightScheme.SAMPLE_PROPORTIONAL).values,
                            rtol=1e-14, atol=1e-15, err_msg=f"trial {trial}")
        self.assertLess(time.perf_counter() - started, 5.0)
