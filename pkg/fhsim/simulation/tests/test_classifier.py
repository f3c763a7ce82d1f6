from django.test import SimpleTestCase
import numpy as np
from numpy.testing import assert_allclose, assert_array_equal

from simulation.classifier import (
    GradientVector, ModelKind, ModelSpec, ParameterVector, TrainerConfig,
    featurize, forward, gradient, init_parameters, learning_rate_vector, loss, sgd_step,
)
from simulation.exceptions import EmptyBatchError, LayoutMismatchError, NonFiniteError


def _with_values(spec, values):
    return ParameterVector(values=np.asarray(values, dtype=np.float64), layout_id=spec.layout_id)


class ModelSpecTest(SimpleTestCase):
    """Parameter layouts"""

    def test_logistic_parameter_count(self):
        """Test logistic layout size"""
        spec = ModelSpec(ModelKind.LOGISTIC, (1, 4, 4, 2))
        self.assertEqual(len(init_parameters(spec, 0)), 33)

    def test_mlp_parameter_count(self):
        """Test MLP layout size and feature-layer share"""
        spec = ModelSpec(ModelKind.MLP, (3, 4, 4, 2), hidden_width=8)
        self.assertEqual(spec.parameter_count, 96 * 8 + 8 + 8 + 1)
        self.assertEqual(len(init_parameters(spec, 0)), 785)
        self.assertEqual(spec.feature_parameter_count, 96 * 8 + 8)

    def test_downsampling_rounds_up(self):
        """Test pooled shape rounds partial blocks up"""
        spec = ModelSpec(ModelKind.LOGISTIC, (3, 32, 30, 8), downsample_factor=4)
        self.assertEqual(spec.pooled_shape, (3, 8, 8, 2))
        self.assertEqual(spec.feature_count, 384)

    def test_layout_id_differs_between_architectures(self):
        """Test different architectures get different layout ids"""
        a = ModelSpec(ModelKind.LOGISTIC, (1, 4, 4, 2))
        b = ModelSpec(ModelKind.LOGISTIC, (1, 4, 4, 2), downsample_factor=2)
        self.assertNotEqual(a.layout_id, b.layout_id)

    def test_invalid_specs(self):
        """Test invalid widths and input shapes are rejected"""
        with self.assertRaises(ValueError):
            ModelSpec(ModelKind.MLP, (1, 4, 4, 2), hidden_width=0)
        with self.assertRaises(ValueError):
            ModelSpec(ModelKind.LOGISTIC, (4, 4, 2))

    def test_init_is_deterministic(self):
        """Test initialization depends only on the seed"""
        spec = ModelSpec(ModelKind.LOGISTIC, (1, 4, 4, 2))
        self.assertTrue(init_parameters(spec, 7).same_as(init_parameters(spec, 7)))
        self.assertFalse(init_parameters(spec, 7).same_as(init_parameters(spec, 8)))

    def test_parameter_bytes(self):
        """Test parameter vectors survive serialization"""
        spec = ModelSpec(ModelKind.LOGISTIC, (1, 2, 2, 1))
        params = init_parameters(spec, 3)
        restored = ParameterVector.from_bytes(params.to_bytes())
        self.assertTrue(restored.same_as(params))
        with self.assertRaises(ValueError):
            ParameterVector.from_bytes(b'\x00' * 20)

    def test_non_finite_parameters_rejected(self):
        """Test NaN parameters are rejected"""
        spec = ModelSpec(ModelKind.LOGISTIC, (1, 1, 1, 1))
        with self.assertRaises(NonFiniteError):
            _with_values(spec, [np.nan, 0.0])


class FeaturizeTest(SimpleTestCase):

    def test_average_pooling_with_partial_blocks(self):
        """Test average pooling over a partial block"""
        spec = ModelSpec(ModelKind.LOGISTIC, (1, 3, 1, 1), downsample_factor=2)
        image = np.array([1.0, 3.0, 10.0]).reshape(1, 3, 1, 1)
        assert_allclose(featurize(spec, [image]), [[2.0, 10.0]])

    def test_wrong_shape_rejected(self):
        """Test inputs of the wrong shape are rejected"""
        spec = ModelSpec(ModelKind.LOGISTIC, (1, 4, 4, 2))
        with self.assertRaises(LayoutMismatchError):
            featurize(spec, [np.zeros((1, 4, 4, 3))])


class ForwardTest(SimpleTestCase):

    def setUp(self):
        self.spec = ModelSpec(ModelKind.LOGISTIC, (1, 2, 1, 1))

    def test_zero_params_give_one_half(self):
        """Test zero parameters predict one half"""
        params = _with_values(self.spec, np.zeros(3))
        out = forward(self.spec, params, [np.random.default_rng(0).normal(size=(1, 2, 1, 1))])
        assert_allclose(out, [0.5])

    def test_large_bias_saturates(self):
        """Test a large bias saturates the sigmoid"""
        params = _with_values(self.spec, [0.0, 0.0, 20.0])
        self.assertGreater(forward(self.spec, params, [np.ones((1, 2, 1, 1))])[0], 0.999)

    def test_hand_computed_value(self):
        """Test forward against a hand-computed logistic value"""
        params = _with_values(self.spec, [0.5, -1.0, 0.25])
        x = np.array([2.0, 1.0]).reshape(1, 2, 1, 1)
        z = 0.5 * 2.0 - 1.0 * 1.0 + 0.25
        assert_allclose(forward(self.spec, params, [x]), [1.0 / (1.0 + np.exp(-z))], rtol=1e-15)

    def test_mismatched_params_rejected(self):
        """Test parameters from another layout are rejected"""
        other = ModelSpec(ModelKind.LOGISTIC, (1, 3, 1, 1))
        with self.assertRaises(LayoutMismatchError):
            forward(self.spec, init_parameters(other, 0), [np.zeros((1, 2, 1, 1))])


class GradientTest(SimpleTestCase):
    """Analytic gradients against central finite differences"""

    def _finite_difference(self, spec, params, batch, labels, step=1e-5):
        values = params.values
        numeric = np.zeros_like(values)
        for i in range(values.size):
            plus, minus = values.copy(), values.copy()
            plus[i] += step
            minus[i] -= step
            numeric[i] = (loss(spec, _with_values(spec, plus), batch, labels)
                          - loss(spec, _with_values(spec, minus), batch, labels)) / (2 * step)
        return numeric

    def test_bias_gradient_at_zero_input(self):
        """Test the bias gradient at zero input"""
        spec = ModelSpec(ModelKind.LOGISTIC, (1, 2, 2, 1))
        params = _with_values(spec, np.zeros(5))
        grad = gradient(spec, params, [np.zeros((1, 2, 2, 1))], [1])
        assert_allclose(grad.values, [0.0, 0.0, 0.0, 0.0, -0.5])

    def test_gradient_check_both_kinds(self):
        """Test analytic gradients against finite differences"""
        rng = np.random.default_rng(2024)
        for draw in range(100):
            if draw % 2:
                spec = ModelSpec(ModelKind.MLP, (2, 2, 2, 1), hidden_width=3)
            else:
                spec = ModelSpec(ModelKind.LOGISTIC, (2, 3, 2, 1))
            params = _with_values(spec, rng.normal(0.0, 0.5, size=spec.parameter_count))
            n = int(rng.integers(1, 6))
            batch = [rng.normal(size=spec.input_shape) for _ in range(n)]
            labels = rng.integers(0, 2, size=n)
            analytic = gradient(spec, params, batch, labels).values
            numeric = self._finite_difference(spec, params, batch, labels)
            error = np.linalg.norm(analytic - numeric) / max(np.linalg.norm(analytic) + np.linalg.norm(numeric), 1e-12)
            self.assertLess(error, 1e-5, f"draw {draw} ({spec.kind.value})")

    def test_duplicated_batch_gives_same_gradient(self):
        """Test duplicating a batch keeps the mean gradient"""
        spec = ModelSpec(ModelKind.MLP, (1, 2, 2, 1), hidden_width=4)
        rng = np.random.default_rng(5)
        params = init_parameters(spec, 1)
        batch = [rng.normal(size=spec.input_shape) for _ in range(3)]
        labels = [0, 1, 1]
        once = gradient(spec, params, batch, labels)
        twice = gradient(spec, params, batch + batch, labels + labels)
        assert_allclose(twice.values, once.values, rtol=1e-12, atol=1e-15)

    def test_empty_batch(self):
        """Test empty batches are rejected"""
        spec = ModelSpec(ModelKind.LOGISTIC, (1, 2, 2, 1))
        with self.assertRaises(EmptyBatchError):
            gradient(spec, init_parameters(spec, 0), [], [])
        with self.assertRaises(EmptyBatchError):
            loss(spec, init_parameters(spec, 0), [], [])

    def test_labels_must_be_binary(self):
        """Test labels other than 0 and 1 are rejected"""
        spec = ModelSpec(ModelKind.LOGISTIC, (1, 2, 2, 1))
        with self.assertRaises(ValueError):
            gradient(spec, init_parameters(spec, 0), [np.zeros((1, 2, 2, 1))], [2])


class SgdStepTest(SimpleTestCase):

    def setUp(self):
        self.layout = ModelSpec(ModelKind.LOGISTIC, (1, 1, 1, 1)).layout_id

    def test_direct_arithmetic(self):
        """Test one SGD step by hand"""
        params = ParameterVector(values=[1.0], layout_id=self.layout)
        grad = GradientVector(values=[2.0], layout_id=self.layout)
        assert_allclose(sgd_step(params, grad, 0.1).values, [0.8])

    def test_zero_gradient_or_rate_is_identity(self):
        """Test a zero gradient or rate leaves parameters unchanged"""
        params = ParameterVector(values=[1.0, -2.0], layout_id=self.layout)
        zero = GradientVector(values=[0.0, 0.0], layout_id=self.layout)
        grad = GradientVector(values=[3.0, 4.0], layout_id=self.layout)
        assert_array_equal(sgd_step(params, zero, 0.5).values, params.values)
        assert_array_equal(sgd_step(params, grad, 0.0).values, params.values)

    def test_step_is_linear_in_the_gradient(self):
        """Test one step on g1 + g2 equals two chained steps"""
        # dyadic values keep every product and sum exact
        params = ParameterVector(values=[1.0, -2.0, 0.75], layout_id=self.layout)
        g1 = np.array([0.5, 0.25, -1.5])
        g2 = np.array([-1.0, 2.0, 0.125])
        combined = sgd_step(params, GradientVector(values=g1 + g2, layout_id=self.layout), 0.5)
        chained = sgd_step(sgd_step(params, GradientVector(values=g1, layout_id=self.layout), 0.5),
                           GradientVector(values=g2, layout_id=self.layout), 0.5)
        assert_array_equal(combined.values, chained.values)

        rng = np.random.default_rng(9)
        for _ in range(20):
            w, a, b = rng.normal(size=(3, 4))
            params = ParameterVector(values=w, layout_id=self.layout)
            combined = sgd_step(params, GradientVector(values=a + b, layout_id=self.layout), 0.1)
            chained = sgd_step(sgd_step(params, GradientVector(values=a, layout_id=self.layout), 0.1),
                               GradientVector(values=b, layout_id=self.layout), 0.1)
            assert_allclose(combined.values, chained.values, rtol=0, atol=1e-14)

    def test_loss_falls_on_separable_data(self):
        """Test full-batch SGD lowers the loss on separable data"""
        spec = ModelSpec(ModelKind.LOGISTIC, (1, 2, 1, 1))
        rng = np.random.default_rng(21)
        labels = np.array([0, 1] * 20)
        sides = np.where(labels == 1, 1.0, -1.0) * rng.uniform(1.0, 2.0, size=labels.size)
        batch = [np.array([side, rng.normal()]).reshape(1, 2, 1, 1) for side in sides]

        params = _with_values(spec, np.zeros(spec.parameter_count))
        losses = [loss(spec, params, batch, labels)]
        for _ in range(50):
            params = sgd_step(params, gradient(spec, params, batch, labels), 0.5)
            losses.append(loss(spec, params, batch, labels))
        self.assertAlmostEqual(losses[0], np.log(2.0))
        self.assertTrue(all(b <= a + 1e-12 for a, b in zip(losses, losses[1:])))
        self.assertLess(losses[-1], 0.25 * losses[0])
        predictions = forward(spec, params, batch)
        assert_array_equal(predictions > 0.5, labels == 1)

    def test_layout_mismatch(self):
        """Test SGD rejects a gradient from another layout"""
        params = ParameterVector(values=[1.0], layout_id=self.layout)
        other = ModelSpec(ModelKind.LOGISTIC, (1, 2, 1, 1)).layout_id
        with self.assertRaises(LayoutMismatchError):
            sgd_step(params, GradientVector(values=[1.0], layout_id=other), 0.1)

    def test_overflow_reported(self):
        """Test overflowing steps raise NonFiniteError"""
        params = ParameterVector(values=[1e308], layout_id=self.layout)
        grad = GradientVector(values=[-1e308], layout_id=self.layout)
        with self.assertRaises(NonFiniteError):
            sgd_step(params, grad, 10.0)


class LearningRateVectorTest(SimpleTestCase):

    def test_single_rate_by_default(self):
        """Test one scalar rate without a feature rate"""
        spec = ModelSpec(ModelKind.MLP, (1, 2, 1, 1), hidden_width=2)
        self.assertEqual(learning_rate_vector(spec, TrainerConfig(learning_rate=0.3)), 0.3)

    def test_frozen_feature_layer(self):
        """Test a zero feature rate freezes the hidden layer"""
        spec = ModelSpec(ModelKind.MLP, (1, 2, 1, 1), hidden_width=2)
        trainer = TrainerConfig(learning_rate=0.3, feature_learning_rate=0.0)
        rates = learning_rate_vector(spec, trainer)
        self.assertEqual(rates.shape, (spec.parameter_count,))
        assert_array_equal(rates[:spec.feature_parameter_count], 0.0)
        assert_array_equal(rates[spec.feature_parameter_count:], 0.3)

        rng = np.random.default_rng(0)
        params = init_parameters(spec, 0)
        grad = gradient(spec, params, [rng.normal(size=spec.input_shape)], [1])
        stepped = sgd_step(params, grad, rates)
        assert_array_equal(stepped.values[:spec.feature_parameter_count],
                           params.values[:spec.feature_parameter_count])

    def test_trainer_validation(self):
        """Test invalid trainer settings are rejected"""
        with self.assertRaises(ValueError):
            TrainerConfig(learning_rate=0.0)
        with self.assertRaises(ValueError):
            TrainerConfig(max_epochs=5, patience=6)
