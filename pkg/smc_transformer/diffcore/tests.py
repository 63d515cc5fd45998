# diffcore/tests.py
import numpy as np
from django.test import SimpleTestCase

from numkit.exceptions import DomainError, UnsupportedKernelError
from numkit.kernels import ARRAY_OPS, softmax
from numkit.rng import SeededRng

from .tape import backward, forward_record, gradient_is_finite


def numerical_gradient(expr, params, name, step=1e-5):
    """Central finite differences of a scalar expression in one parameter"""
    values = {key: np.array(value, dtype=np.float64) for key, value in params.items()}
    grad = np.zeros_like(values[name])
    for position in np.ndindex(grad.shape):
        original = values[name][position]
        values[name][position] = original + step
        upper = float(expr(ARRAY_OPS, values))
        values[name][position] = original - step
        lower = float(expr(ARRAY_OPS, values))
        values[name][position] = original
        grad[position] = (upper - lower) / (2 * step)
    return grad


def relative_error(analytic, numeric):
    scale = max(np.linalg.norm(analytic) + np.linalg.norm(numeric), 1e-12)
    return np.linalg.norm(analytic - numeric) / scale


class GradientCheckMixin:

    def assertGradientsMatch(self, expr, params, tolerance=1e-4):
        _, tape = forward_record(expr, params)
        grads = backward(tape)
        for name in params:
            error = relative_error(grads[name], numerical_gradient(expr, params, name))
            self.assertLess(error, tolerance, msg=f'gradient of {name}')


class ForwardRecordTest(SimpleTestCase):
    """Test taped evaluation against direct evaluation"""

    def test_square(self):
        """Test a taped square"""
        value, _ = forward_record(lambda ops, p: ops.square(p['x']), {'x': np.array(3.0)})
        self.assertEqual(float(value), 9.0)

    def test_softmax_matches_numkit(self):
        """Test taped softmax against the array kernel"""
        logits = np.array([[0.3, -1.0, 2.2], [5.0, 5.0, -3.0]])
        value, _ = forward_record(lambda ops, p: ops.softmax(p['x']), {'x': logits})
        np.testing.assert_array_equal(value, softmax(logits))

    def test_affine_layer_norm_is_bitwise_equal(self):
        """Test bitwise equality of a taped affine layer norm"""
        rng = SeededRng(4)
        params = {
            'x': rng.normal((5, 3)), 'W': rng.normal((4, 3)), 'b': rng.normal(4),
            'gain': rng.normal(4), 'bias': rng.normal(4),
        }

        def expr(ops, p):
            hidden = ops.add(ops.linear(p['x'], p['W']), p['b'])
            return ops.layer_norm(hidden, p['gain'], p['bias'], 1e-6)

        value, _ = forward_record(expr, params)
        np.testing.assert_array_equal(value, expr(ARRAY_OPS, params))

    def test_unsupported_kernel(self):
        """Test rejection of a kernel without a gradient"""
        with self.assertRaises(UnsupportedKernelError):
            forward_record(lambda ops, p: ops.tanh(p['x']), {'x': np.ones(2)})

    def test_recording_leaves_parameters_unchanged(self):
        """Test that recording and backward do not mutate inputs"""
        x = np.array([1.0, -2.0, 0.5])
        before = x.copy()
        _, tape = forward_record(lambda ops, p: ops.sum(ops.square(p['x'])), {'x': x})
        backward(tape)
        np.testing.assert_array_equal(x, before)


class BackwardTest(GradientCheckMixin, SimpleTestCase):
    """Test reverse-mode gradients"""

    def test_square_gradient(self):
        """Test d(x^2)/dx at x = 3"""
        _, tape = forward_record(lambda ops, p: ops.square(p['x']), {'x': np.array(3.0)})
        self.assertEqual(float(backward(tape)['x']), 6.0)

    def test_unused_parameter_has_zero_gradient(self):
        """Test a zero gradient for a parameter the expression ignores"""
        params = {'x': np.array([1.0, 2.0]), 'unused': np.ones((2, 2))}
        _, tape = forward_record(lambda ops, p: ops.sum(ops.square(p['x'])), params)
        np.testing.assert_array_equal(backward(tape)['unused'], np.zeros((2, 2)))

    def test_non_scalar_root(self):
        """Test rejection of a vector-valued root"""
        _, tape = forward_record(lambda ops, p: ops.square(p['x']), {'x': np.ones(3)})
        with self.assertRaises(DomainError):
            backward(tape)

    def test_linear_in_seed_gradient(self):
        """Test that gradients scale with the seed gradient"""
        params = {'x': np.array([0.5, -1.5, 2.0])}
        _, tape = forward_record(lambda ops, p: ops.sum(ops.mul(ops.square(p['x']), p['x'])), params)
        once = backward(tape, 1.0)['x']
        np.testing.assert_allclose(backward(tape, -2.5)['x'], -2.5 * once, rtol=1e-14)

    def test_gradient_is_finite(self):
        """Test that a NaN anywhere in a gradient map is detected"""
        self.assertTrue(gradient_is_finite({'a': np.ones(2), 'b': np.zeros(1)}))
        self.assertFalse(gradient_is_finite({'a': np.array([np.nan])}))

    def test_gaussian_sample_replays_noise(self):
        """Test that a taped sample equals the untaped one and passes gradients to its mean"""
        mean = np.array([0.2, -1.0, 3.0])
        eps = SeededRng(9).normal(3)
        projection = np.array([1.0, -2.0, 0.5])
        expected, _ = ARRAY_OPS.gaussian_sample(mean, 0.3, None, eps)

        def expr(ops, p):
            sample, _ = ops.gaussian_sample(p['mean'], 0.3, None, eps)
            return ops.sum(ops.mul(sample, projection))

        _, tape = forward_record(expr, {'mean': mean})
        np.testing.assert_array_equal(tape.root.inputs[0].inputs[0].value, expected)
        np.testing.assert_allclose(backward(tape)['mean'], projection, rtol=1e-14)

    def test_gaussian_sample_needs_recorded_noise(self):
        """Test that taped sampling refuses to draw fresh noise"""
        with self.assertRaises(UnsupportedKernelError):
            forward_record(lambda ops, p: ops.gaussian_sample(p['x'], 1.0, SeededRng(1))[0], {'x': np.ones(2)})


class KernelGradientTest(GradientCheckMixin, SimpleTestCase):
    """Randomised finite-difference checks, 20 configurations per kernel"""

    configurations = 20

    def setUp(self):
        self.rng = SeededRng(2024)

    def projected(self, ops, out, projection):
        return ops.sum(ops.mul(out, projection))

    def check_kernel(self, label, build):
        for index in range(self.configurations):
            rng = self.rng.child(label, index)
            expr, params = build(rng)
            with self.subTest(kernel=label, configuration=index):
                self.assertGradientsMatch(expr, params)

    def test_elementwise_kernels(self):
        """Test gradients of the elementwise kernels"""
        def build_for(kernel):
            def build(rng):
                shape = (2, 3)
                c = rng.normal(shape)
                params = {'a': rng.normal(shape), 'b': rng.normal(shape)}
                if kernel in ('scale', 'square'):
                    args = lambda p: (p['a'], 1.7) if kernel == 'scale' else (p['a'],)
                else:
                    args = lambda p: (p['a'], p['b'])
                return (lambda ops, p: self.projected(ops, getattr(ops, kernel)(*args(p)), c)), params
            return build

        for kernel in ('add', 'sub', 'mul', 'scale', 'square'):
            self.check_kernel(kernel, build_for(kernel))

    def test_linear(self):
        """Test gradients of the linear kernel"""
        def build(rng):
            c = rng.normal((4, 2))
            params = {'x': rng.normal((4, 3)), 'W': rng.normal((2, 3))}
            return (lambda ops, p: self.projected(ops, ops.linear(p['x'], p['W']), c)), params
        self.check_kernel('linear', build)

    def test_relu(self):
        """Test gradients of relu away from zero"""
        def build(rng):
            x = rng.normal((3, 4))
            x = x + 0.1 * np.sign(x)
            c = rng.normal((3, 4))
            return (lambda ops, p: self.projected(ops, ops.relu(p['x']), c)), {'x': x}
        self.check_kernel('relu', build)

    def test_layer_norm(self):
        """Test gradients of layer norm in input, gain and bias"""
        def build(rng):
            c = rng.normal((2, 5))
            params = {'x': rng.normal((2, 5)), 'gain': rng.normal(5), 'bias': rng.normal(5)}

            def expr(ops, p):
                return self.projected(ops, ops.layer_norm(p['x'], p['gain'], p['bias'], 1e-6), c)
            return expr, params
        self.check_kernel('layer_norm', build)

    def test_softmax(self):
        """Test gradients of softmax"""
        def build(rng):
            c = rng.normal((3, 4))
            return (lambda ops, p: self.projected(ops, ops.softmax(p['x']), c)), {'x': rng.normal((3, 4))}
        self.check_kernel('softmax', build)

    def test_attention_scores_and_attend(self):
        """Test gradients through scores, softmax and attend"""
        def build(rng):
            c = rng.normal((2, 3))
            params = {'q': rng.normal((2, 3)), 'K': rng.normal((2, 4, 3)), 'V': rng.normal((2, 4, 3))}

            def expr(ops, p):
                pi = ops.softmax(ops.scale(ops.attention_scores(p['q'], p['K']), 0.5))
                return self.projected(ops, ops.attend(pi, p['V']), c)
            return expr, params
        self.check_kernel('attention', build)

    def test_gather_particles(self):
        """Test gradients of particle gathering with repeats"""
        def build(rng):
            index = np.stack([rng.choice(4, 4) for _ in range(2)])
            c = rng.normal((2, 4, 3))

            def expr(ops, p):
                return self.projected(ops, ops.gather_particles(p['x'], index), c)
            return expr, {'x': rng.normal((2, 4, 3))}
        self.check_kernel('gather_particles', build)

    def test_window_push(self):
        """Test gradients of pushing into a window"""
        def build(rng):
            c = rng.normal((2, 3, 2))
            params = {'new': rng.normal((2, 2)), 'window': rng.normal((2, 3, 2))}

            def expr(ops, p):
                return self.projected(ops, ops.window_push(p['new'], p['window'], 3), c)
            return expr, params
        self.check_kernel('window_push', build)

    def test_log_gaussian_density(self):
        """Test gradients of the Gaussian log-density"""
        def build(rng):
            var = 0.2 + rng.uniform()
            c = rng.normal(3)
            params = {'x': rng.normal((3, 2)), 'mean': rng.normal((3, 2))}

            def expr(ops, p):
                return self.projected(ops, ops.log_gaussian_density(p['x'], p['mean'], var), c)
            return expr, params
        self.check_kernel('log_gaussian_density', build)


class StopGradientTest(GradientCheckMixin, SimpleTestCase):
    """Test gradient blocking"""

    def test_weighted_loss(self):
        """Test that stopped weights receive no gradient"""
        params = {'a': np.array(1.5), 'x': np.array(2.0)}

        def expr(ops, p):
            return ops.mul(ops.stop_gradient(ops.square(p['a'])), ops.square(p['x']))

        _, tape = forward_record(expr, params)
        grads = backward(tape)
        self.assertAlmostEqual(float(grads['x']), 2.25 * 4.0, places=12)
        self.assertEqual(float(grads['a']), 0.0)

    def test_constant_value_passes_through(self):
        """Test that stop_gradient leaves the value unchanged"""
        value, _ = forward_record(lambda ops, p: ops.stop_gradient(ops.add(p['x'], 1.0)), {'x': np.array(2.0)})
        self.assertEqual(float(value), 3.0)

    def test_two_particle_importance_weights(self):
        """Test gradients of a loss under stopped importance weights"""
        x = np.array(0.4)
        z = np.array([0.3, -1.2])

        def log_weights(ops, a):
            residual = ops.sub(x, ops.mul(a, z))
            return ops.scale(ops.square(residual), -0.5)

        def expr(ops, p):
            logw = log_weights(ops, p['a'])
            return ops.scale(ops.sum(ops.mul(ops.stop_gradient(ops.softmax(logw)), logw)), -1.0)

        a0 = np.array(0.7)
        frozen = softmax(log_weights(ARRAY_OPS, a0))

        def frozen_expr(ops, p):
            return -float(np.sum(frozen * log_weights(ops, p['a'])))

        _, tape = forward_record(expr, {'a': a0})
        analytic = backward(tape)['a']
        numeric = numerical_gradient(frozen_expr, {'a': a0}, 'a')
        self.assertLess(relative_error(analytic, numeric), 1e-4)
