# diffcore/tape.py
"""
Reverse-mode differentiation over the kernel set of the attention cell.

A Tape records nodes in creation order, which is a topological order, so the
backward pass is a single reversed sweep. Each kernel is a (forward, vjp) pair
in the KERNELS table; forward functions are the numkit kernels themselves, so a
taped value is bitwise equal to the untaped one.

Usage:
    value, tape = forward_record(lambda ops, p: ops.sum(ops.square(p['x'])), {'x': x})
    grads = backward(tape, 1.0)
"""
from dataclasses import dataclass

import numpy as np

from numkit import kernels as K
from numkit.exceptions import DomainError, UnsupportedKernelError


def _unbroadcast(grad, shape):
    """Sum a gradient back down to the shape of a broadcast operand"""
    grad = np.asarray(grad)
    while grad.ndim > len(shape):
        grad = grad.sum(axis=0)
    for axis, size in enumerate(shape):
        if size == 1 and grad.shape[axis] != 1:
            grad = grad.sum(axis=axis, keepdims=True)
    return grad.reshape(shape)


def _shape(value):
    return np.shape(value)


# Vector-Jacobian products: vjp(g, out, *input_values, **static) -> one gradient per input

def _vjp_add(g, out, a, b):
    return _unbroadcast(g, _shape(a)), _unbroadcast(g, _shape(b))


def _vjp_sub(g, out, a, b):
    return _unbroadcast(g, _shape(a)), _unbroadcast(-g, _shape(b))


def _vjp_mul(g, out, a, b):
    return _unbroadcast(g * b, _shape(a)), _unbroadcast(g * a, _shape(b))


def _vjp_scale(g, out, a, factor):
    return (g * factor,)


def _vjp_square(g, out, a):
    return (2.0 * a * g,)


def _vjp_sum(g, out, a):
    return (np.full(_shape(a), g, dtype=np.float64),)


def _vjp_linear(g, out, x, weight):
    grad_x = g @ weight
    grad_w = g.reshape(-1, weight.shape[0]).T @ np.broadcast_to(x, out.shape[:-1] + x.shape[-1:]).reshape(-1, weight.shape[1])
    return _unbroadcast(grad_x, _shape(x)), grad_w


def _vjp_relu(g, out, x):
    return (g * (x > 0),)


def _vjp_layer_norm(g, out, x, gain, bias, epsilon):
    centered = x - np.mean(x, axis=-1, keepdims=True)
    inv_std = 1.0 / np.sqrt(np.mean(centered * centered, axis=-1, keepdims=True) + epsilon)
    normed = centered * inv_std
    g_normed = g * gain
    grad_x = inv_std * (
        g_normed
        - np.mean(g_normed, axis=-1, keepdims=True)
        - normed * np.mean(g_normed * normed, axis=-1, keepdims=True)
    )
    return grad_x, _unbroadcast(g * normed, _shape(gain)), _unbroadcast(g, _shape(bias))


def _vjp_softmax(g, out, logits):
    return (out * (g - np.sum(g * out, axis=-1, keepdims=True)),)


def _vjp_attention_scores(g, out, query, keys):
    grad_q = np.einsum('...l,...lr->...r', g, keys)
    grad_k = np.einsum('...l,...r->...lr', g, query)
    return _unbroadcast(grad_q, _shape(query)), _unbroadcast(grad_k, _shape(keys))


def _vjp_attend(g, out, probabilities, values):
    grad_p = np.einsum('...r,...lr->...l', g, values)
    grad_v = np.einsum('...l,...r->...lr', probabilities, g)
    return _unbroadcast(grad_p, _shape(probabilities)), _unbroadcast(grad_v, _shape(values))


def _vjp_gather(g, out, values, index):
    grad = np.zeros(_shape(values))
    rows = np.broadcast_to(np.arange(grad.shape[0])[:, None], index.shape)
    np.add.at(grad, (rows, index), g)
    return (grad,)


def _vjp_window_push(g, out, new, window, maxlen):
    grad_new = g[..., 0, :]
    if window is None:
        return grad_new, None
    grad_window = np.zeros(_shape(window))
    kept = g.shape[-2] - 1
    grad_window[..., :kept, :] = g[..., 1:, :]
    return grad_new, grad_window


def _vjp_log_gaussian(g, out, x, mean, var):
    scaled = np.asarray(g)[..., None] * (x - mean) / var
    return _unbroadcast(-scaled, _shape(x)), _unbroadcast(scaled, _shape(mean))


def _vjp_stop_gradient(g, out, a):
    return (None,)


@dataclass(frozen=True)
class Kernel:
    forward: object
    vjp: object
    arity: int
    static: tuple = ()


KERNELS = {
    'add': Kernel(np.add, _vjp_add, 2),
    'sub': Kernel(np.subtract, _vjp_sub, 2),
    'mul': Kernel(np.multiply, _vjp_mul, 2),
    'scale': Kernel(K.ArrayOps.scale, _vjp_scale, 1, ('factor',)),
    'square': Kernel(K.ArrayOps.square, _vjp_square, 1),
    'sum': Kernel(np.sum, _vjp_sum, 1),
    'linear': Kernel(K.linear, _vjp_linear, 2),
    'relu': Kernel(K.relu, _vjp_relu, 1),
    'layer_norm': Kernel(K.layer_norm, _vjp_layer_norm, 3, ('epsilon',)),
    'softmax': Kernel(K.softmax, _vjp_softmax, 1),
    'attention_scores': Kernel(K.attention_scores, _vjp_attention_scores, 2),
    'attend': Kernel(K.attend, _vjp_attend, 2),
    'gather_particles': Kernel(K.gather_particles, _vjp_gather, 1, ('index',)),
    'window_push': Kernel(K.window_push, _vjp_window_push, 2, ('maxlen',)),
    'log_gaussian_density': Kernel(K.log_gaussian_density, _vjp_log_gaussian, 2, ('var',)),
    'stop_gradient': Kernel(lambda a: a, _vjp_stop_gradient, 1),
}


class Node:
    """One recorded value: a parameter, a constant, or a kernel output"""

    __slots__ = ('index', 'value', 'kernel', 'inputs', 'static', 'name', 'requires_grad')

    def __init__(self, index, value, kernel=None, inputs=(), static=None, name=None, requires_grad=False):
        self.index = index
        self.value = value
        self.kernel = kernel
        self.inputs = inputs
        self.static = static or {}
        self.name = name
        self.requires_grad = requires_grad

    @property
    def shape(self):
        return np.shape(self.value)

    def __repr__(self):
        label = self.name or self.kernel or 'constant'
        return f'Node({label}, shape={self.shape})'


class Tape:
    """Single-owner record of one taped evaluation"""

    def __init__(self):
        self.nodes = []
        self.parameters = {}
        self.root = None

    def _push(self, value, **kwargs):
        node = Node(len(self.nodes), value, **kwargs)
        self.nodes.append(node)
        return node

    def parameter(self, name, value):
        if name in self.parameters:
            raise DomainError(f'Parameter {name!r} recorded twice')
        node = self._push(np.asarray(value, dtype=np.float64), name=name, requires_grad=True)
        self.parameters[name] = node
        return node

    def constant(self, value):
        if isinstance(value, Node):
            return value
        return self._push(np.asarray(value, dtype=np.float64))

    def apply(self, kernel_name, *args):
        kernel = KERNELS.get(kernel_name)
        if kernel is None:
            raise UnsupportedKernelError(f'Kernel {kernel_name!r} is not differentiable by diffcore')
        if len(args) != kernel.arity + len(kernel.static):
            raise DomainError(
                f'{kernel_name} takes {kernel.arity} inputs and {len(kernel.static)} static arguments'
            )
        inputs = tuple(
            None if arg is None else self.constant(arg)
            for arg in args[:kernel.arity]
        )
        static = dict(zip(kernel.static, args[kernel.arity:]))
        values = [None if node is None else node.value for node in inputs]
        value = kernel.forward(*values, **static)
        requires_grad = kernel_name != 'stop_gradient' and any(
            node is not None and node.requires_grad for node in inputs
        )
        return self._push(value, kernel=kernel_name, inputs=inputs, static=static, requires_grad=requires_grad)


class TapeOps:
    """
    Kernel namespace over tape nodes, mirroring numkit.kernels.ArrayOps.

    Plain arrays passed as inputs are recorded as constants.
    """

    def __init__(self, tape):
        self.tape = tape

    def constant(self, value):
        return self.tape.constant(value)

    def softmax(self, logits, axis=-1):
        if axis not in (-1, np.ndim(getattr(logits, 'value', logits)) - 1):
            raise UnsupportedKernelError('Taped softmax only reduces over the last axis')
        return self.tape.apply('softmax', logits)

    def window_push(self, new, window, maxlen):
        return self.tape.apply('window_push', new, window, maxlen)

    def gaussian_sample(self, mean, std, rng=None, eps=None):
        """mean + std·eps with recorded eps: differentiable in the mean"""
        if eps is None:
            raise UnsupportedKernelError('Taped sampling replays recorded noise; pass eps')
        if std < 0:
            raise DomainError(f'Standard deviation must be non-negative, got {std}')
        eps = np.asarray(eps, dtype=np.float64)
        return self.tape.apply('add', mean, std * eps), eps

    def __getattr__(self, kernel_name):
        if kernel_name.startswith('_'):
            raise AttributeError(kernel_name)

        def record(*args):
            return self.tape.apply(kernel_name, *args)

        record.__name__ = kernel_name
        return record


def forward_record(expr, params):
    """
    Evaluate `expr(ops, params)` on a fresh tape.

    Args:
        expr: callable written against the ops namespace
        params: mapping of parameter name -> array (not modified)

    Returns:
        (value, tape) with tape.root set to the output node
    """
    tape = Tape()
    nodes = {name: tape.parameter(name, value) for name, value in params.items()}
    root = expr(TapeOps(tape), nodes)
    if not isinstance(root, Node):
        raise UnsupportedKernelError('Expression did not produce a taped value')
    tape.root = root
    return root.value, tape


def backward(tape, seed_gradient=1.0):
    """
    Reverse sweep from the scalar root of `tape`.

    Returns:
        GradMap: parameter name -> gradient with the parameter's shape
    """
    root = tape.root
    if root is None or np.size(root.value) != 1:
        raise DomainError('backward needs a scalar root')
    grads = [None] * len(tape.nodes)
    grads[root.index] = np.full(root.shape, seed_gradient, dtype=np.float64)
    for node in reversed(tape.nodes):
        grad = grads[node.index]
        if grad is None or node.kernel is None or not node.requires_grad:
            continue
        kernel = KERNELS[node.kernel]
        values = [None if parent is None else parent.value for parent in node.inputs]
        input_grads = kernel.vjp(grad, node.value, *values, **node.static)
        for parent, parent_grad in zip(node.inputs, input_grads):
            if parent is None or parent_grad is None or not parent.requires_grad:
                continue
            if grads[parent.index] is None:
                grads[parent.index] = np.array(parent_grad, dtype=np.float64)
            else:
                grads[parent.index] = grads[parent.index] + parent_grad
    result = {}
    for name, node in tape.parameters.items():
        grad = grads[node.index]
        result[name] = np.zeros(node.shape) if grad is None else grad.reshape(node.shape)
    return result


def gradient_is_finite(grads):
    return all(np.all(np.isfinite(grad)) for grad in grads.values())
