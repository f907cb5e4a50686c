"""
Reverse-mode differentiation over the few operations adapter layers need
"""
import logging

import numpy as np

from .exceptions import NonFinite, ParameterInvalid, ShapeMismatch
from .mpo import MpoShapePlan, contract_arrays, contract_factor_grads
from .tensor import DenseTensor, _resolve_dims, as_array

OP_KINDS = ('leaf', 'const', 'matmul', 'reshape', 'add', 'scale', 'tanh', 'mse-loss', 'chain-contract')


class TapeNode:
    """One recorded operation: kind, input node ids and the forward value"""

    def __init__(self, op, inputs, value, aux=None, requires_grad=False):
        if op not in OP_KINDS:
            raise ParameterInvalid(f'Unknown operation "{op}".')
        self._op = op
        self._inputs = tuple(inputs)
        self._value = value if isinstance(value, DenseTensor) else DenseTensor(value)
        self._aux = aux
        self._requires_grad = requires_grad

    def __repr__(self):
        return f'TapeNode({self._op}, inputs={list(self._inputs)}, dims={list(self._value.dims)})'

    @property
    def op(self):
        return self._op

    @property
    def inputs(self):
        return self._inputs

    @property
    def value(self):
        return self._value

    @property
    def aux(self):
        return self._aux

    @property
    def requires_grad(self):
        return self._requires_grad


class Tape:
    """
    Records operations in execution order, which is a topological order, and
    walks them backwards to accumulate gradients.

    Every operation returns the integer id of its node.
    """

    def __init__(self):
        self._nodes = []

    def __len__(self):
        return len(self._nodes)

    @property
    def nodes(self):
        return self._nodes

    def _push(self, op, inputs, value, aux=None):
        requires_grad = any(self._nodes[i].requires_grad for i in inputs)
        self._nodes.append(TapeNode(op, inputs, value, aux, requires_grad))
        return len(self._nodes) - 1

    def value(self, node_id) -> DenseTensor:
        return self._nodes[node_id].value

    def array(self, node_id) -> np.ndarray:
        return self._nodes[node_id].value.array

    def leaf(self, value, name=None):
        """Differentiable input"""
        self._nodes.append(TapeNode('leaf', (), value, name, requires_grad=True))
        return len(self._nodes) - 1

    def constant(self, value):
        """Input that never receives a gradient"""
        self._nodes.append(TapeNode('const', (), value))
        return len(self._nodes) - 1

    def matmul(self, a, b):
        x, y = self.array(a), self.array(b)
        if x.ndim != 2 or y.ndim != 2 or x.shape[1] != y.shape[0]:
            raise ShapeMismatch(f'Cannot multiply {list(x.shape)} by {list(y.shape)}.')
        return self._push('matmul', (a, b), x @ y)

    def reshape(self, a, dims):
        x = self.array(a)
        return self._push('reshape', (a,), x.reshape(_resolve_dims(x.size, dims)))

    def add(self, a, b):
        x, y = self.array(a), self.array(b)
        if x.shape != y.shape:
            raise ShapeMismatch(f'Cannot add {list(x.shape)} and {list(y.shape)}.')
        return self._push('add', (a, b), x + y)

    def scale(self, a, factor):
        return self._push('scale', (a,), float(factor) * self.array(a), float(factor))

    def tanh(self, a):
        return self._push('tanh', (a,), np.tanh(self.array(a)))

    def mse_loss(self, pred, target):
        """Mean of the squared errors over all entries"""
        x, y = self.array(pred), as_array(target)
        if x.shape != y.shape:
            raise ShapeMismatch(f'Prediction {list(x.shape)} and target {list(y.shape)} differ.')
        loss = np.mean(np.square(x - y))
        if not np.isfinite(loss):
            raise NonFinite(f'Loss is not finite ({loss}); prediction range '
                            f'[{np.nanmin(x):.3e}, {np.nanmax(x):.3e}].')
        return self._push('mse-loss', (pred,), np.array([loss]), np.array(y))

    def chain_contract(self, factors, plan: MpoShapePlan):
        """Matrix of an MPO chain whose local tensors are the given nodes"""
        arrays = [self.array(f) for f in factors]
        return self._push('chain-contract', tuple(factors), contract_arrays(arrays, plan), plan)

    def _input_grads(self, node, g):
        values = [self.array(i) for i in node.inputs]
        if node.op == 'matmul':
            return [g @ values[1].T, values[0].T @ g]
        if node.op == 'reshape':
            return [g.reshape(values[0].shape)]
        if node.op == 'add':
            return [g, g]
        if node.op == 'scale':
            return [node.aux * g]
        if node.op == 'tanh':
            return [g * (1.0 - np.square(node.value.array))]
        if node.op == 'mse-loss':
            pred = values[0]
            return [g.reshape(-1)[0] * 2.0 * (pred - node.aux) / pred.size]
        if node.op == 'chain-contract':
            return contract_factor_grads(values, node.aux, g)
        return []

    def backward(self, output):
        """
        Gradients of the scalar node 'output' with respect to every node that
        depends on a leaf. Returns {node id: array}.
        """
        out_value = self.array(output)
        if out_value.size != 1:
            raise ShapeMismatch(f'backward needs a scalar output, got dims {list(out_value.shape)}.')
        grads = {output: np.ones_like(out_value)}
        for node_id in range(output, -1, -1):
            g = grads.get(node_id)
            node = self._nodes[node_id]
            if g is None or not node.requires_grad or node.op == 'leaf':
                continue
            for input_id, input_grad in zip(node.inputs, self._input_grads(node, g)):
                if not self._nodes[input_id].requires_grad:
                    continue
                if input_id in grads:
                    grads[input_id] = grads[input_id] + input_grad
                else:
                    grads[input_id] = input_grad
        logging.getLogger('LoRAOver').debug(f'Backward pass over {output + 1} nodes')
        return grads


def central_difference(func, x, eps=1e-5):
    """
    Central finite-difference gradient of the scalar function func at the
    array x, (f(x + eps e_i) - f(x - eps e_i)) / (2 eps) per element.
    """
    x0 = np.array(as_array(x), dtype=np.float64, copy=True)
    grad = np.zeros_like(x0)
    flat, gflat = x0.reshape(-1), grad.reshape(-1)
    for j in range(flat.size):
        saved = flat[j]
        flat[j] = saved + eps
        fplus = func(x0.copy())
        flat[j] = saved - eps
        fminus = func(x0.copy())
        flat[j] = saved
        gflat[j] = (fplus - fminus) / (2 * eps)
    return grad


def gradient_rel_error(analytic, numeric) -> float:
    """max |a - n| / max(max |n|, max |a|, 1e-300), a scale-aware relative error"""
    analytic, numeric = np.asarray(analytic), np.asarray(numeric)
    scale = max(np.max(np.abs(numeric)), np.max(np.abs(analytic)), 1e-300)
    return float(np.max(np.abs(analytic - numeric)) / scale)
