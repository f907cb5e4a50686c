"""
Matrix product operator (MPO) shape planning, decomposition and contraction

A matrix W[I, J] with I = i_1*...*i_m and J = j_1*...*j_m is represented by m
local tensors T(k)[d_(k-1), i_k, j_k, d_k]. The row and column indices are
interleaved as ((i_1, j_1), ..., (i_m, j_m)) before the sequential SVD sweep,
and the interleaving is undone by the contraction.
"""
import json
import logging
from pathlib import Path

import numpy as np
from icecream import ic

from .aux_functions import prod, split_factors
from .exceptions import BadBondCap, FactorProductMismatch, ShapeMismatch, TensorFileError
from .tensor import DenseTensor, as_array, svd_truncated
from .tensor_io import load_tensor, save_tensor


def full_bonds(in_dims, out_dims):
    """Untruncated bond dimensions d_0..d_m, d_k = min(prod_(p<=k) i_p j_p, prod_(p>k) i_p j_p)"""
    local = [int(i) * int(j) for i, j in zip(in_dims, out_dims)]
    total = prod(local)
    bonds, left = [1], 1
    for n in local:
        left *= n
        bonds.append(min(left, total // left))
    return bonds


class MpoShapePlan:
    """Factorization of a (rows, cols) matrix into m local tensors"""

    def __init__(self, in_dims, out_dims, bond_dims, bond_caps=None):
        self._in_dims = tuple(int(x) for x in in_dims)
        self._out_dims = tuple(int(x) for x in out_dims)
        self._bond_dims = tuple(int(x) for x in bond_dims)
        self._bond_caps = None if bond_caps is None else tuple(None if c is None else int(c) for c in bond_caps)
        if len(self._in_dims) != len(self._out_dims) or len(self._in_dims) < 1:
            raise FactorProductMismatch(f'Row and column factor lists should have the same length m >= 1, '
                                        f'got {len(self._in_dims)} and {len(self._out_dims)}.')
        if len(self._bond_dims) != self.m + 1 or self._bond_dims[0] != 1 or self._bond_dims[-1] != 1:
            raise ShapeMismatch(f'Bond dims {list(self._bond_dims)} should have m+1={self.m + 1} entries '
                                f'with d_0 = d_m = 1.')

    def __repr__(self):
        return f'MpoShapePlan(in={list(self._in_dims)}, out={list(self._out_dims)}, bonds={list(self._bond_dims)})'

    def __eq__(self, other):
        if not isinstance(other, MpoShapePlan):
            return NotImplemented
        return (self._in_dims, self._out_dims, self._bond_dims) == \
            (other._in_dims, other._out_dims, other._bond_dims)

    __hash__ = None

    @property
    def in_dims(self):
        """Row factors {i_k}"""
        return self._in_dims

    @property
    def out_dims(self):
        """Column factors {j_k}"""
        return self._out_dims

    @property
    def bond_dims(self):
        """Bond dimensions {d_k}, k = 0..m"""
        return self._bond_dims

    @property
    def bond_caps(self):
        return self._bond_caps

    @property
    def m(self):
        """Number of local tensors"""
        return len(self._in_dims)

    @property
    def rows(self):
        return prod(self._in_dims)

    @property
    def cols(self):
        return prod(self._out_dims)

    @property
    def shape(self):
        return self.rows, self.cols

    @property
    def truncated(self):
        """True if any bond is below its untruncated value"""
        return self._bond_dims != tuple(full_bonds(self._in_dims, self._out_dims))

    def factor_dims(self, k):
        """Dims of the k-th (0-based) local tensor"""
        return (self._bond_dims[k], self._in_dims[k], self._out_dims[k], self._bond_dims[k + 1])

    def to_dict(self):
        return {'in_dims': list(self._in_dims), 'out_dims': list(self._out_dims),
                'bond_dims': list(self._bond_dims),
                'bond_caps': None if self._bond_caps is None else list(self._bond_caps)}

    @classmethod
    def from_dict(cls, d):
        """Rebuild a plan through plan_shapes so the bonds and the caps are re-checked"""
        try:
            in_dims, out_dims = d['in_dims'], d['out_dims']
        except KeyError as err:
            raise TensorFileError(f'Plan description misses {err}.')
        plan = plan_shapes(prod(in_dims), prod(out_dims), in_dims, out_dims, d.get('bond_caps'))
        if 'bond_dims' in d and tuple(d['bond_dims']) != plan.bond_dims:
            raise ShapeMismatch(f'Stored bond dims {d["bond_dims"]} disagree with the recomputed '
                                f'{list(plan.bond_dims)}.')
        return plan


class BudgetReport:
    """Parameter accounting of a plan (added parameter count N_add)"""

    def __init__(self, n_params_chain, n_params_dense):
        self._n_params_chain = int(n_params_chain)
        self._n_params_dense = int(n_params_dense)

    def __repr__(self):
        return f'BudgetReport(chain={self._n_params_chain}, dense={self._n_params_dense}, add={self.n_add})'

    @property
    def n_params_chain(self):
        return self._n_params_chain

    @property
    def n_params_dense(self):
        return self._n_params_dense

    @property
    def n_add(self):
        return self._n_params_chain - self._n_params_dense

    @property
    def ratio(self):
        """Stored floats of the chain per float of the dense matrix"""
        return self._n_params_chain / self._n_params_dense

    def to_dict(self):
        return {'n_params_chain': self.n_params_chain, 'n_params_dense': self.n_params_dense,
                'n_add': self.n_add, 'ratio': self.ratio}


class MpoChain:
    """Ordered local tensors of one matrix plus the truncation error of every bond"""

    def __init__(self, plan: MpoShapePlan, factors, truncation_errors=None):
        self._plan = plan
        self._factors = tuple(f if isinstance(f, DenseTensor) else DenseTensor(f) for f in factors)
        if len(self._factors) != plan.m:
            raise ShapeMismatch(f'Chain needs {plan.m} factors, got {len(self._factors)}.')
        for k, factor in enumerate(self._factors):
            if tuple(factor.dims) != plan.factor_dims(k):
                raise ShapeMismatch(f'Factor {k + 1} has dims {list(factor.dims)}, '
                                    f'plan expects {list(plan.factor_dims(k))}.')
        errors = [0.0] * (plan.m - 1) if truncation_errors is None else [float(e) for e in truncation_errors]
        if len(errors) != plan.m - 1 or any(e < 0 for e in errors):
            raise ShapeMismatch(f'Chain needs {plan.m - 1} non-negative truncation errors, got {errors}.')
        self._truncation_errors = tuple(errors)

    def __repr__(self):
        return f'MpoChain(m={self._plan.m}, shape={self._plan.shape}, bonds={list(self._plan.bond_dims)})'

    @property
    def plan(self):
        return self._plan

    @property
    def factors(self):
        return self._factors

    @property
    def truncation_errors(self):
        """Frobenius norm discarded at every bond"""
        return self._truncation_errors

    @property
    def n_params(self):
        """Number of stored floats"""
        return sum(f.size for f in self._factors)

    def arrays(self):
        return [f.array for f in self._factors]


def plan_shapes(rows, cols, row_factors, col_factors, bond_caps=None) -> MpoShapePlan:
    """
    Build an MPO shape plan.

    bond_caps : None, int or sequence
        Caps for the internal bonds d_1..d_(m-1). A single integer caps every
        internal bond, None entries leave a bond uncapped.
    """
    row_factors = [int(x) for x in row_factors]
    col_factors = [int(x) for x in col_factors]
    if len(row_factors) != len(col_factors) or len(row_factors) < 1:
        raise FactorProductMismatch(f'Row and column factor lists should have the same length m >= 1, '
                                    f'got {row_factors} and {col_factors}.')
    if any(x < 1 for x in row_factors + col_factors):
        raise FactorProductMismatch(f'Factors should be positive: {row_factors} x {col_factors}.')
    if prod(row_factors) != int(rows) or prod(col_factors) != int(cols):
        raise FactorProductMismatch(f'Factors {row_factors} x {col_factors} do not multiply to ({rows}, {cols}).')
    m = len(row_factors)
    if bond_caps is None:
        caps = None
    elif isinstance(bond_caps, (int, np.integer)):
        caps = [int(bond_caps)] * (m - 1)
    else:
        caps = [None if c is None else int(c) for c in bond_caps]
        if len(caps) != m - 1:
            raise BadBondCap(f'Expected {m - 1} bond caps for m={m}, got {len(caps)}.')
    if caps is not None and any(c is not None and c < 1 for c in caps):
        raise BadBondCap(f'Bond caps should be >= 1, got {caps}.')
    bonds = full_bonds(row_factors, col_factors)
    if caps is not None:
        for k in range(1, m):
            cap = caps[k - 1]
            limit = bonds[k - 1] * row_factors[k - 1] * col_factors[k - 1]
            bonds[k] = min(bonds[k], limit, cap if cap is not None else bonds[k])
    return MpoShapePlan(row_factors, col_factors, bonds, caps)


def auto_plan(rows, cols, m, spread=2, bond_caps=None) -> MpoShapePlan:
    """
    Plan with m local tensors generated from the prime factors of rows and cols.
    With spread=2 the non-trivial factors sit at both ends with 1s inside.
    """
    m = int(m)
    if m < 1:
        raise FactorProductMismatch(f'Number of local tensors should be >= 1, got {m}.')
    return plan_shapes(rows, cols, split_factors(rows, m, spread), split_factors(cols, m, spread), bond_caps)


def _interleave_axes(m):
    return [axis for k in range(m) for axis in (k, m + k)]


def interleave(w, plan: MpoShapePlan) -> np.ndarray:
    """Flat copy of w in ((i_1, j_1), ..., (i_m, j_m)) index order"""
    arr = np.asarray(w, dtype=np.float64).reshape(plan.in_dims + plan.out_dims)
    return np.ascontiguousarray(arr.transpose(_interleave_axes(plan.m))).reshape(-1)


def deinterleave(flat, plan: MpoShapePlan) -> np.ndarray:
    """Inverse of interleave: back to a (rows, cols) matrix"""
    m = plan.m
    shape = [d for k in range(m) for d in (plan.in_dims[k], plan.out_dims[k])]
    arr = np.asarray(flat).reshape(shape)
    axes = list(range(0, 2 * m, 2)) + list(range(1, 2 * m, 2))
    return np.ascontiguousarray(arr.transpose(axes)).reshape(plan.rows, plan.cols)


def decompose(w, plan: MpoShapePlan) -> MpoChain:
    """MPO decomposition of a matrix by sequential reshaping and truncated SVD"""
    arr = as_array(w)
    if arr.shape != plan.shape:
        raise ShapeMismatch(f'Matrix {list(arr.shape)} does not match plan shape {list(plan.shape)}.')
    logger = logging.getLogger('LoRAOver')
    if not np.any(arr):
        logger.debug('Zero matrix decomposed into all-zero factors')
        factors = [np.zeros(plan.factor_dims(k)) for k in range(plan.m)]
        return MpoChain(plan, factors, [0.0] * (plan.m - 1))
    current = interleave(arr, plan)
    factors, errors = [], []
    for k in range(plan.m - 1):
        d_prev, i_k, j_k, d_next = plan.factor_dims(k)
        current = current.reshape(d_prev * i_k * j_k, -1)
        if i_k * j_k == 1 and d_next == d_prev:
            # Pass-through bond: the identity factor is exact, current is kept
            factors.append(np.eye(d_prev).reshape(d_prev, 1, 1, d_prev))
            errors.append(0.0)
            continue
        result = svd_truncated(DenseTensor(current), d_next)
        factors.append(result.u.array.reshape(d_prev, i_k, j_k, d_next))
        errors.append(float(np.sqrt(result.discarded_energy)))
        current = result.sigma[:, None] * result.vt.array
        ic(k + 1, current.shape, d_next, errors[-1])
    factors.append(current.reshape(plan.factor_dims(plan.m - 1)))
    return MpoChain(plan, factors, errors)


def contract_arrays(factors, plan: MpoShapePlan) -> np.ndarray:
    """Sequential contraction of raw factor arrays into the (rows, cols) matrix"""
    acc = np.ones((1, 1))
    for factor in factors:
        d_prev, d_next = factor.shape[0], factor.shape[-1]
        acc = (acc @ np.asarray(factor).reshape(d_prev, -1)).reshape(-1, d_next)
    return deinterleave(acc.reshape(-1), plan)


def contract(chain: MpoChain) -> DenseTensor:
    """Reconstruct the matrix represented by a chain"""
    return DenseTensor(contract_arrays(chain.arrays(), chain.plan))


def contract_factor_grads(factors, plan: MpoShapePlan, grad) -> list:
    """
    Gradients of a scalar loss with respect to every factor, given the
    gradient with respect to the contracted matrix.
    """
    m = plan.m
    local = [plan.in_dims[k] * plan.out_dims[k] for k in range(m)]
    g = interleave(grad, plan)
    lefts = [np.ones((1, 1))]
    for k in range(m - 1):
        d_prev, d_next = factors[k].shape[0], factors[k].shape[-1]
        lefts.append((lefts[-1] @ factors[k].reshape(d_prev, -1)).reshape(-1, d_next))
    rights = [None] * (m + 1)
    rights[m] = np.ones((1, 1))
    for k in range(m - 1, 0, -1):
        d_prev, d_next = factors[k].shape[0], factors[k].shape[-1]
        rights[k] = (factors[k].reshape(-1, d_next) @ rights[k + 1]).reshape(d_prev, -1)
    grads = []
    for k in range(m):
        d_prev, d_next = factors[k].shape[0], factors[k].shape[-1]
        left, right = lefts[k], rights[k + 1]
        n_left = left.shape[0]
        tmp = left.T @ g.reshape(n_left, -1)
        tmp = tmp.reshape(d_prev * local[k], -1) @ right.T
        grads.append(tmp.reshape(factors[k].shape))
    return grads


def error_bound(chain: MpoChain) -> float:
    """Upper bound sqrt(sum eps_k^2) of the reconstruction error"""
    return float(np.sqrt(np.sum(np.square(chain.truncation_errors)))) if chain.truncation_errors else 0.0


def budget(plan: MpoShapePlan) -> BudgetReport:
    """Stored floats of a chain built from the plan versus the dense matrix"""
    n_chain = sum(prod(plan.factor_dims(k)) for k in range(plan.m))
    n_dense = prod(i * j for i, j in zip(plan.in_dims, plan.out_dims))
    return BudgetReport(n_chain, n_dense)


def save_chain(chain: MpoChain, dirname):
    """Write plan.json and factor_k.mpot files into a directory"""
    path = Path(dirname)
    path.mkdir(parents=True, exist_ok=True)
    description = chain.plan.to_dict()
    description['truncation_errors'] = list(chain.truncation_errors)
    (path / 'plan.json').write_text(json.dumps(description, indent=2))
    for k, factor in enumerate(chain.factors):
        save_tensor(factor, path / f'factor_{k + 1}.mpot')
    logging.getLogger('LoRAOver').info(f'Chain with {chain.plan.m} factors saved to "{path}"')


def load_plan(filename) -> MpoShapePlan:
    """Read a plan from a plan.json file"""
    path = Path(filename)
    if not path.is_file():
        raise TensorFileError(f'File not found: "{path}"')
    try:
        description = json.loads(path.read_text())
    except json.JSONDecodeError as err:
        raise TensorFileError(f'Invalid plan file "{path}": {err}')
    # the plan command prints {"plan": ..., "budget": ...}
    if isinstance(description, dict) and 'plan' in description:
        description = description['plan']
    return MpoShapePlan.from_dict(description)


def load_chain(dirname) -> MpoChain:
    """Read a chain written by save_chain"""
    path = Path(dirname)
    plan = load_plan(path / 'plan.json')
    errors = json.loads((path / 'plan.json').read_text()).get('truncation_errors')
    factors = [load_tensor(path / f'factor_{k + 1}.mpot') for k in range(plan.m)]
    return MpoChain(plan, factors, errors)
