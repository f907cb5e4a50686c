"""
Low-rank adapter slots attached to frozen base matrices

Every adapted base matrix W0 (d1 x d2) owns two slots, A (r x d2) and B
(d1 x r). The layer computes W0.x + (alpha/r).B.A.x. A slot is either a
dense matrix or an MPO chain whose contraction gives the matrix.
"""
import logging
import re

import numpy as np

from .base import CalculatedMixin
from .exceptions import AlreadyFactored, ParameterInvalid, PlanMismatch, ShapeMismatch
from .aux_functions import named_stream
from .mpo import MpoChain, MpoShapePlan, auto_plan, contract_arrays, decompose, plan_shapes
from .tensor import DenseTensor, as_array

_SLOT_ID = re.compile(r'^layer(?P<layer>\d+)\.(?P<role>[A-Za-z_]\w*)\.(?P<half>[ABD])$')


def parse_slot_id(slot_id):
    """(layer, role, half) of a 'layer{l}.{role}.{half}' slot id"""
    match = _SLOT_ID.match(slot_id)
    if match is None:
        raise ParameterInvalid(f'Invalid slot id "{slot_id}", expected "layer<l>.<role>.<A|B|D>".')
    return int(match['layer']), match['role'], match['half']


class AdapterSlot(CalculatedMixin):
    """
    One trainable half of an adapter.

    Parameters
        slot_id : str
            "layer{l}.{role}.{half}", half in A, B or D (unconstrained dense delta)
        values : array-like
            Initial dense matrix
        seed : int
            Run seed, used for the zero-preserving factor init
        trainable : bool

    The trainable arrays are exposed by 'params': one matrix when dense, the m
    local tensors when factored. Code that updates them in place must call
    touch() so the cached effective matrix is recomputed.
    """

    def __init__(self, slot_id, values, seed=0, trainable=True):
        super().__init__()
        self._slot_id = slot_id
        self._layer, self._role, self._half = parse_slot_id(slot_id)
        array = np.array(as_array(values), dtype=np.float64, copy=True)
        if array.ndim != 2:
            raise ShapeMismatch(f'Slot "{slot_id}" needs a matrix, got dims {list(array.shape)}.')
        self._shape = array.shape
        self._params = [array]
        self._plan = None
        self._seed = int(seed)
        self._trainable = bool(trainable)
        self._effective = None

    def __repr__(self):
        return f'AdapterSlot({self._slot_id}, {self.form}, shape={list(self._shape)})'

    def __eq__(self, other):
        if isinstance(other, str):
            return self._slot_id == other
        return self is other

    __hash__ = object.__hash__

    @property
    def slot_id(self):
        return self._slot_id

    @property
    def base_ref(self):
        """Name of the frozen matrix the slot attaches to"""
        return f'layer{self._layer}.{self._role}'

    @property
    def layer(self):
        return self._layer

    @property
    def role(self):
        return self._role

    @property
    def half(self):
        return self._half

    @property
    def group(self):
        """Module-wise group key (role, half)"""
        return f'{self._role}.{self._half}'

    @property
    def order_key(self):
        """Deterministic tie-break order: layer, role, half"""
        return self._layer, self._role, self._half

    @property
    def shape(self):
        return self._shape

    @property
    def seed(self):
        return self._seed

    @property
    def trainable(self):
        return self._trainable

    @trainable.setter
    def trainable(self, value):
        self._trainable = bool(value)

    @property
    def factored(self):
        return self._plan is not None

    @property
    def form(self):
        """'dense' or 'factored'"""
        return 'factored' if self.factored else 'dense'

    @property
    def plan(self):
        return self._plan

    @property
    def params(self):
        """Live list of the trainable arrays"""
        return self._params

    @property
    def n_params(self):
        """Number of stored floats"""
        return int(sum(p.size for p in self._params))

    @property
    def dense(self):
        """Snapshot of the dense matrix. Only for dense slots."""
        if self.factored:
            raise AlreadyFactored(f'Slot "{self._slot_id}" is factored.')
        return DenseTensor(self._params[0])

    @property
    def chain(self):
        """Snapshot of the MPO chain, None for dense slots"""
        if not self.factored:
            return None
        return MpoChain(self._plan, [DenseTensor(p) for p in self._params])

    def calculate(self):
        if self.factored:
            array = contract_arrays(self._params, self._plan)
        else:
            array = self._params[0]
        self._effective = DenseTensor(array)
        super().calculate()

    def touch(self):
        """Invalidate the cached effective matrix after an in-place update"""
        self._calculated = False

    def effective_matrix(self) -> DenseTensor:
        if not self._calculated:
            self.calculate()
        return self._effective

    def set_dense(self, values):
        array = np.array(as_array(values), dtype=np.float64, copy=True)
        if array.shape != self._shape:
            raise ShapeMismatch(f'Slot "{self._slot_id}" has shape {list(self._shape)}, got {list(array.shape)}.')
        self._params = [array]
        self._plan = None
        self.touch()

    def set_factors(self, plan: MpoShapePlan, factors):
        if plan.shape != self._shape:
            raise PlanMismatch(f'Plan shape {list(plan.shape)} does not match slot "{self._slot_id}" '
                               f'shape {list(self._shape)}.')
        chain = MpoChain(plan, factors)
        self._params = [np.array(f.array, copy=True) for f in chain.factors]
        self._plan = plan
        self.touch()


def init_adapter(d1, d2, cfg, base_ref='layer0.proj'):
    """
    Fresh LoRA pair for a d1 x d2 base matrix.

    A ~ Normal(0, sqrt(2/d2)) from the (seed, 'lora-init', slot) stream and
    B = 0, so B.A = 0 at the start of training.
    """
    d1, d2 = int(d1), int(d2)
    if d1 < 1 or d2 < 1:
        raise ShapeMismatch(f'Adapter dims should be positive, got ({d1}, {d2}).')
    a_id, b_id = f'{base_ref}.A', f'{base_ref}.B'
    rng = named_stream(cfg.seed, 'lora-init', a_id)
    a = rng.normal(0.0, np.sqrt(2.0 / d2), size=(cfg.rank, d2))
    return AdapterSlot(a_id, a, seed=cfg.seed), AdapterSlot(b_id, np.zeros((d1, cfg.rank)), seed=cfg.seed)


def init_dense_delta(d1, d2, seed=0, base_ref='layer0.proj'):
    """Zero unconstrained additive delta for the full-dense-delta strategy"""
    return AdapterSlot(f'{base_ref}.D', np.zeros((int(d1), int(d2))), seed=seed)


def effective_matrix(slot: AdapterSlot) -> DenseTensor:
    """The matrix a slot stands for: the dense values or the chain contraction"""
    return slot.effective_matrix()


def _pair(slots):
    halves = {slot.half: slot for slot in slots}
    if 'D' in halves:
        return None, halves['D']
    if 'A' not in halves or 'B' not in halves:
        raise ShapeMismatch(f'Adapter needs both halves, got {sorted(halves)}.')
    return halves['A'], halves['B']


def delta_matrix(slots, cfg) -> np.ndarray:
    """(alpha/r).B.A, or the dense delta D as is"""
    a, b = _pair(slots)
    if a is None:
        return np.array(b.effective_matrix().array)
    a_eff, b_eff = a.effective_matrix().array, b.effective_matrix().array
    if b_eff.shape[1] != a_eff.shape[0]:
        raise ShapeMismatch(f'B {list(b_eff.shape)} and A {list(a_eff.shape)} do not chain.')
    return cfg.scaling * (b_eff @ a_eff)


def forward_delta(a: AdapterSlot, b: AdapterSlot, cfg, x) -> DenseTensor:
    """Adapter contribution (alpha/r).B.A.x for column samples x"""
    x = as_array(x)
    if x.ndim == 1:
        x = x[:, None]
    a_eff = a.effective_matrix().array
    if x.shape[0] != a_eff.shape[1]:
        raise ShapeMismatch(f'Input with {x.shape[0]} features does not fit A {list(a_eff.shape)}.')
    return DenseTensor(delta_matrix([a, b], cfg) @ x)


def plan_for_slot(slot: AdapterSlot, mpo_cfg, m=None) -> MpoShapePlan:
    """
    Explicit plan of the slot's half when configured, automatic plan otherwise.
    Passing m forces an automatic plan with m local tensors.
    """
    rows, cols = slot.shape
    explicit = mpo_cfg.factors_for(slot.half)
    if explicit is not None and m is None:
        return plan_shapes(rows, cols, explicit[0], explicit[1], mpo_cfg.bond_cap)
    return auto_plan(rows, cols, mpo_cfg.m if m is None else m, mpo_cfg.spread, mpo_cfg.bond_cap)


def _zero_preserving_factors(slot, plan):
    rng = named_stream(slot.seed, 'mpo-init', slot.slot_id)
    factors = []
    for k in range(plan.m - 1):
        d_prev, i_k, j_k, d_next = plan.factor_dims(k)
        factors.append(rng.normal(0.0, 1.0 / np.sqrt(d_prev * i_k * j_k), size=(d_prev, i_k, j_k, d_next)))
    factors.append(np.zeros(plan.factor_dims(plan.m - 1)))
    return factors


def over_parameterize(slot: AdapterSlot, plan: MpoShapePlan) -> AdapterSlot:
    """
    Replace a dense slot by its MPO chain, in place, keeping the effective
    matrix unchanged.

    An exactly-zero matrix gets random factors 1..m-1 and a zero last factor,
    so the product stays zero while every factor receives gradients.
    """
    if slot.factored:
        raise AlreadyFactored(f'Slot "{slot.slot_id}" is already factored.')
    if plan.shape != slot.shape:
        raise PlanMismatch(f'Plan shape {list(plan.shape)} does not match slot "{slot.slot_id}" '
                           f'shape {list(slot.shape)}.')
    if plan.truncated:
        raise PlanMismatch(f'Slot "{slot.slot_id}" needs an untruncated plan, got bonds {list(plan.bond_dims)}.')
    values = slot.params[0]
    before = slot.n_params
    if not np.any(values):
        factors = _zero_preserving_factors(slot, plan)
    else:
        factors = decompose(values, plan).factors
    slot.set_factors(plan, factors)
    logging.getLogger('LoRAOver').debug(f'Slot {slot.slot_id} factored into {plan.m} tensors, '
                                        f'{before} -> {slot.n_params} parameters')
    return slot


def merge(slots, cfg, w0) -> DenseTensor:
    """Dense W0 + (alpha/r).B.A for inference, no extra parameters"""
    w0 = as_array(w0)
    delta = delta_matrix(slots, cfg)
    if delta.shape != w0.shape:
        raise ShapeMismatch(f'Adapter delta {list(delta.shape)} does not match base {list(w0.shape)}.')
    return DenseTensor(w0 + delta)
