from types import SimpleNamespace

import numpy as np
import pytest

from pyLoRAOver.adapters import AdapterSlot, over_parameterize
from pyLoRAOver.config import TrainConfig
from pyLoRAOver.model import Gradients
from pyLoRAOver.mpo import auto_plan
from pyLoRAOver.optim import Optimizer, schedule_lr, step
from pyLoRAOver.slot_list import SlotList
from pyLoRAOver.tensor import DenseTensor


def _model(*slots):
    return SimpleNamespace(slots=SlotList(slots))


def _grads(**params):
    grads = Gradients()
    for slot_id, arrays in params.items():
        grads.params[slot_id.replace('_', '.')] = [DenseTensor(a) for a in arrays]
    return grads


class TestSchedule:
    def test_constant(self):
        assert schedule_lr(0.1, 50, 100, 'constant') == 0.1

    def test_cosine(self):
        assert schedule_lr(0.1, 0, 100, 'cosine') == pytest.approx(0.1)
        assert schedule_lr(0.1, 50, 100, 'cosine') == pytest.approx(0.05)
        assert schedule_lr(0.1, 100, 100, 'cosine') == pytest.approx(0.0, abs=1e-15)

    def test_cosine_without_steps(self):
        assert schedule_lr(0.1, 0, 0, 'cosine') == 0.1


class TestSgd:
    def test_hand_case(self):
        slot = AdapterSlot('layer0.proj.A', [[1.0]])
        cfg = TrainConfig(optimizer='sgd', lr=0.1, schedule='constant')
        step(_model(slot), _grads(layer0_proj_A=[[[0.5]]]), cfg, 0)
        assert slot.params[0][0, 0] == pytest.approx(0.95)

    def test_weight_decay(self):
        slot = AdapterSlot('layer0.proj.A', [[1.0]])
        cfg = TrainConfig(optimizer='sgd', lr=0.1, schedule='constant', weight_decay=0.5)
        step(_model(slot), _grads(layer0_proj_A=[[[0.0]]]), cfg, 0)
        assert slot.params[0][0, 0] == pytest.approx(0.95)

    def test_frozen_slot_is_not_updated(self):
        slot = AdapterSlot('layer0.proj.A', [[1.0]], trainable=False)
        cfg = TrainConfig(optimizer='sgd', lr=0.1)
        step(_model(slot), _grads(layer0_proj_A=[[[0.5]]]), cfg, 0)
        assert slot.params[0][0, 0] == 1.0

    def test_mpo_lr(self, rng):
        slot = AdapterSlot('layer0.proj.A', rng.normal(size=(4, 4)))
        over_parameterize(slot, auto_plan(4, 4, 2))
        before = [p.copy() for p in slot.params]
        cfg = TrainConfig(optimizer='sgd', lr=1.0, mpo_lr=0.01, schedule='constant')
        grads = [np.ones_like(p) for p in slot.params]
        step(_model(slot), _grads(layer0_proj_A=grads), cfg, 0)
        for b, p in zip(before, slot.params):
            np.testing.assert_allclose(p, b - 0.01)


class TestAdamW:
    def test_first_step_moves_by_lr(self):
        slot = AdapterSlot('layer0.proj.A', [[1.0, -1.0]])
        cfg = TrainConfig(lr=0.01, schedule='constant')
        step(_model(slot), _grads(layer0_proj_A=[[[3.0, -0.2]]]), cfg, 0)
        np.testing.assert_allclose(slot.params[0], [[0.99, -0.99]], rtol=1e-6)

    def test_state_is_kept_between_steps(self):
        slot = AdapterSlot('layer0.proj.A', [[1.0]])
        optimizer = Optimizer(TrainConfig(lr=0.01, schedule='constant'))
        model = _model(slot)
        for t in range(3):
            optimizer.step(model, _grads(layer0_proj_A=[[[1.0]]]), t)
        assert optimizer.state('layer0.proj.A', 'dense', 0)['t'] == 3

    def test_factoring_starts_fresh_state(self, rng):
        slot = AdapterSlot('layer0.proj.A', rng.normal(size=(4, 4)))
        optimizer = Optimizer(TrainConfig(lr=0.01))
        model = _model(slot)
        optimizer.step(model, _grads(layer0_proj_A=[np.ones((4, 4))]), 0)
        over_parameterize(slot, auto_plan(4, 4, 2))
        assert optimizer.state('layer0.proj.A', 'factored', 0) is None
        optimizer.step(model, _grads(layer0_proj_A=[np.ones_like(p) for p in slot.params]), 1)
        assert optimizer.state('layer0.proj.A', 'factored', 1)['t'] == 1

    def test_reset(self):
        slot = AdapterSlot('layer0.proj.A', [[1.0]])
        optimizer = Optimizer(TrainConfig())
        optimizer.step(_model(slot), _grads(layer0_proj_A=[[[1.0]]]), 0)
        optimizer.reset('layer0.proj.A')
        assert optimizer.state('layer0.proj.A', 'dense', 0) is None

    def test_update_invalidates_cache(self):
        slot = AdapterSlot('layer0.proj.A', [[1.0]])
        assert slot.effective_matrix().array[0, 0] == 1.0
        step(_model(slot), _grads(layer0_proj_A=[[[1.0]]]), TrainConfig(optimizer='sgd', lr=0.5), 0)
        assert slot.effective_matrix().array[0, 0] == pytest.approx(0.5)
