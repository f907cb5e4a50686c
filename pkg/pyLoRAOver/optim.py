"""
SGD and AdamW with decoupled weight decay over the trainable slot arrays
"""
import math

import numpy as np

from .config import TrainConfig


def schedule_lr(base_lr, step_index, steps, schedule='constant'):
    """Learning rate at step t: constant, or lr.0.5.(1 + cos(pi t / steps))"""
    if schedule == 'cosine' and steps > 0:
        return base_lr * 0.5 * (1.0 + math.cos(math.pi * step_index / steps))
    return base_lr


class Optimizer:
    """
    Keeps per-array state keyed by (slot_id, form, index). A slot that changes
    form gets new keys, so factors start with fresh moments and step counters.
    """

    def __init__(self, cfg: TrainConfig, steps=None):
        self.cfg = cfg
        self.steps = cfg.steps if steps is None else int(steps)
        self._state = {}

    def __repr__(self):
        return f'Optimizer({self.cfg.optimizer}, lr={self.cfg.lr}, tracked={len(self._state)})'

    def reset(self, slot_id=None):
        """Drop the state of one slot, or all of it"""
        if slot_id is None:
            self._state.clear()
            return
        for key in [k for k in self._state if k[0] == slot_id]:
            del self._state[key]

    def state(self, slot_id, form, index):
        return self._state.get((slot_id, form, index))

    def _update(self, key, param, grad, lr):
        cfg = self.cfg
        if cfg.weight_decay:
            param -= lr * cfg.weight_decay * param
        if cfg.optimizer == 'sgd':
            param -= lr * grad
            return
        state = self._state.setdefault(key, {'t': 0, 'm': np.zeros_like(param), 'v': np.zeros_like(param)})
        state['t'] += 1
        state['m'] = cfg.beta1 * state['m'] + (1.0 - cfg.beta1) * grad
        state['v'] = cfg.beta2 * state['v'] + (1.0 - cfg.beta2) * np.square(grad)
        m_hat = state['m'] / (1.0 - cfg.beta1 ** state['t'])
        v_hat = state['v'] / (1.0 - cfg.beta2 ** state['t'])
        param -= lr * m_hat / (np.sqrt(v_hat) + cfg.eps)

    def step(self, model, grads, step_index):
        """Update the trainable slots of model in place with grads.params"""
        for slot in model.slots.filter(trainable=True):
            param_grads = grads.params.get(slot.slot_id)
            if not param_grads:
                continue
            lr = schedule_lr(self.cfg.lr_for(slot.factored), step_index, self.steps, self.cfg.schedule)
            for k, (param, grad) in enumerate(zip(slot.params, param_grads)):
                self._update((slot.slot_id, slot.form, k), param, np.asarray(grad), lr)
            slot.touch()
        return model


def step(model, grads, cfg: TrainConfig, step_index, optimizer=None):
    """One update of model; a fresh optimizer is used unless one is given"""
    optimizer = optimizer if optimizer is not None else Optimizer(cfg)
    return optimizer.step(model, grads, step_index)
