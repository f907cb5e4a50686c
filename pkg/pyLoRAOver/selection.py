"""
Importance scores of adapter slots and the grouped top-N selection
"""
import json
import logging
from pathlib import Path

import numpy as np
from icecream import ic
from scipy import stats

from .config import SelectionConfig
from .exceptions import MissingAccumulator, ParameterInvalid
from .tensor import as_array


class ImportanceLedger:
    """
    Scores, gradient accumulators and the selected set S.

    Parameters
        slots : SlotList
            Trainable slots to be ranked
        grouping : str
            'module' keys the groups by (role, half), 'global' puts every
            slot in the single group 'all'
        mode : str
            'predefined' or 'runtime'
        reduction : str
            'abs' accumulates |dL/dW| and scores <accum, |W|>,
            'signed' accumulates dL/dW and scores |<accum, W>|
    """

    def __init__(self, slots, grouping='module', mode='runtime', reduction='abs'):
        if grouping not in ('module', 'global'):
            raise ParameterInvalid(f'Invalid grouping "{grouping}".')
        if reduction not in ('abs', 'signed'):
            raise ParameterInvalid(f'Invalid reduction "{reduction}".')
        self.mode = mode
        self.grouping = grouping
        self.reduction = reduction
        ordered = sorted(slots, key=lambda s: s.order_key)
        self._order = {s.slot_id: n for n, s in enumerate(ordered)}
        self._shapes = {s.slot_id: tuple(s.shape) for s in ordered}
        self.groups = {}
        for s in ordered:
            key = s.group if grouping == 'module' else 'all'
            self.groups.setdefault(key, []).append(s.slot_id)
        self.scores = {slot_id: 0.0 for slot_id in self._order}
        self.accum = {}
        self.steps_accumulated = {}
        self.selected = []
        self.rounds_done = 0
        self.history = []

    def __repr__(self):
        return f'ImportanceLedger({self.mode}, groups={list(self.groups)}, selected={len(self.selected)})'

    def group_of(self, slot_id):
        for key, members in self.groups.items():
            if slot_id in members:
                return key
        raise ParameterInvalid(f'Slot "{slot_id}" is not in the ledger.')

    def selected_in(self, key):
        return [s for s in self.selected if s in self.groups[key]]

    def accumulate(self, grads):
        """Add one step of contracted-matrix gradients, slot_id -> matrix"""
        for slot_id, grad in grads.items():
            if slot_id not in self._order:
                continue
            g = as_array(grad)
            g = np.abs(g) if self.reduction == 'abs' else g
            if slot_id in self.accum:
                self.accum[slot_id] = self.accum[slot_id] + g
            else:
                self.accum[slot_id] = np.array(g, copy=True)
            self.steps_accumulated[slot_id] = self.steps_accumulated.get(slot_id, 0) + 1

    def reset_accumulators(self):
        self.accum.clear()
        self.steps_accumulated.clear()

    def ranking(self, key):
        """Unselected slots of a group, best first, ties in (layer, role, half) order"""
        members = [s for s in self.groups[key] if s not in self.selected]
        return sorted(members, key=lambda s: (-self.scores[s], self._order[s]))

    def to_dict(self):
        """The importance dump: {"mode", "groups": {key: [{"slot", "score", "selected"}]}}"""
        return {'mode': self.mode,
                'groups': {key: [{'slot': s, 'score': self.scores[s], 'selected': s in self.selected}
                                 for s in members] for key, members in self.groups.items()},
                'rounds_done': self.rounds_done, 'selected': list(self.selected)}

    def save(self, filename):
        path = Path(filename)
        path.parent.mkdir(parents=True, exist_ok=True)
        path.write_text(json.dumps(self.to_dict(), indent=2) + '\n')


def score_runtime(ledger: ImportanceLedger, slot_id, current_w) -> float:
    """
    First-order Taylor score of a slot from its gradient history:
    <sum |dL/dW|, |W|> ('abs') or |<sum dL/dW, W>| ('signed').
    For factored slots W is the contracted matrix.
    """
    if slot_id not in ledger.accum:
        raise MissingAccumulator(f'No gradient accumulated for slot "{slot_id}".')
    w = as_array(current_w)
    if ledger.reduction == 'abs':
        score = float(np.sum(ledger.accum[slot_id] * np.abs(w)))
    else:
        score = abs(float(np.sum(ledger.accum[slot_id] * w)))
    ledger.scores[slot_id] = score
    return score


def score_predefined(model, calib_batches, slot_id) -> float:
    """
    |L(model) - L(model with the slot zeroed)|, with both losses averaged over
    the calibration batches. The slot itself is never modified.
    """
    slot = model.slot(slot_id)
    zero = {slot_id: np.zeros(slot.shape)}
    full = np.mean([model.loss(x, y) for x, y in calib_batches])
    zeroed = np.mean([model.loss(x, y, overrides=zero) for x, y in calib_batches])
    return float(abs(full - zeroed))


def select_round(ledger: ImportanceLedger, cfg: SelectionConfig):
    """
    Pick up to ceil(top_n / split) unselected slots per group, never going
    past top_n selected in a group. The picks are appended to ledger.selected
    and returned in group order.
    """
    per_round = cfg.top_n if ledger.mode == 'predefined' else cfg.per_round
    picks = []
    for key in ledger.groups:
        quota = min(per_round, cfg.top_n - len(ledger.selected_in(key)))
        if quota <= 0:
            continue
        picks.extend(ledger.ranking(key)[:quota])
    ledger.selected.extend(picks)
    if picks:
        ledger.rounds_done += 1
        ledger.history.append(list(picks))
    ic(ledger.rounds_done, picks)
    return picks


def quota_filled(ledger: ImportanceLedger, cfg: SelectionConfig) -> bool:
    """True once every group holds min(top_n, group size) selected slots"""
    return all(len(ledger.selected_in(key)) >= min(cfg.top_n, len(members))
               for key, members in ledger.groups.items())


def taylor_probe(loss_fn, grad_fn, w, scale_eps):
    """
    exact = |L(W eps) - L(0)| and firstorder = |sum dL/dW (W eps) . W eps| for
    a loss of one matrix argument, the gradient taken at W eps.
    """
    if not 0 < scale_eps <= 1:
        raise ParameterInvalid(f'scale_eps should be in (0, 1], got {scale_eps}.')
    w = as_array(w)
    w_eps = w * scale_eps
    exact = abs(loss_fn(w_eps) - loss_fn(np.zeros_like(w)))
    firstorder = abs(float(np.sum(as_array(grad_fn(w_eps)) * w_eps)))
    return float(exact), firstorder


def taylor_consistency_probe(model, slot_id, scale_eps, batch):
    """Taylor probe of one slot of a model on the batch (x, y)"""
    x, y = batch
    w = model.slot(slot_id).effective_matrix().array

    def loss_fn(value):
        return model.loss(x, y, overrides={slot_id: value})

    def grad_fn(value):
        return model.forward_backward(x, y, overrides={slot_id: value})[1][slot_id]

    return taylor_probe(loss_fn, grad_fn, w, scale_eps)


def probe_order(loss_fn, grad_fn, w, eps_values=(1e-1, 1e-2, 1e-3)):
    """
    Log-log slope of the relative discrepancy |exact - firstorder| / firstorder
    against eps. A slope near 1 means the discrepancy shrinks as O(eps).
    """
    discrepancies = []
    for eps in eps_values:
        exact, firstorder = taylor_probe(loss_fn, grad_fn, w, eps)
        discrepancies.append(abs(exact - firstorder) / max(firstorder, 1e-300))
    discrepancies = np.maximum(np.array(discrepancies), 1e-300)
    fit = stats.linregress(np.log10(eps_values), np.log10(discrepancies))
    logging.getLogger('LoRAOver').debug(f'Taylor probe discrepancies {discrepancies.tolist()}, slope {fit.slope:.3f}')
    return float(fit.slope), discrepancies.tolist()
