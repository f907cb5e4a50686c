"""
Frozen synthetic backbone with adapter slots on every matrix
"""
import json
import logging
from pathlib import Path

import numpy as np

from .adapters import AdapterSlot, init_adapter, init_dense_delta, merge, over_parameterize
from .autodiff import Tape
from .config import ROLES, LoraConfig
from .exceptions import ConfigError, NonFinite, ParameterInvalid
from .mpo import MpoShapePlan, load_chain, save_chain
from .slot_list import SlotList
from .task import SyntheticTask, backbone_forward
from .tensor import DenseTensor, as_array
from .tensor_io import load_tensor, save_tensor


class Gradients(dict):
    """
    slot_id -> gradient of the loss with respect to the slot's effective
    (contracted) matrix. 'params' holds the gradients of the trainable arrays
    themselves: [matrix gradient] for dense slots, one tensor per local tensor
    for factored slots.
    """

    def __init__(self, *args, **kwargs):
        super().__init__(*args, **kwargs)
        self.params = {}


class AdapterModel:
    """
    Parameters
        task : SyntheticTask
            Provides the frozen matrices. They are read-only and never updated.
        lora : LoraConfig
        dense_delta : bool
            Attach one unconstrained h x h delta per matrix instead of a LoRA pair
    """

    def __init__(self, task: SyntheticTask, lora: LoraConfig = None, dense_delta=False):
        self.task = task
        self.lora = lora if lora is not None else LoraConfig(seed=task.seed)
        self.dense_delta = bool(dense_delta)
        self.slots = SlotList()
        for name in task.names:
            d1, d2 = task.backbone[name].dims
            if self.dense_delta:
                self.slots.append(init_dense_delta(d1, d2, seed=self.lora.seed, base_ref=name))
            else:
                self.slots.extend(init_adapter(d1, d2, self.lora, base_ref=name))

    def __repr__(self):
        return f'AdapterModel({self.task!r}, slots={len(self.slots)}, factored={self.factored_ids})'

    @property
    def factored_ids(self):
        return self.slots.filter(factored=True).ids

    def slot(self, slot_id) -> AdapterSlot:
        slot = self.slots.get(slot_id)
        if slot is None:
            raise ParameterInvalid(f'Unknown slot "{slot_id}".')
        return slot

    def adapter_of(self, name):
        """Slots attached to the frozen matrix 'name'"""
        layer, role = name.split('.')
        return self.slots.filter(layer=int(layer[5:]), role=role)

    # Parameter accounting
    def trainable_count(self):
        return int(self.slots.filter(trainable=True).sum('n_params'))

    def base_count(self):
        return self.task.base_count()

    def inference_count(self):
        """Parameters of the merged model, which equals the frozen backbone"""
        return int(sum(w.size for w in self.merged_weights().values()))

    def param_report(self):
        return {'trainable': self.trainable_count(), 'inference': self.inference_count(),
                'base': self.base_count(), 'factored': len(self.factored_ids),
                'dense_adapter': int(sum(s.shape[0] * s.shape[1] for s in self.slots))}

    # Forward passes
    def _delta(self, name, overrides):
        slots = self.adapter_of(name)
        effective = {s.half: (as_array(overrides[s.slot_id]) if s.slot_id in overrides
                              else s.effective_matrix().array) for s in slots}
        if 'D' in effective:
            return effective['D']
        return self.lora.scaling * (effective['B'] @ effective['A'])

    def forward(self, x, overrides=None) -> np.ndarray:
        """
        Model output for column samples x.

        overrides : dict slot_id -> matrix
            Effective matrices to use instead of the slots' own, without
            touching the slots.
        """
        overrides = overrides or {}
        weights = {name: self.task.backbone[name].array + self._delta(name, overrides) for name in self.task.names}
        return backbone_forward(weights, as_array(x), self.task.layers)

    def loss(self, x, y, overrides=None) -> float:
        loss = float(np.mean(np.square(self.forward(x, overrides) - as_array(y))))
        if not np.isfinite(loss):
            raise NonFinite(f'Loss is not finite ({loss}).')
        return loss

    def _slot_node(self, tape, slot, overrides, nodes):
        if slot.slot_id in overrides:
            node = tape.leaf(as_array(overrides[slot.slot_id]), slot.slot_id)
            nodes[slot.slot_id] = (node, [])
        elif slot.factored:
            leaves = [tape.leaf(p, f'{slot.slot_id}[{k}]') for k, p in enumerate(slot.params)]
            nodes[slot.slot_id] = (tape.chain_contract(leaves, slot.plan), leaves)
        elif slot.trainable:
            node = tape.leaf(slot.params[0], slot.slot_id)
            nodes[slot.slot_id] = (node, [node])
        else:
            return tape.constant(slot.params[0])
        return nodes[slot.slot_id][0]

    def build_tape(self, x, y, overrides=None):
        """Record the loss on a tape. Returns (tape, loss node, {slot_id: (matrix node, param nodes)})."""
        overrides = overrides or {}
        tape = Tape()
        nodes = {}
        h = tape.constant(as_array(x))
        for l in range(self.task.layers):
            for role in ROLES:
                name = f'layer{l}.{role}'
                w = tape.constant(self.task.backbone[name].array)
                halves = {s.half: self._slot_node(tape, s, overrides, nodes) for s in self.adapter_of(name)}
                if 'D' in halves:
                    delta = halves['D']
                else:
                    delta = tape.scale(tape.matmul(halves['B'], halves['A']), self.lora.scaling)
                h = tape.matmul(tape.add(w, delta), h)
                if role == 'proj':
                    h = tape.tanh(h)
        return tape, tape.mse_loss(h, as_array(y)), nodes

    def forward_backward(self, x, y, overrides=None):
        """(loss, Gradients) on the batch (x, y)"""
        tape, loss_node, nodes = self.build_tape(x, y, overrides)
        grads = tape.backward(loss_node)
        result = Gradients()
        for slot_id, (matrix_node, param_nodes) in nodes.items():
            matrix_grad = grads.get(matrix_node)
            if matrix_grad is None:
                matrix_grad = np.zeros(tape.array(matrix_node).shape)
            result[slot_id] = DenseTensor(matrix_grad)
            result.params[slot_id] = [DenseTensor(grads[n]) if n in grads else DenseTensor.zeros(tape.array(n).shape)
                                      for n in param_nodes]
        return float(tape.array(loss_node)[0]), result

    # Structure changes
    def over_parameterize(self, slot_id, plan: MpoShapePlan):
        return over_parameterize(self.slot(slot_id), plan)

    def merged_weights(self):
        """name -> W0 + delta, the dense model used for inference"""
        return {name: merge(self.adapter_of(name), self.lora, self.task.backbone[name])
                for name in self.task.names}

    def merged_forward(self, x) -> np.ndarray:
        weights = {name: w.array for name, w in self.merged_weights().items()}
        return backbone_forward(weights, as_array(x), self.task.layers)

    # Persistence
    def save_checkpoint(self, dirname):
        """manifest.json plus one MPOT file (dense) or chain directory (factored) per slot"""
        path = Path(dirname)
        path.mkdir(parents=True, exist_ok=True)
        manifest = {'seed': self.lora.seed, 'lora': self.lora.to_dict(), 'dense_delta': self.dense_delta,
                    'slots': []}
        for slot in self.slots:
            entry = {'slot_id': slot.slot_id, 'base_ref': slot.base_ref, 'shape': list(slot.shape),
                     'form': slot.form, 'trainable': slot.trainable}
            if slot.factored:
                entry['path'] = slot.slot_id
                save_chain(slot.chain, path / slot.slot_id)
            else:
                entry['path'] = f'{slot.slot_id}.mpot'
                save_tensor(slot.params[0], path / entry['path'])
            manifest['slots'].append(entry)
        (path / 'manifest.json').write_text(json.dumps(manifest, indent=2) + '\n')
        logging.getLogger('LoRAOver').info(f'Checkpoint with {len(self.slots)} slots saved to "{path}"')

    @classmethod
    def load_checkpoint(cls, dirname, task: SyntheticTask):
        path = Path(dirname)
        try:
            manifest = json.loads((path / 'manifest.json').read_text())
        except (OSError, json.JSONDecodeError) as err:
            raise ConfigError(f'Cannot read checkpoint manifest in "{path}": {err}')
        model = cls(task, LoraConfig.from_dict(manifest['lora']), manifest.get('dense_delta', False))
        for entry in manifest['slots']:
            slot = model.slot(entry['slot_id'])
            if entry['form'] == 'factored':
                chain = load_chain(path / entry['path'])
                slot.set_factors(chain.plan, chain.factors)
            else:
                slot.set_dense(load_tensor(path / entry['path']))
            slot.trainable = entry.get('trainable', True)
        return model

    def export_merged(self, dirname):
        """One MPOT file per frozen matrix"""
        path = Path(dirname)
        for name, w in self.merged_weights().items():
            save_tensor(w, path / f'{name}.mpot')
        logging.getLogger('LoRAOver').info(f'Merged model exported to "{path}"')
