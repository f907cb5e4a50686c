"""
Synthetic regression task standing in for a pre-trained backbone
"""
import logging

import numpy as np

from .aux_functions import named_stream
from .config import ROLES, TaskConfig
from .tensor import DenseTensor


def matrix_names(layers):
    """Frozen matrix names in forward order"""
    return [f'layer{l}.{role}' for l in range(int(layers)) for role in ROLES]


def backbone_forward(weights, x, layers):
    """Blocks x -> W_ffn . tanh(W_proj . x) applied in sequence, x is h x n"""
    for l in range(layers):
        x = weights[f'layer{l}.ffn'] @ np.tanh(weights[f'layer{l}.proj'] @ x)
    return x


class SyntheticTask:
    """
    L frozen blocks 'proj' (h x h) -> tanh -> 'ffn' (h x h), plus a target
    stack equal to the backbone with a rank-r* perturbation added to a seeded
    subset of its matrices. Labels are target stack outputs with Gaussian noise.

    All arrays are column-sample matrices (h x n) and read-only.
    """

    def __init__(self, cfg: TaskConfig = None, seed=0):
        self.cfg = cfg if cfg is not None else TaskConfig()
        self.seed = int(seed)
        h, layers = self.cfg.hidden, self.cfg.layers
        names = matrix_names(layers)
        self._backbone = {}
        gains = {'proj': self.cfg.proj_gain, 'ffn': self.cfg.ffn_gain}
        for name in names:
            rng = named_stream(self.seed, 'backbone', name)
            gain = gains[name.split('.')[1]]
            self._backbone[name] = DenseTensor(rng.normal(0.0, gain / np.sqrt(h), size=(h, h)))
        eligible = [name for name in names if name.split('.')[1] in self.cfg.perturb_roles]
        n_perturbed = int(round(self.cfg.perturb_fraction * len(eligible)))
        picks = named_stream(self.seed, 'perturb-subset').permutation(len(eligible))[:n_perturbed]
        self._perturbed = sorted((eligible[i] for i in picks), key=names.index)
        self._target = dict(self._backbone)
        for name in self._perturbed:
            rng = named_stream(self.seed, 'perturbation', name)
            u = rng.normal(0.0, 1.0 / np.sqrt(h), size=(h, self.cfg.target_rank))
            v = rng.normal(0.0, 1.0 / np.sqrt(h), size=(h, self.cfg.target_rank))
            self._target[name] = DenseTensor(self._backbone[name].array + self.cfg.perturb_scale * (u @ v.T))
        self._x_train, self._y_train = self._sample('train', self.cfg.n_train)
        self._x_eval, self._y_eval = self._sample('eval', self.cfg.n_eval)
        self._calib = None
        logging.getLogger('LoRAOver').info(f'Synthetic task: {layers} blocks, h={h}, perturbed {self._perturbed}')

    def __repr__(self):
        return f'SyntheticTask(layers={self.cfg.layers}, hidden={self.cfg.hidden}, seed={self.seed})'

    def _sample(self, split, n):
        # every split draws from its own stream, so train and eval never share samples
        rng = named_stream(self.seed, 'inputs', split)
        x = rng.normal(0.0, 1.0, size=(self.cfg.hidden, n))
        target = {name: t.array for name, t in self._target.items()}
        y = backbone_forward(target, x, self.cfg.layers)
        noise = named_stream(self.seed, 'noise', split).normal(0.0, 1.0, size=y.shape)
        y = y + self.cfg.noise_std * noise
        x.flags.writeable = False
        y.flags.writeable = False
        return x, y

    @property
    def names(self):
        return matrix_names(self.cfg.layers)

    @property
    def hidden(self):
        return self.cfg.hidden

    @property
    def layers(self):
        return self.cfg.layers

    @property
    def backbone(self):
        """Frozen matrices, name -> DenseTensor"""
        return self._backbone

    @property
    def target(self):
        return self._target

    @property
    def perturbed(self):
        """Names of the matrices the target perturbs"""
        return list(self._perturbed)

    @property
    def train(self):
        """(x, y) of the training split"""
        return self._x_train, self._y_train

    @property
    def eval(self):
        return self._x_eval, self._y_eval

    def calibration(self, batch_size):
        """List of calib_batches held-out (x, y) batches for loss-delta scoring"""
        if self._calib is None or self._calib[0][0].shape[1] != batch_size:
            x, y = self._sample('calibration', self.cfg.calib_batches * batch_size)
            self._calib = [(x[:, k * batch_size:(k + 1) * batch_size], y[:, k * batch_size:(k + 1) * batch_size])
                           for k in range(self.cfg.calib_batches)]
        return self._calib

    def base_count(self):
        """Number of frozen parameters"""
        return sum(w.size for w in self._backbone.values())
