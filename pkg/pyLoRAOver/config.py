"""
Run configuration: one entity per section of the run.json file
"""
import copy
import json
import logging
from importlib import resources
from pathlib import Path

from .aux_functions import ceil_div
from .base import ConfigEntity
from .exceptions import ConfigError, ParameterInvalid

STRATEGIES = ['full-dense-delta', 'lora', 'over-all', 'over-svd', 'over-predefined', 'over-runtime']
ROLES = ['proj', 'ffn']


def _positive_int(name, value, minimum=1):
    if isinstance(value, bool) or not isinstance(value, int) or value < minimum:
        raise ParameterInvalid(f'{name} should be an integer >= {minimum}, got {value!r}.')
    return int(value)


def _positive_float(name, value, allow_zero=False):
    if isinstance(value, bool) or not isinstance(value, (int, float)):
        raise ParameterInvalid(f'{name} should be a number, got {value!r}.')
    if value < 0 or (value == 0 and not allow_zero):
        raise ParameterInvalid(f'{name} should be {">=" if allow_zero else ">"} 0, got {value!r}.')
    return float(value)


def _choice(name, value, choices):
    if value not in choices:
        raise ParameterInvalid(f'{name} should be one of {choices}, got {value!r}.')
    return value


class TaskConfig(ConfigEntity):
    """Synthetic regression task: frozen backbone and a perturbed target"""
    section = 'task'
    parameters = ['layers', 'hidden', 'target_rank', 'perturb_roles', 'perturb_fraction', 'perturb_scale',
                  'noise_std', 'n_train', 'n_eval', 'calib_batches', 'proj_gain', 'ffn_gain']
    paramdefaults = [4, 32, 2, ['proj'], 1.0, 1.0, 0.01, 4096, 1024, 8, 0.3, 3.0]

    @property
    def layers(self):
        """Number of blocks L"""
        return self._layers

    @layers.setter
    def layers(self, value):
        self._layers = _positive_int('layers', value)

    @property
    def hidden(self):
        """Feature width h of every block"""
        return self._hidden

    @hidden.setter
    def hidden(self, value):
        self._hidden = _positive_int('hidden', value)

    @property
    def target_rank(self):
        """Rank of the planted perturbation"""
        return self._target_rank

    @target_rank.setter
    def target_rank(self, value):
        self._target_rank = _positive_int('target_rank', value)

    @property
    def perturb_roles(self):
        """Roles whose matrices may be perturbed in the target"""
        return self._perturb_roles

    @perturb_roles.setter
    def perturb_roles(self, value):
        if not isinstance(value, list) or any(r not in ROLES for r in value):
            raise ParameterInvalid(f'perturb_roles should be a list drawn from {ROLES}, got {value!r}.')
        self._perturb_roles = list(value)

    @property
    def perturb_fraction(self):
        """Fraction of the eligible matrices that get perturbed"""
        return self._perturb_fraction

    @perturb_fraction.setter
    def perturb_fraction(self, value):
        value = _positive_float('perturb_fraction', value, allow_zero=True)
        if value > 1:
            raise ParameterInvalid(f'perturb_fraction should be <= 1, got {value}.')
        self._perturb_fraction = value

    @property
    def perturb_scale(self):
        return self._perturb_scale

    @perturb_scale.setter
    def perturb_scale(self, value):
        self._perturb_scale = _positive_float('perturb_scale', value, allow_zero=True)

    @property
    def noise_std(self):
        """Standard deviation of the target noise"""
        return self._noise_std

    @noise_std.setter
    def noise_std(self, value):
        self._noise_std = _positive_float('noise_std', value, allow_zero=True)

    @property
    def n_train(self):
        return self._n_train

    @n_train.setter
    def n_train(self, value):
        self._n_train = _positive_int('n_train', value)

    @property
    def n_eval(self):
        return self._n_eval

    @n_eval.setter
    def n_eval(self, value):
        self._n_eval = _positive_int('n_eval', value)

    @property
    def calib_batches(self):
        """Number of held-out calibration batches for predefined scoring"""
        return self._calib_batches

    @calib_batches.setter
    def calib_batches(self, value):
        self._calib_batches = _positive_int('calib_batches', value)

    @property
    def proj_gain(self):
        """Scale of the frozen proj matrices, entries ~ Normal(0, (gain / sqrt(h))^2)"""
        return self._proj_gain

    @proj_gain.setter
    def proj_gain(self, value):
        self._proj_gain = _positive_float('proj_gain', value)

    @property
    def ffn_gain(self):
        """
        Scale of the frozen ffn matrices. A proj matrix sits between two ffn
        matrices, so ffn_gain / proj_gain sets how much more a change of a proj
        adapter moves the output than the same change of an ffn adapter.
        """
        return self._ffn_gain

    @ffn_gain.setter
    def ffn_gain(self, value):
        self._ffn_gain = _positive_float('ffn_gain', value)


class LoraConfig(ConfigEntity):
    """Rank, scaling numerator and seed of the low-rank adapters"""
    section = 'lora'
    parameters = ['rank', 'alpha', 'seed']
    paramdefaults = [4, 4.0, 0]

    @property
    def rank(self):
        """LoRA rank r"""
        return self._rank

    @rank.setter
    def rank(self, value):
        self._rank = _positive_int('rank', value)

    @property
    def alpha(self):
        """Scaling numerator alpha"""
        return self._alpha

    @alpha.setter
    def alpha(self, value):
        self._alpha = _positive_float('alpha', value)

    @property
    def seed(self):
        return self._seed

    @seed.setter
    def seed(self, value):
        self._seed = _positive_int('seed', value, minimum=0)

    @property
    def scaling(self):
        """alpha / r, applied once on the B.A product"""
        return self._alpha / self._rank


class TrainConfig(ConfigEntity):
    """Optimizer, schedule and step budget"""
    section = 'train'
    parameters = ['steps', 'batch_size', 'lr', 'mpo_lr', 'schedule', 'optimizer', 'beta1', 'beta2', 'eps',
                  'weight_decay', 'eval_every', 'seed']
    paramdefaults = [300, 64, 0.01, None, 'cosine', 'adamw', 0.9, 0.999, 1e-8, 0.0, 25, 0]

    @property
    def steps(self):
        return self._steps

    @steps.setter
    def steps(self, value):
        self._steps = _positive_int('steps', value, minimum=0)

    @property
    def batch_size(self):
        return self._batch_size

    @batch_size.setter
    def batch_size(self, value):
        self._batch_size = _positive_int('batch_size', value)

    @property
    def lr(self):
        """Learning rate of dense parameters"""
        return self._lr

    @lr.setter
    def lr(self, value):
        self._lr = _positive_float('lr', value, allow_zero=True)

    @property
    def mpo_lr(self):
        """Learning rate of over-parameterized factors, None to use lr"""
        return self._mpo_lr

    @mpo_lr.setter
    def mpo_lr(self, value):
        self._mpo_lr = None if value is None else _positive_float('mpo_lr', value, allow_zero=True)

    @property
    def schedule(self):
        """'constant' or 'cosine'"""
        return self._schedule

    @schedule.setter
    def schedule(self, value):
        self._schedule = _choice('schedule', value, ['constant', 'cosine'])

    @property
    def optimizer(self):
        """'sgd' or 'adamw'"""
        return self._optimizer

    @optimizer.setter
    def optimizer(self, value):
        self._optimizer = _choice('optimizer', value, ['sgd', 'adamw'])

    @property
    def beta1(self):
        return self._beta1

    @beta1.setter
    def beta1(self, value):
        value = _positive_float('beta1', value, allow_zero=True)
        if value >= 1:
            raise ParameterInvalid(f'beta1 should be < 1, got {value}.')
        self._beta1 = value

    @property
    def beta2(self):
        return self._beta2

    @beta2.setter
    def beta2(self, value):
        value = _positive_float('beta2', value, allow_zero=True)
        if value >= 1:
            raise ParameterInvalid(f'beta2 should be < 1, got {value}.')
        self._beta2 = value

    @property
    def eps(self):
        return self._eps

    @eps.setter
    def eps(self, value):
        self._eps = _positive_float('eps', value, allow_zero=True)

    @property
    def weight_decay(self):
        """Decoupled weight decay coefficient"""
        return self._weight_decay

    @weight_decay.setter
    def weight_decay(self, value):
        self._weight_decay = _positive_float('weight_decay', value, allow_zero=True)

    @property
    def eval_every(self):
        return self._eval_every

    @eval_every.setter
    def eval_every(self, value):
        self._eval_every = _positive_int('eval_every', value)

    @property
    def seed(self):
        return self._seed

    @seed.setter
    def seed(self, value):
        self._seed = _positive_int('seed', value, minimum=0)

    def lr_for(self, factored: bool) -> float:
        """Base learning rate of a parameter"""
        return self._mpo_lr if (factored and self._mpo_lr is not None) else self._lr


class SelectionConfig(ConfigEntity):
    """Per-group quota, split number and scoring switches"""
    section = 'selection'
    parameters = ['top_n', 'split', 'interval', 'mode', 'grouping', 'reduction', 'reset_accumulators',
                  'phase1_steps', 'patience', 'min_rel_improvement']
    paramdefaults = [2, 2, 25, 'runtime', 'module', 'abs', True, 300, 5, 1e-4]

    def check(self):
        if self._top_n > 0 and self._split > self._top_n:
            raise ParameterInvalid(f'split ({self._split}) should not exceed top_n ({self._top_n}).')

    @property
    def top_n(self):
        """Number of slots to over-parameterize per group"""
        return self._top_n

    @top_n.setter
    def top_n(self, value):
        self._top_n = _positive_int('top_n', value, minimum=0)

    @property
    def split(self):
        """Number of selection rounds the quota is spread over"""
        return self._split

    @split.setter
    def split(self, value):
        self._split = _positive_int('split', value)

    @property
    def interval(self):
        """Training steps between runtime selection rounds"""
        return self._interval

    @interval.setter
    def interval(self, value):
        self._interval = _positive_int('interval', value)

    @property
    def mode(self):
        """'predefined' or 'runtime'"""
        return self._mode

    @mode.setter
    def mode(self, value):
        self._mode = _choice('mode', value, ['predefined', 'runtime'])

    @property
    def grouping(self):
        """'module' groups by (role, half), 'global' ranks all slots together"""
        return self._grouping

    @grouping.setter
    def grouping(self, value):
        self._grouping = _choice('grouping', value, ['module', 'global'])

    @property
    def reduction(self):
        """'abs' = <sum|grad|, |W|>, 'signed' = |sum <grad, W>|"""
        return self._reduction

    @reduction.setter
    def reduction(self, value):
        self._reduction = _choice('reduction', value, ['abs', 'signed'])

    @property
    def reset_accumulators(self):
        return self._reset_accumulators

    @reset_accumulators.setter
    def reset_accumulators(self, value):
        if not isinstance(value, bool):
            raise ParameterInvalid(f'reset_accumulators should be a boolean, got {value!r}.')
        self._reset_accumulators = value

    @property
    def phase1_steps(self):
        """Step budget of the vanilla LoRA run of the predefined strategy"""
        return self._phase1_steps

    @phase1_steps.setter
    def phase1_steps(self, value):
        self._phase1_steps = _positive_int('phase1_steps', value, minimum=0)

    @property
    def patience(self):
        return self._patience

    @patience.setter
    def patience(self, value):
        self._patience = _positive_int('patience', value)

    @property
    def min_rel_improvement(self):
        return self._min_rel_improvement

    @min_rel_improvement.setter
    def min_rel_improvement(self, value):
        self._min_rel_improvement = _positive_float('min_rel_improvement', value, allow_zero=True)

    @property
    def per_round(self):
        """Slots picked per group in one round, ceil(top_n / split)"""
        return ceil_div(self._top_n, self._split)


class MpoConfig(ConfigEntity):
    """
    How adapter halves are factored.

    in_factors / out_factors : dict or None
        Explicit factor lists per half, e.g. {"A": [2, 2], "B": [8, 4]}.
        Halves without an entry get an automatic plan with m local tensors.
    """
    section = 'mpo'
    parameters = ['m', 'in_factors', 'out_factors', 'bond_cap', 'spread']
    paramdefaults = [3, None, None, None, 2]

    def check(self):
        ins, outs = self._in_factors or {}, self._out_factors or {}
        if set(ins) != set(outs):
            raise ParameterInvalid(f'in_factors and out_factors should name the same halves, '
                                   f'got {sorted(ins)} and {sorted(outs)}.')
        for half in ins:
            if len(ins[half]) != len(outs[half]):
                raise ParameterInvalid(f'Factor lists of half "{half}" have different lengths.')

    @staticmethod
    def _factor_map(name, value):
        if value is None:
            return None
        if not isinstance(value, dict) or any(k not in ('A', 'B', 'D') for k in value):
            raise ParameterInvalid(f'{name} should map "A", "B" or "D" to factor lists, got {value!r}.')
        for half, factors in value.items():
            if not isinstance(factors, list) or len(factors) < 1:
                raise ParameterInvalid(f'{name}["{half}"] should be a non-empty list.')
            for f in factors:
                _positive_int(f'{name}["{half}"]', f)
        return copy.deepcopy(value)

    @property
    def m(self):
        """Number of local tensors of automatic plans"""
        return self._m

    @m.setter
    def m(self, value):
        self._m = _positive_int('m', value)

    @property
    def in_factors(self):
        """Explicit row factors per half"""
        return self._in_factors

    @in_factors.setter
    def in_factors(self, value):
        self._in_factors = self._factor_map('in_factors', value)

    @property
    def out_factors(self):
        """Explicit column factors per half"""
        return self._out_factors

    @out_factors.setter
    def out_factors(self, value):
        self._out_factors = self._factor_map('out_factors', value)

    @property
    def bond_cap(self):
        """Cap on every internal bond. Slots only accept untruncated plans, so a cap
        that bites makes over-parameterization fail with PlanMismatch"""
        return self._bond_cap

    @bond_cap.setter
    def bond_cap(self, value):
        self._bond_cap = None if value is None else _positive_int('bond_cap', value)

    @property
    def spread(self):
        """Number of non-trivial factors of automatic plans"""
        return self._spread

    @spread.setter
    def spread(self, value):
        self._spread = _positive_int('spread', value)

    def factors_for(self, half):
        """(in_factors, out_factors) of a half, or None for an automatic plan"""
        if self._in_factors is None or half not in self._in_factors:
            return None
        return self._in_factors[half], self._out_factors[half]


class RunConfig:
    """Fully resolved configuration of one run"""
    sections = {'task': TaskConfig, 'lora': LoraConfig, 'train': TrainConfig,
                'selection': SelectionConfig, 'mpo': MpoConfig}

    def __init__(self, strategy='lora', seed=0, output_dir='runs/default', task=None, lora=None, train=None,
                 selection=None, mpo=None):
        self.strategy = strategy
        self.seed = seed
        self.output_dir = str(output_dir)
        self.task = task if task is not None else TaskConfig()
        self.lora = lora if lora is not None else LoraConfig()
        self.train = train if train is not None else TrainConfig()
        self.selection = selection if selection is not None else SelectionConfig()
        self.mpo = mpo if mpo is not None else MpoConfig()
        self.resolve()

    def __repr__(self):
        return f'RunConfig(strategy={self._strategy!r}, seed={self._seed})'

    def __eq__(self, other):
        return isinstance(other, RunConfig) and self.to_dict() == other.to_dict()

    __hash__ = None

    @property
    def strategy(self):
        return self._strategy

    @strategy.setter
    def strategy(self, value):
        self._strategy = _choice('strategy', value, STRATEGIES)

    @property
    def seed(self):
        """Single source of randomness of the run"""
        return self._seed

    @seed.setter
    def seed(self, value):
        self._seed = _positive_int('seed', value, minimum=0)

    def resolve(self):
        """Propagate the run seed and the strategy into the sections"""
        self.lora.seed = self._seed
        self.train.seed = self._seed
        if self._strategy == 'over-predefined':
            self.selection.mode = 'predefined'
        elif self._strategy == 'over-runtime':
            self.selection.mode = 'runtime'
        return self

    def to_dict(self):
        d = {'strategy': self._strategy, 'seed': self._seed, 'output_dir': self.output_dir}
        for name in self.sections:
            d[name] = getattr(self, name).to_dict()
        return d

    @classmethod
    def from_dict(cls, d):
        check_schema(d)
        kwargs = {key: d[key] for key in ('strategy', 'seed', 'output_dir') if key in d}
        for name, section in cls.sections.items():
            kwargs[name] = section.from_dict(d.get(name))
        return cls(**kwargs)

    def copy(self):
        return RunConfig.from_dict(self.to_dict())

    def save(self, filename):
        path = Path(filename)
        path.parent.mkdir(parents=True, exist_ok=True)
        path.write_text(json.dumps(self.to_dict(), indent=2, sort_keys=True) + '\n')


_JSON_TYPES = {'integer': int, 'number': (int, float), 'string': str, 'boolean': bool, 'array': list,
               'object': dict, 'null': type(None)}


def load_schema():
    """The JSON schema shipped with the package"""
    text = resources.files('pyLoRAOver').joinpath('run_config.schema.json').read_text(encoding='utf-8')
    return json.loads(text)


def _check_node(value, schema, where):
    types = schema.get('type')
    if types is not None:
        types = types if isinstance(types, list) else [types]
        matched = False
        for t in types:
            if t in ('integer', 'number') and isinstance(value, bool):
                continue
            if isinstance(value, _JSON_TYPES[t]):
                matched = True
                break
        if not matched:
            raise ConfigError(f'{where}: expected {"/".join(types)}, got {type(value).__name__}.')
    if 'enum' in schema and value not in schema['enum']:
        raise ConfigError(f'{where}: {value!r} not in {schema["enum"]}.')
    if isinstance(value, dict) and 'properties' in schema:
        allowed = schema['properties']
        if schema.get('additionalProperties', True) is False:
            unknown = sorted(set(value) - set(allowed))
            if unknown:
                raise ConfigError(f'{where}: unknown key(s) {", ".join(unknown)}.')
        for key, sub in value.items():
            if key in allowed:
                _check_node(sub, allowed[key], f'{where}.{key}')


def check_schema(d):
    """Validate keys and JSON types of a run configuration against the schema"""
    if not isinstance(d, dict):
        raise ConfigError('The run configuration should be a JSON object.')
    _check_node(d, load_schema(), 'config')


def load_run_config(filename) -> RunConfig:
    """Read a run.json file. Unknown keys are an error."""
    path = Path(filename)
    if not path.is_file():
        raise ConfigError(f'Configuration file not found: "{path}"')
    try:
        d = json.loads(path.read_text(encoding='utf-8'))
    except json.JSONDecodeError as err:
        raise ConfigError(f'Invalid JSON in "{path}": {err}')
    config = RunConfig.from_dict(d)
    logging.getLogger('LoRAOver').info(f'Configuration loaded from "{path}"')
    return config
