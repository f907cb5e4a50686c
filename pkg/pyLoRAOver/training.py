"""
Training loop and strategy dispatch
"""
import json
import logging
from pathlib import Path

import numpy as np
from icecream import ic

from .adapters import plan_for_slot
from .aux_functions import named_stream
from .config import RunConfig
from .model import AdapterModel
from .optim import Optimizer
from .selection import ImportanceLedger, quota_filled, score_predefined, score_runtime, select_round
from .task import SyntheticTask


class MetricsLog:
    """Evaluation records {step, train_loss, eval_loss, trainable, selected}"""

    def __init__(self, rows=None):
        self.rows = list(rows) if rows is not None else []

    def __repr__(self):
        return f'MetricsLog({len(self.rows)} rows)'

    def __len__(self):
        return len(self.rows)

    def __eq__(self, other):
        return isinstance(other, MetricsLog) and self.to_jsonl() == other.to_jsonl()

    __hash__ = None

    def append(self, step, train_loss, eval_loss, trainable, selected):
        self.rows.append({'step': int(step), 'train_loss': float(train_loss), 'eval_loss': float(eval_loss),
                          'trainable': int(trainable), 'selected': list(selected)})

    @property
    def final_eval_loss(self):
        return self.rows[-1]['eval_loss'] if self.rows else None

    @property
    def initial_eval_loss(self):
        return self.rows[0]['eval_loss'] if self.rows else None

    def to_jsonl(self):
        return ''.join(json.dumps(row) + '\n' for row in self.rows)

    def save(self, filename):
        path = Path(filename)
        path.parent.mkdir(parents=True, exist_ok=True)
        path.write_text(self.to_jsonl(), encoding='utf-8')

    @classmethod
    def load(cls, filename):
        text = Path(filename).read_text(encoding='utf-8')
        return cls([json.loads(line) for line in text.splitlines() if line.strip()])


class Trainer:
    """
    One training run of a strategy on a synthetic task.

    Strategies
        full-dense-delta : unconstrained h x h delta per matrix
        lora             : dense A, B pairs
        over-svd         : every slot factored with 2 local tensors from step 0
        over-all         : every slot factored with mpo.m local tensors from step 0
        over-predefined  : LoRA run, loss-delta scores, retrain with the top-N factored
        over-runtime     : factor the top scoring slots every 'interval' steps

    OBS: every random draw comes from a stream named after the run seed, so
         two runs with the same configuration are bit-identical.
    """

    def __init__(self, config: RunConfig, task: SyntheticTask = None):
        self.config = config
        self.task = task if task is not None else SyntheticTask(config.task, config.seed)
        self.logger = logging.getLogger('LoRAOver')
        self.model = None
        self.ledger = None
        self.metrics = MetricsLog()
        self.phase1_metrics = None

    def new_model(self):
        return AdapterModel(self.task, self.config.lora, dense_delta=self.config.strategy == 'full-dense-delta')

    def new_ledger(self, model, mode):
        sel = self.config.selection
        return ImportanceLedger(model.slots.filter(trainable=True), sel.grouping, mode, sel.reduction)

    def factor_slots(self, model, slot_ids, m=None):
        for slot_id in slot_ids:
            slot = model.slot(slot_id)
            model.over_parameterize(slot_id, plan_for_slot(slot, self.config.mpo, m))

    def evaluate(self, model):
        x, y = self.task.train
        train_loss = model.loss(x, y)
        x, y = self.task.eval
        return train_loss, model.loss(x, y)

    def _record(self, log, model, step, ledger):
        train_loss, eval_loss = self.evaluate(model)
        selected = list(ledger.selected) if ledger is not None else []
        log.append(step, train_loss, eval_loss, model.trainable_count(), selected)
        self.logger.debug(f'step {step}: train {train_loss:.6e} eval {eval_loss:.6e}')
        return eval_loss

    def _plateau(self, history):
        sel = self.config.selection
        if len(history) <= sel.patience:
            return False
        best_before = min(history[:-sel.patience])
        recent = min(history[-sel.patience:])
        return recent > best_before * (1.0 - sel.min_rel_improvement)

    def train(self, model, steps, ledger=None, runtime=False, early_stop=False):
        """Optimize model for 'steps' steps and return the metrics of the run"""
        cfg, sel = self.config.train, self.config.selection
        optimizer = Optimizer(cfg, steps)
        rng = named_stream(self.config.seed, 'batches')
        x_train, y_train = self.task.train
        log = MetricsLog()
        history = [self._record(log, model, 0, ledger)]
        for t in range(steps):
            if runtime and t > 0 and t % sel.interval == 0 and not quota_filled(ledger, sel):
                self.runtime_round(model, ledger, optimizer)
            idx = np.sort(rng.choice(x_train.shape[1], size=min(cfg.batch_size, x_train.shape[1]), replace=False))
            loss, grads = model.forward_backward(x_train[:, idx], y_train[:, idx])
            if runtime:
                ledger.accumulate(grads)
            optimizer.step(model, grads, t)
            done = t + 1
            if done % cfg.eval_every == 0 or done == steps:
                history.append(self._record(log, model, done, ledger))
                if early_stop and done < steps and self._plateau(history):
                    self.logger.warning(f'Eval loss plateaued, stopping at step {done} of {steps}')
                    break
        return log

    def runtime_round(self, model, ledger, optimizer):
        sel = self.config.selection
        for slot_id in ledger.scores:
            score_runtime(ledger, slot_id, model.slot(slot_id).effective_matrix())
        picks = select_round(ledger, sel)
        self.logger.info(f'selection round {ledger.rounds_done}/{sel.split}: {picks}')
        self.factor_slots(model, picks)
        for slot_id in picks:
            optimizer.reset(slot_id)
        if sel.reset_accumulators:
            ledger.reset_accumulators()
        return picks

    def run(self) -> MetricsLog:
        strategy, cfg = self.config.strategy, self.config.train
        self.logger.info(f'Training strategy "{strategy}" for {cfg.steps} steps, seed {self.config.seed}')
        if strategy == 'over-predefined':
            return self._run_predefined()
        self.model = self.new_model()
        if strategy == 'over-svd':
            self.factor_slots(self.model, self.model.slots.ids, m=2)
        elif strategy == 'over-all':
            self.factor_slots(self.model, self.model.slots.ids)
        runtime = strategy == 'over-runtime'
        if runtime:
            self.ledger = self.new_ledger(self.model, 'runtime')
        self.metrics = self.train(self.model, cfg.steps, self.ledger, runtime=runtime)
        return self.metrics

    def _run_predefined(self):
        sel, cfg = self.config.selection, self.config.train
        self.logger.info(f'Phase 1: LoRA fine-tuning for up to {sel.phase1_steps} steps')
        phase1 = self.new_model()
        self.phase1_metrics = self.train(phase1, sel.phase1_steps, early_stop=True)
        ledger = self.new_ledger(phase1, 'predefined')
        calib = self.task.calibration(cfg.batch_size)
        for slot_id in ledger.scores:
            ledger.scores[slot_id] = score_predefined(phase1, calib, slot_id)
        ic(ledger.scores)
        picks = select_round(ledger, sel)
        self.logger.info(f'selection round 1/1: {picks}')
        self.logger.info('Phase 2: retraining from a fresh init with the selected slots factored')
        self.model = self.new_model()
        self.factor_slots(self.model, picks)
        self.ledger = ledger
        self.metrics = self.train(self.model, cfg.steps, ledger)
        return self.metrics

    def write_outputs(self, output_dir):
        """metrics.jsonl, config.json, checkpoint/, merged/, params.json and importance.json"""
        path = Path(output_dir)
        path.mkdir(parents=True, exist_ok=True)
        self.metrics.save(path / 'metrics.jsonl')
        self.config.save(path / 'config.json')
        self.model.save_checkpoint(path / 'checkpoint')
        self.model.export_merged(path / 'merged')
        (path / 'params.json').write_text(json.dumps(self.model.param_report(), indent=2) + '\n')
        if self.ledger is not None:
            self.ledger.save(path / 'importance.json')
        self.logger.info(f'Run written to "{path}"')


def run_training(task, strategy, config: RunConfig, output_dir=None):
    """
    Train 'strategy' on task with the given configuration. When output_dir is
    given the run directory is written there.
    """
    config = config.copy()
    config.strategy = strategy
    config.resolve()
    trainer = Trainer(config, task)
    metrics = trainer.run()
    if output_dir is not None:
        trainer.write_outputs(output_dir)
    return metrics
