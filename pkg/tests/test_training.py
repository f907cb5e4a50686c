"""Tests for the training loop and the strategies."""

import json
import logging

import numpy as np
import pytest

from pyLoRAOver.model import AdapterModel
from pyLoRAOver.mpo import budget
from pyLoRAOver.training import MetricsLog, Trainer, run_training
from pyLoRAOver.task import SyntheticTask


class TestMetricsLog:
    def test_rows(self):
        log = MetricsLog()
        log.append(0, 1.0, 2.0, 10, [])
        log.append(5, 0.5, 1.5, 12, ['layer0.proj.A'])
        assert log.initial_eval_loss == 2.0
        assert log.final_eval_loss == 1.5
        assert len(log) == 2

    def test_save_and_load(self, tmp_path):
        log = MetricsLog()
        log.append(0, 1.0, 2.0, 10, ['layer0.proj.A'])
        log.save(tmp_path / 'metrics.jsonl')
        assert MetricsLog.load(tmp_path / 'metrics.jsonl') == log

    def test_empty(self):
        assert MetricsLog().final_eval_loss is None


class TestTrainer:
    def test_zero_steps_records_one_row(self, make_config):
        metrics = Trainer(make_config('lora', steps=0)).run()
        assert len(metrics) == 1
        assert metrics.rows[0]['step'] == 0

    def test_record_steps(self, make_config):
        metrics = Trainer(make_config('lora', steps=12)).run()
        assert [row['step'] for row in metrics.rows] == [0, 5, 10, 12]

    def test_lora_reduces_loss(self, make_config):
        metrics = Trainer(make_config('lora', steps=60)).run()
        assert metrics.final_eval_loss < metrics.initial_eval_loss

    def test_initial_loss_is_the_backbone_loss(self, make_config):
        config = make_config('lora', steps=0)
        trainer = Trainer(config)
        metrics = trainer.run()
        x, y = trainer.task.eval
        backbone = AdapterModel(trainer.task, config.lora)
        assert metrics.initial_eval_loss == pytest.approx(backbone.loss(x, y), rel=1e-12)

    @pytest.mark.parametrize('strategy', ['full-dense-delta', 'lora', 'over-all', 'over-svd', 'over-runtime'])
    def test_same_seed_same_metrics(self, make_config, strategy):
        first = Trainer(make_config(strategy, seed=4, steps=10)).run()
        second = Trainer(make_config(strategy, seed=4, steps=10)).run()
        assert first == second

    def test_different_seed_different_metrics(self, make_config):
        first = Trainer(make_config('lora', seed=1, steps=5)).run()
        second = Trainer(make_config('lora', seed=2, steps=5)).run()
        assert first != second

    def test_runtime_without_quota_equals_lora(self, make_config):
        lora = Trainer(make_config('lora', seed=3, steps=15)).run()
        runtime = Trainer(make_config('over-runtime', seed=3, steps=15, top_n=0, interval=5)).run()
        assert runtime == lora

    def test_over_all_factors_every_slot(self, make_config):
        trainer = Trainer(make_config('over-all', steps=3))
        trainer.run()
        assert len(trainer.model.factored_ids) == 8
        assert all(s.plan.m == 3 for s in trainer.model.slots)

    def test_over_svd_uses_two_tensors(self, make_config):
        trainer = Trainer(make_config('over-svd', steps=3))
        trainer.run()
        assert all(s.plan.m == 2 for s in trainer.model.slots)

    def test_over_all_starts_from_backbone(self, make_config):
        lora = Trainer(make_config('lora', steps=0)).run()
        over = Trainer(make_config('over-all', steps=0)).run()
        assert over.initial_eval_loss == pytest.approx(lora.initial_eval_loss, rel=1e-12)

    def test_full_dense_delta(self, make_config):
        trainer = Trainer(make_config('full-dense-delta', steps=3))
        trainer.run()
        assert trainer.model.trainable_count() == 4 * 64

    def test_runtime_rounds(self, make_config, caplog):
        config = make_config('over-runtime', steps=20, top_n=2, split=2, interval=5)
        trainer = Trainer(config)
        with caplog.at_level(logging.INFO, logger='LoRAOver'):
            metrics = trainer.run()
        assert trainer.ledger.rounds_done == 2
        assert len(trainer.ledger.history[0]) == 4
        assert sorted(trainer.model.factored_ids) == sorted(trainer.model.slots.ids)
        assert 'selection round 1/2' in caplog.text
        assert 'selection round 2/2' in caplog.text
        assert metrics.rows[1]['selected'] == []
        assert len(metrics.rows[2]['selected']) == 4
        assert len(metrics.rows[-1]['selected']) == 8

    def test_runtime_never_selects_before_interval(self, make_config):
        trainer = Trainer(make_config('over-runtime', steps=5, top_n=1, split=1, interval=5))
        trainer.run()
        assert trainer.ledger.rounds_done == 0

    def test_predefined(self, make_config):
        config = make_config('over-predefined', steps=10, top_n=1, split=1, phase1_steps=10)
        trainer = Trainer(config)
        metrics = trainer.run()
        assert len(trainer.model.factored_ids) == 4
        assert trainer.ledger.rounds_done == 1
        assert len(trainer.phase1_metrics) >= 2
        assert metrics.rows[0]['selected'] == trainer.ledger.selected
        # phase 2 restarts from a fresh init
        assert metrics.initial_eval_loss == pytest.approx(trainer.phase1_metrics.initial_eval_loss, rel=1e-9)

    def test_predefined_early_stop(self, make_config, caplog):
        config = make_config('over-predefined', steps=2, top_n=1, split=1, phase1_steps=400, patience=1,
                             min_rel_improvement=0.5)
        trainer = Trainer(config)
        with caplog.at_level(logging.WARNING, logger='LoRAOver'):
            trainer.run()
        assert trainer.phase1_metrics.rows[-1]['step'] < 400
        assert 'plateaued' in caplog.text

    @pytest.mark.parametrize('strategy', ['full-dense-delta', 'lora', 'over-svd', 'over-all', 'over-predefined',
                                          'over-runtime'])
    def test_every_strategy_reduces_eval_loss(self, make_config, strategy):
        config = make_config(strategy, steps=60, top_n=2, split=2, interval=10, phase1_steps=30)
        metrics = Trainer(config).run()
        assert metrics.final_eval_loss < metrics.initial_eval_loss

    def test_runtime_trainable_trace(self, make_config):
        config = make_config('over-runtime', steps=20, top_n=4, split=2, interval=5)
        trainer = Trainer(config)
        metrics = trainer.run()
        trace = [row['trainable'] for row in metrics.rows]
        assert all(a <= b for a, b in zip(trace, trace[1:]))
        dense = AdapterModel(trainer.task, config.lora).trainable_count()
        added = sum(budget(slot.plan).n_add for slot in trainer.model.slots.filter(factored=True))
        assert trace[0] == dense
        assert trace[-1] == dense + added
        assert added > 0

    @pytest.mark.parametrize('strategy', ['full-dense-delta', 'over-runtime', 'over-predefined'])
    def test_backbone_stays_frozen(self, make_config, strategy):
        config = make_config(strategy, steps=15, top_n=2, split=1, interval=5, phase1_steps=5)
        trainer = Trainer(config)
        trainer.run()
        fresh = SyntheticTask(config.task, config.seed)
        for name in fresh.names:
            np.testing.assert_array_equal(trainer.task.backbone[name].array, fresh.backbone[name].array)


class TestOutputs:
    def test_write_outputs(self, make_config, tmp_path):
        trainer = Trainer(make_config('over-runtime', steps=10, top_n=1, split=1, interval=5))
        trainer.run()
        trainer.write_outputs(tmp_path / 'run')
        names = sorted(p.name for p in (tmp_path / 'run').iterdir())
        assert names == ['checkpoint', 'config.json', 'importance.json', 'merged', 'metrics.jsonl', 'params.json']
        params = json.loads((tmp_path / 'run' / 'params.json').read_text())
        assert params['inference'] == params['base']
        assert MetricsLog.load(tmp_path / 'run' / 'metrics.jsonl') == trainer.metrics

    def test_checkpoint_reproduces_eval_loss(self, make_config, tmp_path):
        trainer = Trainer(make_config('over-runtime', steps=10, top_n=1, split=1, interval=5))
        metrics = trainer.run()
        trainer.write_outputs(tmp_path / 'run')
        model = AdapterModel.load_checkpoint(tmp_path / 'run' / 'checkpoint', trainer.task)
        x, y = trainer.task.eval
        assert model.loss(x, y) == pytest.approx(metrics.final_eval_loss, rel=1e-12)
        merged = {p.stem: p for p in (tmp_path / 'run' / 'merged').iterdir()}
        assert len(merged) == 4

    def test_lora_writes_no_ledger(self, make_config, tmp_path):
        trainer = Trainer(make_config('lora', steps=2))
        trainer.run()
        trainer.write_outputs(tmp_path / 'run')
        assert not (tmp_path / 'run' / 'importance.json').exists()


def test_run_training(make_config, tmp_path):
    config = make_config('lora', steps=5)
    task = SyntheticTask(config.task, config.seed)
    metrics = run_training(task, 'over-svd', config, tmp_path / 'run')
    assert metrics.rows[-1]['step'] == 5
    assert json.loads((tmp_path / 'run' / 'config.json').read_text())['strategy'] == 'over-svd'
    assert config.strategy == 'lora'
    assert np.isfinite(metrics.final_eval_loss)
