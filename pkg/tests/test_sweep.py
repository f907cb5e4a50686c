import pytest

from pyLoRAOver.exceptions import ParameterInvalid
from pyLoRAOver.sweep import aggregate, cell_config, plateau_report, run_sweep, worker_count


class TestCellConfig:
    def test_top_n(self, make_config):
        config = cell_config(make_config('over-runtime', top_n=2, split=1), 'topN', 3, seed=5)
        assert config.selection.top_n == 3
        assert config.seed == 5
        assert config.lora.seed == 5

    def test_split(self, make_config):
        config = cell_config(make_config('over-runtime', top_n=4, split=1), 'split', 2, seed=0)
        assert config.selection.split == 2

    def test_split_larger_than_top_n(self, make_config):
        with pytest.raises(ParameterInvalid):
            cell_config(make_config('over-runtime', top_n=2, split=1), 'split', 3, seed=0)

    def test_scale_switches_to_over_all(self, make_config):
        config = cell_config(make_config('lora'), 'scale', 4, seed=0)
        assert config.strategy == 'over-all'
        assert config.mpo.m == 4

    def test_scale_keeps_selection_strategies(self, make_config):
        assert cell_config(make_config('over-runtime'), 'scale', 2, seed=0).strategy == 'over-runtime'

    def test_unknown_param(self, make_config):
        with pytest.raises(ParameterInvalid):
            cell_config(make_config(), 'rank', 2, seed=0)

    def test_base_is_not_modified(self, make_config):
        base = make_config('over-runtime', top_n=2, split=1)
        cell_config(base, 'topN', 1, seed=9)
        assert base.selection.top_n == 2
        assert base.seed == 0


def test_worker_count(monkeypatch):
    monkeypatch.setenv('MPO_OVER_THREADS', '3')
    assert worker_count() == 3
    monkeypatch.delenv('MPO_OVER_THREADS')
    assert worker_count() == 1
    monkeypatch.setenv('MPO_OVER_THREADS', 'many')
    with pytest.raises(ParameterInvalid):
        worker_count()


def test_aggregate():
    rows = [{'value': 1, 'final_eval_loss': 1.0, 'trainable': 10, 'ratio': 0.5, 'rounds': 1},
            {'value': 1, 'final_eval_loss': 3.0, 'trainable': 10, 'ratio': 0.7, 'rounds': 1},
            {'value': 2, 'final_eval_loss': 0.5, 'trainable': 12, 'ratio': 0.6, 'rounds': 2}]
    summary = aggregate(rows, [1, 2])
    assert summary[0]['mean_eval_loss'] == pytest.approx(2.0)
    assert summary[0]['std_eval_loss'] == pytest.approx(2.0 ** 0.5)
    assert summary[1]['std_eval_loss'] == 0.0
    assert summary[1]['n'] == 1
    assert summary[0]['mean_ratio'] == pytest.approx(0.6)
    assert summary[1]['mean_ratio'] == pytest.approx(0.6)


@pytest.mark.parametrize('means, monotone, plateau_at', [([3.0, 2.0, 1.0], True, None),
                                                         ([3.0, 2.0, 2.0], True, 2),
                                                         ([3.0, 1.0, 1.5], False, 2)])
def test_plateau_report(means, monotone, plateau_at):
    summary = [{'value': k + 1, 'mean_eval_loss': m} for k, m in enumerate(means)]
    assert plateau_report(summary) == {'non_increasing': monotone, 'plateau_at': plateau_at}


class TestRunSweep:
    def test_rows_in_cell_order(self, make_config):
        base = make_config('over-runtime', steps=10, top_n=2, split=1, interval=5)
        result = run_sweep(base, 'topN', [1, 2], seeds=[0, 1], workers=1)
        assert [(r['value'], r['seed']) for r in result['rows']] == [(1, 0), (1, 1), (2, 0), (2, 1)]
        assert [r['selected'] for r in result['rows']] == [4, 4, 8, 8]
        assert [s['value'] for s in result['summary']] == [1, 2]
        assert 'plateau' not in result

    def test_scale_sweep_reports_plateau(self, make_config):
        result = run_sweep(make_config('lora', steps=5), 'scale', [2, 3], workers=1)
        assert result['seeds'] == [0]
        assert set(result['plateau']) == {'non_increasing', 'plateau_at'}
        assert result['rows'][0]['trainable'] < result['rows'][1]['trainable']

    @pytest.mark.slow
    def test_worker_processes_give_the_same_rows(self, make_config):
        base = make_config('over-runtime', steps=10, top_n=2, split=1, interval=5)
        serial = run_sweep(base, 'topN', [1, 2], seeds=[0, 1], workers=1)
        parallel = run_sweep(base, 'topN', [1, 2], seeds=[0, 1], workers=2)
        assert parallel['rows'] == serial['rows']


def test_split_sweep_round_counts(make_config):
    base = make_config('over-runtime', steps=25, top_n=4, split=1, interval=5)
    base.task.layers = 4
    result = run_sweep(base, 'split', [1, 2, 4], workers=1)
    assert [r['rounds'] for r in result['rows']] == [1, 2, 4]
    assert all(r['selected'] == 16 for r in result['rows'])


def test_scale_sweep_grows_trainable_count(make_config):
    result = run_sweep(make_config('lora', steps=1), 'scale', [1, 2, 3, 4], workers=1)
    trainable = [r['trainable'] for r in result['rows']]
    assert all(b > a for a, b in zip(trainable, trainable[1:]))

def test_rows_report_train_to_inference_ratio(make_config):
    result = run_sweep(make_config('lora', steps=1), 'scale', [1, 3], workers=1)
    for row in result['rows']:
        assert row['ratio'] == pytest.approx(row['trainable'] / row['inference'])
        assert row['inference'] == 4 * 64
    ratios = [s['mean_ratio'] for s in result['summary']]
    assert ratios[0] < ratios[1]
