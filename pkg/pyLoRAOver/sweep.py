"""
Hyper-parameter sweeps over (value, seed) cells
"""
import logging
import os
from concurrent.futures import ProcessPoolExecutor

import numpy as np
from tqdm import tqdm

from .config import RunConfig
from .exceptions import ParameterInvalid
from .training import Trainer

SWEEP_PARAMS = ['topN', 'split', 'scale']


def worker_count():
    """Worker processes allowed by MPO_OVER_THREADS (default 1)"""
    value = os.environ.get('MPO_OVER_THREADS', '1')
    try:
        return max(1, int(value))
    except ValueError:
        raise ParameterInvalid(f'MPO_OVER_THREADS should be a positive integer, got "{value}".')


def cell_config(base: RunConfig, param, value, seed) -> RunConfig:
    """
    Configuration of one sweep cell.

    topN sets selection.top_n, split sets selection.split and scale sets the
    number of local tensors mpo.m of every factored slot. A scale sweep on a
    strategy that factors nothing runs over-all instead.
    """
    config = base.copy()
    config.seed = int(seed)
    if param == 'topN':
        config.selection.top_n = int(value)
    elif param == 'split':
        config.selection.split = int(value)
    elif param == 'scale':
        config.mpo.m = int(value)
        if config.strategy in ('lora', 'full-dense-delta', 'over-svd'):
            config.strategy = 'over-all'
    else:
        raise ParameterInvalid(f'Unknown sweep parameter "{param}", expected one of {SWEEP_PARAMS}.')
    config.selection.check()
    return config.resolve()


def run_cell(config: RunConfig, value):
    trainer = Trainer(config)
    metrics = trainer.run()
    report = trainer.model.param_report()
    return {'value': value, 'seed': config.seed, 'final_eval_loss': metrics.final_eval_loss,
            'initial_eval_loss': metrics.initial_eval_loss, 'trainable': report['trainable'],
            'inference': report['inference'], 'ratio': report['trainable'] / report['inference'],
            'rounds': trainer.ledger.rounds_done if trainer.ledger is not None else 0,
            'selected': len(trainer.ledger.selected) if trainer.ledger is not None else 0}


def _run_cell_args(args):
    return run_cell(*args)


def aggregate(rows, values):
    """Mean and standard deviation of the final eval loss, and the mean train/inference ratio, per value"""
    summary = []
    for value in values:
        losses = np.array([r['final_eval_loss'] for r in rows if r['value'] == value])
        trainable = [r['trainable'] for r in rows if r['value'] == value]
        summary.append({'value': value, 'mean_eval_loss': float(losses.mean()),
                        'std_eval_loss': float(losses.std(ddof=1)) if losses.size > 1 else 0.0,
                        'n': int(losses.size), 'trainable': int(max(trainable)),
                        'mean_ratio': float(np.mean([r['ratio'] for r in rows if r['value'] == value])),
                        'rounds': sorted({r['rounds'] for r in rows if r['value'] == value})})
    return summary


def plateau_report(summary, rel_tol=1e-3):
    """
    Whether the mean eval loss is non-increasing along the values and, if not,
    the first value after which it stops improving by more than rel_tol.
    """
    means = [s['mean_eval_loss'] for s in summary]
    monotone = all(b <= a for a, b in zip(means, means[1:]))
    plateau_at = None
    for k in range(1, len(means)):
        if means[k] > means[k - 1] * (1.0 - rel_tol):
            plateau_at = summary[k - 1]['value']
            break
    return {'non_increasing': monotone, 'plateau_at': plateau_at}


def run_sweep(base: RunConfig, param, values, seeds=None, workers=None, progress=False):
    """
    Train every (value, seed) cell and collect the final eval losses.

    Cells run in worker processes when more than one worker is allowed;
    rows are returned in (value, seed) order whatever the completion order.
    """
    seeds = [base.seed] if seeds is None else [int(s) for s in seeds]
    workers = worker_count() if workers is None else int(workers)
    cells = [(cell_config(base, param, v, s), v) for v in values for s in seeds]
    logging.getLogger('LoRAOver').info(f'Sweep over {param}: {len(cells)} cells on {workers} worker(s)')
    if workers > 1 and len(cells) > 1:
        with ProcessPoolExecutor(max_workers=workers) as pool:
            rows = list(tqdm(pool.map(_run_cell_args, cells), total=len(cells), disable=not progress,
                             desc=f'sweep {param}'))
    else:
        rows = [run_cell(*cell) for cell in tqdm(cells, disable=not progress, desc=f'sweep {param}')]
    summary = aggregate(rows, values)
    result = {'param': param, 'values': list(values), 'seeds': seeds, 'rows': rows, 'summary': summary}
    if param == 'scale':
        result['plateau'] = plateau_report(summary)
    return result
