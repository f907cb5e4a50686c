"""
Verification suites: every check measures a property against an independent
oracle and reports the measured value next to its threshold
"""
import logging
import time

import numpy as np
from scipy import stats
from tqdm import tqdm

from .adapters import over_parameterize, plan_for_slot
from .autodiff import Tape, central_difference, gradient_rel_error
from .aux_functions import named_stream, prod, rel_error
from .config import MpoConfig, RunConfig, SelectionConfig, TaskConfig, TrainConfig
from .exceptions import ParameterInvalid
from .model import AdapterModel
from .mpo import auto_plan, budget, contract, decompose, error_bound, full_bonds, plan_shapes
from .selection import ImportanceLedger, probe_order, select_round
from .task import SyntheticTask
from .tensor import frobenius_norm
from .training import Trainer

SUITES = ['mpo', 'grad', 'merge', 'bound', 'selection', 'ordering', 'determinism']
DEFAULT_SUITES = ['mpo', 'grad', 'merge', 'bound', 'selection']


class Property:
    """Outcome of one checked property"""

    def __init__(self, name, measured, threshold, passed, **details):
        self.name = name
        self.measured = measured
        self.threshold = threshold
        self.passed = bool(passed)
        self.details = details

    def __repr__(self):
        return f'Property({self.name}, {"pass" if self.passed else "FAIL"}, measured={self.measured})'

    def to_dict(self):
        d = {'name': self.name, 'passed': self.passed, 'measured': self.measured, 'threshold': self.threshold}
        d.update(self.details)
        return d


def _desk_config(seed=0, **sections):
    config = RunConfig(seed=seed)
    for name, values in sections.items():
        setattr(config, name, getattr(config, name).__class__(**values))
    return config.resolve()


def check_mpo(trials=100, big_trials=10, seed=0, progress=False):
    """
    Round-trip of 'trials' random matrices per shape and factor count (plus
    'big_trials' 4096x8 ones), budget exactness, brute-force bond products and
    the reference plan shapes. The round trips should finish within a minute.
    """
    rng = named_stream(seed, 'verify', 'mpo')
    props = []
    worst, exact_counts, count = 0.0, True, 0
    cases = [(shape, m, trials) for shape in [(768, 8), (8, 768), (64, 64)] for m in (1, 2, 3, 9)]
    cases.append(((4096, 8), 9, big_trials))
    start = time.perf_counter()
    for (rows, cols), m, n in tqdm(cases, disable=not progress, desc='mpo round-trip'):
        plan = auto_plan(rows, cols, m)
        for _ in range(n):
            w = rng.normal(size=(rows, cols))
            chain = decompose(w, plan)
            worst = max(worst, rel_error(contract(chain).array, w))
            exact_counts &= chain.n_params == budget(plan).n_params_chain
            count += 1
    seconds = time.perf_counter() - start
    props.append(Property('round_trip_rel_error', worst, 1e-9, worst <= 1e-9, decompositions=count))
    props.append(Property('budget_equals_stored_floats', exact_counts, True, exact_counts))
    props.append(Property('round_trip_seconds', seconds, 60.0, seconds <= 60.0, decompositions=count))

    n_add = budget(plan_shapes(768, 8, [24, 32], [2, 4])).n_add
    props.append(Property('n_add_768x8', n_add, 2304, n_add == 2304))

    mismatches = 0
    for _ in range(500):
        m = int(rng.integers(1, 6))
        ins = [int(x) for x in rng.integers(1, 5, size=m)]
        outs = [int(x) for x in rng.integers(1, 5, size=m)]
        bonds = plan_shapes(prod(ins), prod(outs), ins, outs).bond_dims
        local = [i * j for i, j in zip(ins, outs)]
        brute = [min(prod(local[:k]), prod(local[k:])) for k in range(m + 1)]
        mismatches += int(list(bonds) != brute)
    props.append(Property('bond_brute_force_mismatches', mismatches, 0, mismatches == 0, factorizations=500))

    table = {768: [24, 32], 3072: [48, 64], 4096: [64, 64], 11008: [86, 128], 14336: [112, 128], 8: [2, 4]}
    generated = {n: auto_plan(n, 1, 2).in_dims for n in table}
    table_ok = all(list(generated[n]) == v for n, v in table.items())
    props.append(Property('plan_generator_tables', {str(n): list(v) for n, v in generated.items()},
                          {str(n): v for n, v in table.items()}, table_ok))
    reference = plan_shapes(4096, 8, [64] + [1] * 7 + [64], [2] + [1] * 7 + [4])
    auto = auto_plan(4096, 8, 9)
    props.append(Property('plan_4096x8_m9', list(auto.in_dims) + list(auto.out_dims),
                          list(reference.in_dims) + list(reference.out_dims), auto == reference))
    return props


def check_bound(trials=100, seed=0, progress=False):
    """Measured truncation error never exceeds sqrt(sum eps_k^2)"""
    rng = named_stream(seed, 'verify', 'bound')
    violations, worst_ratio = 0, 0.0
    for _ in tqdm(range(trials), disable=not progress, desc='truncation bound'):
        m = int(rng.integers(2, 5))
        ins = [int(x) for x in rng.integers(1, 5, size=m)]
        outs = [int(x) for x in rng.integers(1, 5, size=m)]
        full = full_bonds(ins, outs)
        caps = [int(rng.integers(1, max(full[k], 1) + 1)) for k in range(1, m)]
        plan = plan_shapes(prod(ins), prod(outs), ins, outs, caps)
        w = rng.normal(size=plan.shape)
        chain = decompose(w, plan)
        measured = frobenius_norm(w - contract(chain).array)
        bound = error_bound(chain)
        if measured > bound * (1 + 1e-8) + 1e-12:
            violations += 1
        if bound > 0:
            worst_ratio = max(worst_ratio, measured / bound)
    return [Property('bound_violations', violations, 0, violations == 0, decompositions=trials,
                     max_error_over_bound=worst_ratio)]


def _fd_check(name, build, inputs, eps=1e-5):
    """Compare tape gradients of build(tape, leaves) -> loss node with central differences"""
    tape = Tape()
    leaves = [tape.leaf(x) for x in inputs]
    grads = tape.backward(build(tape, leaves))
    worst = 0.0
    for k, x in enumerate(inputs):
        def f(value, k=k):
            t = Tape()
            ls = [t.leaf(value if j == k else inputs[j]) for j in range(len(inputs))]
            return float(t.array(build(t, ls))[0])
        worst = max(worst, gradient_rel_error(grads[leaves[k]], central_difference(f, x, eps)))
    return Property(f'fd_{name}', worst, 1e-6, worst <= 1e-6)


def check_grad(seed=0, progress=False):
    """Finite-difference check of every operation kind and of a one-block model"""
    rng = named_stream(seed, 'verify', 'grad')
    target = rng.normal(size=(3, 4))
    a, b = rng.normal(size=(3, 5)), rng.normal(size=(5, 4))
    props = [
        _fd_check('matmul', lambda t, l: t.mse_loss(t.matmul(l[0], l[1]), target), [a, b]),
        _fd_check('reshape', lambda t, l: t.mse_loss(t.reshape(l[0], [3, -1]), target), [rng.normal(size=(4, 3))]),
        _fd_check('add', lambda t, l: t.mse_loss(t.add(l[0], l[1]), target), [rng.normal(size=(3, 4))] * 2),
        _fd_check('scale', lambda t, l: t.mse_loss(t.scale(l[0], 0.7), target), [rng.normal(size=(3, 4))]),
        _fd_check('tanh', lambda t, l: t.mse_loss(t.tanh(l[0]), target), [rng.normal(size=(3, 4))]),
        _fd_check('mse_loss', lambda t, l: t.mse_loss(l[0], target), [rng.normal(size=(3, 4))]),
    ]
    for m in tqdm((2, 3, 5), disable=not progress, desc='chain gradients'):
        plan = auto_plan(8, 4, m, spread=m)
        chain = decompose(rng.normal(size=plan.shape), plan)
        goal = rng.normal(size=plan.shape)
        props.append(_fd_check(f'chain_contract_m{m}', lambda t, l, plan=plan, goal=goal:
                               t.mse_loss(t.chain_contract(l, plan), goal), [f.array for f in chain.factors]))
    task = SyntheticTask(TaskConfig(layers=1, hidden=6, n_train=8, n_eval=4), seed)
    model = AdapterModel(task)
    for slot in model.slots.filter(half='B'):
        slot.set_dense(rng.normal(size=slot.shape))
    model.over_parameterize('layer0.ffn.A', auto_plan(4, 6, 3))
    x, y = task.train
    _, grads = model.forward_backward(x, y)
    worst = 0.0
    for slot in model.slots:
        for k, param in enumerate(slot.params):
            def f(value, slot=slot, k=k):
                saved = slot.params[k].copy()
                slot.params[k][...] = value
                slot.touch()
                loss = model.loss(x, y)
                slot.params[k][...] = saved
                slot.touch()
                return loss
            worst = max(worst, gradient_rel_error(grads.params[slot.slot_id][k].array,
                                                  central_difference(f, param.copy())))
    props.append(Property('fd_model_slots', worst, 1e-6, worst <= 1e-6, slots=len(model.slots)))
    return props


def check_merge(trials=50, seed=0, progress=False):
    """Function-preserving swaps and merged-versus-factored inference parity"""
    rng = named_stream(seed, 'verify', 'merge')
    task = SyntheticTask(TaskConfig(layers=2, hidden=8, n_train=64, n_eval=64), seed)
    x, y = task.train
    worst_swap = 0.0
    for n in tqdm(range(trials), disable=not progress, desc='swap events'):
        model = AdapterModel(task)
        for slot in model.slots:
            if rng.random() < 0.7:
                slot.set_dense(rng.normal(size=slot.shape))
        slot = model.slots[int(rng.integers(len(model.slots)))]
        before = model.loss(x, y)
        over_parameterize(slot, auto_plan(*slot.shape, int(rng.integers(2, 5))))
        worst_swap = max(worst_swap, abs(model.loss(x, y) - before) / max(abs(before), 1e-300))
    props = [Property('swap_loss_rel_change', worst_swap, 1e-8, worst_swap <= 1e-8, swaps=trials)]

    worst_parity, counts_equal = 0.0, True
    for strategy in ('lora', 'over-all', 'over-runtime'):
        config = _desk_config(seed, task={'layers': 2, 'hidden': 8, 'n_train': 256, 'n_eval': 64},
                              train={'steps': 30, 'batch_size': 16, 'eval_every': 10},
                              selection={'top_n': 2, 'split': 2, 'interval': 10})
        config.strategy = strategy
        trainer = Trainer(config.resolve())
        trainer.run()
        inputs = named_stream(seed, 'verify', f'parity-{strategy}').normal(size=(8, 64))
        factored = trainer.model.forward(inputs)
        merged = trainer.model.merged_forward(inputs)
        worst_parity = max(worst_parity, rel_error(merged, factored))
        counts_equal &= trainer.model.inference_count() == trainer.task.base_count()
    props.append(Property('merged_output_rel_divergence', worst_parity, 1e-8, worst_parity <= 1e-8))
    props.append(Property('merged_count_equals_base', counts_equal, True, counts_equal))
    return props


def _signal_run(seed, steps_to_first_round):
    config = _desk_config(seed, train={'steps': steps_to_first_round + 1},
                          selection={'top_n': 4, 'split': 2, 'interval': steps_to_first_round,
                                     'grouping': 'global'})
    config.strategy = 'over-runtime'
    trainer = Trainer(config.resolve())
    trainer.run()
    return trainer


def check_selection(seeds=10, seed=0, progress=False):
    """Taylor probe order, quota arithmetic, rank invariance and the planted-signal check"""
    props = []
    config = _desk_config(seed, task={'layers': 5, 'n_train': 512, 'n_eval': 128}, train={'steps': 30})
    trainer = Trainer(config)
    trainer.run()
    model = trainer.model
    x, y = model.task.train
    batch = (x[:, :64], y[:, :64])
    slopes = []
    for slot in tqdm(model.slots, disable=not progress, desc='taylor probe'):
        def loss_fn(value, slot_id=slot.slot_id):
            return model.loss(*batch, overrides={slot_id: value})

        def grad_fn(value, slot_id=slot.slot_id):
            return model.forward_backward(*batch, overrides={slot_id: value})[1][slot_id]
        slopes.append(probe_order(loss_fn, grad_fn, slot.effective_matrix().array)[0])
    median = float(np.median(slopes))
    props.append(Property('taylor_probe_order_median', median, 0.9, median >= 0.9, slots=len(slopes)))

    ledger = ImportanceLedger(model.slots)
    rng = named_stream(seed, 'verify', 'selection')
    for slot_id in ledger.scores:
        ledger.scores[slot_id] = float(rng.random())
    cfg = SelectionConfig(top_n=4, split=2)
    scaled = ImportanceLedger(model.slots)
    scaled.scores = {k: 7.5 * v for k, v in ledger.scores.items()}
    rounds = []
    while True:
        picks = select_round(ledger, cfg)
        if not picks:
            break
        rounds.append(picks)
        if picks != select_round(scaled, cfg):
            break
    invariant = ledger.selected == scaled.selected
    props.append(Property('rank_invariance_under_scaling', invariant, True, invariant))
    sizes = {key: len(ledger.selected_in(key)) for key in ledger.groups}
    expected = {key: min(4, len(members)) for key, members in ledger.groups.items()}
    props.append(Property('selection_cardinality', sizes, expected, sizes == expected and len(rounds) == 2,
                          rounds=len(rounds)))

    interval = 25
    proj, total, proj_scores, ffn_scores = 0, 0, [], []
    for s in tqdm(range(seed, seed + seeds), disable=not progress, desc='selection signal'):
        run = _signal_run(s, interval)
        first = run.ledger.history[0] if run.ledger.history else []
        proj += sum(1 for slot_id in first if '.proj.' in slot_id)
        total += len(first)
        scores = run.ledger.scores
        proj_scores.append(np.mean([v for k, v in scores.items() if k.endswith('.proj.A')]))
        ffn_scores.append(np.mean([v for k, v in scores.items() if k.endswith('.ffn.A')]))
    share = proj / total if total else 0.0
    props.append(Property('first_round_proj_share', share, 0.7, share >= 0.7, picks=total, seeds=seeds))
    proj_mean, ffn_mean = float(np.mean(proj_scores)), float(np.mean(ffn_scores))
    props.append(Property('proj_A_score_exceeds_ffn_A', proj_mean - ffn_mean, 0.0, proj_mean > ffn_mean,
                          proj_A=proj_mean, ffn_A=ffn_mean))
    return props


def check_ordering(seeds=10, seed=0, base: RunConfig = None, progress=False):
    """Mean final eval loss of over-runtime against vanilla LoRA over seeds"""
    base = base if base is not None else RunConfig()
    losses = {'lora': [], 'over-runtime': []}
    for s in tqdm(range(seed, seed + seeds), disable=not progress, desc='ordering'):
        for strategy in losses:
            config = base.copy()
            config.seed, config.strategy = s, strategy
            losses[strategy].append(Trainer(config.resolve()).run().final_eval_loss)
    lora, over = np.array(losses['lora']), np.array(losses['over-runtime'])
    diff = lora - over
    effect = float(diff.mean() / diff.std(ddof=1)) if seeds > 1 and diff.std(ddof=1) > 0 else 0.0
    t_stat = float(stats.ttest_rel(lora, over).statistic) if seeds > 1 else 0.0
    return [Property('over_runtime_le_lora', float(over.mean() - lora.mean()), 0.0, over.mean() <= lora.mean(),
                     lora_mean=float(lora.mean()), over_runtime_mean=float(over.mean()), cohens_d=effect,
                     paired_t=t_stat, seed_violations=int(np.sum(over > lora)))]


def check_determinism(seed=0, base: RunConfig = None, progress=False):
    """Two runs with the same configuration give byte-identical metrics"""
    base = base if base is not None else RunConfig(strategy='over-runtime')
    config = base.copy()
    config.seed = seed
    first = Trainer(config.copy()).run().to_jsonl()
    second = Trainer(config.copy()).run().to_jsonl()
    return [Property('metrics_byte_identical', first == second, True, first == second,
                     bytes=len(first.encode('utf-8')))]


def run_suites(names, trials=None, seeds=10, seed=0, base=None, progress=False):
    """
    Run the named suites ('all' = mpo, grad, merge, bound, selection) and
    return the JSON report {"passed", "suites": {name: [property, ...]}}.
    """
    names = list(names)
    if 'all' in names:
        names = DEFAULT_SUITES + [n for n in names if n not in DEFAULT_SUITES and n != 'all']
    unknown = [n for n in names if n not in SUITES]
    if unknown:
        raise ParameterInvalid(f'Unknown suite(s) {unknown}, expected "all" or any of {SUITES}.')
    logger = logging.getLogger('LoRAOver')
    report = {'suites': {}}
    for name in names:
        logger.info(f'Running suite "{name}"')
        if name == 'mpo':
            props = check_mpo(trials or 100, seed=seed, progress=progress)
        elif name == 'bound':
            props = check_bound(trials or 100, seed=seed, progress=progress)
        elif name == 'grad':
            props = check_grad(seed=seed, progress=progress)
        elif name == 'merge':
            props = check_merge(trials or 50, seed=seed, progress=progress)
        elif name == 'selection':
            props = check_selection(seeds, seed=seed, progress=progress)
        elif name == 'ordering':
            props = check_ordering(seeds, seed=seed, base=base, progress=progress)
        else:
            props = check_determinism(seed=seed, base=base, progress=progress)
        for prop in props:
            (logger.info if prop.passed else logger.warning)(f'{name}: {prop}')
        report['suites'][name] = [p.to_dict() for p in props]
    report['passed'] = all(p['passed'] for props in report['suites'].values() for p in props)
    return report
