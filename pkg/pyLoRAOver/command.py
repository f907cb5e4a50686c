# Use commands as classes
import argparse
import json
import logging
import sys
from pathlib import Path

from .config import load_run_config
from .exceptions import ConfigError, InvalidInput, LoRAOverException, VerificationFailed
from .log_utils import set_debug_trace, set_logger
from .mpo import auto_plan, budget, contract, decompose, error_bound, load_plan, plan_shapes, save_chain
from .sweep import SWEEP_PARAMS, run_sweep
from .tensor import frobenius_norm
from .tensor_io import load_tensor
from .training import Trainer
from .verify import SUITES, run_suites


def int_list(text):
    """'24,32' -> [24, 32]"""
    try:
        return [int(x) for x in text.split(',') if x.strip() != '']
    except ValueError:
        raise argparse.ArgumentTypeError(f'expected comma separated integers, got "{text}"')


def value_list(text):
    return [x.strip() for x in text.split(',') if x.strip() != '']


def emit(data, out=None):
    """Print a JSON report and optionally write it to a file"""
    text = json.dumps(data, indent=2)
    print(text)
    if out:
        path = Path(out)
        path.parent.mkdir(parents=True, exist_ok=True)
        path.write_text(text + '\n', encoding='utf-8')


class Command:
    """Basic Class for all the commands"""
    signature = ''

    def __init__(self, cli):
        self.cli = cli

    def add_arguments(self, parser):
        pass

    def __call__(self, args):
        raise NotImplementedError


class CommandPLAN(Command):
    """Bond dimensions and added-parameter budget of an MPO shape plan"""
    signature = 'plan --rows I --cols J [--factors-in i1,.. --factors-out j1,.. | --m M] [--bond-cap D]'

    def add_arguments(self, parser):
        parser.add_argument('--rows', type=int, required=True)
        parser.add_argument('--cols', type=int, required=True)
        parser.add_argument('--factors-in', type=int_list)
        parser.add_argument('--factors-out', type=int_list)
        parser.add_argument('--m', type=int, help='number of local tensors of an automatic plan')
        parser.add_argument('--spread', type=int, default=2, help='non-trivial factors of an automatic plan')
        parser.add_argument('--bond-cap', type=int)
        parser.add_argument('--out', help='also write the plan to this plan.json file')

    def __call__(self, args):
        if args.m is not None:
            plan = auto_plan(args.rows, args.cols, args.m, args.spread, args.bond_cap)
        else:
            if args.factors_in is None:
                raise ConfigError('plan needs --factors-in/--factors-out or --m.')
            factors_out = args.factors_out
            if factors_out is None:
                factors_out = [args.cols] + [1] * (len(args.factors_in) - 1)
            plan = plan_shapes(args.rows, args.cols, args.factors_in, factors_out, args.bond_cap)
        print(json.dumps({'plan': plan.to_dict(), 'budget': budget(plan).to_dict()}, indent=2))
        if args.out:
            path = Path(args.out)
            path.parent.mkdir(parents=True, exist_ok=True)
            path.write_text(json.dumps(plan.to_dict(), indent=2) + '\n')
        return 0


class CommandDECOMPOSE(Command):
    """MPO decomposition of a matrix stored in an MPOT file"""
    signature = 'decompose --input W.mpot --plan plan.json --out DIR [--verify]'

    def add_arguments(self, parser):
        parser.add_argument('--input', required=True)
        parser.add_argument('--plan', required=True)
        parser.add_argument('--out', required=True)
        parser.add_argument('--verify', action='store_true',
                            help='measure the reconstruction error and compare it with the bound')

    def __call__(self, args):
        w = load_tensor(args.input)
        chain = decompose(w, load_plan(args.plan))
        save_chain(chain, args.out)
        report = {'chain': str(args.out), 'n_params': chain.n_params,
                  'truncation_errors': list(chain.truncation_errors), 'error_bound': error_bound(chain)}
        if not args.verify:
            emit(report)
            return 0
        norm = frobenius_norm(w)
        measured = frobenius_norm(w.array - contract(chain).array)
        report['measured_error'] = measured
        report['measured_rel_error'] = measured / norm if norm > 0 else measured
        # round-off slack for untruncated plans, whose bound is numerically zero
        report['within_bound'] = measured <= report['error_bound'] * (1 + 1e-8) + 1e-12 * norm
        emit(report)
        if not report['within_bound']:
            raise VerificationFailed(f'Reconstruction error {measured:.3e} exceeds the bound '
                                     f'{report["error_bound"]:.3e}.')
        return 0


class CommandTRAIN(Command):
    """Train one strategy and write the run directory"""
    signature = 'train --config run.json [--out DIR]'

    def add_arguments(self, parser):
        parser.add_argument('--config', required=True)
        parser.add_argument('--out', help='run directory, overrides output_dir of the configuration')

    def __call__(self, args):
        config = load_run_config(args.config)
        if args.out:
            config.output_dir = args.out
        trainer = Trainer(config)
        metrics = trainer.run()
        trainer.write_outputs(config.output_dir)
        emit({'output_dir': config.output_dir, 'strategy': config.strategy, 'seed': config.seed,
              'initial_eval_loss': metrics.initial_eval_loss, 'final_eval_loss': metrics.final_eval_loss,
              'params': trainer.model.param_report()})
        return 0


class CommandVERIFY(Command):
    """Run verification suites, exit 0 only if every property passes"""
    signature = f'verify --suite all|{"|".join(SUITES)} [--trials N] [--seeds N]'

    def add_arguments(self, parser):
        parser.add_argument('--suite', type=value_list, default=['all'])
        parser.add_argument('--trials', type=int, help='random cases per property (suite dependent default)')
        parser.add_argument('--seeds', type=int, default=10, help='seeds of the statistical properties')
        parser.add_argument('--seed', type=int, default=0)
        parser.add_argument('--config', help='base run.json of the ordering and determinism suites')
        parser.add_argument('--report', help='also write the JSON report to this file')

    def __call__(self, args):
        base = load_run_config(args.config) if args.config else None
        report = run_suites(args.suite, args.trials, args.seeds, args.seed, base, self.cli.progress)
        emit(report, args.report)
        if not report['passed']:
            failed = [p['name'] for props in report['suites'].values() for p in props if not p['passed']]
            raise VerificationFailed(f'Failed properties: {", ".join(failed)}')
        return 0


class CommandSWEEP(Command):
    """Final eval loss per (value, seed) of a hyper-parameter sweep"""
    signature = f'sweep --param {"|".join(SWEEP_PARAMS)} --values v1,v2,.. --config base.json [--seeds s1,..]'

    def add_arguments(self, parser):
        parser.add_argument('--param', required=True, choices=SWEEP_PARAMS)
        parser.add_argument('--values', type=int_list, required=True)
        parser.add_argument('--config', required=True)
        parser.add_argument('--seeds', type=int_list)
        parser.add_argument('--workers', type=int, help='worker processes, default MPO_OVER_THREADS')
        parser.add_argument('--out', help='also write the table to this file')

    def __call__(self, args):
        base = load_run_config(args.config)
        result = run_sweep(base, args.param, args.values, args.seeds, args.workers, self.cli.progress)
        emit(result, args.out)
        return 0


class CommandIMPORTANCE(Command):
    """Print the importance ledger of a finished run"""
    signature = 'importance --run DIR'

    def add_arguments(self, parser):
        parser.add_argument('--run', required=True)

    def __call__(self, args):
        path = Path(args.run) / 'importance.json'
        if not path.is_file():
            raise ConfigError(f'No importance ledger in "{args.run}" (only selection strategies write one).')
        emit(json.loads(path.read_text(encoding='utf-8')))
        return 0


class CommandLine:
    """Command line processor of lora-over"""
    commands = ['plan', 'decompose', 'train', 'verify', 'sweep', 'importance']

    def __init__(self):
        self._CommandPLAN = CommandPLAN(self)
        self._CommandDECOMPOSE = CommandDECOMPOSE(self)
        self._CommandTRAIN = CommandTRAIN(self)
        self._CommandVERIFY = CommandVERIFY(self)
        self._CommandSWEEP = CommandSWEEP(self)
        self._CommandIMPORTANCE = CommandIMPORTANCE(self)
        self.progress = False

    def command(self, name) -> Command:
        return getattr(self, f'_Command{name.upper()}')

    def build_parser(self):
        parser = argparse.ArgumentParser(prog='lora-over',
                                         description='Over-parameterized low-rank adapters with MPO factors')
        parser.add_argument('-v', '--verbose', action='count', default=0, help='-v for INFO, -vv for DEBUG')
        parser.add_argument('--log-file')
        parser.add_argument('--trace', action='store_true', help='debug traces of shapes and scores')
        parser.add_argument('--progress', action='store_true', help='progress bars on stderr')
        sub = parser.add_subparsers(dest='command', required=True)
        for name in self.commands:
            cmd = self.command(name)
            cmd.add_arguments(sub.add_parser(name, help=cmd.__doc__, description=cmd.signature))
        return parser

    def run(self, argv=None) -> int:
        """Parse argv, dispatch and map errors to exit codes: 0 ok, 1 runtime failure, 2 invalid input"""
        args = self.build_parser().parse_args(argv)
        level = {0: logging.WARNING, 1: logging.INFO}.get(args.verbose, logging.DEBUG)
        set_logger(level, log_file=args.log_file)
        set_debug_trace(args.trace)
        self.progress = args.progress
        logger = logging.getLogger('LoRAOver')
        try:
            return self.command(args.command)(args)
        except InvalidInput:
            return 2
        except LoRAOverException:
            return 1
        except Exception as err:
            logger.exception(f'Unexpected error: {err}')
            return 1


def main(argv=None):
    sys.exit(CommandLine().run(argv))
