import argparse
import logging
import sys
from pathlib import Path
from traceback import print_tb
from typing import Callable, Optional

from htps.config import ExperimentConfig, load_config
from htps.errors import ValidationError
from htps.synthgen import TASKS

logger = logging.getLogger(__name__)

LOG_FORMAT = '%(levelname)s %(name)s: %(message)s'


class ArgumentParser(argparse.ArgumentParser):
    '''Usage errors exit with status 1, like every other validation error.'''

    def error(self, message: str):
        self.print_usage(sys.stderr)
        print(f'{self.prog}: error: {message}', file=sys.stderr)
        sys.exit(1)


def add_verbosity_arguments(parser: argparse.ArgumentParser):
    group = parser.add_mutually_exclusive_group()
    group.add_argument('-v', dest='verbose', action='store_true', help='debug logging and progress bars')
    group.add_argument('-q', dest='quiet', action='store_true', help='only log warnings and errors')


def add_experiment_arguments(parser: argparse.ArgumentParser):
    parser.add_argument('--config', metavar='path', default=None, help='key = value config file')
    parser.add_argument(
        '--set',
        dest='overrides',
        metavar='key=value',
        action='append',
        default=[],
        help='override a config key, e.g. --set epochs=20 (applied after --config)',
    )
    parser.add_argument('--preset', default=None, help='synthetic dataset preset (carevue-like, metavision-like, pair)')
    parser.add_argument('--records', metavar='path', default=None, help='record CSV file instead of a preset')
    parser.add_argument('--variant', default=None, help='mlp, den, dsen or dsent')
    parser.add_argument('--source-checkpoint', metavar='path', default=None, help='source model for dsent')
    parser.add_argument('--seed', type=int, default=None, help='master seed')
    parser.add_argument('--trials', type=int, default=None, help='number of repetitions')
    parser.add_argument('--epochs', type=int, default=None, help='training epochs per trial')
    parser.add_argument('--lr', type=float, default=None, help='Adam learning rate')
    parser.add_argument('--window', type=int, default=None, help='window size W')
    parser.add_argument('--lambda', dest='loss_lambda', type=float, default=None, help='reconstruction loss weight')
    parser.add_argument('--task', default=None, help=f'preset prediction task ({", ".join(TASKS)})')
    parser.add_argument('--normalize', action=argparse.BooleanOptionalAction, default=None,
                        help='z-score features and labels with training statistics (default: on for presets)')


# flag -> config key, applied last
_FLAG_KEYS = {
    'preset': 'preset',
    'task': 'task',
    'records': 'records',
    'variant': 'variant',
    'source_checkpoint': 'source_checkpoint',
    'seed': 'seed',
    'trials': 'trials',
    'epochs': 'epochs',
    'lr': 'learning_rate',
    'window': 'window',
    'loss_lambda': 'loss_lambda',
    'normalize': 'normalize',
}


def experiment_config(args: argparse.Namespace) -> ExperimentConfig:
    config = load_config(Path(args.config) if args.config else None, args.overrides)

    flags = {key: getattr(args, flag) for flag, key in _FLAG_KEYS.items() if getattr(args, flag, None) is not None}

    # a preset on the command line replaces a record file from the config and vice versa
    if 'preset' in flags:
        flags.setdefault('records', None)
    elif 'records' in flags:
        flags['preset'] = None

    return config.replace(**flags)


def setup_logging(args: argparse.Namespace):
    level = logging.DEBUG if args.verbose else logging.WARNING if args.quiet else logging.INFO
    logging.basicConfig(format=LOG_FORMAT, stream=sys.stderr)
    logging.getLogger().setLevel(level)


def run(perform: Callable[[], Optional[str]], args: argparse.Namespace) -> int:
    '''Call ``perform`` and map its outcome to an exit code; a returned string is the summary line.'''
    setup_logging(args)

    try:
        summary = perform()
    except ValidationError as ex:
        print(f'ERROR: {ex}', file=sys.stderr)
        return 1
    except Exception as ex:
        print(f'ERROR: {ex}', file=sys.stderr)
        if args.verbose:
            print_tb(ex.__traceback__)
        return 2

    if summary:
        print(summary)
    return 0


def out_dir(path: Optional[str], default: str) -> Path:
    return Path(path if path is not None else default)


def format_mse(value: Optional[float]) -> str:
    return 'n/a' if value is None else f'{value:.6g}'
