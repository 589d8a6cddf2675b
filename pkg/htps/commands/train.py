'''
Train one variant for the configured number of trials. Writes the save-best
checkpoint of every trial plus ``report.json`` / ``report.txt``.
'''
import sys
from pathlib import Path
from typing import List

from htps.config import ExperimentConfig
from htps.experiment import run_trials, write_report

from .common import ArgumentParser, add_experiment_arguments, add_verbosity_arguments, experiment_config, \
    format_mse, out_dir, run


def perform(config: ExperimentConfig, target: Path, progress: bool = False) -> str:
    report = run_trials(config, target, progress)
    write_report(report, target, 'report')

    return (f'variant {report.variant}: mean test mse {format_mse(report.mean_test_mse)} '
            f'+- {format_mse(report.std_test_mse)} ({len(report.trials)} trials, {report.n_diverged} diverged)')


def main(argv: List[str] = sys.argv[1:]) -> int:

    parser = ArgumentParser(prog='htps train')

    add_experiment_arguments(parser)
    parser.add_argument('--out', metavar='path', default=None, help='target folder (defaults to runs/train)')
    add_verbosity_arguments(parser)

    args = parser.parse_args(argv)

    return run(lambda: perform(experiment_config(args), out_dir(args.out, 'runs/train'), args.verbose), args)


if __name__ == '__main__':
    sys.exit(main())
