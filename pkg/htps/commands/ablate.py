'''
Run the four-variant ablation (mlp, den, dsen, dsent) on one dataset and
write ``ablation.json`` / ``ablation.txt``. Without a source checkpoint the
``pair`` preset trains one on its source dataset first; other datasets skip
the dsent leg.
'''
import sys
from pathlib import Path
from typing import List

from htps.config import ExperimentConfig
from htps.experiment import run_ablation, write_report

from .common import ArgumentParser, add_experiment_arguments, add_verbosity_arguments, experiment_config, \
    format_mse, out_dir, run


def perform(config: ExperimentConfig, target: Path, progress: bool = False) -> str:
    report = run_ablation(config, target, progress)
    write_report(report, target, 'ablation')

    legs = []
    for row in report.rows:
        legs.append(f'{row.variant} skipped' if row.skipped else f'{row.variant} {format_mse(row.report.mean_test_mse)}')
    return 'mean test mse: ' + ', '.join(legs)


def main(argv: List[str] = sys.argv[1:]) -> int:

    parser = ArgumentParser(prog='htps ablate')

    add_experiment_arguments(parser)
    parser.add_argument('--out', metavar='path', default=None, help='target folder (defaults to runs/ablate)')
    add_verbosity_arguments(parser)

    args = parser.parse_args(argv)

    return run(lambda: perform(experiment_config(args), out_dir(args.out, 'runs/ablate'), args.verbose), args)


if __name__ == '__main__':
    sys.exit(main())
