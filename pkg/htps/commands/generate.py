'''
Write synthetic record CSV files for a preset: ``records.csv`` for single
presets, ``source.csv`` and ``target.csv`` for ``pair``.
'''
import sys
from pathlib import Path
from typing import List

from htps.records import write_csv
from htps.synthgen import PRESETS, TASKS, generate, preset

from .common import ArgumentParser, add_verbosity_arguments, out_dir, run


def perform(preset_name: str, users: int, seed: int, target: Path, task: str = 'spo2') -> str:
    generators = preset(preset_name, users, seed, task)

    counts = []
    for name, generator in generators.items():
        groups = generate(generator)
        write_csv(target.joinpath(f'{name}.csv'), groups)
        counts.append(f'{name}: {sum(len(r) for r in groups.values())} records of {len(groups)} users '
                      f'({generator.n_features} features)')

    return f'generated {preset_name} ({task}): ' + ', '.join(counts)


def main(argv: List[str] = sys.argv[1:]) -> int:

    parser = ArgumentParser(prog='htps generate')

    parser.add_argument('--preset', default='pair', help=f'dataset preset ({", ".join(PRESETS)})')
    parser.add_argument('--task', default='spo2', help=f'prediction task ({", ".join(TASKS)})')
    parser.add_argument('--users', type=int, default=120, help='users per dataset')
    parser.add_argument('--seed', type=int, default=0, help='master seed')
    parser.add_argument('--out', metavar='path', default=None, help='target folder (defaults to data)')
    add_verbosity_arguments(parser)

    args = parser.parse_args(argv)

    return run(lambda: perform(args.preset, args.users, args.seed, out_dir(args.out, 'data'), args.task), args)


if __name__ == '__main__':
    sys.exit(main())
