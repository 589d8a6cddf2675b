'''
Featurize a record CSV into matrix files. ``--paired`` writes the dense and
sparse matrices of the aligned sample set (same samples, same order), the
form ``evaluate`` reads.
'''
import sys
from pathlib import Path
from typing import List, Optional, Sequence

from htps.errors import ValidationError
from htps.featurize import VARIANTS, dense_featurize, featurize_pairs, sparse_featurize, write_matrices
from htps.records import DatasetSpec, ingest_csv

from .common import ArgumentParser, add_verbosity_arguments, out_dir, run


def perform(records: Path, spec: DatasetSpec, variants: Sequence[str], paired: bool, target: Path,
            users: Optional[Sequence[str]] = None) -> str:
    groups = ingest_csv(records, spec)
    selected = list(users) if users else list(groups.keys())

    for user in selected:
        if user not in groups:
            raise ValidationError(f'user {user!r} is not in {records}')

    counts = []
    if paired:
        pairs = [pair for user in selected for pair in featurize_pairs(groups[user], spec)]
        write_matrices(target.joinpath('dense.fm'), 'dense', [d for d, _ in pairs], spec)
        write_matrices(target.joinpath('sparse.fm'), 'sparse', [s for _, s in pairs], spec)
        counts.append(f'{len(pairs)} aligned pairs')
    else:
        featurizers = {'sparse': sparse_featurize, 'dense': dense_featurize}
        for variant in variants:
            matrices = [m for user in selected for m in featurizers[variant](groups[user], spec)]
            write_matrices(target.joinpath(f'{variant}.fm'), variant, matrices, spec)
            counts.append(f'{len(matrices)} {variant}')

    return f'featurized {len(selected)} users (W={spec.window}, N={spec.n_features}): ' + ', '.join(counts)


def main(argv: List[str] = sys.argv[1:]) -> int:

    parser = ArgumentParser(prog='htps featurize')

    parser.add_argument('records', help='record CSV file')
    parser.add_argument('--n-features', dest='n_features', type=int, required=True, help='number of features N')
    parser.add_argument('--window', type=int, default=3, help='window size W (defaults to 3)')
    parser.add_argument(
        '--variant',
        dest='variants',
        choices=VARIANTS,
        action='append',
        default=[],
        help='matrix variant, may be repeated (defaults to both)',
    )
    parser.add_argument('--paired', action='store_true', help='write the aligned dense/sparse sample set')
    parser.add_argument('--user', dest='users', action='append', default=[], help='only featurize this user')
    parser.add_argument('--out', metavar='path', default=None, help='target folder (defaults to matrices)')
    add_verbosity_arguments(parser)

    args = parser.parse_args(argv)

    def perform_():
        spec = DatasetSpec(args.n_features, window=args.window)
        return perform(Path(args.records), spec, args.variants or list(VARIANTS), args.paired,
                       out_dir(args.out, 'matrices'), args.users)

    return run(perform_, args)


if __name__ == '__main__':
    sys.exit(main())
