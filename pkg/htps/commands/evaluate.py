'''
Test MSE of a checkpoint on matrix files written by ``featurize --paired``.
'''
import json
import sys
from pathlib import Path
from typing import List, Optional

from htps.errors import ValidationError
from htps.experiment import evaluate
from htps.featurize import matrix_set, read_matrices
from htps.htpsmodel import model_from_checkpoint
from htps.nnengine import load_checkpoint
from htps.utils.text import write_text

from .common import ArgumentParser, add_verbosity_arguments, format_mse, run

EVALUATION_SCHEMA = 'htps.evaluation/1'


def _read(path: Path, variant: str):
    found, window, n_features, matrices = read_matrices(path)
    if found != variant:
        raise ValidationError(f'{path}: expected {variant} matrices, got {found}')
    return window, n_features, matrices


def perform(checkpoint_path: Path, dense_path: Path, sparse_path: Optional[Path], target: Optional[Path]) -> str:
    checkpoint = load_checkpoint(checkpoint_path)
    model = model_from_checkpoint(checkpoint)

    window, n_features, dense = _read(dense_path, 'dense')
    sparse = []
    if sparse_path is not None:
        sparse_shape = _read(sparse_path, 'sparse')
        if sparse_shape[:2] != (window, n_features):
            raise ValidationError(f'{sparse_path} holds {sparse_shape[0]}x{sparse_shape[1]} matrices, '
                                  f'{dense_path} holds {window}x{n_features}')
        sparse = sparse_shape[2]
    elif model.uses_sparse:
        raise ValidationError(f'a {checkpoint.model_kind} model needs --sparse matrices')

    if not dense:
        raise ValidationError(f'{dense_path} holds no matrices')

    mse = evaluate(checkpoint, matrix_set(dense, sparse))

    if target is not None:
        result = {
            'schema': EVALUATION_SCHEMA,
            'checkpoint': checkpoint.digest(),
            'model_kind': checkpoint.model_kind,
            'samples': len(dense),
            'test_mse': mse,
        }
        write_text(target.joinpath('evaluation.json'), json.dumps(result, indent=2))

    return f'{checkpoint.model_kind} test mse {format_mse(mse)} on {len(dense)} samples'


def main(argv: List[str] = sys.argv[1:]) -> int:

    parser = ArgumentParser(prog='htps evaluate')

    parser.add_argument('checkpoint', help='checkpoint file')
    parser.add_argument('--dense', metavar='path', required=True, help='dense matrix file')
    parser.add_argument('--sparse', metavar='path', default=None, help='aligned sparse matrix file')
    parser.add_argument('--out', metavar='path', default=None, help='folder for evaluation.json')
    add_verbosity_arguments(parser)

    args = parser.parse_args(argv)

    def perform_():
        return perform(
            Path(args.checkpoint),
            Path(args.dense),
            Path(args.sparse) if args.sparse else None,
            Path(args.out) if args.out else None,
        )

    return run(perform_, args)


if __name__ == '__main__':
    sys.exit(main())
