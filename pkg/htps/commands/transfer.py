'''
Match target features to a source model's autoencoders and initialise a
target model from them. The target training data is either a dense matrix
file (``--matrices``) or the first trial's training split of the configured
dataset. Writes ``plan.txt`` and ``transferred.ckpt``.
'''
import sys
from pathlib import Path
from typing import List, Optional

from htps.config import ExperimentConfig
from htps.errors import ValidationError
from htps.experiment import Normalizer, build_predictor, load_records, load_source_model, prepare_splits, trial_seeds
from htps.featurize import read_matrices
from htps.htpsmodel import HtpsModel, model_from_checkpoint
from htps.nnengine import load_checkpoint, save_checkpoint
from htps.records import DatasetSpec
from htps.transfer import apply_plan, build_plan, describe_plan, write_plan

from .common import ArgumentParser, add_experiment_arguments, add_verbosity_arguments, experiment_config, out_dir, \
    run


def perform(
    config: ExperimentConfig,
    target: Path,
    matrices: Optional[Path] = None,
    target_checkpoint: Optional[Path] = None,
) -> str:
    if not config.source_checkpoint:
        raise ValidationError('transfer requires --source-checkpoint')

    source_model, source_id = load_source_model(config.source_checkpoint)
    metadata = {'variant': 'dsent', 'transfer.source': source_id}

    if matrices is not None:
        variant, window, n_features, dense = read_matrices(matrices)
        if variant != 'dense':
            raise ValidationError(f'{matrices}: transfer scores dense matrices, got {variant}')
        spec = DatasetSpec(n_features, window=window)
        config = config.replace(window=window)
        plan = build_plan(source_model, dense, spec, source_id)
        init_seed = trial_seeds(config, 1)[1]
    else:
        config = config.replace(variant='dsent').validate()
        spec, groups = load_records(config)

        # the plan is fitted on the first trial's training users only
        split_seed, init_seed = trial_seeds(config, 1)
        splits = prepare_splits(config, spec, groups, split_seed)
        normalizer = Normalizer.fit(splits.train) if config.normalizes else None
        train = normalizer.transform(splits.train) if normalizer is not None else splits.train

        plan = build_plan(source_model, train, spec, source_id)
        metadata['split_seed'] = str(split_seed)
        if normalizer is not None:
            metadata.update(normalizer.to_metadata())

    write_plan(target.joinpath('plan.txt'), plan)

    if target_checkpoint is not None:
        model = model_from_checkpoint(load_checkpoint(target_checkpoint))
        if not isinstance(model, HtpsModel):
            raise ValidationError(f'{target_checkpoint}: only embedding-network checkpoints can receive a transfer')
    else:
        model = build_predictor(config.replace(variant='dsent'), spec, init_seed)

    transferred = apply_plan(plan, source_model, model)

    metadata['transfer.plan'] = describe_plan(plan)
    save_checkpoint(transferred.to_checkpoint(metadata), target.joinpath('transferred.ckpt'))

    return f'transfer plan {describe_plan(plan)} (source {source_id})'


def main(argv: List[str] = sys.argv[1:]) -> int:

    parser = ArgumentParser(prog='htps transfer')

    add_experiment_arguments(parser)
    parser.add_argument('--matrices', metavar='path', default=None, help='dense matrix file of target training data')
    parser.add_argument(
        '--target-checkpoint',
        metavar='path',
        default=None,
        help='den/dsen/htps checkpoint to receive the autoencoders (defaults to a fresh model)',
    )
    parser.add_argument('--out', metavar='path', default=None, help='target folder (defaults to runs/transfer)')
    add_verbosity_arguments(parser)

    args = parser.parse_args(argv)

    def perform_():
        return perform(
            experiment_config(args),
            out_dir(args.out, 'runs/transfer'),
            Path(args.matrices) if args.matrices else None,
            Path(args.target_checkpoint) if args.target_checkpoint else None,
        )

    return run(perform_, args)


if __name__ == '__main__':
    sys.exit(main())
