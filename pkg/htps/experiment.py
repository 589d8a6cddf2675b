'''
Training, save-best model selection, repeated trials and the four-variant
ablation (mlp, den, dsen, dsent).

A report is a pure function of the config and its seeds: every trial derives
its split seed and initialisation seed from ``(seed, trial)`` and records
both, so either repetition protocol can be replayed.
'''
import json
import logging
import time
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Callable, Dict, FrozenSet, List, Optional, Sequence, Tuple, Union

import numpy as np
import pandas as pd
from tqdm import tqdm

from .config import EXPERIMENT_VARIANTS, ExperimentConfig
from .errors import TrainingDiverged, ValidationError
from .featurize import MatrixSet, featurize_users
from .htpsmodel import (HtpsModel, Predictor, build_mlp_baseline, build_model, match_hidden_widths,
                        model_from_checkpoint, model_parameter_count, subnet_dims)
from .nnengine import AdamState, Checkpoint, adam_step, load_checkpoint, save_checkpoint
from .records import DatasetSpec, UserRecords, UserSplit, filter_users, ingest_csv, split_users
from .synthgen import GeneratorConfig, generate, noisy_copy, preset
from .transfer import apply_plan, build_plan, describe_plan
from .utils.text import format_row, write_text

logger = logging.getLogger(__name__)

METRICS_SCHEMA = 'htps.metrics/1'
ABLATION_SCHEMA = 'htps.ablation/1'


@dataclass
class DataSplits:
    train: MatrixSet
    valid: MatrixSet
    test: MatrixSet
    split: UserSplit


@dataclass
class Normalizer:
    '''Per-feature and label z-scores, fitted on training users only.'''

    feature_mean: np.ndarray
    feature_std: np.ndarray
    label_mean: float
    label_std: float
    fitted_users: FrozenSet[str] = field(default_factory=frozenset)

    @classmethod
    def fit(cls, train: MatrixSet) -> 'Normalizer':
        if len(train) == 0:
            raise ValidationError('cannot fit normalization statistics on an empty training split')
        values = train.dense.reshape(-1, train.n_features)
        std = values.std(axis=0)
        label_std = float(train.labels.std())
        return cls(
            values.mean(axis=0),
            np.where(std > 0, std, 1.0),
            float(train.labels.mean()),
            label_std if label_std > 0 else 1.0,
            frozenset(train.users()),
        )

    def transform(self, data: MatrixSet) -> MatrixSet:
        dense = (data.dense - self.feature_mean) / self.feature_std
        # only populated sparse cells carry a measurement
        sparse = np.where(data.sparse_mask, (data.sparse - self.feature_mean) / self.feature_std, 0.0)
        labels = (data.labels - self.label_mean) / self.label_std
        return MatrixSet(dense, sparse, data.sparse_mask, labels, data.user_ids)

    def restore_labels(self, labels: np.ndarray) -> np.ndarray:
        return labels * self.label_std + self.label_mean

    def to_metadata(self) -> Dict[str, str]:
        return {
            'norm.feature_mean': format_row(self.feature_mean),
            'norm.feature_std': format_row(self.feature_std),
            'norm.label_mean': repr(self.label_mean),
            'norm.label_std': repr(self.label_std),
        }

    @classmethod
    def from_metadata(cls, metadata: Dict[str, str]) -> Optional['Normalizer']:
        if 'norm.feature_mean' not in metadata:
            return None
        return cls(
            np.array([float(v) for v in metadata['norm.feature_mean'].split()]),
            np.array([float(v) for v in metadata['norm.feature_std'].split()]),
            float(metadata['norm.label_mean']),
            float(metadata['norm.label_std']),
        )


@dataclass
class TrainOutcome:
    model: Predictor
    checkpoint: Checkpoint
    train_curve: List[float]
    valid_curve: List[float]
    best_epoch: int
    best_valid_mse: float


@dataclass
class TrialResult:
    trial: int
    split_seed: int
    init_seed: int
    split_hash: str
    samples: Dict[str, int] = field(default_factory=dict)
    train_curve: List[float] = field(default_factory=list)
    valid_curve: List[float] = field(default_factory=list)
    best_epoch: Optional[int] = None
    best_valid_mse: Optional[float] = None
    test_mse: Optional[float] = None
    diverged: bool = False
    message: Optional[str] = None
    transfer_plan: Optional[str] = None

    def to_dict(self) -> Dict[str, object]:
        return {
            'trial': self.trial,
            'split_seed': self.split_seed,
            'init_seed': self.init_seed,
            'split_hash': self.split_hash,
            'samples': dict(self.samples),
            'train_curve': [_finite_or_none(v) for v in self.train_curve],
            'valid_curve': [_finite_or_none(v) for v in self.valid_curve],
            'best_epoch': self.best_epoch,
            'best_valid_mse': _finite_or_none(self.best_valid_mse),
            'test_mse': _finite_or_none(self.test_mse),
            'diverged': self.diverged,
            'message': self.message,
            'transfer_plan': self.transfer_plan,
        }


def _finite_or_none(value: Optional[float]) -> Optional[float]:
    if value is None or not np.isfinite(value):
        return None
    return float(value)


@dataclass
class MetricsReport:
    variant: str
    config: ExperimentConfig
    trials: List[TrialResult] = field(default_factory=list)
    wall_clock_seconds: float = 0.0

    def test_mses(self) -> List[float]:
        return [t.test_mse for t in self.trials if not t.diverged and t.test_mse is not None]

    @property
    def n_diverged(self) -> int:
        return sum(1 for t in self.trials if t.diverged)

    @property
    def mean_test_mse(self) -> Optional[float]:
        values = self.test_mses()
        return float(np.mean(values)) if values else None

    @property
    def std_test_mse(self) -> Optional[float]:
        values = self.test_mses()
        return float(np.std(values)) if values else None

    def to_dict(self) -> Dict[str, object]:
        return {
            'schema': METRICS_SCHEMA,
            'variant': self.variant,
            'config': self.config.to_dict(),
            'trials': [t.to_dict() for t in self.trials],
            'aggregate': {
                'mean_test_mse': self.mean_test_mse,
                'std_test_mse': self.std_test_mse,
                'n_trials': len(self.trials),
                'n_diverged': self.n_diverged,
            },
        }

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2)

    def to_table(self) -> str:
        frame = pd.DataFrame([{
            'trial': t.trial,
            'best_epoch': t.best_epoch,
            'best_valid_mse': t.best_valid_mse,
            'test_mse': t.test_mse,
            'diverged': t.diverged,
            'split_hash': t.split_hash,
        } for t in self.trials])
        lines = [f'variant {self.variant}', frame.to_string(index=False), _aggregate_line(self)]
        return '\n'.join(lines) + '\n'


def _aggregate_line(report: MetricsReport) -> str:
    if report.mean_test_mse is None:
        return f'mean test mse n/a ({report.n_diverged} of {len(report.trials)} trials diverged)'
    return (f'mean test mse {report.mean_test_mse:.6g} +- {report.std_test_mse:.6g} over '
            f'{len(report.trials) - report.n_diverged} trials ({report.n_diverged} diverged)')


@dataclass
class AblationRow:
    variant: str
    parameters: int
    report: Optional[MetricsReport] = None
    notice: Optional[str] = None

    @property
    def skipped(self) -> bool:
        return self.report is None


@dataclass
class AblationReport:
    config: ExperimentConfig
    rows: List[AblationRow] = field(default_factory=list)
    wall_clock_seconds: float = 0.0

    def row(self, variant: str) -> AblationRow:
        return next(r for r in self.rows if r.variant == variant)

    def to_dict(self) -> Dict[str, object]:
        return {
            'schema': ABLATION_SCHEMA,
            'config': self.config.to_dict(),
            'rows': [{
                'variant': r.variant,
                'parameters': r.parameters,
                'mean_test_mse': r.report.mean_test_mse if r.report else None,
                'std_test_mse': r.report.std_test_mse if r.report else None,
                'n_trials': len(r.report.trials) if r.report else 0,
                'n_diverged': r.report.n_diverged if r.report else 0,
                'split_hashes': [t.split_hash for t in r.report.trials] if r.report else [],
                'skipped': r.skipped,
                'notice': r.notice,
            } for r in self.rows],
            'reports': {r.variant: r.report.to_dict() for r in self.rows if r.report},
        }

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2)

    def to_table(self) -> str:
        frame = pd.DataFrame([{
            'variant': r.variant,
            'parameters': r.parameters,
            'mean_test_mse': r.report.mean_test_mse if r.report else None,
            'std_test_mse': r.report.std_test_mse if r.report else None,
            'diverged': r.report.n_diverged if r.report else None,
            'notice': r.notice or '',
        } for r in self.rows])
        return frame.to_string(index=False) + '\n'


def trial_seeds(config: ExperimentConfig, trial: int) -> Tuple[int, int]:
    split_state, init_state = np.random.SeedSequence([config.seed, trial]).generate_state(2)
    split_seed = int(split_state) if config.reshuffle_splits else config.seed
    return split_seed, int(init_state)


def dataset_spec(config: ExperimentConfig, n_features: int, feature_names: Sequence[str] = (),
                 target_name: str = 'target') -> DatasetSpec:
    return DatasetSpec(n_features, tuple(config.feature_names or feature_names), config.target_name
                       if config.target_name != 'target' else target_name, config.window)


def generator_configs(config: ExperimentConfig) -> Dict[str, GeneratorConfig]:
    return preset(config.preset, config.users, config.seed, config.task)


def load_records(config: ExperimentConfig, role: str = 'target') -> Tuple[DatasetSpec, UserRecords]:
    '''
    Records the experiment trains on. ``role='source'`` selects the source
    half of the ``pair`` preset.
    '''
    if config.records is not None:
        if role != 'target':
            raise ValidationError('a source dataset is only available for the pair preset')
        spec = dataset_spec(config, config.n_features)
        return spec, ingest_csv(Path(config.records), spec)

    generators = generator_configs(config)
    if role == 'source':
        if 'source' not in generators:
            raise ValidationError(f'preset {config.preset!r} has no source dataset')
        generator = generators['source']
    else:
        generator = generators.get('target') or generators['records']

    spec = dataset_spec(config, generator.n_features, generator.feature_names, generator.target_name)
    return spec, generate(generator)


def prepare_splits(config: ExperimentConfig, spec: DatasetSpec, groups: UserRecords, split_seed: int) -> DataSplits:
    kept = filter_users(groups, config.min_target_records)
    logger.debug(f'{len(kept)} of {len(groups)} users have >= {config.min_target_records} target records')

    split = split_users(list(kept.keys()), config.fractions, split_seed)
    splits = DataSplits(
        featurize_users(kept, spec, split.train_users),
        featurize_users(kept, spec, split.valid_users),
        featurize_users(kept, spec, split.test_users),
        split,
    )

    for name in ('train', 'valid', 'test'):
        if len(getattr(splits, name)) == 0:
            raise ValidationError(f'the {name} split has no samples ({len(kept)} users after filtering)')

    return splits


def build_predictor(config: ExperimentConfig, spec: DatasetSpec, seed: int) -> Predictor:
    hidden = tuple(config.hidden_widths)

    if config.variant == 'mlp':
        flat = spec.window * spec.n_features
        widths = subnet_dims(flat, hidden, 1)
        if config.match_parameters:
            # comparable capacity: match the baseline to the embedding model
            target = model_parameter_count('dsen', spec.window, spec.n_features, hidden)
            widths = subnet_dims(flat, match_hidden_widths(flat, hidden, target), 1)
        return build_mlp_baseline(spec.window, spec.n_features, widths, config.slope, seed)

    return build_model(config.variant, spec.window, spec.n_features, hidden, config.slope, config.loss_lambda, seed)


def predictions(model: Predictor, data: MatrixSet, normalizer: Optional[Normalizer] = None) -> np.ndarray:
    if normalizer is not None:
        data = normalizer.transform(data)
    output = model.predict(data.dense, data.sparse if model.uses_sparse else None)
    return normalizer.restore_labels(output) if normalizer is not None else output


def validation_mse(model: Predictor, data: MatrixSet, normalizer: Optional[Normalizer] = None) -> float:
    diff = predictions(model, data, normalizer) - data.labels
    return float(np.mean(diff * diff))


def evaluate(
    model: Union[Predictor, Checkpoint],
    data: MatrixSet,
    normalizer: Optional[Normalizer] = None,
) -> float:
    '''Test MSE in raw label units.'''
    if isinstance(model, Checkpoint):
        normalizer = normalizer or Normalizer.from_metadata(model.metadata)
        model = model_from_checkpoint(model)

    if len(data) == 0:
        raise ValidationError('cannot evaluate on an empty test set')
    if (data.window, data.n_features) != (model.window, model.n_features):
        raise ValidationError(f'test matrices are {data.window}x{data.n_features}, model expects '
                              f'{model.window}x{model.n_features}')
    if model.uses_sparse and not data.sparse_mask.any():
        raise ValidationError(f'a {model.kind} model needs sparse matrices, the test set has none')

    return validation_mse(model, data, normalizer)


def initial_loss(model: Predictor, data: MatrixSet) -> float:
    breakdown, _ = model.loss_and_gradients(data.dense, data.sparse if model.uses_sparse else None, data.labels)
    return breakdown.total


EpochHook = Callable[[int, Predictor, float], None]


def train(
    config: ExperimentConfig,
    splits: DataSplits,
    model: Optional[Predictor] = None,
    seed: int = 0,
    normalizer: Optional[Normalizer] = None,
    on_epoch: Optional[EpochHook] = None,
    metadata: Optional[Dict[str, str]] = None,
) -> TrainOutcome:
    if len(splits.train) == 0 or len(splits.valid) == 0:
        raise ValidationError('training needs nonempty train and validation splits')

    spec = DatasetSpec(splits.train.n_features, window=splits.train.window)
    model = model if model is not None else build_predictor(config, spec, seed)

    train_data = normalizer.transform(splits.train) if normalizer is not None else splits.train
    sparse = train_data.sparse if model.uses_sparse else None

    rng = np.random.default_rng(seed)
    state = AdamState(learning_rate=config.learning_rate)
    params = model.parameters()

    train_curve, valid_curve = [], []
    best_model, best_epoch, best_mse = None, 0, np.inf

    with np.errstate(over='ignore', invalid='ignore'):
        for epoch in range(1, config.epochs + 1):
            order = rng.permutation(len(train_data))
            total = 0.0

            for start in range(0, len(order), config.batch_size):
                batch = order[start:start + config.batch_size]
                breakdown, grads = model.loss_and_gradients(
                    train_data.dense[batch],
                    sparse[batch] if sparse is not None else None,
                    train_data.labels[batch],
                )
                if not np.isfinite(breakdown.total):
                    raise TrainingDiverged(epoch, breakdown.total)
                adam_step(state, params, grads)
                total += breakdown.total * len(batch)

            valid = validation_mse(model, splits.valid, normalizer)
            train_curve.append(total / len(order))
            valid_curve.append(valid)

            if not np.isfinite(valid):
                raise TrainingDiverged(epoch, valid)

            # save-best on the prediction MSE only
            if valid < best_mse:
                best_model, best_epoch, best_mse = model.copy(), epoch, valid

            logger.debug(f'epoch {epoch}: train loss {train_curve[-1]:.6g}, valid mse {valid:.6g}')

            if on_epoch is not None:
                on_epoch(epoch, model, valid)

    meta = {'epoch': str(best_epoch), 'valid_mse': repr(best_mse), 'init_seed': str(seed)}
    if normalizer is not None:
        meta.update(normalizer.to_metadata())
    meta.update(metadata or {})

    return TrainOutcome(best_model, best_model.to_checkpoint(meta), train_curve, valid_curve, best_epoch, best_mse)


def load_source_model(path: Union[str, Path]) -> Tuple[HtpsModel, str]:
    checkpoint = load_checkpoint(Path(path))
    model = model_from_checkpoint(checkpoint)
    if not isinstance(model, HtpsModel):
        raise ValidationError(f'{path}: a {checkpoint.model_kind} checkpoint has no autoencoders to transfer')
    return model, checkpoint.digest()


def run_trial(
    config: ExperimentConfig,
    spec: DatasetSpec,
    groups: UserRecords,
    trial: int,
    source: Optional[Tuple[HtpsModel, str]] = None,
) -> Tuple[TrialResult, Optional[Checkpoint]]:
    split_seed, init_seed = trial_seeds(config, trial)
    splits = prepare_splits(config, spec, groups, split_seed)

    result = TrialResult(trial, split_seed, init_seed, splits.split.digest())
    result.samples = {'train': len(splits.train), 'valid': len(splits.valid), 'test': len(splits.test)}

    normalizer = Normalizer.fit(splits.train) if config.normalizes else None
    model = build_predictor(config, spec, init_seed)
    metadata = {'variant': config.variant, 'trial': str(trial), 'split_seed': str(split_seed)}

    if config.variant == 'dsent':
        source_model, source_id = source
        train_data = normalizer.transform(splits.train) if normalizer is not None else splits.train
        plan = build_plan(source_model, train_data, spec, source_id)
        model = apply_plan(plan, source_model, model)
        result.transfer_plan = describe_plan(plan)
        metadata.update({'transfer.source': source_id, 'transfer.plan': result.transfer_plan})

    try:
        outcome = train(config, splits, model, init_seed, normalizer, metadata=metadata)
    except TrainingDiverged as ex:
        logger.warning(f'{config.variant} trial {trial}: {ex}')
        result.diverged = True
        result.message = str(ex)
        return result, None

    result.train_curve = outcome.train_curve
    result.valid_curve = outcome.valid_curve
    result.best_epoch = outcome.best_epoch
    result.best_valid_mse = outcome.best_valid_mse

    # test once, with the save-best model
    result.test_mse = evaluate(outcome.model, splits.test, normalizer)
    if not np.isfinite(result.test_mse):
        result.diverged = True
        result.message = f'test mse is {result.test_mse}'

    logger.info(f'{config.variant} trial {trial}: best epoch {result.best_epoch}, '
                f'test mse {result.test_mse:.6g}')
    return result, outcome.checkpoint


def run_trials(
    config: ExperimentConfig,
    out: Optional[Path] = None,
    progress: bool = False,
    data: Optional[Tuple[DatasetSpec, UserRecords]] = None,
    source: Optional[Tuple[HtpsModel, str]] = None,
) -> MetricsReport:
    config.validate()
    started = time.perf_counter()

    spec, groups = data if data is not None else load_records(config)
    if config.variant == 'dsent' and source is None:
        source = load_source_model(config.source_checkpoint)

    report = MetricsReport(config.variant, config)
    for trial in tqdm(range(1, config.trials + 1), desc=config.variant, disable=not progress):
        result, checkpoint = run_trial(config, spec, groups, trial, source)
        report.trials.append(result)
        if out is not None and checkpoint is not None:
            save_checkpoint(checkpoint, Path(out).joinpath(f'trial-{trial:02d}.ckpt'))

    report.wall_clock_seconds = time.perf_counter() - started
    return report


def train_source_model(config: ExperimentConfig, path: Optional[Path] = None) -> Checkpoint:
    '''Train the dsen model the transfer leg starts from, on the source half of the pair preset.'''
    source_config = config.replace(variant='dsen', source_checkpoint=None)
    spec, groups = load_records(source_config, role='source')

    split_seed, init_seed = trial_seeds(source_config, 0)
    splits = prepare_splits(source_config, spec, groups, split_seed)
    normalizer = Normalizer.fit(splits.train) if config.normalizes else None

    logger.info(f'Training source model on {len(splits.train)} samples...')
    outcome = train(source_config, splits, None, init_seed, normalizer, metadata={'variant': 'dsen', 'role': 'source'})

    if path is not None:
        save_checkpoint(outcome.checkpoint, path)
    return outcome.checkpoint


def variant_parameter_count(config: ExperimentConfig, spec: DatasetSpec, variant: str) -> int:
    return build_predictor(config.replace(variant=variant), spec, 0).parameter_count()


def run_ablation(
    config: ExperimentConfig,
    out: Optional[Path] = None,
    progress: bool = False,
    variants: Sequence[str] = EXPERIMENT_VARIANTS,
) -> AblationReport:
    started = time.perf_counter()
    base = config.replace(source_checkpoint=None, variant='dsen').validate()

    source = None
    source_label = config.source_checkpoint
    if 'dsent' in variants:
        if config.source_checkpoint is not None:
            source = load_source_model(config.source_checkpoint)
        elif config.preset == 'pair':
            path = Path(out).joinpath('source.ckpt') if out is not None else None
            checkpoint = train_source_model(base, path)
            source = (model_from_checkpoint(checkpoint), checkpoint.digest())
            source_label = str(path) if path is not None else f'memory:{source[1]}'

    # every variant sees the same records, hence the same splits per trial
    data = load_records(base)
    spec = data[0]

    report = AblationReport(config)
    for variant in variants:
        parameters = variant_parameter_count(base, spec, variant)

        if variant == 'dsent' and source is None:
            notice = 'skipped: no source checkpoint'
            logger.warning(f'dsent leg {notice}')
            report.rows.append(AblationRow(variant, parameters, None, notice))
            continue

        variant_config = base.replace(variant=variant, source_checkpoint=source_label if variant == 'dsent' else None)
        variant_out = Path(out).joinpath(variant) if out is not None else None
        metrics = run_trials(variant_config, variant_out, progress, data, source if variant == 'dsent' else None)
        report.rows.append(AblationRow(variant, parameters, metrics))

    report.wall_clock_seconds = time.perf_counter() - started
    return report


def write_report(report: Union[MetricsReport, AblationReport], out: Path, name: str):
    out = Path(out)
    write_text(out.joinpath(f'{name}.json'), report.to_json())
    write_text(out.joinpath(f'{name}.txt'), report.to_table())
    # timings vary run to run, keep them out of the report files
    write_text(out.joinpath('timing.json'), json.dumps({name: report.wall_clock_seconds}, indent=2))


def _train_dsen(generator: GeneratorConfig, config: ExperimentConfig, seed: int) -> Tuple[HtpsModel, DataSplits, int]:
    trial_config = config.replace(variant='dsen', source_checkpoint=None, seed=seed)
    spec = generator.dataset_spec(config.window)
    split_seed, init_seed = trial_seeds(trial_config, 0)
    splits = prepare_splits(trial_config, spec, generate(replace(generator, seed=seed)), split_seed)
    return train(trial_config, splits, None, init_seed).model, splits, split_seed


def self_match_rate(
    generator: GeneratorConfig,
    config: ExperimentConfig,
    seeds: Sequence[int] = range(10),
) -> float:
    '''
    Share of source features whose own autoencoder wins the transfer match on
    the source's own training data, averaged over seeds.
    '''
    rates = []
    for seed in seeds:
        model, splits, _ = _train_dsen(generator, config, seed)
        plan = build_plan(model, splits.train, generator.dataset_spec(config.window))
        rates.append(np.mean([m.source_autoencoder == m.target_feature for m in plan.matches]))

    return float(np.mean(rates))


def transfer_benefit(
    source_generator: GeneratorConfig,
    target_features: Sequence[int],
    config: ExperimentConfig,
    noise: float = 0.02,
    seeds: Sequence[int] = range(10),
) -> Tuple[int, int]:
    '''
    Paired seeds: initial training loss of a transferred target model against
    the same model without transfer. Returns (wins, seeds).
    '''
    wins = 0
    for seed in seeds:
        source_model, _, split_seed = _train_dsen(source_generator, config, seed)

        target_generator = noisy_copy(source_generator, target_features, noise, seed + 10_000)
        target_spec = target_generator.dataset_spec(config.window)
        target_config = config.replace(variant='dsen', source_checkpoint=None, seed=seed)
        target = prepare_splits(target_config, target_spec, generate(target_generator), split_seed).train

        plain = build_model('dsen', config.window, target_spec.n_features, tuple(config.hidden_widths),
                            config.slope, config.loss_lambda, seed + 1)
        transferred = apply_plan(build_plan(source_model, target, target_spec), source_model, plain)

        if initial_loss(transferred, target) <= initial_loss(plain, target):
            wins += 1

    return wins, len(seeds)
