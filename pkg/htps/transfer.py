'''
Heterogeneous transfer between models trained on datasets with different
feature sets: every target feature is matched to the source autoencoder that
reconstructs its training columns with the lowest MAE, and that
autoencoder's weights initialise the target one.
'''
import logging
from dataclasses import dataclass, field
from pathlib import Path
from typing import FrozenSet, List, Optional, Sequence, Union

import numpy as np

from .errors import ValidationError
from .featurize import DenseFeatureMatrix, MatrixSet
from .htpsmodel import HtpsModel
from .records import DatasetSpec
from .utils.text import format_float, read_text, write_text

logger = logging.getLogger(__name__)


@dataclass(frozen=True)
class TransferMatch:
    # both indices are 1-based, like feature types
    target_feature: int
    source_autoencoder: int
    mae_score: float


@dataclass
class TransferPlan:
    matches: List[TransferMatch]
    source_checkpoint_id: str = ''
    target_spec: Optional[DatasetSpec] = None
    # full (N_T, N_S) score matrix, kept as the argmin certificate
    scores: Optional[np.ndarray] = None
    fitted_users: FrozenSet[str] = field(default_factory=frozenset)

    def mapping(self) -> List[int]:
        return [match.source_autoencoder for match in self.matches]

    def verify(self) -> bool:
        if self.scores is None:
            return True
        for match in self.matches:
            row = self.scores[match.target_feature - 1]
            if match.mae_score != row[match.source_autoencoder - 1] or match.mae_score > row.min():
                return False
        return True


def score_feature(source_model: HtpsModel, feature_columns: np.ndarray) -> np.ndarray:
    columns = np.asarray(feature_columns, dtype=np.float64)
    if columns.ndim == 1:
        columns = columns[np.newaxis]

    # ensure pre-conditions
    if columns.ndim != 2 or len(columns) == 0:
        raise ValidationError('at least one feature column is required for scoring')
    if columns.shape[1] != source_model.window:
        raise ValidationError(f'feature columns of length {columns.shape[1]} cannot be scored by a source model '
                              f'with window {source_model.window}; transfer requires equal window sizes')

    # mean over columns of the per-column MAE == mean over all cells
    return np.array([float(np.mean(np.abs(ae.reconstruct(columns) - columns))) for ae in source_model.autoencoders])


def _training_dense(matrices: Union[MatrixSet, Sequence[DenseFeatureMatrix], np.ndarray]) -> np.ndarray:
    if isinstance(matrices, MatrixSet):
        return matrices.dense
    if isinstance(matrices, np.ndarray):
        return matrices
    return np.stack([m.data for m in matrices]) if len(matrices) else np.zeros((0, 0, 0))


def build_plan(
    source_model: HtpsModel,
    target_training_matrices: Union[MatrixSet, Sequence[DenseFeatureMatrix], np.ndarray],
    target_spec: DatasetSpec,
    source_checkpoint_id: str = '',
) -> TransferPlan:
    dense = _training_dense(target_training_matrices)

    # ensure pre-conditions
    if len(dense) == 0:
        raise ValidationError('cannot build a transfer plan from an empty training set')
    if dense.shape[2] != target_spec.n_features:
        raise ValidationError(f'training matrices have {dense.shape[2]} features, target spec has '
                              f'{target_spec.n_features}')
    if target_spec.window != source_model.window:
        raise ValidationError(f'target window {target_spec.window} differs from source window '
                              f'{source_model.window}; transfer requires equal window sizes')

    scores = np.stack([score_feature(source_model, dense[:, :, j]) for j in range(target_spec.n_features)])

    matches = []
    for j, row in enumerate(scores):
        # argmin returns the first minimum, i.e. the lowest source index on ties
        best = int(np.argmin(row))
        matches.append(TransferMatch(j + 1, best + 1, float(row[best])))
        logger.debug(f'target feature {j + 1} ({target_spec.feature_names[j]}) -> source autoencoder {best + 1} '
                     f'(mae {row[best]:.6g})')

    fitted = frozenset(target_training_matrices.users()) if isinstance(target_training_matrices, MatrixSet) \
        else frozenset()

    return TransferPlan(matches, source_checkpoint_id, target_spec, scores, fitted)


def apply_plan(plan: TransferPlan, source_model: HtpsModel, target_model: HtpsModel) -> HtpsModel:
    # ensure pre-conditions
    if source_model.window != target_model.window:
        raise ValidationError(f'source window {source_model.window} differs from target window '
                              f'{target_model.window}')
    if len(plan.matches) != target_model.n_features:
        raise ValidationError(f'plan has {len(plan.matches)} matches for {target_model.n_features} target features')

    transferred = target_model.copy()

    for match in plan.matches:
        if not 1 <= match.target_feature <= target_model.n_features:
            raise ValidationError(f'plan names target feature {match.target_feature} outside 1..'
                                  f'{target_model.n_features}')
        if not 1 <= match.source_autoencoder <= source_model.n_features:
            raise ValidationError(f'plan names source autoencoder {match.source_autoencoder} outside 1..'
                                  f'{source_model.n_features}')

        source = source_model.autoencoders[match.source_autoencoder - 1]
        target = transferred.autoencoders[match.target_feature - 1]
        if [p.shape for p in source.parameters()] != [p.shape for p in target.parameters()]:
            raise ValidationError(f'autoencoder shapes differ between source {match.source_autoencoder} and '
                                  f'target {match.target_feature}')

        # copies only, the source stays untouched
        transferred.autoencoders[match.target_feature - 1] = source.copy()

    if transferred.sparse_embed is not None:
        transferred.kind = 'htps'
    return transferred


def write_plan(path: Path, plan: TransferPlan):
    lines = [f'{m.target_feature} {m.source_autoencoder} {format_float(m.mae_score)}' for m in plan.matches]
    write_text(Path(path), '\n'.join(lines))


def read_plan(path: Path) -> TransferPlan:
    path = Path(path)
    if not path.is_file():
        raise ValidationError(f'transfer plan {path} does not exist')

    matches = []
    for number, line in enumerate(read_text(path).splitlines(), start=1):
        if not line.strip():
            continue
        parts = line.split()
        try:
            target, source, score = int(parts[0]), int(parts[1]), float(parts[2])
        except (IndexError, ValueError) as ex:
            raise ValidationError(f'{path}:{number}: expected "target_idx source_idx mae_score"') from ex
        if len(parts) != 3:
            raise ValidationError(f'{path}:{number}: expected "target_idx source_idx mae_score"')
        matches.append(TransferMatch(target, source, score))

    if sorted(m.target_feature for m in matches) != list(range(1, len(matches) + 1)):
        raise ValidationError(f'{path}: every target feature must appear exactly once')

    return TransferPlan(matches)


def describe_plan(plan: TransferPlan) -> str:
    return ','.join(f'{m.target_feature}:{m.source_autoencoder}' for m in plan.matches)
