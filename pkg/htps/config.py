'''
Experiment configuration.

Config files are plain ``key = value`` lines; ``#`` starts a comment. Keys are
the field names of :class:`ExperimentConfig`, values are coerced by the
field's type (tuples are comma separated). Overrides given as ``key=value``
strings are applied after the file, unknown keys are errors.
'''
import dataclasses
import logging
import typing
from dataclasses import dataclass, fields
from pathlib import Path
from typing import Dict, Optional, Sequence, Tuple

from .errors import ValidationError
from .synthgen import TASKS
from .utils.text import read_text

logger = logging.getLogger(__name__)

EXPERIMENT_VARIANTS = ('mlp', 'den', 'dsen', 'dsent')


@dataclass(frozen=True)
class ExperimentConfig:
    # data: a record file or a generator preset
    records: Optional[str] = None
    preset: Optional[str] = None
    # prediction task of the presets
    task: str = 'spo2'
    users: int = 120
    window: int = 3
    n_features: Optional[int] = None
    feature_names: Tuple[str, ...] = ()
    target_name: str = 'target'
    min_target_records: int = 5
    fractions: Tuple[float, ...] = (0.6, 0.2, 0.2)

    # model and training
    variant: str = 'dsen'
    epochs: int = 100
    learning_rate: float = 0.01
    batch_size: int = 256
    loss_lambda: float = 1.0
    hidden_widths: Tuple[int, ...] = (32, 256, 6)
    slope: float = 0.01
    match_parameters: bool = True
    # none: on for presets, off for record files
    normalize: Optional[bool] = None
    source_checkpoint: Optional[str] = None

    # repetitions
    trials: int = 10
    seed: int = 0
    reshuffle_splits: bool = True

    def validate(self) -> 'ExperimentConfig':
        if self.records is None and self.preset is None:
            raise ValidationError('either records or preset must be set')
        if self.records is not None and self.preset is not None:
            raise ValidationError('records and preset are mutually exclusive')
        if self.records is not None and self.n_features is None:
            raise ValidationError('n_features is required when reading a record file')
        if self.task not in TASKS:
            raise ValidationError(f'task must be one of {", ".join(TASKS)}, got {self.task!r}')
        if self.variant not in EXPERIMENT_VARIANTS:
            raise ValidationError(f'variant must be one of {", ".join(EXPERIMENT_VARIANTS)}, got {self.variant!r}')

        # only the full variant starts from a source model
        if self.variant == 'dsent' and not self.source_checkpoint:
            raise ValidationError('variant dsent requires source_checkpoint')
        if self.variant != 'dsent' and self.source_checkpoint:
            raise ValidationError(f'source_checkpoint is only valid for variant dsent, not {self.variant}')

        for name in ('window', 'epochs', 'batch_size', 'trials', 'users'):
            if getattr(self, name) < 1:
                raise ValidationError(f'{name} must be >= 1, got {getattr(self, name)}')
        if self.learning_rate <= 0:
            raise ValidationError(f'learning_rate must be > 0, got {self.learning_rate}')
        if self.loss_lambda < 0:
            raise ValidationError(f'loss_lambda must be >= 0, got {self.loss_lambda}')
        if self.min_target_records < 0:
            raise ValidationError(f'min_target_records must be >= 0, got {self.min_target_records}')
        if len(self.fractions) != 3 or abs(sum(self.fractions) - 1.0) > 1e-9:
            raise ValidationError(f'fractions must be three values summing to 1, got {self.fractions}')
        if not self.hidden_widths or any(w < 1 for w in self.hidden_widths):
            raise ValidationError(f'hidden_widths must be positive, got {self.hidden_widths}')

        return self

    @property
    def normalizes(self) -> bool:
        return self.normalize if self.normalize is not None else self.preset is not None

    def replace(self, **changes) -> 'ExperimentConfig':
        return dataclasses.replace(self, **changes)

    def to_dict(self) -> Dict[str, object]:
        values = {}
        for f in fields(self):
            value = getattr(self, f.name)
            values[f.name] = list(value) if isinstance(value, tuple) else value
        return values


def _field_types() -> Dict[str, object]:
    return typing.get_type_hints(ExperimentConfig)


def coerce(key: str, raw: str):
    types = _field_types()
    if key not in types:
        raise ValidationError(f'unknown config key {key!r}')

    type_ = types[key]
    raw = raw.strip()

    # Optional[x] accepts none/empty
    args = typing.get_args(type_)
    if typing.get_origin(type_) is typing.Union and type(None) in args:
        if raw.lower() in ('', 'none', 'null'):
            return None
        type_ = next(a for a in args if a is not type(None))

    try:
        if typing.get_origin(type_) is tuple:
            item = typing.get_args(type_)[0]
            return tuple(_scalar(item, part) for part in raw.split(',') if part.strip())
        return _scalar(type_, raw)
    except ValueError as ex:
        raise ValidationError(f'invalid value {raw!r} for config key {key!r}: {ex}') from ex


def _scalar(type_, raw: str):
    raw = raw.strip()
    if type_ is bool:
        if raw.lower() in ('1', 'true', 'yes', 'on'):
            return True
        if raw.lower() in ('0', 'false', 'no', 'off'):
            return False
        raise ValueError('expected a boolean')
    if type_ is int:
        return int(raw)
    if type_ is float:
        return float(raw)
    return raw


def parse_assignments(lines: Sequence[str], source: str = '<overrides>') -> Dict[str, object]:
    values = {}
    for number, line in enumerate(lines, start=1):
        line = line.split('#', 1)[0].strip()
        if not line:
            continue
        if '=' not in line:
            raise ValidationError(f'{source}:{number}: expected key = value, got {line!r}')
        key, raw = [part.strip() for part in line.split('=', 1)]
        values[key] = coerce(key, raw)
    return values


def load_config(
    path: Optional[Path] = None,
    overrides: Sequence[str] = (),
    base: Optional[ExperimentConfig] = None,
) -> ExperimentConfig:
    config = base or ExperimentConfig()

    if path is not None:
        path = Path(path)
        if not path.is_file():
            raise ValidationError(f'config file {path} does not exist')
        logger.info(f'Processing {path}...')
        values = parse_assignments(read_text(path).splitlines(), str(path))

        # relative record and checkpoint paths are relative to the config file
        for key in ('records', 'source_checkpoint'):
            if values.get(key) and not Path(values[key]).is_absolute():
                values[key] = str(path.parent.joinpath(values[key]))

        config = config.replace(**values)

    if overrides:
        config = config.replace(**parse_assignments(list(overrides)))

    return config


def dump_config(config: ExperimentConfig) -> str:
    lines = []
    for key, value in config.to_dict().items():
        if isinstance(value, list):
            value = ','.join(str(v) for v in value)
        lines.append(f'{key} = {"none" if value is None else value}')
    return '\n'.join(lines) + '\n'
