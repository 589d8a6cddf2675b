'''
Synthetic multi-user record streams standing in for credentialed clinical
data.

Each user carries one latent signal per feature that follows a mean-reverting
random walk. Every emitted record picks a feature type by the configured
probabilities; feature records report the current latent value (plus optional
measurement noise), target records report a weighted sum of the latent values
plus noise. Users derive their own seed from the master seed, so users can be
generated independently.
'''
import logging
from dataclasses import dataclass, replace
from typing import Dict, List, Sequence, Tuple

import numpy as np

from .errors import ValidationError
from .records import DatasetSpec, Record, UserRecords

logger = logging.getLogger(__name__)

PRESETS = ('carevue-like', 'metavision-like', 'pair')
TASKS = ('spo2', 'rr', 'bp')


@dataclass(frozen=True)
class GeneratorConfig:
    n_users: int
    n_features: int
    base_levels: Tuple[float, ...]
    walk_scales: Tuple[float, ...]
    measurement_probs: Tuple[float, ...]
    target_prob: float
    target_weights: Tuple[float, ...]
    target_bias: float = 0.0
    target_noise: float = 0.0
    measurement_noise: Tuple[float, ...] = ()
    records_per_user: Tuple[int, int] = (60, 120)
    reversion: float = 0.05
    # per-user offset of the latent levels, in units of the walk scale
    user_spread: float = 5.0
    feature_names: Tuple[str, ...] = ()
    target_name: str = 'target'
    user_prefix: str = 'u'
    seed: int = 0

    def validate(self):
        n = self.n_features
        if self.n_users < 0:
            raise ValidationError(f'n_users must be >= 0, got {self.n_users}')
        if n < 1:
            raise ValidationError(f'n_features must be >= 1, got {n}')
        for name in ('base_levels', 'walk_scales', 'measurement_probs', 'target_weights'):
            if len(getattr(self, name)) != n:
                raise ValidationError(f'{name} needs {n} entries, got {len(getattr(self, name))}')
        if self.measurement_noise and len(self.measurement_noise) != n:
            raise ValidationError(f'measurement_noise needs {n} entries, got {len(self.measurement_noise)}')

        probs = np.array((self.target_prob, *self.measurement_probs), dtype=np.float64)
        if np.any(probs <= 0) or np.any(probs > 1):
            raise ValidationError(f'probabilities must lie in (0, 1], got {probs.tolist()}')
        if abs(probs.sum() - 1.0) > 1e-9:
            raise ValidationError(f'target and measurement probabilities must sum to 1, got {probs.sum()}')

        low, high = self.records_per_user
        if low < 1 or high < low:
            raise ValidationError(f'invalid records_per_user range {self.records_per_user}')
        if not 0 <= self.reversion <= 1:
            raise ValidationError(f'reversion must lie in [0, 1], got {self.reversion}')
        if self.target_noise < 0 or any(s < 0 for s in self.walk_scales):
            raise ValidationError('noise scales must be nonnegative')

    def dataset_spec(self, window: int = 3) -> DatasetSpec:
        return DatasetSpec(self.n_features, self.feature_names, self.target_name, window)


def simulate_user(config: GeneratorConfig, user_id: str, rng: np.random.Generator) -> Tuple[List[Record], np.ndarray]:
    '''Records of one user plus the latent values at each target record.'''
    n = config.n_features
    base = np.array(config.base_levels, dtype=np.float64)
    scales = np.array(config.walk_scales, dtype=np.float64)
    weights = np.array(config.target_weights, dtype=np.float64)
    noise = np.array(config.measurement_noise or (0.0,) * n, dtype=np.float64)
    probs = np.array((config.target_prob, *config.measurement_probs), dtype=np.float64)
    probs /= probs.sum()

    # each user sits at its own level around the population base
    center = base + config.user_spread * scales * rng.standard_normal(n)
    latent = center.copy()

    count = int(rng.integers(config.records_per_user[0], config.records_per_user[1] + 1))
    records, latents = [], []

    for seq in range(count):
        latent += config.reversion * (center - latent) + scales * rng.standard_normal(n)
        feature_type = int(rng.choice(n + 1, p=probs))

        if feature_type == 0:
            value = config.target_bias + float(weights @ latent) + config.target_noise * rng.standard_normal()
            latents.append(latent.copy())
        else:
            value = latent[feature_type - 1] + noise[feature_type - 1] * rng.standard_normal()

        records.append(Record(user_id, seq, feature_type, float(value)))

    return records, np.array(latents).reshape(len(latents), n)


def generate(config: GeneratorConfig) -> UserRecords:
    config.validate()

    groups: UserRecords = {}
    width = max(4, len(str(config.n_users)))
    for index, child in enumerate(np.random.SeedSequence(config.seed).spawn(config.n_users)):
        user_id = f'{config.user_prefix}{index:0{width}d}'
        groups[user_id], _ = simulate_user(config, user_id, np.random.default_rng(child))

    logger.info(f'Generated {sum(len(r) for r in groups.values())} records for {len(groups)} users')
    return groups


# vital-sign-like signals in scaled units: base level, walk scale
_VITALS = {
    'heart_rate': (7.8, 0.04),
    'respiratory_rate': (1.8, 0.015),
    'arterial_bp_mean': (12.5, 0.05),
    'nbp_mean': (10.0, 0.05),
    'temperature': (3.7, 0.005),
}


# target name, latent weights and target noise per prediction task; rr and bp predict a signal that is
# also a feature
_TASK_TARGETS = {
    'spo2': ('spo2', {'heart_rate': -0.5, 'respiratory_rate': -1.5, 'arterial_bp_mean': 0.4, 'nbp_mean': 0.3,
                      'temperature': 3.0}, 0.05),
    'rr': ('respiratory_rate', {'respiratory_rate': 1.0}, 0.01),
    'bp': ('arterial_bp_mean', {'arterial_bp_mean': 1.0}, 0.02),
}


def task_target(task: str, feature_names: Sequence[str]) -> Tuple[str, Tuple[float, ...], float]:
    '''Target name, per-feature target weights and target noise of ``task`` over the given signals.'''
    if task not in _TASK_TARGETS:
        raise ValidationError(f'unknown task {task!r}, expected one of {", ".join(TASKS)}')
    name, terms, noise = _TASK_TARGETS[task]
    return name, tuple(terms.get(feature, 0.0) for feature in feature_names), noise


def carevue_like(n_users: int = 120, seed: int = 0, task: str = 'spo2') -> GeneratorConfig:
    names = ('heart_rate', 'respiratory_rate', 'arterial_bp_mean', 'nbp_mean', 'temperature')
    target_name, weights, noise = task_target(task, names)
    return GeneratorConfig(
        n_users=n_users,
        n_features=5,
        base_levels=tuple(_VITALS[name][0] for name in names),
        walk_scales=tuple(_VITALS[name][1] for name in names),
        measurement_probs=(0.18, 0.18, 0.14, 0.14, 0.16),
        target_prob=0.2,
        target_weights=weights,
        target_bias=-3.0 if task == 'spo2' else 0.0,
        target_noise=noise,
        feature_names=names,
        target_name=target_name,
        user_prefix='cv',
        seed=seed,
    )


def metavision_like(n_users: int = 120, seed: int = 0, task: str = 'spo2') -> GeneratorConfig:
    # same signals seen by other devices: different order, scale and frequency
    names = ('heart_rate', 'respiratory_rate', 'nbp_mean', 'arterial_bp_mean')
    scale = 1.05
    target_name, weights, noise = task_target(task, names)
    return GeneratorConfig(
        n_users=n_users,
        n_features=4,
        base_levels=tuple(scale * _VITALS[name][0] for name in names),
        walk_scales=tuple(scale * _VITALS[name][1] for name in names),
        measurement_probs=(0.25, 0.2, 0.2, 0.1),
        target_prob=0.25,
        target_weights=weights,
        target_bias=8.0 if task == 'spo2' else 0.0,
        target_noise=noise,
        measurement_noise=(0.01, 0.005, 0.025, 0.01),
        feature_names=names,
        target_name=target_name,
        user_prefix='mv',
        seed=seed,
    )


def preset(name: str, n_users: int = 120, seed: int = 0, task: str = 'spo2') -> Dict[str, GeneratorConfig]:
    '''
    Named generator configurations. Single presets yield ``{'records': ...}``,
    ``pair`` yields a ``source`` and a ``target`` dataset with independent users.
    Both halves of ``pair`` predict the same ``task``.
    '''
    if name == 'carevue-like':
        return {'records': carevue_like(n_users, seed, task)}
    if name == 'metavision-like':
        return {'records': metavision_like(n_users, seed, task)}
    if name == 'pair':
        return {
            'source': carevue_like(n_users, seed, task),
            'target': metavision_like(n_users, seed + 1, task),
        }
    raise ValidationError(f'unknown preset {name!r}, expected one of {", ".join(PRESETS)}')


def noisy_copy(config: GeneratorConfig, features: Sequence[int], noise: float, seed: int) -> GeneratorConfig:
    '''A target config whose features copy the given (1-based) source features with extra measurement noise.'''
    index = [f - 1 for f in features]
    probs = np.array([config.measurement_probs[i] for i in index])
    probs = probs / probs.sum() * (1.0 - config.target_prob)
    return replace(
        config,
        n_features=len(index),
        base_levels=tuple(config.base_levels[i] for i in index),
        walk_scales=tuple(config.walk_scales[i] for i in index),
        measurement_probs=tuple(float(p) for p in probs),
        target_weights=tuple(config.target_weights[i] for i in index),
        measurement_noise=(noise,) * len(index),
        feature_names=tuple(config.feature_names[i] for i in index) if config.feature_names else (),
        seed=seed,
    )
