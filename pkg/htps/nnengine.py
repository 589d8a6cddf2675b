'''
A small float64 neural-network engine: dense layers with LeakyReLU in
between, MAE/MSE losses, hand-written backpropagation, Adam and a text
checkpoint format with bit-exact round trips.

Every array carries a leading batch axis internally; single vectors are
accepted and returned unbatched.
'''
import logging
from collections import OrderedDict
from dataclasses import dataclass, field
from pathlib import Path
from typing import Dict, List, Optional, Sequence, Tuple, Union

import numpy as np

from .errors import CheckpointError, ValidationError
from .utils.text import format_row, read_text, text_digest, write_text

logger = logging.getLogger(__name__)

DEFAULT_SLOPE = 0.01

CHECKPOINT_MAGIC = 'HTPSCKPT'
CHECKPOINT_VERSION = 1

Seed = Union[int, np.random.SeedSequence, np.random.Generator]


def leaky_relu(x, slope: float = DEFAULT_SLOPE):
    return np.where(x > 0, x, slope * x)


def leaky_relu_grad(x, slope: float = DEFAULT_SLOPE):
    # the kink at 0 takes the negative branch
    return np.where(x > 0, 1.0, slope)


@dataclass
class DenseLayer:
    weights: np.ndarray
    bias: np.ndarray

    @property
    def in_dim(self) -> int:
        return self.weights.shape[1]

    @property
    def out_dim(self) -> int:
        return self.weights.shape[0]

    def forward(self, x: np.ndarray) -> np.ndarray:
        return x @ self.weights.T + self.bias


@dataclass
class Mlp:
    layers: List[DenseLayer]
    slope: float = DEFAULT_SLOPE

    def __post_init__(self):
        if not self.layers:
            raise ValidationError('an mlp needs at least one layer')
        for previous, layer in zip(self.layers[:-1], self.layers[1:]):
            if previous.out_dim != layer.in_dim:
                raise ValidationError(f'layer dims do not chain: {previous.out_dim} -> {layer.in_dim}')

    @property
    def dims(self) -> List[int]:
        return [self.layers[0].in_dim] + [layer.out_dim for layer in self.layers]

    @property
    def in_dim(self) -> int:
        return self.layers[0].in_dim

    @property
    def out_dim(self) -> int:
        return self.layers[-1].out_dim

    def parameters(self) -> List[np.ndarray]:
        # order: w0, b0, w1, b1, ...
        return [p for layer in self.layers for p in (layer.weights, layer.bias)]

    def copy(self) -> 'Mlp':
        return Mlp([DenseLayer(layer.weights.copy(), layer.bias.copy()) for layer in self.layers], self.slope)


def parameter_count(parameters: Sequence[np.ndarray]) -> int:
    return int(sum(p.size for p in parameters))


@dataclass
class MlpCache:
    inputs: List[np.ndarray]
    pre_activations: List[np.ndarray]
    output: np.ndarray
    batched: bool


@dataclass
class MlpGradients:
    weights: List[np.ndarray]
    biases: List[np.ndarray]

    def flatten(self) -> List[np.ndarray]:
        return [g for pair in zip(self.weights, self.biases) for g in pair]


def forward(mlp: Mlp, x: np.ndarray) -> Tuple[np.ndarray, MlpCache]:
    x = np.asarray(x, dtype=np.float64)
    batched = x.ndim == 2
    if x.ndim not in (1, 2) or x.shape[-1] != mlp.in_dim:
        raise ValidationError(f'input of shape {x.shape} does not match input dim {mlp.in_dim}')

    a = np.atleast_2d(x)
    inputs, pre = [], []

    for i, layer in enumerate(mlp.layers):
        inputs.append(a)
        z = layer.forward(a)
        pre.append(z)
        # no activation after the last layer
        a = leaky_relu(z, mlp.slope) if i < len(mlp.layers) - 1 else z

    output = a if batched else a[0]
    return output, MlpCache(inputs, pre, output, batched)


def backward(mlp: Mlp, cache: MlpCache, output_gradient: np.ndarray) -> Tuple[MlpGradients, np.ndarray]:
    g = np.asarray(output_gradient, dtype=np.float64)
    if g.shape != cache.output.shape:
        raise ValidationError(f'output gradient of shape {g.shape} does not match output {cache.output.shape}')
    assert len(cache.inputs) == len(mlp.layers), 'cache does not belong to this network'

    g = np.atleast_2d(g)
    weights: List[np.ndarray] = [None] * len(mlp.layers)
    biases: List[np.ndarray] = [None] * len(mlp.layers)

    for i in reversed(range(len(mlp.layers))):
        layer = mlp.layers[i]
        weights[i] = g.T @ cache.inputs[i]
        biases[i] = g.sum(axis=0)
        g = g @ layer.weights
        if i > 0:
            g = g * leaky_relu_grad(cache.pre_activations[i - 1], mlp.slope)

    return MlpGradients(weights, biases), (g if cache.batched else g[0])


def _check_lengths(pred: np.ndarray, target: np.ndarray):
    if pred.shape != target.shape:
        raise ValidationError(f'prediction shape {pred.shape} does not match target shape {target.shape}')
    if pred.size == 0:
        raise ValidationError('loss over zero elements')


def mae_loss(pred, target) -> Tuple[float, np.ndarray]:
    pred, target = np.asarray(pred, dtype=np.float64), np.asarray(target, dtype=np.float64)
    _check_lengths(pred, target)
    diff = pred - target
    return float(np.mean(np.abs(diff))), np.sign(diff) / diff.size


def mse_loss(pred, target) -> Tuple[float, np.ndarray]:
    pred, target = np.asarray(pred, dtype=np.float64), np.asarray(target, dtype=np.float64)
    _check_lengths(pred, target)
    diff = pred - target
    return float(np.mean(diff * diff)), 2.0 * diff / diff.size


@dataclass
class AdamState:
    learning_rate: float = 0.01
    beta1: float = 0.9
    beta2: float = 0.999
    epsilon: float = 1e-8
    step_count: int = 0
    first_moment: List[np.ndarray] = field(default_factory=list)
    second_moment: List[np.ndarray] = field(default_factory=list)


def adam_step(state: AdamState, params: List[np.ndarray], grads: List[np.ndarray]) -> Tuple[List[np.ndarray], AdamState]:
    '''
    One bias-corrected Adam update. Parameters are updated in place and
    returned together with the advanced state.
    '''
    if len(params) != len(grads):
        raise ValidationError(f'{len(params)} parameters but {len(grads)} gradients')
    for p, g in zip(params, grads):
        if p.shape != g.shape:
            raise ValidationError(f'parameter shape {p.shape} does not match gradient shape {g.shape}')

    # moments are created lazily on the first step
    if not state.first_moment:
        state.first_moment = [np.zeros_like(p) for p in params]
        state.second_moment = [np.zeros_like(p) for p in params]
    elif len(state.first_moment) != len(params):
        raise ValidationError('optimizer state does not match the parameter list')

    state.step_count += 1
    bias1 = 1.0 - state.beta1**state.step_count
    bias2 = 1.0 - state.beta2**state.step_count

    for p, g, m, v in zip(params, grads, state.first_moment, state.second_moment):
        m *= state.beta1
        m += (1.0 - state.beta1) * g
        v *= state.beta2
        v += (1.0 - state.beta2) * (g * g)
        p -= state.learning_rate * (m / bias1) / (np.sqrt(v / bias2) + state.epsilon)

    return params, state


def as_generator(seed: Seed) -> np.random.Generator:
    if isinstance(seed, np.random.Generator):
        return seed
    return np.random.default_rng(seed)


def init_mlp(dims: Sequence[int], slope: float = DEFAULT_SLOPE, seed: Seed = 0) -> Mlp:
    if len(dims) < 2:
        raise ValidationError(f'an mlp needs at least an input and an output width, got {list(dims)}')
    if any(int(d) < 1 for d in dims):
        raise ValidationError(f'layer widths must be positive, got {list(dims)}')

    rng = as_generator(seed)
    layers = []
    for fan_in, fan_out in zip(dims[:-1], dims[1:]):
        bound = 1.0 / np.sqrt(fan_in)
        layers.append(DenseLayer(rng.uniform(-bound, bound, size=(int(fan_out), int(fan_in))), np.zeros(int(fan_out))))

    return Mlp(layers, slope)


def mlp_tensors(prefix: str, mlp: Mlp) -> 'OrderedDict[str, np.ndarray]':
    tensors = OrderedDict()
    for i, layer in enumerate(mlp.layers):
        tensors[f'{prefix}.{i}.weights'] = layer.weights
        tensors[f'{prefix}.{i}.bias'] = layer.bias
    return tensors


def mlp_from_tensors(prefix: str, tensors: Dict[str, np.ndarray], slope: float) -> Mlp:
    layers = []
    while f'{prefix}.{len(layers)}.weights' in tensors:
        i = len(layers)
        weights, bias = tensors[f'{prefix}.{i}.weights'], tensors.get(f'{prefix}.{i}.bias')
        if bias is None or weights.ndim != 2 or bias.shape != (weights.shape[0],):
            raise CheckpointError(f'shape mismatch in {prefix}.{i}')
        layers.append(DenseLayer(weights.copy(), bias.copy()))

    if not layers:
        raise CheckpointError(f'checkpoint has no tensors for {prefix}')
    try:
        return Mlp(layers, slope)
    except ValidationError as ex:
        raise CheckpointError(f'shape mismatch in {prefix}: {ex}') from ex


@dataclass
class Checkpoint:
    model_kind: str
    tensors: 'OrderedDict[str, np.ndarray]'
    metadata: Dict[str, str] = field(default_factory=dict)
    format_version: int = CHECKPOINT_VERSION

    def to_text(self) -> str:
        lines = [f'{CHECKPOINT_MAGIC} {self.format_version}', f'model_kind {self.model_kind}']

        for key in sorted(self.metadata):
            value = str(self.metadata[key])
            if '\n' in value or ' ' in key:
                raise ValidationError(f'metadata entry {key!r} cannot be stored')
            lines.append(f'meta {key} {value}')

        lines.append(f'tensors {len(self.tensors)}')
        for name, tensor in self.tensors.items():
            matrix = np.atleast_2d(tensor) if tensor.ndim < 2 else tensor
            lines.append(f'tensor {name} {" ".join(str(d) for d in tensor.shape)}')
            lines.extend(format_row(row) for row in matrix.reshape(len(matrix), -1))

        lines.append('end')
        return '\n'.join(lines) + '\n'

    def digest(self) -> str:
        return text_digest(self.to_text())

    @classmethod
    def from_text(cls, text: str, source: str = '<text>') -> 'Checkpoint':
        lines = text.splitlines()
        if not lines or not lines[0].startswith(CHECKPOINT_MAGIC + ' '):
            raise CheckpointError(f'{source}: not a checkpoint file')

        try:
            version = int(lines[0].split()[1])
        except (IndexError, ValueError) as ex:
            raise CheckpointError(f'{source}: corrupt checkpoint header') from ex
        if version != CHECKPOINT_VERSION:
            raise CheckpointError(f'{source}: checkpoint version {version} is not supported '
                                  f'(expected {CHECKPOINT_VERSION})')

        if lines[-1] != 'end':
            raise CheckpointError(f'{source}: corrupt checkpoint, file is truncated')

        cursor = 1
        metadata: Dict[str, str] = {}
        model_kind: Optional[str] = None
        tensors: 'OrderedDict[str, np.ndarray]' = OrderedDict()

        try:
            while lines[cursor].startswith(('model_kind ', 'meta ')):
                parts = lines[cursor].split(' ', 2)
                if parts[0] == 'model_kind':
                    model_kind = parts[1]
                else:
                    metadata[parts[1]] = parts[2] if len(parts) > 2 else ''
                cursor += 1

            count = int(lines[cursor].split()[1])
            cursor += 1

            for _ in range(count):
                header = lines[cursor].split()
                if header[0] != 'tensor':
                    raise CheckpointError(f'{source}:{cursor + 1}: expected a tensor block')
                name, shape = header[1], tuple(int(d) for d in header[2:])
                rows = 1 if len(shape) < 2 else shape[0]
                values = [float(v) for line in lines[cursor + 1:cursor + 1 + rows] for v in line.split()]
                if len(values) != int(np.prod(shape)):
                    raise CheckpointError(f'{source}:{cursor + 1}: tensor {name} has {len(values)} values, '
                                          f'shape {shape} needs {int(np.prod(shape))}')
                tensors[name] = np.array(values, dtype=np.float64).reshape(shape)
                cursor += 1 + rows

        except CheckpointError:
            raise
        except (IndexError, ValueError) as ex:
            raise CheckpointError(f'{source}: corrupt checkpoint near line {cursor + 1}') from ex

        if lines[cursor] != 'end' or cursor != len(lines) - 1:
            raise CheckpointError(f'{source}: corrupt checkpoint, unexpected content at line {cursor + 1}')
        if model_kind is None:
            raise CheckpointError(f'{source}: checkpoint has no model_kind')

        return cls(model_kind, tensors, metadata, version)


def save_checkpoint(checkpoint: Checkpoint, path: Path):
    write_text(Path(path), checkpoint.to_text())


def load_checkpoint(path: Path) -> Checkpoint:
    path = Path(path)
    if not path.is_file():
        raise CheckpointError(f'checkpoint {path} does not exist')
    return Checkpoint.from_text(read_text(path), str(path))
