'''
The composite prediction network and the MLP baseline.

Widths follow one pattern per subnet: ``[in, in, *hidden, out]`` where the
default hidden widths are ``(32, 256, 6)``. Decoders mirror their encoder's
hidden widths back up to W.

Variants:

- ``den``: one autoencoder per feature, the prediction net sees N embeddings
- ``dsen``: adds the sparse embedding net, the prediction net sees N + W inputs
- ``htps``: ``dsen`` whose autoencoders were initialised by transfer
'''
import logging
from collections import OrderedDict
from dataclasses import dataclass
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np

from .errors import CheckpointError, ValidationError
from .nnengine import (DEFAULT_SLOPE, Checkpoint, Mlp, MlpCache, MlpGradients, backward, forward, init_mlp,
                       mae_loss, mlp_from_tensors, mlp_tensors, mse_loss, parameter_count)

logger = logging.getLogger(__name__)

DEFAULT_HIDDEN = (32, 256, 6)

MODEL_KINDS = ('mlp', 'den', 'dsen', 'htps')

# experiment variant -> checkpoint model kind
VARIANT_KINDS = {'mlp': 'mlp', 'den': 'den', 'dsen': 'dsen', 'dsent': 'htps'}


def subnet_dims(in_dim: int, hidden: Sequence[int], out_dim: int) -> List[int]:
    return [in_dim, in_dim, *hidden, out_dim]


def decoder_dims(window: int, hidden: Sequence[int]) -> List[int]:
    return [1, *reversed(hidden), window]


@dataclass
class Autoencoder:
    encoder: Mlp
    decoder: Mlp

    def __post_init__(self):
        if self.encoder.out_dim != 1 or self.decoder.in_dim != 1:
            raise ValidationError('autoencoder embeddings must be 1-dimensional')
        if self.decoder.out_dim != self.encoder.in_dim:
            raise ValidationError(f'decoder reconstructs {self.decoder.out_dim} values, encoder reads '
                                  f'{self.encoder.in_dim}')

    @property
    def window(self) -> int:
        return self.encoder.in_dim

    def parameters(self) -> List[np.ndarray]:
        return self.encoder.parameters() + self.decoder.parameters()

    def copy(self) -> 'Autoencoder':
        return Autoencoder(self.encoder.copy(), self.decoder.copy())

    def reconstruct(self, columns: np.ndarray) -> np.ndarray:
        code, _ = forward(self.encoder, columns)
        reconstruction, _ = forward(self.decoder, code)
        return reconstruction


@dataclass
class LossBreakdown:
    total: float
    prediction_mse: float
    reconstruction_mae: List[float]


class Predictor:
    '''Common surface the training loop works against.'''

    kind: str
    window: int
    n_features: int

    @property
    def uses_sparse(self) -> bool:
        return False

    def parameters(self) -> List[np.ndarray]:
        raise NotImplementedError()

    def predict(self, dense: np.ndarray, sparse: Optional[np.ndarray] = None) -> np.ndarray:
        raise NotImplementedError()

    def loss_and_gradients(self, dense: np.ndarray, sparse: Optional[np.ndarray],
                           labels: np.ndarray) -> Tuple[LossBreakdown, List[np.ndarray]]:
        raise NotImplementedError()

    def to_checkpoint(self, metadata: Optional[Dict[str, str]] = None) -> Checkpoint:
        raise NotImplementedError()

    def copy(self) -> 'Predictor':
        raise NotImplementedError()

    def parameter_count(self) -> int:
        return parameter_count(self.parameters())


def _batch(dense: np.ndarray, window: int, n_features: int) -> np.ndarray:
    dense = np.asarray(dense, dtype=np.float64)
    if dense.ndim == 2:
        dense = dense[np.newaxis]
    if dense.ndim != 3 or dense.shape[1:] != (window, n_features):
        raise ValidationError(f'matrices of shape {dense.shape[1:]} do not match the model ({window}x{n_features})')
    return dense


@dataclass
class HtpsForwardCache:
    encoder_caches: List[MlpCache]
    decoder_caches: List[MlpCache]
    embeddings: np.ndarray
    sparse_cache: Optional[MlpCache]
    sparse_embeddings: Optional[np.ndarray]
    reconstructions: List[np.ndarray]
    prediction_cache: MlpCache
    prediction: np.ndarray


@dataclass
class HtpsGradients:
    encoders: List[MlpGradients]
    decoders: List[MlpGradients]
    sparse_embed: Optional[MlpGradients]
    prediction: MlpGradients

    def flatten(self) -> List[np.ndarray]:
        flat = []
        for encoder, decoder in zip(self.encoders, self.decoders):
            flat += encoder.flatten() + decoder.flatten()
        if self.sparse_embed is not None:
            flat += self.sparse_embed.flatten()
        return flat + self.prediction.flatten()


class HtpsModel(Predictor):

    def __init__(
        self,
        autoencoders: List[Autoencoder],
        sparse_embed: Optional[Mlp],
        prediction: Mlp,
        loss_weight_lambda: float = 1.0,
        kind: Optional[str] = None,
    ):
        if not autoencoders:
            raise ValidationError('at least one autoencoder is required')
        if loss_weight_lambda < 0:
            raise ValidationError(f'loss weight lambda must be >= 0, got {loss_weight_lambda}')

        self.autoencoders = autoencoders
        self.sparse_embed = sparse_embed
        self.prediction = prediction
        self.loss_weight_lambda = loss_weight_lambda
        self.window = autoencoders[0].window
        self.n_features = len(autoencoders)
        self.kind = kind or ('dsen' if sparse_embed is not None else 'den')

        # ensure wiring is consistent
        if any(ae.window != self.window for ae in autoencoders):
            raise ValidationError('all autoencoders must share the window size')
        expected = self.n_features + (self.window if sparse_embed is not None else 0)
        if prediction.in_dim != expected or prediction.out_dim != 1:
            raise ValidationError(f'prediction net expects {prediction.in_dim} inputs, wiring provides {expected}')
        if sparse_embed is not None and (sparse_embed.in_dim != self.n_features or sparse_embed.out_dim != 1):
            raise ValidationError('sparse embedding net must map N values to 1')
        if self.kind == 'htps' and sparse_embed is None:
            raise ValidationError('the full model needs the sparse embedding net')

    @property
    def uses_sparse(self) -> bool:
        return self.sparse_embed is not None

    def parameters(self) -> List[np.ndarray]:
        params = []
        for autoencoder in self.autoencoders:
            params += autoencoder.parameters()
        if self.sparse_embed is not None:
            params += self.sparse_embed.parameters()
        return params + self.prediction.parameters()

    def copy(self) -> 'HtpsModel':
        return HtpsModel(
            [ae.copy() for ae in self.autoencoders],
            self.sparse_embed.copy() if self.sparse_embed is not None else None,
            self.prediction.copy(),
            self.loss_weight_lambda,
            self.kind,
        )

    def predict(self, dense: np.ndarray, sparse: Optional[np.ndarray] = None) -> np.ndarray:
        return htps_forward(self, dense, sparse).prediction

    def loss_and_gradients(self, dense, sparse, labels):
        cache = htps_forward(self, dense, sparse)
        breakdown = htps_loss(self, cache, dense, labels)
        gradients = htps_backward(self, cache, dense, labels)
        return breakdown, gradients.flatten()

    def to_checkpoint(self, metadata: Optional[Dict[str, str]] = None) -> Checkpoint:
        tensors = OrderedDict()
        for j, autoencoder in enumerate(self.autoencoders):
            tensors.update(mlp_tensors(f'autoencoder.{j}.encoder', autoencoder.encoder))
            tensors.update(mlp_tensors(f'autoencoder.{j}.decoder', autoencoder.decoder))
        if self.sparse_embed is not None:
            tensors.update(mlp_tensors('sparse_embed', self.sparse_embed))
        tensors.update(mlp_tensors('prediction', self.prediction))

        meta = {
            'window': str(self.window),
            'n_features': str(self.n_features),
            'slope': repr(self.prediction.slope),
            'loss_weight_lambda': repr(self.loss_weight_lambda),
        }
        meta.update(metadata or {})
        return Checkpoint(self.kind, tensors, meta)


def build_model(
    variant: str,
    window: int,
    n_features: int,
    hidden: Sequence[int] = DEFAULT_HIDDEN,
    slope: float = DEFAULT_SLOPE,
    loss_weight_lambda: float = 1.0,
    seed: int = 0,
) -> HtpsModel:
    kind = VARIANT_KINDS.get(variant, variant)
    if kind not in ('den', 'dsen', 'htps'):
        raise ValidationError(f'{variant!r} is not an embedding-network variant')

    # fixed child seeds per subnet, independent of which subnets exist
    children = np.random.SeedSequence(seed).spawn(2 * n_features + 2)

    autoencoders = [
        Autoencoder(
            init_mlp(subnet_dims(window, hidden, 1), slope, np.random.default_rng(children[2 * j])),
            init_mlp(decoder_dims(window, hidden), slope, np.random.default_rng(children[2 * j + 1])),
        ) for j in range(n_features)
    ]

    sparse_embed = None
    prediction_in = n_features
    if kind != 'den':
        sparse_embed = init_mlp(subnet_dims(n_features, hidden, 1), slope, np.random.default_rng(children[-2]))
        prediction_in += window

    prediction = init_mlp(subnet_dims(prediction_in, hidden, 1), slope, np.random.default_rng(children[-1]))

    return HtpsModel(autoencoders, sparse_embed, prediction, loss_weight_lambda, kind)


def htps_forward(model: HtpsModel, dense: np.ndarray, sparse: Optional[np.ndarray] = None) -> HtpsForwardCache:
    dense = _batch(dense, model.window, model.n_features)
    batch = dense.shape[0]

    encoder_caches, decoder_caches, codes, reconstructions = [], [], [], []
    for j, autoencoder in enumerate(model.autoencoders):
        code, encoder_cache = forward(autoencoder.encoder, dense[:, :, j])
        reconstruction, decoder_cache = forward(autoencoder.decoder, code)
        encoder_caches.append(encoder_cache)
        decoder_caches.append(decoder_cache)
        codes.append(code)
        reconstructions.append(reconstruction)

    embeddings = np.concatenate(codes, axis=1)

    sparse_cache, sparse_embeddings = None, None
    features = embeddings
    if model.sparse_embed is not None:
        if sparse is None:
            raise ValidationError(f'{model.kind} models need sparse feature matrices')
        sparse = _batch(sparse, model.window, model.n_features)
        if sparse.shape[0] != batch:
            raise ValidationError(f'{sparse.shape[0]} sparse matrices for {batch} dense matrices')

        # every sparse row is embedded by the same shared net
        rows, sparse_cache = forward(model.sparse_embed, sparse.reshape(batch * model.window, model.n_features))
        sparse_embeddings = rows.reshape(batch, model.window)
        features = np.concatenate([embeddings, sparse_embeddings], axis=1)

    output, prediction_cache = forward(model.prediction, features)

    return HtpsForwardCache(
        encoder_caches,
        decoder_caches,
        embeddings,
        sparse_cache,
        sparse_embeddings,
        reconstructions,
        prediction_cache,
        output[:, 0],
    )


def htps_loss(model: HtpsModel, cache: HtpsForwardCache, dense: np.ndarray, labels) -> LossBreakdown:
    dense = _batch(dense, model.window, model.n_features)
    labels = np.atleast_1d(np.asarray(labels, dtype=np.float64))

    prediction_mse, _ = mse_loss(cache.prediction, labels)
    reconstruction_mae = [mae_loss(cache.reconstructions[j], dense[:, :, j])[0] for j in range(model.n_features)]

    total = prediction_mse + model.loss_weight_lambda * sum(reconstruction_mae)
    return LossBreakdown(total, prediction_mse, reconstruction_mae)


def htps_backward(
    model: HtpsModel,
    cache: HtpsForwardCache,
    dense: np.ndarray,
    labels,
    prediction_path: bool = True,
    reconstruction_path: bool = True,
) -> HtpsGradients:
    dense = _batch(dense, model.window, model.n_features)
    labels = np.atleast_1d(np.asarray(labels, dtype=np.float64))
    n = model.n_features

    # prediction loss into the prediction net, then split across embedding paths
    _, d_prediction = mse_loss(cache.prediction, labels)
    if not prediction_path:
        d_prediction = np.zeros_like(d_prediction)
    prediction_grads, d_features = backward(model.prediction, cache.prediction_cache, d_prediction[:, np.newaxis])

    d_embeddings = d_features[:, :n]

    sparse_grads = None
    if model.sparse_embed is not None:
        d_sparse = d_features[:, n:].reshape(-1, 1)
        sparse_grads, _ = backward(model.sparse_embed, cache.sparse_cache, d_sparse)

    encoder_grads, decoder_grads = [], []
    for j, autoencoder in enumerate(model.autoencoders):
        _, d_reconstruction = mae_loss(cache.reconstructions[j], dense[:, :, j])
        d_reconstruction = d_reconstruction * (model.loss_weight_lambda if reconstruction_path else 0.0)
        decoder_grad, d_code = backward(autoencoder.decoder, cache.decoder_caches[j], d_reconstruction)

        # the encoder gets both the reconstruction and the prediction signal
        encoder_grad, _ = backward(autoencoder.encoder, cache.encoder_caches[j], d_code + d_embeddings[:, j:j + 1])

        encoder_grads.append(encoder_grad)
        decoder_grads.append(decoder_grad)

    return HtpsGradients(encoder_grads, decoder_grads, sparse_grads, prediction_grads)


class MlpBaseline(Predictor):

    kind = 'mlp'

    def __init__(self, network: Mlp, window: int, n_features: int):
        if network.in_dim != window * n_features or network.out_dim != 1:
            raise ValidationError(f'baseline must map {window * n_features} inputs to 1, got '
                                  f'{network.in_dim} -> {network.out_dim}')
        self.network = network
        self.window = window
        self.n_features = n_features

    def parameters(self) -> List[np.ndarray]:
        return self.network.parameters()

    def copy(self) -> 'MlpBaseline':
        return MlpBaseline(self.network.copy(), self.window, self.n_features)

    def _flatten(self, dense: np.ndarray) -> np.ndarray:
        dense = _batch(dense, self.window, self.n_features)
        return dense.reshape(dense.shape[0], self.window * self.n_features)

    def predict(self, dense, sparse=None) -> np.ndarray:
        output, _ = forward(self.network, self._flatten(dense))
        return output[:, 0]

    def loss_and_gradients(self, dense, sparse, labels):
        labels = np.atleast_1d(np.asarray(labels, dtype=np.float64))
        output, cache = forward(self.network, self._flatten(dense))
        loss, d_output = mse_loss(output[:, 0], labels)
        grads, _ = backward(self.network, cache, d_output[:, np.newaxis])
        return LossBreakdown(loss, loss, []), grads.flatten()

    def to_checkpoint(self, metadata: Optional[Dict[str, str]] = None) -> Checkpoint:
        meta = {
            'window': str(self.window),
            'n_features': str(self.n_features),
            'slope': repr(self.network.slope),
        }
        meta.update(metadata or {})
        return Checkpoint('mlp', mlp_tensors('mlp', self.network), meta)


def build_mlp_baseline(
    window: int,
    n_features: int,
    widths: Optional[Sequence[int]] = None,
    slope: float = DEFAULT_SLOPE,
    seed: int = 0,
) -> MlpBaseline:
    flat = window * n_features
    widths = list(widths) if widths is not None else subnet_dims(flat, DEFAULT_HIDDEN, 1)

    if len(widths) < 2 or widths[0] != flat or widths[-1] != 1:
        raise ValidationError(f'baseline widths must run from {flat} to 1, got {widths}')

    return MlpBaseline(init_mlp(widths, slope, seed), window, n_features)


def mlp_parameter_count(dims: Sequence[int]) -> int:
    return int(sum(i * o + o for i, o in zip(dims[:-1], dims[1:])))


def match_hidden_widths(in_dim: int, hidden: Sequence[int], target: int) -> List[int]:
    '''
    Scale every hidden width but the bottleneck so an ``[in, in, *hidden, 1]``
    net lands as close as possible to ``target`` parameters.
    '''
    best, best_gap = list(hidden), None
    for scale in np.arange(0.1, 20.0, 0.01):
        scaled = [max(1, int(round(w * scale))) for w in hidden[:-1]] + list(hidden[-1:])
        gap = abs(mlp_parameter_count(subnet_dims(in_dim, scaled, 1)) - target)
        if best_gap is None or gap < best_gap:
            best, best_gap = scaled, gap
    return best


def model_parameter_count(variant: str, window: int, n_features: int, hidden: Sequence[int] = DEFAULT_HIDDEN) -> int:
    kind = VARIANT_KINDS.get(variant, variant)
    if kind == 'mlp':
        return mlp_parameter_count(subnet_dims(window * n_features, hidden, 1))

    count = n_features * (mlp_parameter_count(subnet_dims(window, hidden, 1)) +
                          mlp_parameter_count(decoder_dims(window, hidden)))
    prediction_in = n_features
    if kind != 'den':
        count += mlp_parameter_count(subnet_dims(n_features, hidden, 1))
        prediction_in += window
    return count + mlp_parameter_count(subnet_dims(prediction_in, hidden, 1))


def model_from_checkpoint(checkpoint: Checkpoint) -> Predictor:
    kind = checkpoint.model_kind
    if kind not in MODEL_KINDS:
        raise CheckpointError(f'unknown model kind {kind!r}')

    try:
        window = int(checkpoint.metadata['window'])
        n_features = int(checkpoint.metadata['n_features'])
        slope = float(checkpoint.metadata['slope'])
    except (KeyError, ValueError) as ex:
        raise CheckpointError(f'checkpoint metadata is incomplete: {ex}') from ex

    tensors = checkpoint.tensors

    try:
        if kind == 'mlp':
            return MlpBaseline(mlp_from_tensors('mlp', tensors, slope), window, n_features)

        autoencoders = [
            Autoencoder(
                mlp_from_tensors(f'autoencoder.{j}.encoder', tensors, slope),
                mlp_from_tensors(f'autoencoder.{j}.decoder', tensors, slope),
            ) for j in range(n_features)
        ]
        sparse_embed = mlp_from_tensors('sparse_embed', tensors, slope) if kind != 'den' else None
        model = HtpsModel(
            autoencoders,
            sparse_embed,
            mlp_from_tensors('prediction', tensors, slope),
            float(checkpoint.metadata.get('loss_weight_lambda', '1.0')),
            kind,
        )
    except CheckpointError:
        raise
    except ValidationError as ex:
        raise CheckpointError(f'shape mismatch on load: {ex}') from ex

    if model.window != window:
        raise CheckpointError(f'shape mismatch on load: window {model.window} but metadata says {window}')
    return model
