"""Rating models built from the CNN text processor, the Transform layers and FM heads."""

import logging
import zlib
from abc import ABC, abstractmethod
from dataclasses import dataclass, field
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np

from .config import MODEL_KINDS
from .errors import ShapeError
from .fm import FMParams, fm_forward
from .nn.init import constant_parameter, truncated_normal_parameter, uniform_parameter
from .nn.layers import DropoutMask, concat, conv_text_forward, dropout, fc_forward, gather_rows, max_pool
from .nn.tensor import Parameter, Tensor, as_tensor
from .processors.corpus_processor import ExampleBatch
from .processors.embedding_processor import EmbeddingTable, lookup

logger = logging.getLogger(__name__)


@dataclass
class CNNTextParams:
    """Filters K (m, t, d), conv biases b (m,), projection W (m, n) and bias g (n,)."""

    filters: Parameter
    biases: Parameter
    W: Parameter
    g: Parameter

    def parameters(self) -> List[Parameter]:
        return [self.filters, self.biases, self.W, self.g]

    @classmethod
    def initialize(cls, name: str, m: int, t: int, d: int, n: int, rng: np.random.Generator,
                   dtype=np.float64) -> "CNNTextParams":
        return cls(
            filters=truncated_normal_parameter(f"{name}.filters", (m, t, d), 0.1, rng, dtype),
            biases=constant_parameter(f"{name}.biases", (m,), 0.1, dtype),
            W=truncated_normal_parameter(f"{name}.W", (m, n), 0.1, rng, dtype),
            g=constant_parameter(f"{name}.g", (n,), 0.1, dtype),
        )


def cnn_text_process(seq, params: CNNTextParams, table: EmbeddingTable, activation: str = 'tanh') -> Tensor:
    """Embedding lookup, convolution, max-pool and the fully-connected layer."""
    V = lookup(table, seq)
    features = conv_text_forward(V, params.filters, params.biases, activation)
    pooled, _ = max_pool(features)
    return fc_forward(pooled, params.W, params.g, activation)


@dataclass
class TransformParams:
    """G_1 (2n, n), G_2..G_L (n, n) and biases g_l (n,)."""

    weights: List[Parameter]
    biases: List[Parameter]

    @property
    def layers(self) -> int:
        return len(self.weights)

    def parameters(self) -> List[Parameter]:
        return [p for pair in zip(self.weights, self.biases) for p in pair]

    @classmethod
    def initialize(cls, name: str, n: int, L: int, rng: np.random.Generator, dtype=np.float64) -> "TransformParams":
        if L < 1:
            raise ValueError(f"Transform needs at least one layer, got L={L}")
        weights, biases = [], []
        for layer in range(1, L + 1):
            fan_in = 2 * n if layer == 1 else n
            weights.append(truncated_normal_parameter(f"{name}.G{layer}", (fan_in, n), 0.1, rng, dtype))
            biases.append(constant_parameter(f"{name}.g{layer}", (n,), 0.1, dtype))
        return cls(weights, biases)


def transform(z0: Tensor, params: TransformParams, activation: str = 'tanh') -> Tensor:
    """z_l = activation(z_{l-1} G_l + g_l) for l = 1..L."""
    if params.layers < 1:
        raise ValueError("Transform needs at least one layer")
    z0 = as_tensor(z0)
    if z0.shape[-1] != params.weights[0].shape[0]:
        raise ShapeError(f"Transform expects width {params.weights[0].shape[0]}, got {z0.shape[-1]}")
    z = z0
    for G, g in zip(params.weights, params.biases):
        z = fc_forward(z, G, g, activation)
    return z


@dataclass
class DeepCoNNParams:
    gamma_a: CNNTextParams
    gamma_b: CNNTextParams
    fm: FMParams

    def parameters(self) -> List[Parameter]:
        return self.gamma_a.parameters() + self.gamma_b.parameters() + self.fm.parameters()


@dataclass
class TargetParams:
    gamma_t: CNNTextParams
    fm_t: FMParams

    def parameters(self) -> List[Parameter]:
        return self.gamma_t.parameters() + self.fm_t.parameters()


@dataclass
class SourceParams:
    gamma_a: CNNTextParams
    gamma_b: CNNTextParams
    transform: TransformParams
    fm_s: FMParams

    def transform_parameters(self) -> List[Parameter]:
        return self.gamma_a.parameters() + self.gamma_b.parameters() + self.transform.parameters()

    def parameters(self) -> List[Parameter]:
        return self.transform_parameters() + self.fm_s.parameters()


@dataclass
class TransNetParams:
    source: SourceParams
    target: TargetParams

    def theta_target(self) -> List[Parameter]:
        return self.target.parameters()

    def theta_trans(self) -> List[Parameter]:
        return self.source.transform_parameters()

    def theta_source(self) -> List[Parameter]:
        return self.source.fm_s.parameters()


@dataclass
class TransNetExtParams:
    """TransNet plus id embeddings Omega_A / Omega_B and FM_SE over 3n inputs."""

    transnet: TransNetParams
    user_embeddings: Parameter
    item_embeddings: Parameter
    fm_se: FMParams
    user_index: Dict[str, int]
    item_index: Dict[str, int]
    unseen_seed: int = 0
    _unseen: Dict[Tuple[str, str], np.ndarray] = field(default_factory=dict, repr=False)

    def theta_source(self) -> List[Parameter]:
        return self.transnet.theta_source() + [self.user_embeddings, self.item_embeddings] + self.fm_se.parameters()

    def unseen_vector(self, kind: str, key: str) -> np.ndarray:
        """Random uniform(-1, 1) vector for an id absent from training, fixed per id."""
        cache_key = (kind, key)
        if cache_key not in self._unseen:
            rng = np.random.default_rng([self.unseen_seed, zlib.crc32(f"{kind}:{key}".encode('utf-8'))])
            width = self.user_embeddings.shape[1]
            self._unseen[cache_key] = rng.uniform(-1.0, 1.0, size=width).astype(self.user_embeddings.data.dtype)
            logger.debug(f"Unseen {kind} {key!r} mapped to a random vector")
        return self._unseen[cache_key]


def embed_ids(table: Parameter, index: Dict[str, int], ids: Sequence[str], unseen) -> Tensor:
    """Rows of an id table; ids missing from `index` get `unseen(id)` as a constant row."""
    rows = np.array([index.get(key, -1) for key in ids], dtype=np.int64)
    known = rows >= 0
    gathered = gather_rows(table, np.where(known, rows, 0))
    if known.all():
        return gathered
    mask = known.astype(table.data.dtype).reshape((-1,) + (1,) * (table.ndim - 1))
    fill = np.zeros((len(ids),) + table.shape[1:], dtype=table.data.dtype)
    for i, key in enumerate(ids):
        if not known[i]:
            fill[i] = unseen(key)
    return gathered * mask + fill


@dataclass
class MFParams:
    """Global mean, user/item biases and user/item latent factors."""

    mu: Parameter
    user_bias: Parameter
    item_bias: Parameter
    user_factors: Parameter
    item_factors: Parameter
    user_index: Dict[str, int]
    item_index: Dict[str, int]

    def parameters(self) -> List[Parameter]:
        return [self.mu, self.user_bias, self.item_bias, self.user_factors, self.item_factors]


def _ensure_batch(seq) -> Tuple[np.ndarray, bool]:
    ids = seq.tokens if hasattr(seq, 'tokens') else np.asarray(seq, dtype=np.int64)
    return (ids, False) if ids.ndim == 2 else (ids[None, :], True)


def deepconn_predict(text_a, text_b, params: DeepCoNNParams, table: EmbeddingTable, training: bool = False,
                     rng: Optional[np.random.Generator] = None, keep_prob: float = 0.5,
                     activation: str = 'tanh') -> Tensor:
    """FM over [dropout(Gamma_A(text_A)), dropout(Gamma_B(text_B))]."""
    x_a = cnn_text_process(text_a, params.gamma_a, table, activation)
    y_b = cnn_text_process(text_b, params.gamma_b, table, activation)
    x_a_bar, _ = dropout(x_a, keep_prob, training, rng)
    y_b_bar, _ = dropout(y_b, keep_prob, training, rng)
    return fm_forward(concat([x_a_bar, y_b_bar]), params.fm)


def transnet_target_forward(rev, params: TargetParams, table: EmbeddingTable, training: bool = False,
                            rng: Optional[np.random.Generator] = None, keep_prob: float = 0.5,
                            activation: str = 'tanh') -> Tuple[Tensor, Tensor]:
    """x_T = Gamma_T(rev), r_T = FM_T(dropout(x_T))."""
    x_t = cnn_text_process(rev, params.gamma_t, table, activation)
    x_t_bar, _ = dropout(x_t, keep_prob, training, rng)
    return x_t, fm_forward(x_t_bar, params.fm_t)


def transnet_source_forward(text_a, text_b, params: SourceParams, table: EmbeddingTable, training: bool = False,
                            rng: Optional[np.random.Generator] = None, keep_prob: float = 0.5,
                            conv_activation: str = 'tanh', transform_activation: str = 'tanh'
                            ) -> Tuple[Tensor, Tensor, Tensor, DropoutMask]:
    """z_L = Transform([Gamma_A(text_A), Gamma_B(text_B)]), z_bar_L = dropout(z_L), r_S = FM_S(z_bar_L).

    The profile texts must already exclude the joint review.
    """
    x_a = cnn_text_process(text_a, params.gamma_a, table, conv_activation)
    x_b = cnn_text_process(text_b, params.gamma_b, table, conv_activation)
    z_l = transform(concat([x_a, x_b]), params.transform, transform_activation)
    z_l_bar, mask = dropout(z_l, keep_prob, training, rng)
    return z_l, z_l_bar, fm_forward(z_l_bar, params.fm_s), mask


def ext_head(user_ids: Sequence[str], item_ids: Sequence[str], z_l_bar: Tensor, params: TransNetExtParams,
             training: bool, rng: Optional[np.random.Generator], keep_prob: float) -> Tensor:
    """FM_SE over [dropout(omega_A), dropout(omega_B), z_bar_L]."""
    omega_a = embed_ids(params.user_embeddings, params.user_index, user_ids,
                        lambda key: params.unseen_vector('user', key))
    omega_b = embed_ids(params.item_embeddings, params.item_index, item_ids,
                        lambda key: params.unseen_vector('item', key))
    omega_a_bar, _ = dropout(omega_a, keep_prob, training, rng)
    omega_b_bar, _ = dropout(omega_b, keep_prob, training, rng)
    return fm_forward(concat([omega_a_bar, omega_b_bar, z_l_bar]), params.fm_se)


def transnet_ext_forward(user_id, item_id, text_a, text_b, params: TransNetExtParams, table: EmbeddingTable,
                         training: bool = False, rng: Optional[np.random.Generator] = None, keep_prob: float = 0.5,
                         conv_activation: str = 'tanh', transform_activation: str = 'tanh') -> Tensor:
    """r_SE for one pair (string ids, 1-D texts) or a batch (id lists, 2-D texts)."""
    single = isinstance(user_id, str)
    user_ids = [user_id] if single else list(user_id)
    item_ids = [item_id] if single else list(item_id)
    text_a, _ = _ensure_batch(text_a)
    text_b, _ = _ensure_batch(text_b)
    _, z_l_bar, _, _ = transnet_source_forward(text_a, text_b, params.transnet.source, table, training, rng,
                                               keep_prob, conv_activation, transform_activation)
    out = ext_head(user_ids, item_ids, z_l_bar, params, training, rng, keep_prob)
    return Tensor(out.data[0]) if single else out


def mf_forward(user_ids: Sequence[str], item_ids: Sequence[str], params: MFParams) -> Tensor:
    """mu + b_u + b_i + <u, v> per pair; unseen ids contribute zero bias and zero factors."""
    zero = lambda key: 0.0
    b_u = embed_ids(params.user_bias, params.user_index, user_ids, zero)
    b_i = embed_ids(params.item_bias, params.item_index, item_ids, zero)
    u = embed_ids(params.user_factors, params.user_index, user_ids, zero)
    v = embed_ids(params.item_factors, params.item_index, item_ids, zero)
    return (u * v).sum(axis=-1) + b_u + b_i + params.mu


def mf_predict(user_id: str, item_id: str, params: MFParams) -> float:
    return float(mf_forward([user_id], [item_id], params).data[0])


class RatingModel(ABC):
    """Common surface of every model kind."""

    kind: str = ''
    uses_text: bool = True
    exclude_joint_in_training: bool = True

    @abstractmethod
    def parameter_groups(self) -> Dict[str, List[Parameter]]:
        """Disjoint parameter sets, each with its own optimizer state."""
        pass

    @abstractmethod
    def predict(self, batch: ExampleBatch) -> np.ndarray:
        """Eval-mode ratings for a batch."""
        pass

    def parameters(self) -> List[Parameter]:
        return [p for group in self.parameter_groups().values() for p in group]

    def state_dict(self) -> Dict[str, np.ndarray]:
        return {p.name: p.data for p in self.parameters()}

    def load_state_dict(self, state: Dict[str, np.ndarray]):
        for p in self.parameters():
            if p.name not in state:
                raise KeyError(f"state is missing parameter {p.name}")
            if state[p.name].shape != p.shape:
                raise ShapeError(f"parameter {p.name}: stored shape {state[p.name].shape}, expected {p.shape}")
            p.data[...] = state[p.name]

    def metadata(self) -> Dict[str, list]:
        return {}


class MFModel(RatingModel):
    kind = 'mf'
    uses_text = False

    def __init__(self, params: MFParams):
        self.params = params

    def parameter_groups(self):
        return {'mf': self.params.parameters()}

    def forward(self, batch: ExampleBatch) -> Tensor:
        return mf_forward(batch.user_ids, batch.item_ids, self.params)

    def predict(self, batch):
        return self.forward(batch).data.copy()

    def metadata(self):
        return {'user_ids': _ordered_keys(self.params.user_index), 'item_ids': _ordered_keys(self.params.item_index)}


class DeepCoNNModel(RatingModel):
    """DeepCoNN, or DeepCoNN-rev_AB when the joint review is excluded from training profiles."""

    def __init__(self, params: DeepCoNNParams, table: EmbeddingTable, keep_prob: float = 0.5,
                 activation: str = 'tanh', include_joint_review: bool = True):
        self.params = params
        self.table = table
        self.keep_prob = keep_prob
        self.activation = activation
        self.exclude_joint_in_training = not include_joint_review
        self.kind = 'deepconn' if include_joint_review else 'deepconn-revab'

    def parameter_groups(self):
        return {'deepconn': self.params.parameters()}

    def forward(self, batch: ExampleBatch, training: bool, rng=None) -> Tensor:
        return deepconn_predict(batch.text_a, batch.text_b, self.params, self.table, training, rng,
                                self.keep_prob, self.activation)

    def predict(self, batch):
        return self.forward(batch, training=False).data.copy()


class TransNetModel(RatingModel):
    kind = 'transnet'

    def __init__(self, params: TransNetParams, table: EmbeddingTable, keep_prob: float = 0.5,
                 conv_activation: str = 'tanh', transform_activation: str = 'tanh'):
        self.params = params
        self.table = table
        self.keep_prob = keep_prob
        self.conv_activation = conv_activation
        self.transform_activation = transform_activation

    def parameter_groups(self):
        return {'target': self.params.theta_target(), 'trans': self.params.theta_trans(),
                'source': self.params.theta_source()}

    def target_forward(self, review: np.ndarray, training: bool, rng=None) -> Tuple[Tensor, Tensor]:
        return transnet_target_forward(review, self.params.target, self.table, training, rng,
                                       self.keep_prob, self.conv_activation)

    def source_forward(self, batch: ExampleBatch, training: bool, rng=None):
        return transnet_source_forward(batch.text_a, batch.text_b, self.params.source, self.table, training, rng,
                                       self.keep_prob, self.conv_activation, self.transform_activation)

    def encode_source(self, batch: ExampleBatch) -> np.ndarray:
        """Eval-mode z_L, the approximation of the joint review's representation."""
        z_l, _, _, _ = self.source_forward(batch, training=False)
        return z_l.data.copy()

    def encode_review(self, review: np.ndarray) -> np.ndarray:
        x_t, _ = self.target_forward(review, training=False)
        return x_t.data.copy()

    def predict_target(self, batch: ExampleBatch) -> np.ndarray:
        _, r_t = self.target_forward(batch.review, training=False)
        return r_t.data.copy()

    def predict(self, batch):
        _, _, r_s, _ = self.source_forward(batch, training=False)
        return r_s.data.copy()


class TransNetExtModel(TransNetModel):
    kind = 'transnet-ext'

    def __init__(self, params: TransNetExtParams, table: EmbeddingTable, keep_prob: float = 0.5,
                 conv_activation: str = 'tanh', transform_activation: str = 'tanh'):
        super().__init__(params.transnet, table, keep_prob, conv_activation, transform_activation)
        self.ext = params

    def parameter_groups(self):
        groups = super().parameter_groups()
        groups['source'] = self.ext.theta_source()
        return groups

    def ext_forward(self, batch: ExampleBatch, z_l_bar: Tensor, training: bool, rng=None) -> Tensor:
        return ext_head(batch.user_ids, batch.item_ids, z_l_bar, self.ext, training, rng, self.keep_prob)

    def predict(self, batch):
        _, z_l_bar, _, _ = self.source_forward(batch, training=False)
        return self.ext_forward(batch, z_l_bar, training=False).data.copy()

    def metadata(self):
        return {'user_ids': _ordered_keys(self.ext.user_index), 'item_ids': _ordered_keys(self.ext.item_index)}


def _ordered_keys(index: Dict[str, int]) -> List[str]:
    return [key for key, _ in sorted(index.items(), key=lambda kv: kv[1])]


class ModelFactory:
    """Factory for creating models of every kind."""

    @staticmethod
    def create_model(kind: str, table: Optional[EmbeddingTable], rng: np.random.Generator, *,
                     m: int, t: int, n: int, k: int, layers: int, keep_prob: float = 0.5,
                     conv_activation: str = 'tanh', transform_activation: str = 'tanh',
                     user_ids: Sequence[str] = (), item_ids: Sequence[str] = (), mean_rating: float = 0.0,
                     unseen_seed: int = 0, dtype=np.float64) -> RatingModel:
        """Create a freshly initialised model of the given kind."""
        if kind not in MODEL_KINDS:
            raise ValueError(f"Unsupported model kind: {kind}")
        user_index = {key: i for i, key in enumerate(user_ids)}
        item_index = {key: i for i, key in enumerate(item_ids)}

        if kind == 'mf':
            return MFModel(MFParams(
                mu=Parameter(mean_rating, name='mf.mu', dtype=dtype),
                user_bias=constant_parameter('mf.user_bias', (len(user_index),), 0.0, dtype),
                item_bias=constant_parameter('mf.item_bias', (len(item_index),), 0.0, dtype),
                user_factors=truncated_normal_parameter('mf.user_factors', (len(user_index), n), 0.1, rng, dtype),
                item_factors=truncated_normal_parameter('mf.item_factors', (len(item_index), n), 0.1, rng, dtype),
                user_index=user_index,
                item_index=item_index,
            ))

        d = table.dim
        if kind in ('deepconn', 'deepconn-revab'):
            params = DeepCoNNParams(
                gamma_a=CNNTextParams.initialize('gamma_a', m, t, d, n, rng, dtype),
                gamma_b=CNNTextParams.initialize('gamma_b', m, t, d, n, rng, dtype),
                fm=FMParams.initialize('fm', 2 * n, k, rng, dtype),
            )
            return DeepCoNNModel(params, table, keep_prob, conv_activation,
                                 include_joint_review=(kind == 'deepconn'))

        transnet = TransNetParams(
            source=SourceParams(
                gamma_a=CNNTextParams.initialize('gamma_a', m, t, d, n, rng, dtype),
                gamma_b=CNNTextParams.initialize('gamma_b', m, t, d, n, rng, dtype),
                transform=TransformParams.initialize('transform', n, layers, rng, dtype),
                fm_s=FMParams.initialize('fm_s', n, k, rng, dtype),
            ),
            target=TargetParams(
                gamma_t=CNNTextParams.initialize('gamma_t', m, t, d, n, rng, dtype),
                fm_t=FMParams.initialize('fm_t', n, k, rng, dtype),
            ),
        )
        if kind == 'transnet':
            return TransNetModel(transnet, table, keep_prob, conv_activation, transform_activation)

        ext = TransNetExtParams(
            transnet=transnet,
            user_embeddings=uniform_parameter('omega_a', (len(user_index), n), -1.0, 1.0, rng, dtype),
            item_embeddings=uniform_parameter('omega_b', (len(item_index), n), -1.0, 1.0, rng, dtype),
            fm_se=FMParams.initialize('fm_se', 3 * n, k, rng, dtype),
            user_index=user_index,
            item_index=item_index,
            unseen_seed=unseen_seed,
        )
        return TransNetExtModel(ext, table, keep_prob, conv_activation, transform_activation)
