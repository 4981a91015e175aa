"""
Trainable architectures and baselines

Feature layout of the CNN encoder output h: for each window size in
ascending order, the pooled value of filters 0..m_l-1, i.e.
h = [conv3_0 .. conv3_{m-1}, conv4_0 .., conv5_0 ..].

All neural heads and the Enet regressor work on standardized coordinates
(z-scores of the training locations); every ``predict_*`` method returns
degrees.
"""

from dataclasses import dataclass, field, asdict
from pathlib import Path
from typing import Dict, List, Optional, Sequence, Tuple, Union
import json
import zipfile

import numpy as np
from loguru import logger

from .data_models import GeoPoint, ModelKind
from .diffcore import Graph
from .exceptions import ConfigError, DataError, NumericalError
from .mixture import PARAMS_PER_COMPONENT, Gmm2D, convert_params_batch, mode_approx

CHECKPOINT_FORMAT = 1
EMBEDDING_INIT = 0.05


def glorot_uniform(rng: np.random.Generator, fan_out: int, fan_in: int) -> np.ndarray:
    limit = np.sqrt(6.0 / (fan_in + fan_out))
    return rng.uniform(-limit, limit, size=(fan_out, fan_in))


@dataclass
class Standardizer:
    """Per-axis z-score of (lat, lon)"""
    mean: np.ndarray
    std: np.ndarray

    @classmethod
    def fit(cls, points: np.ndarray) -> "Standardizer":
        points = np.asarray(points, dtype=np.float64)
        if points.ndim != 2 or points.shape[0] == 0:
            raise DataError("cannot standardize an empty set of locations")
        std = points.std(axis=0)
        std[std == 0] = 1.0
        return cls(points.mean(axis=0), std)

    @classmethod
    def identity(cls) -> "Standardizer":
        return cls(np.zeros(2), np.ones(2))

    def transform(self, points: np.ndarray) -> np.ndarray:
        return (np.asarray(points, dtype=np.float64) - self.mean) / self.std

    def inverse(self, points: np.ndarray) -> np.ndarray:
        return np.asarray(points, dtype=np.float64) * self.std + self.mean

    def to_degrees(self, gmm: Gmm2D) -> Gmm2D:
        return gmm.affine(self.std, self.mean)

    def log_jacobian(self) -> float:
        """ln |d(standardized)/d(degrees)|, added to degree-space log densities"""
        return -float(np.log(self.std).sum())

    def to_dict(self) -> dict:
        return {'mean': self.mean.tolist(), 'std': self.std.tolist()}

    @classmethod
    def from_dict(cls, data: dict) -> "Standardizer":
        return cls(np.asarray(data['mean'], float), np.asarray(data['std'], float))


@dataclass
class ModelHyperParams:
    vocab_size: int
    embed_dim: int = 32
    windows: Tuple[int, ...] = (3, 4, 5)
    filters: int = 16
    hidden: int = 64
    mixtures: int = 5
    dropout: float = 0.0

    def to_dict(self) -> dict:
        data = asdict(self)
        data['windows'] = list(self.windows)
        return data

    @classmethod
    def from_dict(cls, data: dict) -> "ModelHyperParams":
        data = dict(data)
        data['windows'] = tuple(data['windows'])
        return cls(**data)


# ----- encoders and heads ---------------------------------------------------

@dataclass
class CnnEncoder:
    """Embedding table plus one filter bank per window size"""
    embedding: np.ndarray                                    # (|V|, d)
    banks: Dict[int, Tuple[np.ndarray, np.ndarray]]         # window -> (W_f (m, l*d), b_f (m,))
    dropout: float = 0.0

    @classmethod
    def init(cls, rng: np.random.Generator, vocab_size: int, embed_dim: int,
             windows: Sequence[int], filters: int, dropout: float) -> "CnnEncoder":
        embedding = rng.uniform(-EMBEDDING_INIT, EMBEDDING_INIT, size=(vocab_size, embed_dim))
        banks = {
            w: (glorot_uniform(rng, filters, w * embed_dim), np.zeros(filters))
            for w in sorted(windows)
        }
        return cls(embedding, banks, dropout)

    @property
    def width(self) -> int:
        return sum(weight.shape[0] for weight, _ in self.banks.values())

    @property
    def min_length(self) -> int:
        return max(self.banks)

    def tensors(self) -> Dict[str, np.ndarray]:
        out = {'embedding': self.embedding}
        for w, (weight, bias) in self.banks.items():
            out[f'conv{w}.weight'] = weight
            out[f'conv{w}.bias'] = bias
        return out


@dataclass
class MlpEncoder:
    """Mean of word embeddings followed by one ReLU hidden layer"""
    embedding: np.ndarray      # (|V|, d)
    hidden_weight: np.ndarray  # (H, d)
    hidden_bias: np.ndarray    # (H,)
    dropout: float = 0.0

    @classmethod
    def init(cls, rng: np.random.Generator, vocab_size: int, embed_dim: int,
             hidden: int, dropout: float) -> "MlpEncoder":
        embedding = rng.uniform(-EMBEDDING_INIT, EMBEDDING_INIT, size=(vocab_size, embed_dim))
        return cls(embedding, glorot_uniform(rng, hidden, embed_dim), np.zeros(hidden), dropout)

    @property
    def width(self) -> int:
        return self.hidden_weight.shape[0]

    @property
    def min_length(self) -> int:
        return 1

    def tensors(self) -> Dict[str, np.ndarray]:
        return {'embedding': self.embedding, 'hidden.weight': self.hidden_weight,
                'hidden.bias': self.hidden_bias}


@dataclass
class RegressionHead:
    """y_hat = W_r h + b_r with q = 2"""
    weight: np.ndarray  # (2, m)
    bias: np.ndarray    # (2,)
    prefix: str = 'regression'

    @classmethod
    def init(cls, rng: np.random.Generator, width: int) -> "RegressionHead":
        return cls(glorot_uniform(rng, 2, width), np.zeros(2))

    def tensors(self) -> Dict[str, np.ndarray]:
        return {f'{self.prefix}.weight': self.weight, f'{self.prefix}.bias': self.bias}


@dataclass
class MdnHead:
    """theta = W_p h + b_p with 6 raw slots per component"""
    weight: np.ndarray  # (6K, m)
    bias: np.ndarray    # (6K,)
    prefix: str = 'mdn'

    @classmethod
    def init(cls, rng: np.random.Generator, width: int, mixtures: int) -> "MdnHead":
        return cls(glorot_uniform(rng, PARAMS_PER_COMPONENT * mixtures, width),
                   np.zeros(PARAMS_PER_COMPONENT * mixtures))

    @property
    def mixtures(self) -> int:
        return self.bias.shape[0] // PARAMS_PER_COMPONENT

    def tensors(self) -> Dict[str, np.ndarray]:
        return {f'{self.prefix}.weight': self.weight, f'{self.prefix}.bias': self.bias}


def _register(g: Graph, tensors: Dict[str, np.ndarray]) -> Dict[str, int]:
    return {name: g.parameter(name, array) for name, array in tensors.items()}


def embed_concat(g: Graph, ids: np.ndarray, embedding: int) -> int:
    """Sentence vector x_1 ⊕ ... ⊕ x_L, shape (B, L*d); position i fills [i*d, (i+1)*d)"""
    ids = np.atleast_2d(np.asarray(ids, dtype=np.int64))
    rows = g.gather(embedding, ids)
    batch, length = ids.shape
    return g.reshape(rows, (batch, length * g.shape(embedding)[1]))


def encode_features(g: Graph, ids: np.ndarray, encoder: CnnEncoder, training: bool = False,
                    rng: Optional[np.random.Generator] = None) -> int:
    """Slide every filter bank over the sentence, ReLU, 1-max pool, concatenate, dropout"""
    ids = np.atleast_2d(np.asarray(ids, dtype=np.int64))
    batch, length = ids.shape
    if length < encoder.min_length:
        raise ConfigError(f"sequence length {length} below the largest window {encoder.min_length}")
    nodes = _register(g, encoder.tensors())
    dim = encoder.embedding.shape[1]
    sentence = g.reshape(embed_concat(g, ids, nodes['embedding']), (batch, length, dim))

    pooled = []
    for w in encoder.banks:
        windows = g.windows(sentence, w)                                   # (B, L-w+1, w*d)
        responses = g.relu(g.linear(windows, nodes[f'conv{w}.weight'], nodes[f'conv{w}.bias']))
        pooled.append(g.max(responses, axis=1))                            # (B, m_w)
    h = pooled[0] if len(pooled) == 1 else g.concat(pooled, axis=-1)
    return g.dropout(h, encoder.dropout, rng, training)


def mean_embedding_features(g: Graph, ids: np.ndarray, lengths: np.ndarray, encoder: MlpEncoder,
                            training: bool = False, rng: Optional[np.random.Generator] = None) -> int:
    """ReLU(W mean(x_1..x_n) + b); an empty tweet averages the PAD row at position 0"""
    ids = np.atleast_2d(np.asarray(ids, dtype=np.int64))
    lengths = np.atleast_1d(np.asarray(lengths, dtype=np.int64))
    nodes = _register(g, encoder.tensors())
    effective = np.maximum(lengths, 1)
    mask = (np.arange(ids.shape[1])[None, :] < effective[:, None]).astype(np.float64)

    rows = g.gather(nodes['embedding'], ids)                               # (B, L, d)
    summed = g.sum(g.mul(rows, g.constant(mask[:, :, None])), axis=1)      # (B, d)
    mean = g.mul(summed, g.constant((1.0 / effective)[:, None]))
    hidden = g.relu(g.linear(mean, nodes['hidden.weight'], nodes['hidden.bias']))
    return g.dropout(hidden, encoder.dropout, rng, training)


def regression_forward(g: Graph, h: int, head: RegressionHead) -> int:
    nodes = _register(g, head.tensors())
    return g.linear(h, nodes[f'{head.prefix}.weight'], nodes[f'{head.prefix}.bias'])


def mdn_forward(g: Graph, h: int, head: MdnHead) -> int:
    """Raw theta = theta_1 ⊕ ... ⊕ theta_K, six slots per component"""
    nodes = _register(g, head.tensors())
    return g.linear(h, nodes[f'{head.prefix}.weight'], nodes[f'{head.prefix}.bias'])


def mlp_forward(g: Graph, ids: np.ndarray, lengths: np.ndarray, encoder: MlpEncoder,
                head: RegressionHead, training: bool = False,
                rng: Optional[np.random.Generator] = None) -> int:
    return regression_forward(g, mean_embedding_features(g, ids, lengths, encoder, training, rng), head)


# ----- model wrappers -------------------------------------------------------

class GeoModel:
    """Common prediction surface of every comparison model"""

    kind: ModelKind
    standardizer: Standardizer

    @property
    def is_density(self) -> bool:
        return self.kind.is_density

    def predict_points(self, ids: np.ndarray, lengths: np.ndarray) -> np.ndarray:
        """Point predictions in degrees, shape (N, 2)"""
        raise NotImplementedError

    def predict_mixtures(self, ids: np.ndarray, lengths: np.ndarray) -> List[Gmm2D]:
        raise DataError(f"{self.kind.value} is a regression model and has no density output")

    def tensors(self) -> Dict[str, np.ndarray]:
        raise NotImplementedError

    def hyper_dict(self) -> dict:
        return {}


class NeuralGeoModel(GeoModel):
    """CNN or mean-embedding encoder with a regression or mixture head"""

    def __init__(self, kind: ModelKind, hyper: ModelHyperParams,
                 encoder: Union[CnnEncoder, MlpEncoder], head: Union[RegressionHead, MdnHead],
                 standardizer: Optional[Standardizer] = None):
        self.kind = kind
        self.hyper = hyper
        self.encoder = encoder
        self.head = head
        self.standardizer = standardizer or Standardizer.identity()

    @classmethod
    def build(cls, kind: ModelKind, hyper: ModelHyperParams, seed: int = 0,
              standardizer: Optional[Standardizer] = None) -> "NeuralGeoModel":
        if not kind.is_neural:
            raise ConfigError(f"{kind.value} is not a neural model")
        rng = np.random.default_rng(seed)
        if kind.encoder == 'cnn':
            encoder = CnnEncoder.init(rng, hyper.vocab_size, hyper.embed_dim, hyper.windows,
                                      hyper.filters, hyper.dropout)
        else:
            encoder = MlpEncoder.init(rng, hyper.vocab_size, hyper.embed_dim, hyper.hidden,
                                      hyper.dropout)
        if kind.is_density:
            head = MdnHead.init(rng, encoder.width, hyper.mixtures)
        else:
            head = RegressionHead.init(rng, encoder.width)
        return cls(kind, hyper, encoder, head, standardizer)

    @property
    def min_length(self) -> int:
        return self.encoder.min_length

    def tensors(self) -> Dict[str, np.ndarray]:
        out = dict(self.encoder.tensors())
        out.update(self.head.tensors())
        return out

    def hyper_dict(self) -> dict:
        return self.hyper.to_dict()

    def forward(self, g: Graph, ids: np.ndarray, lengths: np.ndarray, training: bool = False,
                rng: Optional[np.random.Generator] = None) -> int:
        """Output node: y_hat (B, 2) for regression heads, theta (B, 6K) for mixture heads"""
        if isinstance(self.encoder, CnnEncoder):
            h = encode_features(g, ids, self.encoder, training, rng)
        else:
            h = mean_embedding_features(g, ids, lengths, self.encoder, training, rng)
        if isinstance(self.head, MdnHead):
            return mdn_forward(g, h, self.head)
        return regression_forward(g, h, self.head)

    def predict_raw(self, ids: np.ndarray, lengths: np.ndarray, batch_size: int = 512) -> np.ndarray:
        """Head output in standardized space, evaluation mode"""
        ids = np.atleast_2d(np.asarray(ids, dtype=np.int64))
        lengths = np.atleast_1d(np.asarray(lengths, dtype=np.int64))
        chunks = []
        for start in range(0, ids.shape[0], batch_size):
            g = Graph()
            out = self.forward(g, ids[start:start + batch_size], lengths[start:start + batch_size])
            chunks.append(g.value(out))
        width = PARAMS_PER_COMPONENT * self.head.mixtures if self.is_density else 2
        return np.concatenate(chunks, axis=0) if chunks else np.empty((0, width))

    def mixtures_from_raw(self, raw: np.ndarray) -> List[Gmm2D]:
        return [self.standardizer.to_degrees(m) for m in convert_params_batch(raw)]

    def points_from_raw(self, raw: np.ndarray) -> np.ndarray:
        """Degree-space points from head output: mode approximation or un-standardized y_hat"""
        if self.is_density:
            modes = [mode_approx(m).point for m in self.mixtures_from_raw(raw)]
            return np.array(modes).reshape(-1, 2)
        return self.standardizer.inverse(raw)

    def predict_mixtures(self, ids: np.ndarray, lengths: np.ndarray) -> List[Gmm2D]:
        """Predicted densities over (lat, lon) in degrees"""
        if not self.is_density:
            return super().predict_mixtures(ids, lengths)
        return self.mixtures_from_raw(self.predict_raw(ids, lengths))

    def predict_points(self, ids: np.ndarray, lengths: np.ndarray) -> np.ndarray:
        return self.points_from_raw(self.predict_raw(ids, lengths))


def bag_of_words(ids: np.ndarray, lengths: np.ndarray, vocab_size: int) -> np.ndarray:
    """Token counts over the first true_length positions, shape (N, |V|)"""
    ids = np.atleast_2d(np.asarray(ids, dtype=np.int64))
    lengths = np.atleast_1d(np.asarray(lengths, dtype=np.int64))
    counts = np.zeros((ids.shape[0], vocab_size))
    mask = np.arange(ids.shape[1])[None, :] < lengths[:, None]
    rows = np.repeat(np.arange(ids.shape[0]), ids.shape[1]).reshape(ids.shape)
    np.add.at(counts, (rows[mask], ids[mask]), 1.0)
    return counts


def soft_threshold(x, threshold: float):
    """Proximal operator of threshold * |x|"""
    return np.sign(x) * np.maximum(np.abs(x) - threshold, 0.0)


@dataclass
class EnetFit:
    weight: np.ndarray      # (q, p)
    intercept: np.ndarray   # (q,)
    objective: List[float] = field(default_factory=list)


def enet_objective(x: np.ndarray, y: np.ndarray, weight: np.ndarray, intercept: np.ndarray,
                   l1: float, l2: float) -> float:
    residual = y - x @ weight.T - intercept
    n = x.shape[0]
    return float((residual ** 2).sum() / (2.0 * n) + l1 * np.abs(weight).sum() + l2 * (weight ** 2).sum())


def enet_solve(x: np.ndarray, y: np.ndarray, l1: float, l2: float, steps: int = 500,
               tol: float = 1e-12) -> EnetFit:
    """Proximal gradient (ISTA) on 1/(2n)||y - Xw - b||^2 + l1 |w|_1 + l2 |w|_2^2

    The intercept is unpenalized and eliminated by centering.
    """
    if l1 < 0 or l2 < 0:
        raise ConfigError(f"elastic-net penalties must be non-negative (l1={l1}, l2={l2})")
    x = np.asarray(x, dtype=np.float64)
    y = np.asarray(y, dtype=np.float64)
    n, p = x.shape
    x_mean, y_mean = x.mean(axis=0), y.mean(axis=0)
    xc, yc = x - x_mean, y - y_mean
    weight = np.zeros((y.shape[1], p))

    lipschitz = np.linalg.norm(xc, 2) ** 2 / n + 2.0 * l2 if p else 0.0
    fit = EnetFit(weight, y_mean - weight @ x_mean)
    if lipschitz <= 0.0:
        fit.objective.append(enet_objective(x, y, weight, fit.intercept, l1, l2))
        return fit
    step = 1.0 / lipschitz

    previous = enet_objective(xc, yc, weight, np.zeros(y.shape[1]), l1, l2)
    fit.objective.append(previous)
    for iteration in range(steps):
        residual = yc - xc @ weight.T
        gradient = -(residual.T @ xc) / n + 2.0 * l2 * weight
        updated = soft_threshold(weight - step * gradient, step * l1)
        current = enet_objective(xc, yc, updated, np.zeros(y.shape[1]), l1, l2)
        if not np.isfinite(current):
            raise NumericalError(
                f"elastic net diverged at step {iteration} (step size {step:.3e}, Lipschitz {lipschitz:.3e})")
        if current > previous + 1e-12 * max(1.0, abs(previous)):
            logger.warning(f"Elastic net objective rose at step {iteration}: {previous:.6g} -> {current:.6g}")
        converged = np.max(np.abs(updated - weight)) < tol
        weight, previous = updated, current
        fit.objective.append(current)
        if converged:
            break

    fit.weight = weight
    fit.intercept = y_mean - weight @ x_mean
    return fit


class EnetModel(GeoModel):
    """Linear regression on bag-of-words counts with elastic-net penalties"""

    kind = ModelKind.ENET

    def __init__(self, weight: np.ndarray, bias: np.ndarray, l1: float, l2: float,
                 standardizer: Optional[Standardizer] = None):
        self.weight = weight
        self.bias = bias
        self.l1 = l1
        self.l2 = l2
        self.standardizer = standardizer or Standardizer.identity()

    @classmethod
    def fit(cls, ids: np.ndarray, lengths: np.ndarray, points: np.ndarray, vocab_size: int,
            l1: float, l2: float, steps: int = 500) -> "EnetModel":
        standardizer = Standardizer.fit(points)
        features = bag_of_words(ids, lengths, vocab_size)
        result = enet_solve(features, standardizer.transform(points), l1, l2, steps)
        nonzero = int(np.count_nonzero(result.weight))
        logger.info(f"Elastic net fitted: {nonzero} non-zero weights, objective {result.objective[-1]:.5f}")
        return cls(result.weight, result.intercept, l1, l2, standardizer)

    def predict_points(self, ids: np.ndarray, lengths: np.ndarray) -> np.ndarray:
        features = bag_of_words(ids, lengths, self.weight.shape[1])
        return self.standardizer.inverse(features @ self.weight.T + self.bias)

    def tensors(self) -> Dict[str, np.ndarray]:
        return {'enet.weight': self.weight, 'enet.bias': self.bias}

    def hyper_dict(self) -> dict:
        return {'vocab_size': int(self.weight.shape[1]), 'l1': self.l1, 'l2': self.l2}


def constant_baselines(points: np.ndarray) -> Dict[str, GeoPoint]:
    """Componentwise mean and median of the training locations"""
    points = np.asarray(points, dtype=np.float64).reshape(-1, 2)
    if points.shape[0] == 0:
        raise DataError("constant baselines need at least one training location")
    mean = points.mean(axis=0)
    median = np.median(points, axis=0)
    return {'mean': GeoPoint(*mean), 'median': GeoPoint(*median)}


class ConstantModel(GeoModel):
    """Predicts the same point for every tweet"""

    def __init__(self, kind: ModelKind, point: GeoPoint):
        if kind not in (ModelKind.MEAN, ModelKind.MEDIAN):
            raise ConfigError(f"{kind.value} is not a constant baseline")
        self.kind = kind
        self.point = point
        self.standardizer = Standardizer.identity()

    @classmethod
    def fit(cls, kind: ModelKind, points: np.ndarray) -> "ConstantModel":
        return cls(kind, constant_baselines(points)[kind.value])

    def predict_points(self, ids: np.ndarray, lengths: np.ndarray) -> np.ndarray:
        count = np.atleast_2d(ids).shape[0]
        return np.tile(np.array(self.point.as_tuple()), (count, 1))

    def tensors(self) -> Dict[str, np.ndarray]:
        return {'point': np.array(self.point.as_tuple())}


# ----- checkpoints ----------------------------------------------------------

@dataclass
class Checkpoint:
    model: GeoModel
    config: dict
    vocab_hash: str


def save_checkpoint(model: GeoModel, path: Path, config: dict, vocab_hash: str) -> Path:
    """One .npz holding every named tensor plus a JSON metadata entry"""
    path = Path(path)
    meta = {
        'format': CHECKPOINT_FORMAT,
        'kind': model.kind.value,
        'hyper': model.hyper_dict(),
        'standardizer': model.standardizer.to_dict(),
        'vocab_hash': vocab_hash,
        'config': config,
    }
    arrays = {name: np.asarray(value) for name, value in model.tensors().items()}
    with open(path, 'wb') as f:
        np.savez(f, __meta__=np.array(json.dumps(meta, sort_keys=True)), **arrays)
    logger.info(f"Checkpoint for {model.kind.value} saved to {path}")
    return path


def load_checkpoint(path: Path) -> Checkpoint:
    path = Path(path)
    if not path.exists():
        raise DataError(f"checkpoint not found: {path}")
    try:
        with np.load(path, allow_pickle=False) as data:
            meta = json.loads(str(data['__meta__']))
            arrays = {name: data[name].astype(np.float64) for name in data.files if name != '__meta__'}
    except (OSError, ValueError, KeyError, zipfile.BadZipFile) as e:
        raise DataError(f"{path}: not a readable checkpoint ({e})") from None
    if meta.get('format') != CHECKPOINT_FORMAT:
        raise DataError(f"{path}: unsupported checkpoint format {meta.get('format')}")

    kind = ModelKind.parse(meta['kind'])
    standardizer = Standardizer.from_dict(meta['standardizer'])
    if kind.is_neural:
        model = NeuralGeoModel.build(kind, ModelHyperParams.from_dict(meta['hyper']), 0, standardizer)
    elif kind == ModelKind.ENET:
        size = meta['hyper']['vocab_size']
        model = EnetModel(np.zeros((2, size)), np.zeros(2), meta['hyper']['l1'], meta['hyper']['l2'],
                          standardizer)
    else:
        point = arrays.get('point')
        if point is None or point.shape != (2,):
            raise DataError(f"{path}: constant checkpoint needs a 'point' tensor of shape (2,)")
        return Checkpoint(ConstantModel(kind, GeoPoint(*point)), meta['config'], meta['vocab_hash'])

    expected = model.tensors()
    if set(expected) != set(arrays):
        raise DataError(f"{path}: tensor names {sorted(arrays)} do not match {sorted(expected)}")
    for name, target in expected.items():
        if target.shape != arrays[name].shape:
            raise DataError(f"{path}: tensor {name} has shape {arrays[name].shape}, expected {target.shape}")
        target[...] = arrays[name]
    return Checkpoint(model, meta['config'], meta['vocab_hash'])
