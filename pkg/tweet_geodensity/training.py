"""
Losses, Adam and the mini-batch training loop with dev-set model selection
"""

from dataclasses import dataclass, field, replace
from typing import Callable, Dict, List, Optional
import math

import numpy as np
from loguru import logger

from .data_models import EncodedCorpus, EpochRecord, LossKind, ModelKind
from .diffcore import Graph, backward
from .evaluation import distances_km
from .exceptions import ConfigError, NumericalError, ShapeError
from .mixture import nll_loss
from .models import NeuralGeoModel, Standardizer


def _residual(g: Graph, prediction: int, y: np.ndarray, name: str) -> int:
    y = np.asarray(y, dtype=np.float64)
    if g.shape(prediction) != y.shape:
        raise ShapeError(f"{name}: prediction shape {g.shape(prediction)} != target shape {y.shape}")
    return g.sub(g.constant(y), prediction)


def l2_loss(g: Graph, prediction: int, y: np.ndarray) -> int:
    """sum_n ||y_n - y_hat_n||^2"""
    return g.sum(g.square(_residual(g, prediction, y, 'l2_loss')))


def l1_loss(g: Graph, prediction: int, y: np.ndarray) -> int:
    """sum_n sum_q |y_nq - y_hat_nq|"""
    return g.sum(g.abs(_residual(g, prediction, y, 'l1_loss')))


LOSSES = {
    LossKind.L1: l1_loss,
    LossKind.L2: l2_loss,
    LossKind.NLL: nll_loss,
}


def loss_node(g: Graph, output: int, y: np.ndarray, kind: LossKind) -> int:
    if kind not in LOSSES:
        raise ConfigError(f"no graph loss for {kind.value}")
    return LOSSES[kind](g, output, y)


@dataclass
class AdamState:
    """First/second moments per named parameter"""
    learning_rate: float
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    t: int = 0
    m: Dict[str, np.ndarray] = field(default_factory=dict)
    v: Dict[str, np.ndarray] = field(default_factory=dict)
    skipped: int = 0

    @classmethod
    def create(cls, params: Dict[str, np.ndarray], learning_rate: float, **kwargs) -> "AdamState":
        return cls(
            learning_rate=learning_rate,
            m={name: np.zeros_like(p) for name, p in params.items()},
            v={name: np.zeros_like(p) for name, p in params.items()},
            **kwargs,
        )


def adam_step(params: Dict[str, np.ndarray], grads: Dict[str, np.ndarray], state: AdamState) -> bool:
    """Bias-corrected Adam update applied in place; returns False if the step was skipped"""
    if not all(np.all(np.isfinite(grads[name])) for name in params):
        state.skipped += 1
        logger.warning(f"Skipped Adam step {state.t + 1}: non-finite gradient ({state.skipped} so far)")
        return False

    state.t += 1
    correction1 = 1.0 - state.beta1 ** state.t
    correction2 = 1.0 - state.beta2 ** state.t
    for name, param in params.items():
        grad = grads[name]
        state.m[name] = state.beta1 * state.m[name] + (1.0 - state.beta1) * grad
        state.v[name] = state.beta2 * state.v[name] + (1.0 - state.beta2) * grad * grad
        m_hat = state.m[name] / correction1
        v_hat = state.v[name] / correction2
        param -= state.learning_rate * m_hat / (np.sqrt(v_hat) + state.eps)
    return True


@dataclass
class TrainConfig:
    epochs: int = 30
    batch_size: int = 100
    learning_rate: float = 3e-3
    dropout: Optional[float] = None  # None -> the encoder's own rate
    seed: int = 0
    loss: Optional[LossKind] = None  # None -> the model kind's own loss
    patience: int = 10
    workers: int = 1

    def resolved_loss(self, kind: ModelKind) -> LossKind:
        return self.loss or kind.loss_kind

    def validate(self, kind: ModelKind) -> None:
        if self.batch_size < 1:
            raise ConfigError(f"batch_size must be >= 1, got {self.batch_size}")
        if self.epochs < 1:
            raise ConfigError(f"epochs must be >= 1, got {self.epochs}")
        if self.learning_rate < 0:
            raise ConfigError(f"learning_rate must be >= 0, got {self.learning_rate}")
        if self.dropout is not None and not 0.0 <= self.dropout < 1.0:
            raise ConfigError(f"dropout must be in [0, 1), got {self.dropout}")
        if self.patience < 1:
            raise ConfigError(f"patience must be >= 1, got {self.patience}")
        loss = self.resolved_loss(kind)
        if (loss == LossKind.NLL) != kind.is_density:
            raise ConfigError(f"loss {loss.value} does not fit the {kind.value} head")


@dataclass
class DevMetrics:
    loss: float
    median_km: float
    mean_km: float


@dataclass
class TrainResult:
    model: NeuralGeoModel
    history: List[EpochRecord]
    best_epoch: int
    best_dev_loss: float
    skipped_steps: int = 0


def evaluate_dev(model: NeuralGeoModel, dev: EncodedCorpus, loss: LossKind,
                 batch_size: int = 512, workers: int = 1) -> DevMetrics:
    """Per-record dev loss in standardized space plus Vincenty errors of the point predictions"""
    targets = model.standardizer.transform(dev.points)
    total = 0.0
    points = []
    for start in range(0, len(dev), batch_size):
        stop = start + batch_size
        g = Graph()
        output = model.forward(g, dev.ids[start:stop], dev.lengths[start:stop])
        total += g.value(loss_node(g, output, targets[start:stop], loss)).item()
        points.append(model.points_from_raw(g.value(output)))
    errors = distances_km(np.concatenate(points), dev.points, workers=workers)
    return DevMetrics(total / len(dev), float(np.median(errors)), float(np.mean(errors)))


def _snapshot(params: Dict[str, np.ndarray]) -> Dict[str, np.ndarray]:
    return {name: p.copy() for name, p in params.items()}


def _restore(params: Dict[str, np.ndarray], snapshot: Dict[str, np.ndarray]) -> None:
    for name, p in params.items():
        p[...] = snapshot[name]


def train(model: NeuralGeoModel, train_set: EncodedCorpus, dev_set: EncodedCorpus,
          config: TrainConfig,
          on_improve: Optional[Callable[[NeuralGeoModel, EpochRecord], None]] = None) -> TrainResult:
    """Mini-batch Adam with seeded shuffling, keeping the parameters of the best dev loss

    ``on_improve`` is called whenever the dev loss improves, so callers can persist the
    best checkpoint as training goes.
    """
    config.validate(model.kind)
    if len(train_set) == 0 or len(dev_set) == 0:
        raise ConfigError("training needs non-empty train and dev splits")
    loss_kind = config.resolved_loss(model.kind)
    if config.dropout is not None:
        model.encoder.dropout = config.dropout
        model.hyper = replace(model.hyper, dropout=config.dropout)

    model.standardizer = Standardizer.fit(train_set.points)
    targets = model.standardizer.transform(train_set.points)
    shuffle_seed, dropout_seed = np.random.SeedSequence(config.seed).spawn(2)
    shuffle_rng = np.random.default_rng(shuffle_seed)
    dropout_rng = np.random.default_rng(dropout_seed)

    params = model.tensors()
    state = AdamState.create(params, config.learning_rate)
    best = _snapshot(params)
    best_loss, best_epoch, stale = math.inf, 0, 0
    history: List[EpochRecord] = []
    logger.info(f"Training {model.kind.value} on {len(train_set)} records "
                f"({loss_kind.value} loss, batch {config.batch_size}, lr {config.learning_rate})")

    for epoch in range(1, config.epochs + 1):
        order = shuffle_rng.permutation(len(train_set))
        epoch_loss = 0.0
        for start in range(0, len(order), config.batch_size):
            batch = order[start:start + config.batch_size]
            g = Graph()
            output = model.forward(g, train_set.ids[batch], train_set.lengths[batch],
                                   training=True, rng=dropout_rng)
            loss = loss_node(g, output, targets[batch], loss_kind)
            value = g.value(loss).item()
            if not np.isfinite(value):
                _restore(params, best)
                partial = TrainResult(model, history, best_epoch, best_loss, state.skipped)
                logger.error(f"Loss became {value} in epoch {epoch} at batch offset {start}; "
                             f"restored epoch {best_epoch} parameters")
                raise NumericalError(
                    f"training loss is {value} at epoch {epoch}, batch offset {start} "
                    f"(last good epoch {best_epoch}, dev loss {best_loss:.5f})", partial=partial)
            epoch_loss += value
            adam_step(params, backward(g, loss), state)

        dev = evaluate_dev(model, dev_set, loss_kind, workers=config.workers)
        record = EpochRecord(epoch, epoch_loss / len(train_set), dev.loss, dev.median_km,
                             dev.mean_km, state.skipped)
        history.append(record)
        logger.info(f"Epoch {epoch}: train {record.train_loss:.5f}, dev {dev.loss:.5f}, "
                    f"dev median {dev.median_km:.1f} km, dev mean {dev.mean_km:.1f} km")

        if dev.loss < best_loss:
            best, best_loss, best_epoch, stale = _snapshot(params), dev.loss, epoch, 0
            if on_improve is not None:
                on_improve(model, record)
        else:
            stale += 1
            if stale >= config.patience:
                logger.info(f"Early stop after epoch {epoch}: no dev improvement for {stale} epochs")
                break

    _restore(params, best)
    logger.info(f"Selected epoch {best_epoch} (dev loss {best_loss:.5f})")
    return TrainResult(model, history, best_epoch, best_loss, state.skipped)
