"""
Data Models for the Tweet Geolocation Density System
Shared records passed between corpus, models and evaluation
"""

from dataclasses import dataclass, field, asdict
from typing import Optional, Dict, Any
from enum import Enum
import json
import math

import numpy as np

from .exceptions import ConfigError, DataError


class LossKind(Enum):
    """Training objective of a model"""
    L1 = "l1"
    L2 = "l2"
    NLL = "nll"
    NONE = "none"  # fitted in closed form / by its own solver


class ModelKind(Enum):
    """Every comparison model the system can train"""
    CMDN = "cmdn"
    MDN = "mdn"
    CNN_L1 = "cnn-l1"
    CNN_L2 = "cnn-l2"
    MLP_L1 = "mlp-l1"
    MLP_L2 = "mlp-l2"
    ENET = "enet"
    MEAN = "mean"
    MEDIAN = "median"

    @classmethod
    def parse(cls, value: str) -> "ModelKind":
        """Look up a kind by its CLI name"""
        for kind in cls:
            if kind.value == value.strip().lower():
                return kind
        names = ", ".join(k.value for k in cls)
        raise ConfigError(f"Unknown model kind '{value}' (expected one of: {names})")

    @property
    def is_density(self) -> bool:
        return self in (ModelKind.CMDN, ModelKind.MDN)

    @property
    def is_neural(self) -> bool:
        return self not in (ModelKind.ENET, ModelKind.MEAN, ModelKind.MEDIAN)

    @property
    def encoder(self) -> Optional[str]:
        """Feature extractor family: 'cnn', 'mlp' or None for baselines"""
        if self in (ModelKind.CMDN, ModelKind.CNN_L1, ModelKind.CNN_L2):
            return "cnn"
        if self in (ModelKind.MDN, ModelKind.MLP_L1, ModelKind.MLP_L2):
            return "mlp"
        return None

    @property
    def loss_kind(self) -> LossKind:
        if self.is_density:
            return LossKind.NLL
        if self in (ModelKind.CNN_L1, ModelKind.MLP_L1):
            return LossKind.L1
        if self in (ModelKind.CNN_L2, ModelKind.MLP_L2):
            return LossKind.L2
        return LossKind.NONE


@dataclass(frozen=True)
class GeoPoint:
    """Geographic coordinate in degrees"""
    lat: float
    lon: float

    def __post_init__(self):
        if not (math.isfinite(self.lat) and math.isfinite(self.lon)):
            raise DataError(f"Non-finite coordinate ({self.lat}, {self.lon})")
        if not -90.0 <= self.lat <= 90.0:
            raise DataError(f"Latitude {self.lat} outside [-90, 90]")
        if not -180.0 < self.lon <= 180.0:
            raise DataError(f"Longitude {self.lon} outside (-180, 180]")

    @classmethod
    def wrapped(cls, lat: float, lon: float) -> "GeoPoint":
        """Build a point from model output, clamping latitude and wrapping longitude"""
        lat = min(90.0, max(-90.0, float(lat)))
        lon = float(lon)
        if not -180.0 < lon <= 180.0:
            lon = ((lon + 180.0) % 360.0) - 180.0
            if lon == -180.0:
                lon = 180.0
        return cls(lat, lon)

    def as_tuple(self) -> tuple:
        return (self.lat, self.lon)


@dataclass(frozen=True)
class CorpusRecord:
    """One geotagged tweet: raw text and its true location"""
    text: str
    lat: float
    lon: float

    def __post_init__(self):
        # Range validation lives in GeoPoint
        GeoPoint(self.lat, self.lon)

    @property
    def point(self) -> GeoPoint:
        return GeoPoint(self.lat, self.lon)

    def to_json(self) -> str:
        return json.dumps({'text': self.text, 'lat': self.lat, 'lon': self.lon},
                          ensure_ascii=False)


@dataclass(frozen=True)
class EncodedTweet:
    """Fixed-length vocabulary index sequence; positions >= true_length are PAD"""
    ids: tuple
    true_length: int

    @property
    def length(self) -> int:
        return len(self.ids)


@dataclass
class EncodedCorpus:
    """A corpus split after vocabulary encoding"""
    ids: np.ndarray        # (N, L) int64
    lengths: np.ndarray    # (N,) true lengths
    points: np.ndarray     # (N, 2) degrees
    texts: tuple = ()

    def __post_init__(self):
        n = self.ids.shape[0]
        if self.lengths.shape != (n,) or self.points.shape != (n, 2):
            raise DataError(f"encoded corpus parts disagree: ids {self.ids.shape}, "
                            f"lengths {self.lengths.shape}, points {self.points.shape}")

    def __len__(self) -> int:
        return self.ids.shape[0]

    def subset(self, index) -> "EncodedCorpus":
        index = np.asarray(index, dtype=np.int64)
        texts = tuple(self.texts[i] for i in index) if self.texts else ()
        return EncodedCorpus(self.ids[index], self.lengths[index], self.points[index], texts)


@dataclass
class PredictionRecord:
    """Model output for one test tweet, with its Vincenty error"""
    predicted: GeoPoint
    truth: GeoPoint
    error_km: float
    likelihood: Optional[float] = None  # density at the predicted point (density models only)
    geodesic_fallback: bool = False     # Vincenty did not converge, haversine used
    tag: str = ""
    index: int = 0

    def to_row(self) -> Dict[str, Any]:
        """Flat row for CSV export"""
        return {
            'index': self.index,
            'pred_lat': self.predicted.lat,
            'pred_lon': self.predicted.lon,
            'true_lat': self.truth.lat,
            'true_lon': self.truth.lon,
            'error_km': self.error_km,
            'likelihood': self.likelihood,
            'geodesic_fallback': self.geodesic_fallback,
            'tag': self.tag,
        }


@dataclass
class SweepRow:
    """Statistics of the records kept by one likelihood lower bound"""
    bound: float
    retained: int
    mean_km: Optional[float] = None
    median_km: Optional[float] = None
    mean_ci: Optional[tuple] = None
    median_ci: Optional[tuple] = None

    def to_row(self) -> Dict[str, Any]:
        mean_ci = self.mean_ci or (None, None)
        median_ci = self.median_ci or (None, None)
        return {
            'bound': self.bound,
            'retained': self.retained,
            'mean_km': self.mean_km,
            'median_km': self.median_km,
            'mean_ci_low': mean_ci[0],
            'mean_ci_high': mean_ci[1],
            'median_ci_low': median_ci[0],
            'median_ci_high': median_ci[1],
        }


@dataclass
class EpochRecord:
    """One row of the training history"""
    epoch: int
    train_loss: float
    dev_loss: float
    dev_median_km: float
    dev_mean_km: float
    skipped_steps: int = 0

    def to_row(self) -> Dict[str, Any]:
        row = asdict(self)
        row.pop('skipped_steps')
        return row


@dataclass
class Summary:
    """Distance statistics over a set of prediction records"""
    count: int
    mean_km: float
    median_km: float
    extras: Dict[str, Any] = field(default_factory=dict)

    def to_dict(self) -> Dict[str, Any]:
        out = {'count': self.count, 'mean_km': self.mean_km, 'median_km': self.median_km}
        out.update(self.extras)
        return out

