"""
Configuration for the Tweet Geolocation Density System
Environment-level settings plus the per-run settings file
"""

import dataclasses
import hashlib
import json
import os
from dataclasses import dataclass, field
from pathlib import Path
from typing import Dict, Mapping, Optional, Tuple

from dotenv import load_dotenv, dotenv_values

from .data_models import ModelKind
from .exceptions import ConfigError

# Load environment variables
env_path = Path(__file__).parent.parent / '.env'
load_dotenv(env_path)


class Config:
    """Process-wide settings read from the environment"""

    LOG_LEVEL = os.getenv('LOG_LEVEL', 'INFO')
    DEBUG_MODE = os.getenv('DEBUG_MODE', 'False').lower() == 'true'
    RUNS_DIR = Path(os.getenv('RUNS_DIR', 'runs'))
    WORKERS = int(os.getenv('WORKERS', 1))

    @classmethod
    def to_dict(cls) -> dict:
        return {
            'log_level': cls.LOG_LEVEL,
            'debug_mode': cls.DEBUG_MODE,
            'runs_dir': str(cls.RUNS_DIR),
            'workers': cls.WORKERS,
        }

    @classmethod
    def validate(cls) -> bool:
        issues = []
        if cls.LOG_LEVEL.upper() not in ('TRACE', 'DEBUG', 'INFO', 'SUCCESS', 'WARNING', 'ERROR', 'CRITICAL'):
            issues.append(f"Unknown LOG_LEVEL '{cls.LOG_LEVEL}'")
        if cls.WORKERS < 1:
            issues.append("WORKERS must be at least 1")
        if issues:
            raise ConfigError("; ".join(issues))
        return True


# Paths and thread counts stay out of the config hash; they do not change results
UNHASHED_KEYS = ('out_dir', 'data_dir', 'generator_spec', 'workers')
HIST_TRANSFORMS = ('log10', 'linear')


def _parse_windows(value: str) -> Tuple[int, ...]:
    try:
        return tuple(int(part) for part in value.split(',') if part.strip())
    except ValueError:
        raise ConfigError(f"windows must be comma-separated integers, got '{value}'") from None


def _parse_floats(value: str) -> Tuple[float, ...]:
    try:
        return tuple(float(part) for part in value.split(',') if part.strip())
    except ValueError:
        raise ConfigError(f"expected comma-separated numbers, got '{value}'") from None


@dataclass
class RunConfig:
    """Every setting of one command run, kept flat for key=value files"""

    # Data
    model: str = 'cmdn'
    seed: int = 0
    data_dir: str = 'data'
    out_dir: str = ''
    generator_spec: str = ''
    generator_seed: int = 0
    train_size: int = 20000
    dev_size: int = 2000
    test_size: int = 2000

    # Text encoding
    min_count: int = 2
    max_length: int = 0  # 0 -> 95th percentile of training tweet lengths

    # Architecture
    embed_dim: int = 32
    windows: Tuple[int, ...] = (3, 4, 5)
    filters: int = 16
    hidden: int = 64
    mixtures: int = 5
    dropout: float = 0.0  # desk-width h; large_scale() restores 0.2

    # Optimization
    batch_size: int = 100
    learning_rate: float = 3e-3
    epochs: int = 30
    patience: int = 10

    # Elastic net
    enet_l1: float = 1e-3
    enet_l2: float = 1e-3
    enet_steps: int = 500

    # Evaluation
    bootstrap_resamples: int = 1000
    ci_level: float = 0.95
    sweep_bounds: Tuple[float, ...] = ()  # empty -> log-spaced over the likelihood range
    sweep_points: int = 10
    hist_bins: int = 20
    hist_transform: str = 'log10'
    outlier_km: float = 500.0
    workers: int = field(default_factory=lambda: Config.WORKERS)

    @property
    def kind(self) -> ModelKind:
        return ModelKind.parse(self.model)

    @classmethod
    def large_scale(cls, **overrides) -> "RunConfig":
        """Large-scale hyperparameters (K=50, d=300, 128 filters per window, batch 500, lr 1e-4)"""
        values = dict(mixtures=50, embed_dim=300, filters=128, dropout=0.2, batch_size=500,
                      learning_rate=1e-4)
        values.update(overrides)
        return cls(**values)

    # ----- parsing -----

    @classmethod
    def from_mapping(cls, values: Mapping[str, Optional[str]], base: Optional["RunConfig"] = None) -> "RunConfig":
        """Apply string key=value settings on top of ``base`` (defaults when None)"""
        config = dataclasses.replace(base) if base is not None else cls()
        known = {f.name: f for f in dataclasses.fields(cls)}
        for key, raw in values.items():
            key = key.strip().lower()
            if key not in known:
                raise ConfigError(f"Unknown config key '{key}'")
            raw = '' if raw is None else str(raw).strip()
            setattr(config, key, cls._convert(key, known[key].type, raw))
        return config

    @staticmethod
    def _convert(key: str, kind, raw: str):
        if key == 'windows':
            return _parse_windows(raw)
        if key == 'sweep_bounds':
            return _parse_floats(raw)
        try:
            if kind is int:
                return int(raw)
            if kind is float:
                return float(raw)
        except ValueError:
            raise ConfigError(f"Config key '{key}' expects {kind.__name__}, got '{raw}'") from None
        return raw

    @classmethod
    def from_file(cls, path: Path, base: Optional["RunConfig"] = None) -> "RunConfig":
        path = Path(path)
        if not path.exists():
            raise ConfigError(f"Config file not found: {path}")
        values = dotenv_values(path)
        config = cls.from_mapping(values, base)
        # A relative generator_spec include resolves against the config file
        if config.generator_spec and not Path(config.generator_spec).is_absolute():
            config.generator_spec = str((path.parent / config.generator_spec).resolve())
        return config

    @classmethod
    def from_dict(cls, data: Mapping[str, object]) -> "RunConfig":
        """Rebuild from ``to_dict`` output, e.g. a checkpoint's config echo"""
        known = {f.name for f in dataclasses.fields(cls)}
        unknown = set(data) - known
        if unknown:
            raise ConfigError(f"Unknown config keys {sorted(unknown)}")
        values = dict(data)
        for key in ('windows', 'sweep_bounds'):
            if key in values:
                values[key] = tuple(values[key])
        return cls(**values)

    # ----- checks and export -----

    def validate(self, require_data: bool = False) -> "RunConfig":
        kind = self.kind
        positive = ('train_size', 'dev_size', 'test_size', 'min_count', 'embed_dim', 'filters',
                    'hidden', 'mixtures', 'batch_size', 'epochs', 'patience', 'enet_steps',
                    'sweep_points', 'hist_bins', 'workers')
        for key in positive:
            if getattr(self, key) < 1:
                raise ConfigError(f"{key} must be >= 1, got {getattr(self, key)}")
        if not self.windows or any(w < 1 for w in self.windows):
            raise ConfigError(f"windows must be positive integers, got {self.windows}")
        if self.max_length < 0:
            raise ConfigError(f"max_length must be >= 0, got {self.max_length}")
        if kind.encoder == 'cnn' and 0 < self.max_length < max(self.windows):
            raise ConfigError(f"max_length {self.max_length} is below the largest window {max(self.windows)}")
        if not 0.0 <= self.dropout < 1.0:
            raise ConfigError(f"dropout must be in [0, 1), got {self.dropout}")
        if self.learning_rate < 0:
            raise ConfigError(f"learning_rate must be >= 0, got {self.learning_rate}")
        if self.enet_l1 < 0 or self.enet_l2 < 0:
            raise ConfigError("enet_l1 and enet_l2 must be >= 0")
        if self.bootstrap_resamples < 100:
            raise ConfigError(f"bootstrap_resamples must be >= 100, got {self.bootstrap_resamples}")
        if not 0.0 < self.ci_level < 1.0:
            raise ConfigError(f"ci_level must be in (0, 1), got {self.ci_level}")
        if list(self.sweep_bounds) != sorted(self.sweep_bounds):
            raise ConfigError("sweep_bounds must be ascending")
        if self.hist_transform not in HIST_TRANSFORMS:
            raise ConfigError(f"hist_transform must be one of {HIST_TRANSFORMS}, got '{self.hist_transform}'")
        if require_data and not Path(self.data_dir).is_dir():
            raise ConfigError(f"data directory not found: {self.data_dir}")
        return self

    def to_dict(self) -> Dict[str, object]:
        data = dataclasses.asdict(self)
        data['windows'] = list(self.windows)
        data['sweep_bounds'] = list(self.sweep_bounds)
        return data

    def config_hash(self) -> str:
        data = {k: v for k, v in self.to_dict().items() if k not in UNHASHED_KEYS}
        return hashlib.sha256(json.dumps(data, sort_keys=True).encode('utf-8')).hexdigest()[:16]

    def to_text(self) -> str:
        lines = []
        for key, value in sorted(self.to_dict().items()):
            if isinstance(value, list):
                value = ",".join(str(v) for v in value)
            lines.append(f"{key}={value}")
        return "\n".join(lines) + "\n"

    def write(self, path: Path) -> Path:
        """Resolved config next to a run's outputs; readable by ``from_file``"""
        path = Path(path)
        path.write_text(self.to_text(), encoding='utf-8')
        return path

    def header(self) -> Dict[str, object]:
        return {'config_hash': self.config_hash(), 'seed': self.seed}
