"""Configuration management for TransNets experiments."""

import copy
import hashlib
import json
import logging
import os
from dataclasses import asdict, dataclass, fields
from pathlib import Path
from typing import Any, Dict, List, Optional

import numpy as np
from dotenv import load_dotenv

from .errors import ConfigError

logger = logging.getLogger(__name__)

MODEL_KINDS = ('mf', 'deepconn', 'deepconn-revab', 'transnet', 'transnet-ext')

# CPU-scale profile for desk runs
DESK_PROFILE = {
    'max_len': 64,
    'filters': 8,
    'latent_dim': 8,
    'embedding_dim': 16,
    'vocab_size': 2000,
    'batch_size': 32,
    'eval_every': 50,
}

# Fields that determine parameter shapes and forward semantics
ARCHITECTURE_FIELDS = ('model', 'max_len', 'filters', 'window', 'latent_dim', 'embedding_dim', 'fm_rank',
                       'vocab_size', 'layers', 'conv_activation', 'transform_activation', 'dtype')


@dataclass
class TrainConfig:
    """Hyperparameters. Defaults are the full-scale settings.

    max_len is T, filters is m, window is t, latent_dim is n, embedding_dim is d,
    fm_rank is k, vocab_size is M and layers is the Transform depth L.
    """

    model: str = 'transnet'
    batch_size: int = 500
    eval_every: int = 1000
    lr: float = 0.002
    keep_prob: float = 0.5
    layers: int = 2
    max_len: int = 1000
    filters: int = 100
    window: int = 3
    latent_dim: int = 50
    embedding_dim: int = 64
    fm_rank: int = 8
    vocab_size: int = 50000
    seed: int = 42
    max_epochs: int = 3
    loss_trans: str = 'squared'
    conv_activation: str = 'tanh'
    transform_activation: str = 'tanh'
    dtype: str = 'float64'
    profile_shuffle: str = 'once'
    reuse_dropout_mask: bool = True
    transform_dropout: bool = True
    joint_training: bool = False
    include_test_reviews: bool = False
    thread_count: int = 4

    def problems(self) -> List[str]:
        """Every validation failure, not just the first."""
        found = []
        if self.model not in MODEL_KINDS:
            found.append(f"model must be one of {', '.join(MODEL_KINDS)}, got {self.model!r}")
        for name in ('batch_size', 'eval_every', 'layers', 'max_len', 'filters', 'window', 'latent_dim',
                     'embedding_dim', 'fm_rank', 'vocab_size', 'max_epochs', 'thread_count'):
            if getattr(self, name) < 1:
                found.append(f"{name} must be positive, got {getattr(self, name)}")
        if not self.lr > 0:
            found.append(f"lr must be positive, got {self.lr}")
        if not 0.0 < self.keep_prob <= 1.0:
            found.append(f"keep_prob must lie in (0, 1], got {self.keep_prob}")
        if self.window > self.max_len:
            found.append(f"window ({self.window}) cannot exceed max_len ({self.max_len})")
        if self.loss_trans not in ('squared', 'norm'):
            found.append(f"loss_trans must be 'squared' or 'norm', got {self.loss_trans!r}")
        for name in ('conv_activation', 'transform_activation'):
            if getattr(self, name) not in ('tanh', 'relu', 'identity'):
                found.append(f"{name} must be tanh, relu or identity, got {getattr(self, name)!r}")
        if self.dtype not in ('float64', 'float32'):
            found.append(f"dtype must be float64 or float32, got {self.dtype!r}")
        if self.profile_shuffle not in ('once', 'epoch'):
            found.append(f"profile_shuffle must be 'once' or 'epoch', got {self.profile_shuffle!r}")
        if self.include_test_reviews and self.model != 'deepconn':
            found.append("include_test_reviews is a diagnostic for the deepconn model only")
        if self.joint_training and self.model not in ('transnet', 'transnet-ext'):
            found.append("joint_training applies to transnet models only")
        return found

    @property
    def np_dtype(self):
        return np.float32 if self.dtype == 'float32' else np.float64

    def architecture(self) -> Dict[str, Any]:
        return {name: getattr(self, name) for name in ARCHITECTURE_FIELDS}

    def digest(self) -> str:
        return config_digest(self.architecture())

    def to_dict(self) -> Dict[str, Any]:
        return asdict(self)

    @classmethod
    def from_dict(cls, values: Dict[str, Any]) -> "TrainConfig":
        known = {f.name for f in fields(cls)}
        return cls(**{k: v for k, v in values.items() if k in known})


def config_digest(architecture: Dict[str, Any]) -> str:
    canonical = json.dumps(architecture, sort_keys=True, separators=(',', ':'))
    return hashlib.sha256(canonical.encode('utf-8')).hexdigest()


def _parse_env_value(raw: str, kind: type):
    if kind is bool:
        return raw.strip().lower() in ('1', 'true', 'yes', 'on')
    return kind(raw)


def _type_problems(candidates: Dict[str, Any], defaults: Dict[str, Any]) -> List[str]:
    """Fields whose value has the wrong JSON type for the matching default."""
    found = []
    for name, value in candidates.items():
        kind = type(defaults[name])
        if kind is float:
            ok = isinstance(value, (int, float)) and not isinstance(value, bool)
        elif kind is int:
            ok = isinstance(value, int) and not isinstance(value, bool)
        else:
            ok = isinstance(value, kind)
        if not ok:
            found.append(f"{name} must be {kind.__name__}, got {value!r}")
    return found


class Config:
    """Experiment configuration.

    Values resolve as: defaults < desk profile < environment (TRANSNETS_<FIELD>, .env
    honoured) < JSON config file < command-line overrides.
    """

    def __init__(self, env_file: str = None, config_file: str = None, overrides: Optional[Dict[str, Any]] = None,
                 desk: bool = False, data_dir: str = None, output_dir: str = None, embeddings: str = None):
        if env_file:
            load_dotenv(env_file)
        else:
            load_dotenv()
        overrides = {k: v for k, v in (overrides or {}).items() if v is not None}

        file_values: Dict[str, Any] = {}
        if config_file:
            if not Path(config_file).exists():
                raise ConfigError(f"Config file not found: {config_file}")
            with open(config_file, 'r', encoding='utf-8') as f:
                try:
                    file_values = json.load(f)
                except json.JSONDecodeError as e:
                    raise ConfigError(f"Config file {config_file} is not valid JSON: {e}") from e

        env_desk = os.getenv('TRANSNETS_DESK')
        self.desk = bool(desk or file_values.get('desk') or (env_desk and _parse_env_value(env_desk, bool)))

        values = asdict(TrainConfig())
        if self.desk:
            values.update(DESK_PROFILE)
        for f in fields(TrainConfig):
            raw = os.getenv(f"TRANSNETS_{f.name.upper()}")
            if raw is not None:
                try:
                    values[f.name] = _parse_env_value(raw, type(values[f.name]))
                except ValueError as e:
                    raise ConfigError(f"TRANSNETS_{f.name.upper()}={raw!r} is invalid: {e}") from e
        file_train = {k: v for k, v in file_values.items() if k in values}
        mistyped = _type_problems(file_train, values)
        if mistyped:
            raise ConfigError(f"Config file {config_file}: " + '; '.join(mistyped))
        values.update(file_train)
        values.update({k: v for k, v in overrides.items() if k in values})
        self.train = TrainConfig(**values)

        # Paths: flags override the file, which overrides the environment
        self.data_dir = Path(data_dir or file_values.get('data_dir') or os.getenv('TRANSNETS_DATA_DIR', 'data'))
        self.output_dir = Path(output_dir or file_values.get('output_dir') or os.getenv('TRANSNETS_OUTPUT_DIR', 'output'))
        self.embeddings = embeddings or file_values.get('embeddings') or os.getenv('TRANSNETS_EMBEDDINGS') or None

        logger.debug(f"Config loaded: {self.to_dict()}")
        self._validate_config()

    def _validate_config(self):
        """Validate configuration settings, reporting every problem at once."""
        found = self.train.problems()
        if self.embeddings and not Path(self.embeddings).exists():
            found.append(f"embedding file not found: {self.embeddings}")
        if found:
            raise ConfigError('; '.join(found))

    def with_overrides(self, **changes) -> "Config":
        """Copy with some training fields or paths replaced, re-validated."""
        clone = copy.deepcopy(self)
        for key in ('data_dir', 'output_dir'):
            if key in changes:
                setattr(clone, key, Path(changes.pop(key)))
        clone.train = TrainConfig(**{**asdict(self.train), **changes})
        clone._validate_config()
        return clone

    @property
    def checkpoint_path(self) -> Path:
        return self.output_dir / "checkpoint.tnsn"

    @property
    def log_path(self) -> Path:
        return self.output_dir / "train.log"

    @property
    def config_path(self) -> Path:
        return self.output_dir / "config.json"

    @property
    def reports_dir(self) -> Path:
        return self.output_dir / "reports"

    def to_dict(self) -> Dict[str, Any]:
        values = self.train.to_dict()
        values.update({'desk': self.desk, 'data_dir': str(self.data_dir), 'output_dir': str(self.output_dir),
                       'embeddings': self.embeddings})
        return values

    def write(self, path: Path = None) -> Path:
        """Serialize the resolved configuration into the output directory."""
        path = Path(path or self.config_path)
        path.parent.mkdir(parents=True, exist_ok=True)
        with open(path, 'w', encoding='utf-8') as f:
            json.dump(self.to_dict(), f, indent=2, sort_keys=True)
            f.write('\n')
        return path

    def ensure_output_dirs(self):
        """Create all necessary output directories."""
        for dir_path in [self.output_dir, self.reports_dir]:
            dir_path.mkdir(parents=True, exist_ok=True)
