import json
import logging
import os
from dataclasses import asdict, dataclass, field, fields
from typing import Dict, Optional, Tuple, Union, get_args, get_origin

from dotenv import load_dotenv

from config import DEFAULT_LOG_LEVEL, LOG_FORMAT
from networks.affinity import AffinityConfig
from networks.backbones import GlobalEncoderConfig, LocalEncoderConfig
from training.losses import LossWeights

logger = logging.getLogger(__name__)

_NESTED = {
    'loss_weights': LossWeights,
    'global_encoder': GlobalEncoderConfig,
    'local_encoder': LocalEncoderConfig,
    'affinity': AffinityConfig,
}


@dataclass
class TrainConfig:
    batch_size: int = 8
    epochs: int = 100
    early_stop_patience: int = 10
    lr: float = 1e-3
    betas: Tuple[float, float] = (0.9, 0.999)
    adam_eps: float = 1e-8
    grad_clip: float = 5.0
    loss_weights: LossWeights = field(default_factory=LossWeights)
    use_ral: bool = True
    use_gae: bool = True
    augment: bool = True
    seed: int = 0
    split: Tuple[float, float, float] = (0.7, 0.1, 0.2)
    threshold: float = 0.5
    bootstrap_resamples: int = 1000
    pretrained_global: Optional[str] = None
    global_encoder: GlobalEncoderConfig = field(default_factory=GlobalEncoderConfig)
    local_encoder: LocalEncoderConfig = field(default_factory=LocalEncoderConfig)
    affinity: AffinityConfig = field(default_factory=AffinityConfig)

    def __post_init__(self):
        self.betas = tuple(float(b) for b in self.betas)
        self.split = tuple(float(s) for s in self.split)
        if self.batch_size < 1:
            raise ValueError(f"batch_size must be >= 1, got {self.batch_size}")
        if self.epochs < 1:
            raise ValueError(f"epochs must be >= 1, got {self.epochs}")
        if not 0 < self.early_stop_patience < self.epochs:
            raise ValueError(f"early_stop_patience must lie in 1..epochs-1, got {self.early_stop_patience}")
        if len(self.split) != 3 or min(self.split) < 0 or abs(sum(self.split) - 1.0) > 1e-9:
            raise ValueError(f"split fractions must be three non-negative numbers summing to 1, got {self.split}")
        if len(self.betas) != 2 or not all(0.0 <= b < 1.0 for b in self.betas):
            raise ValueError(f"betas must be two values in [0, 1), got {self.betas}")

    def to_dict(self) -> Dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, data: Dict) -> "TrainConfig":
        """Build a config from a JSON-style dict; unknown keys are rejected"""
        return _build(cls, data)


def _build(cls, data: Dict):
    if not isinstance(data, dict):
        raise ValueError(f"{cls.__name__} section must be a JSON object")
    known = {f.name for f in fields(cls)}
    unknown = sorted(set(data) - known)
    if unknown:
        raise ValueError(f"unknown {cls.__name__} keys: {unknown}")
    values = dict(data)
    for f in fields(cls):
        if f.name not in values:
            continue
        nested = _NESTED.get(f.name) if cls is TrainConfig else None
        if nested is None:
            _check_type(cls, f, values[f.name])
        elif not isinstance(values[f.name], nested):
            values[f.name] = _build(nested, values[f.name])
    try:
        return cls(**values)
    except TypeError as e:
        raise ValueError(f"invalid {cls.__name__}: {e}") from e


_SCALAR_TYPES = {int: (int,), float: (int, float), bool: (bool,), str: (str,)}


def _is_number(value) -> bool:
    return isinstance(value, (int, float)) and not isinstance(value, bool)


def _check_type(cls, f, value) -> None:
    """JSON values must match the field's declared type; ints are accepted for floats"""
    expected = f.type
    args = get_args(expected)
    if get_origin(expected) is Union and type(None) in args:
        if value is None:
            return
        expected = next(a for a in args if a is not type(None))
    if expected in _SCALAR_TYPES:
        ok = isinstance(value, _SCALAR_TYPES[expected]) and (expected is bool or not isinstance(value, bool))
    elif get_origin(expected) is tuple:
        ok = isinstance(value, (list, tuple)) and all(_is_number(v) for v in value)
    else:
        ok = True
    if not ok:
        raise ValueError(f"{cls.__name__}.{f.name} has the wrong type: {value!r}")


def load_train_config(path: Optional[str]) -> TrainConfig:
    """Load a TrainConfig JSON file; no path means defaults"""
    if path is None:
        return TrainConfig()
    with open(path, 'r', encoding='utf-8') as f:
        try:
            data = json.load(f)
        except json.JSONDecodeError as e:
            raise ValueError(f"config {path} is not valid JSON: {e}") from e
    return TrainConfig.from_dict(data)


def save_train_config(config: TrainConfig, path: str) -> None:
    with open(path, 'w', encoding='utf-8') as f:
        json.dump(config.to_dict(), f, indent=2)


def configure_logging(level: Optional[str] = None) -> None:
    """Configure root logging once; level falls back to WEGA_LOG_LEVEL from the environment or .env"""
    load_dotenv()
    level = (level or os.environ.get('WEGA_LOG_LEVEL', DEFAULT_LOG_LEVEL)).upper()
    logging.basicConfig(level=getattr(logging, level, logging.INFO), format=LOG_FORMAT)


def default_data_dir() -> Optional[str]:
    return os.environ.get('WEGA_DATA_DIR')
