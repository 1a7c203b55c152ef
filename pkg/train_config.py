"""Training hyperparameters and the flat ``key = value`` config file."""

from __future__ import annotations

import logging
from dataclasses import asdict, dataclass, fields, replace
from pathlib import Path
from typing import Any, Dict, Optional, Tuple, Union

from model import ModelConfig

logger = logging.getLogger("pcl.train_config")

METHOD_KEY = "method"
_TRUE = {"1", "true", "yes", "on"}
_FALSE = {"0", "false", "no", "off"}


@dataclass(frozen=True)
class TrainConfig:
    """Optimizer, RL and model-shape settings for one run.

    Both SFT tracks and the RL term enter every combined step unweighted.
    """

    beta: float = 0.04
    group_size: int = 8
    epochs: int = 2
    learning_rate: float = 1e-3
    adam_beta1: float = 0.9
    adam_beta2: float = 0.999
    adam_eps: float = 1e-8
    batch_size: int = 16
    rl_questions: int = 4
    max_new: int = 320
    temperature: float = 1.0
    grad_clip: float = 1.0
    max_steps_per_epoch: int = 0
    seed: int = 0
    context_length: int = 384
    d_model: int = 128
    n_heads: int = 4
    n_layers: int = 2
    precision: str = "float64"

    def __post_init__(self) -> None:
        if self.beta < 0:
            raise ValueError(f"beta must be >= 0, got {self.beta}")
        if self.group_size < 2:
            raise ValueError(f"group_size must be >= 2, got {self.group_size}")
        if self.epochs < 1:
            raise ValueError(f"epochs must be >= 1, got {self.epochs}")
        if self.learning_rate <= 0:
            raise ValueError(f"learning_rate must be > 0, got {self.learning_rate}")
        if self.batch_size < 1 or self.rl_questions < 1:
            raise ValueError("batch_size and rl_questions must be >= 1")
        if self.max_new < 1:
            raise ValueError(f"max_new must be >= 1, got {self.max_new}")
        if self.temperature <= 0:
            raise ValueError(f"temperature must be > 0, got {self.temperature}")
        if self.grad_clip < 0 or self.max_steps_per_epoch < 0:
            raise ValueError("grad_clip and max_steps_per_epoch must be >= 0")
        self.model_config()

    def model_config(self) -> ModelConfig:
        return ModelConfig(
            context_length=self.context_length,
            d_model=self.d_model,
            n_heads=self.n_heads,
            n_layers=self.n_layers,
            precision=self.precision,
        )

    def to_dict(self) -> Dict[str, Any]:
        return asdict(self)

    def with_overrides(self, **overrides: Any) -> "TrainConfig":
        return replace(self, **{k: v for k, v in overrides.items() if v is not None})

    @classmethod
    def from_dict(cls, data: Dict[str, Any]) -> "TrainConfig":
        types = _field_types()
        unknown = set(data) - set(types)
        if unknown:
            raise ValueError(f"Unknown config key(s): {', '.join(sorted(unknown))}")
        return cls(**{key: _coerce(key, value, types[key]) for key, value in data.items()})


def _field_types() -> Dict[str, str]:
    # annotations are strings under postponed evaluation
    return {f.name: str(f.type) for f in fields(TrainConfig)}


def _coerce(key: str, value: Any, type_name: str) -> Any:
    if not isinstance(value, str):
        return value
    text = value.strip()
    try:
        if type_name == "bool":
            lowered = text.lower()
            if lowered in _TRUE:
                return True
            if lowered in _FALSE:
                return False
            raise ValueError(text)
        if type_name == "int":
            return int(text)
        if type_name == "float":
            return float(text)
    except ValueError:
        raise ValueError(f"Config key {key!r} expects {type_name}, got {value!r}") from None
    return text


def parse_config_text(text: str, source: str = "<config>") -> Tuple[Dict[str, str], Optional[str]]:
    """Raw key/value pairs and the optional method name."""
    values: Dict[str, str] = {}
    method: Optional[str] = None
    for line_num, raw in enumerate(text.splitlines(), 1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ValueError(f"{source}:{line_num}: expected 'key = value', got {raw!r}")
        key, value = (part.strip() for part in line.split("=", 1))
        if not key:
            raise ValueError(f"{source}:{line_num}: empty key")
        if key in values or (key == METHOD_KEY and method is not None):
            raise ValueError(f"{source}:{line_num}: duplicate key {key!r}")
        if key == METHOD_KEY:
            method = value
        else:
            values[key] = value
    return values, method


def load_config(path: Union[str, Path]) -> Tuple[TrainConfig, Optional[str]]:
    """Read a config file into a TrainConfig plus the method it names."""
    path = Path(path)
    values, method = parse_config_text(path.read_text(encoding="utf-8"), str(path))
    config = TrainConfig.from_dict(values)
    logger.debug("Loaded config %s: %s (method=%s)", path, values, method)
    return config, method
