import copy
import json
import os
from typing import Any, Dict, Tuple

from dotenv import load_dotenv

DEFAULT_CONFIG: Dict[str, Any] = {
    "dataset": {
        "path": "data/chains",
        "task": "node-multiclass",
        "renormalize": True,
        "relations": False,
        "symmetrize": False,
    },
    "model": {
        "hidden": [16],
        "activation": "relu",
        "b_form": "OUA",
        "kappa": [0.95],
        "relation_kappas": [],
        "inter_layer": False,
        "head": "linear",
        "head_hidden": 32,
        "readout": "sum",
        "dropout": 0.5,
    },
    "training": {
        "optimizer": "adam",
        "lr": 0.01,
        "beta1": 0.9,
        "beta2": 0.999,
        "eps": 1e-8,
        "epochs": 2000,
        "weight_decay": 5e-4,
        "seed": 0,
        "warm_start": True,
    },
    "solver": {
        "tol": 1e-6,
        "max_iter": 300,
        "backward_tol": None,
        "backward_max_iter": None,
        "pf_tol": 1e-8,
        "pf_max_iter": 10000,
    },
    "output": {
        "checkpoint": "out/model.ignn",
        "metrics": None,
        "metrics_every": 1,
        "log_dir": "logs",
        "log_level": "INFO",
        "slow_forward_seconds": 5.0,
        "slow_backward_seconds": 5.0,
        "slow_epoch_seconds": 30.0,
    },
}

# Environment variables that override a dotted config key.
ENV_OVERRIDES = {
    "IGNN_LOG_LEVEL": "output.log_level",
    "IGNN_LOG_DIR": "output.log_dir",
    "IGNN_SEED": "training.seed",
}


class ConfigManager:
    """Manages configuration for training and evaluating implicit graph models."""

    def __init__(self, config_path: str = "config.json"):
        """Initialize configuration manager.

        Args:
            config_path: Path to a JSON file or a ``key = value`` file
        """
        load_dotenv()  # Load environment variables from .env file
        self.config_path = config_path
        self.config = self._load_config()

    @classmethod
    def from_dict(cls, overrides: Dict[str, Any]) -> "ConfigManager":
        """Build a manager from an in-memory mapping merged over the defaults."""
        manager = cls.__new__(cls)
        manager.config_path = None
        config = copy.deepcopy(DEFAULT_CONFIG)
        _merge_checked(config, overrides, "")
        manager.config = config
        return manager

    def _load_config(self) -> Dict[str, Any]:
        """Load configuration from file and environment variables."""
        try:
            with open(self.config_path, 'r', encoding='utf-8') as f:
                text = f.read()
        except FileNotFoundError:
            raise FileNotFoundError(f"Configuration file {self.config_path} not found")

        config = copy.deepcopy(DEFAULT_CONFIG)
        if self.config_path.endswith('.json'):
            try:
                loaded = json.loads(text)
            except json.JSONDecodeError as e:
                raise ValueError(f"Invalid JSON in configuration file: {e}")
            _merge_checked(config, loaded, "")
        else:
            for key, value in _parse_key_value(text, self.config_path):
                _set_dotted(config, key, value)

        for env_name, key in ENV_OVERRIDES.items():
            raw = os.getenv(env_name)
            if raw:
                _set_dotted(config, key, _coerce(raw, _get_dotted(config, key)))

        return config

    def get(self, key: str, default: Any = None) -> Any:
        """Get configuration value by key."""
        keys = key.split('.')
        value = self.config

        for k in keys:
            if isinstance(value, dict) and k in value:
                value = value[k]
            else:
                return default

        return value

    def set(self, key: str, value: Any) -> None:
        """Override a single dotted key; strings are coerced to the default's type."""
        try:
            current = _get_dotted(self.config, key)
        except KeyError:
            raise ValueError(f"Unknown configuration key {key!r}")
        if isinstance(value, str):
            value = _coerce(value, current)
        _set_dotted(self.config, key, value)

    def get_dataset_config(self) -> Dict[str, Any]:
        """Get dataset configuration."""
        return self.config.get('dataset', {})

    def get_model_config(self) -> Dict[str, Any]:
        """Get model configuration."""
        return self.config.get('model', {})

    def get_training_config(self) -> Dict[str, Any]:
        """Get training configuration."""
        return self.config.get('training', {})

    def get_solver_config(self) -> Dict[str, Any]:
        """Get solver configuration."""
        return self.config.get('solver', {})

    def get_output_config(self) -> Dict[str, Any]:
        """Get output configuration."""
        return self.config.get('output', {})


def _parse_key_value(text: str, source: str):
    for lineno, raw in enumerate(text.splitlines(), start=1):
        line = raw.split('#', 1)[0].strip()
        if not line:
            continue
        if '=' not in line:
            raise ValueError(f"{source}:{lineno}: expected 'key = value', got {raw.strip()!r}")
        key, value = (part.strip() for part in line.split('=', 1))
        try:
            current = _get_dotted(DEFAULT_CONFIG, key)
        except KeyError:
            raise ValueError(f"{source}:{lineno}: unknown configuration key {key!r}")
        yield key, _coerce(value, current)


def _merge_checked(base: Dict[str, Any], incoming: Dict[str, Any], prefix: str) -> None:
    for key, value in incoming.items():
        dotted = f"{prefix}{key}"
        if key not in base:
            raise ValueError(f"Unknown configuration key {dotted!r}")
        if isinstance(base[key], dict):
            if not isinstance(value, dict):
                raise ValueError(f"Configuration section {dotted!r} must be an object")
            _merge_checked(base[key], value, dotted + '.')
        else:
            base[key] = value


def _split(key: str) -> Tuple[str, str]:
    if '.' not in key:
        raise KeyError(key)
    section, name = key.split('.', 1)
    return section, name


def _get_dotted(config: Dict[str, Any], key: str) -> Any:
    section, name = _split(key)
    if section not in config or name not in config[section]:
        raise KeyError(key)
    return config[section][name]


def _set_dotted(config: Dict[str, Any], key: str, value: Any) -> None:
    try:
        _get_dotted(DEFAULT_CONFIG, key)
    except KeyError:
        raise ValueError(f"Unknown configuration key {key!r}")
    section, name = _split(key)
    config[section][name] = value


def _coerce(raw: str, current: Any) -> Any:
    """Convert a textual value to the type of the current/default value."""
    text = raw.strip()
    if text.lower() in ('none', 'null', ''):
        return None
    try:
        if isinstance(current, bool):
            if text.lower() in ('true', 'yes', '1', 'on'):
                return True
            if text.lower() in ('false', 'no', '0', 'off'):
                return False
            raise ValueError(text)
        if isinstance(current, list):
            items = [item.strip() for item in text.split(',') if item.strip()]
            return [_number(item) for item in items]
        if isinstance(current, int):
            return int(text)
        if isinstance(current, float) or current is None:
            return _number(text)
    except ValueError:
        raise ValueError(f"Invalid configuration value {raw!r}")
    return text


def _number(text: str) -> Any:
    for cast in (int, float):
        try:
            return cast(text)
        except ValueError:
            continue
    return text
