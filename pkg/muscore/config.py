"""
Central configuration loader with sane defaults and environment overlay.
"""

import copy
import os
import yaml
from pathlib import Path
from typing import Dict, Any, Iterable, Optional
import logging

logger = logging.getLogger(__name__)

MODALITIES = ("2d", "3d", "multimodal")
POOLINGS = ("similarity", "average")

DEFAULT = {
    "grouping": {
        "num_groups": 1024,
        "group_size": 128,
        "k_iter": 80,
        "curvature_threshold": 0.01,
        "ipg_enabled": True,
    },
    "aggregation": {
        "degrees": [1, 3, 5],
        "pooling": "similarity",
    },
    "scoring": {
        "interval_percent": 30.0,
        "cae_enabled": True,
        "lambda_clamp": True,
        "confidence_weight": True,
    },
    "subsets": {
        "g": 1,
        "seed": 0,
    },
    "maps": {
        "idw_power": 2.0,
        "idw_neighbors": 3,
        "idw_eps": 1e-12,
    },
    "rescon": {
        "enabled": True,
        "window": 7,
        "window_mask": True,
    },
    "descriptor": {
        "stages": 3,
        "radius": 0.08,
        "bins": 8,
    },
    "run": {
        "modality": "multimodal",
        "workers": 1,
        "write_png": False,
        "colormap": "turbo",
        "cache": True,
        "progress": True,
    },
    "paths": {
        "output": "runs/latest",
        "cache": "store/cache",
    },
}


def load_config(config_path: str = None) -> Dict[str, Any]:
    """Load configuration from file and environment variables."""

    # Start with defaults
    config = copy.deepcopy(DEFAULT)

    # Load from YAML file if exists
    if config_path and Path(config_path).exists():
        try:
            with open(config_path, 'r') as f:
                file_config = yaml.safe_load(f)
                if file_config:
                    config = _deep_merge(config, file_config)
        except Exception as e:
            logger.warning(f"Failed to load config from {config_path}: {e}")
    elif config_path:
        logger.warning(f"Config file not found, using defaults: {config_path}")

    # Override with environment variables
    config = _apply_env_overrides(config)

    # Ensure paths are absolute
    config = _resolve_paths(config)

    return config


def _deep_merge(base: Dict, override: Dict) -> Dict:
    """Recursively merge dictionaries."""
    result = copy.deepcopy(base)

    for key, value in override.items():
        if key in result and isinstance(result[key], dict) and isinstance(value, dict):
            result[key] = _deep_merge(result[key], value)
        else:
            result[key] = value

    return result


def _apply_env_overrides(config: Dict) -> Dict:
    """Apply environment variable overrides."""

    # Worker count fallback when no flag is given
    if os.getenv("MUSCORE_WORKERS"):
        try:
            config["run"]["workers"] = int(os.getenv("MUSCORE_WORKERS"))
        except ValueError:
            logger.warning(f"Ignoring non-integer MUSCORE_WORKERS={os.getenv('MUSCORE_WORKERS')!r}")

    # Path settings
    if os.getenv("MUSCORE_OUTPUT"):
        config["paths"]["output"] = os.getenv("MUSCORE_OUTPUT")
    if os.getenv("MUSCORE_CACHE"):
        config["paths"]["cache"] = os.getenv("MUSCORE_CACHE")

    return config


def _resolve_paths(config: Dict) -> Dict:
    """Resolve relative paths to absolute paths."""
    for key in ("output", "cache"):
        config["paths"][key] = str(Path(config["paths"][key]).expanduser().resolve())
    return config


def apply_overrides(config: Dict[str, Any], overrides: Iterable[str]) -> Dict[str, Any]:
    """Apply `section.key=value` overrides; values are parsed as YAML scalars."""
    result = copy.deepcopy(config)

    for item in overrides or []:
        if "=" not in item:
            raise ValueError(f"Override must look like section.key=value: {item!r}")
        dotted, raw = item.split("=", 1)
        keys = dotted.strip().split(".")
        node = result
        for key in keys[:-1]:
            if not isinstance(node.get(key), dict):
                raise KeyError(f"Unknown config section in override: {dotted}")
            node = node[key]
        if keys[-1] not in node:
            raise KeyError(f"Unknown config key in override: {dotted}")
        node[keys[-1]] = yaml.safe_load(raw)
        logger.debug(f"Config override {dotted} = {node[keys[-1]]!r}")

    return result


def get_config(config_path: str = None, overrides: Optional[Iterable[str]] = None) -> Dict[str, Any]:
    """Get the effective configuration: defaults < file < environment < flags."""
    config = load_config(config_path)
    if overrides:
        config = _resolve_paths(apply_overrides(config, overrides))
    return config


def validate_config(config: Dict) -> bool:
    """Validate configuration values."""
    try:
        grouping = config["grouping"]
        if grouping["num_groups"] < 1 or grouping["group_size"] < 1:
            logger.error("Group count and group size must be positive")
            return False
        if not (1 <= grouping["k_iter"] < grouping["group_size"]):
            logger.error("k_iter must satisfy 1 <= k_iter < group_size")
            return False
        if grouping["curvature_threshold"] < 0:
            logger.error("Curvature threshold must be non-negative")
            return False

        degrees = list(config["aggregation"]["degrees"])
        if not degrees or degrees[0] != 1 or degrees != sorted(set(degrees)):
            logger.error("Aggregation degrees must be ascending, unique and start at 1")
            return False
        if any(r % 2 == 0 for r in degrees):
            logger.error("Aggregation degrees must be odd")
            return False
        if config["aggregation"]["pooling"] not in POOLINGS:
            logger.error(f"Pooling must be one of {POOLINGS}")
            return False

        if not (0 < config["scoring"]["interval_percent"] <= 100):
            logger.error("Interval percent must be in (0, 100]")
            return False

        if config["subsets"]["g"] < 1:
            logger.error("Subset count must be at least 1")
            return False

        if config["maps"]["idw_power"] <= 0 or config["maps"]["idw_neighbors"] < 1:
            logger.error("IDW power must be positive and neighbor count at least 1")
            return False

        if config["rescon"]["window"] < 1:
            logger.error("RsCon window must be at least 1")
            return False

        if config["descriptor"]["stages"] < 1 or config["descriptor"]["bins"] < 1:
            logger.error("Descriptor stages and bins must be positive")
            return False

        if config["run"]["modality"] not in MODALITIES:
            logger.error(f"Modality must be one of {MODALITIES}")
            return False
        if config["run"]["workers"] < 1:
            logger.error("Worker count must be at least 1")
            return False

        return True

    except KeyError as e:
        logger.error(f"Missing required config key: {e}")
        return False
    except Exception as e:
        logger.error(f"Config validation error: {e}")
        return False


def config_echo(config: Dict[str, Any]) -> Dict[str, Any]:
    """Flatten the effective configuration into `section.key` entries."""
    echo = {}
    for section, values in config.items():
        if isinstance(values, dict):
            for key, value in values.items():
                echo[f"{section}.{key}"] = value
        else:
            echo[section] = values
    return echo


if __name__ == "__main__":
    # Test the config loader
    config = get_config()
    print("Configuration loaded successfully:")
    print(f"Groups: {config['grouping']['num_groups']} x {config['grouping']['group_size']}")
    print(f"Degrees: {config['aggregation']['degrees']}")
    print(f"Interval: {config['scoring']['interval_percent']}%")
    print(f"Output path: {config['paths']['output']}")
