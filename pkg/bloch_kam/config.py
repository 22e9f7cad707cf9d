"""
Run configuration loading

Defaults ship as package data (defaults.toml). A user TOML file is deep-merged
over them, CLI overrides are merged last, and the result is validated into a
RunConfig. The only environment variable consulted is BLOCH_KAM_OUTPUT_DIR.
"""

import copy
import os
import sys
from pathlib import Path
from typing import Any, Dict, Mapping, Optional

import structlog
from pydantic import ValidationError

# Handle tomli import for Python < 3.11
if sys.version_info >= (3, 11):
    import tomllib
else:
    try:
        import tomli as tomllib
    except ImportError:
        tomllib = None

from .errors import ConfigError
from .models import RunConfig

logger = structlog.get_logger(__name__)

OUTPUT_DIR_ENV = "BLOCH_KAM_OUTPUT_DIR"


def _get_default_config() -> Dict[str, Any]:
    """Built-in defaults used when the packaged TOML cannot be read"""
    return RunConfig().model_dump(mode="json", exclude_none=True)


def load_defaults(defaults_file: Optional[str] = None) -> Dict[str, Any]:
    """Load default configuration from TOML file"""
    package_dir = Path(__file__).parent.resolve()
    path = Path(defaults_file) if defaults_file else package_dir / "defaults.toml"

    if tomllib is None:
        logger.warning("tomllib not available, using built-in defaults")
        return _get_default_config()
    try:
        with open(path, "rb") as f:
            data = tomllib.load(f)
        logger.debug("Loaded defaults", path=str(path))
        return data
    except FileNotFoundError:
        logger.warning("Defaults file not found, using built-in defaults", path=str(path))
    except Exception as e:
        logger.warning("Failed to load defaults, using built-in defaults", path=str(path), error=str(e))
    return _get_default_config()


def deep_merge(base: Mapping[str, Any], override: Mapping[str, Any]) -> Dict[str, Any]:
    """Recursively merge override into a copy of base; None values are skipped"""
    merged = copy.deepcopy(dict(base))
    for key, value in override.items():
        if value is None:
            continue
        if isinstance(value, Mapping) and isinstance(merged.get(key), Mapping):
            merged[key] = deep_merge(merged[key], value)
        else:
            merged[key] = copy.deepcopy(value)
    return merged


def read_config_file(path: str) -> Dict[str, Any]:
    """Read a user TOML config

    Raises:
        ConfigError: missing file or invalid TOML
    """
    if tomllib is None:
        raise ConfigError("Reading config files needs tomllib (Python >= 3.11) or tomli")
    try:
        with open(path, "rb") as f:
            return tomllib.load(f)
    except FileNotFoundError as e:
        raise ConfigError(f"Config file not found: {path}") from e
    except tomllib.TOMLDecodeError as e:
        raise ConfigError(f"Config file {path} is not valid TOML: {e}") from e


def _format_validation_error(error: ValidationError) -> str:
    parts = []
    for item in error.errors():
        location = ".".join(str(x) for x in item.get("loc", ())) or "config"
        message = item.get("msg", "invalid value")
        message = message.removeprefix("Value error, ")
        parts.append(f"{location}: {message}")
    return "; ".join(parts)


def load_run_config(
    config_path: Optional[str] = None,
    overrides: Optional[Mapping[str, Any]] = None,
    defaults_file: Optional[str] = None,
) -> RunConfig:
    """Merge defaults, config file, environment and CLI overrides into a RunConfig

    Raises:
        ConfigError: unreadable file or a value outside its documented range
    """
    data = load_defaults(defaults_file)
    if config_path:
        data = deep_merge(data, read_config_file(config_path))

    env_output = os.environ.get(OUTPUT_DIR_ENV)
    if env_output:
        data["output_dir"] = env_output

    if overrides:
        data = deep_merge(data, overrides)

    try:
        config = RunConfig.model_validate(data)
    except ValidationError as e:
        raise ConfigError(f"Invalid configuration: {_format_validation_error(e)}") from e
    logger.debug("Run configuration loaded", config_path=config_path, output_dir=config.output_dir)
    return config
