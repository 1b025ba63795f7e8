"""
Configuration - layered run configuration and seed streams

Precedence: RunConfig defaults < config file < CLI flags.
The config file is flat `key=value` text with dotted sections, e.g.

    model.variant=IPGP
    train.learning_rate=0.05
    simulation.num_units=10
    run.seed=3

Keys under `run.` address top-level RunConfig fields. A manifest.json
written by an earlier run is accepted in place of a key/value file.
"""

import json
import logging
import os
import zlib
from pathlib import Path
from typing import Any, Dict, Optional

import numpy as np
from dotenv import dotenv_values, load_dotenv
from pydantic import ValidationError

from app.core.errors import ConfigError
from app.schemas.ipgp_schemas import RunConfig

logger = logging.getLogger(__name__)

LOG_LEVEL_ENV = "IPGP_LOG_LEVEL"
THREADS_ENV = "IPGP_THREADS"

LIST_KEYS = {
    "compare_models",
    "compare_factors",
    "horizon_sweep",
    "prior_weights",
    "simulation.lengthscale_pool",
    "simulation.off_loading_range",
    "simulation.idio_range",
}


# ============================================================================
# ENVIRONMENT
# ============================================================================

def load_environment() -> str:
    """Load `.env` (if present) and return the configured log level name"""
    load_dotenv()
    return os.getenv(LOG_LEVEL_ENV, "INFO").upper()


def configure_threads(threads: Optional[int]) -> None:
    """
    Pin BLAS/OpenMP thread pools and the worker count; must run before jax is first imported
    """
    if threads is None:
        return
    os.environ[THREADS_ENV] = str(threads)
    os.environ["OMP_NUM_THREADS"] = str(threads)
    os.environ["OPENBLAS_NUM_THREADS"] = str(threads)
    os.environ["MKL_NUM_THREADS"] = str(threads)


def worker_count() -> Optional[int]:
    value = os.getenv(THREADS_ENV)
    return int(value) if value else None


# ============================================================================
# SEED STREAMS
# ============================================================================

def derive_seed(root: int, label: str) -> np.random.SeedSequence:
    """Independent, reproducible child seed for a named random stream"""
    return np.random.SeedSequence([int(root) & 0xFFFFFFFF, zlib.crc32(label.encode("utf-8"))])


def rng_for(root: int, label: str) -> np.random.Generator:
    return np.random.default_rng(derive_seed(root, label))


# ============================================================================
# CONFIG FILES
# ============================================================================

def _coerce(key: str, raw: Optional[str]) -> Any:
    if raw is None:
        return None
    text = raw.strip()
    try:
        value = json.loads(text)
    except json.JSONDecodeError:
        value = [part.strip() for part in text.split(",")] if "," in text else text
    if key in LIST_KEYS and not isinstance(value, list):
        value = [value]
    return value


def _nest(flat: Dict[str, Any]) -> Dict[str, Any]:
    nested: Dict[str, Any] = {}
    for dotted, value in flat.items():
        parts = dotted.split(".")
        if parts[0] == "run":
            parts = parts[1:]
        if not parts or not all(parts):
            raise ConfigError(f"malformed config key '{dotted}'")
        target = nested
        for part in parts[:-1]:
            target = target.setdefault(part, {})
            if not isinstance(target, dict):
                raise ConfigError(f"config key '{dotted}' conflicts with a scalar value")
        target[parts[-1]] = value
    return nested


def read_config_file(path: str) -> Dict[str, Any]:
    """Parse a dotted key/value file or a run manifest into nested values"""
    file_path = Path(path)
    if not file_path.is_file():
        raise ConfigError(f"config file not found: {path}")

    if file_path.suffix == ".json":
        try:
            payload = json.loads(file_path.read_text(encoding="utf-8"))
        except json.JSONDecodeError as exc:
            raise ConfigError(f"config file is not valid JSON: {path}", {"error": str(exc)}) from exc
        return payload.get("config", payload)

    flat = {key: _coerce(key.split(".", 1)[-1] if key.startswith("run.") else key, raw) for key, raw in dotenv_values(file_path).items()}
    return _nest(flat)


def _deep_merge(base: Dict[str, Any], update: Dict[str, Any]) -> Dict[str, Any]:
    merged = dict(base)
    for key, value in update.items():
        if isinstance(value, dict) and isinstance(merged.get(key), dict):
            merged[key] = _deep_merge(merged[key], value)
        else:
            merged[key] = value
    return merged


def resolve_run_config(config_path: Optional[str] = None, overrides: Optional[Dict[str, Any]] = None) -> RunConfig:
    """
    Build the validated RunConfig for one invocation

    Args:
        config_path: optional key/value file or manifest.json
        overrides: nested values from CLI flags (None entries are ignored)
    """
    values: Dict[str, Any] = {}
    if config_path:
        values = read_config_file(config_path)
        logger.info(f"📄 Loaded configuration from {config_path}")
    if overrides:
        values = _deep_merge(values, _drop_none(overrides))
    try:
        return RunConfig.model_validate(values)
    except ValidationError as exc:
        raise ConfigError("invalid configuration", {"errors": [f"{'.'.join(map(str, e['loc']))}: {e['msg']}" for e in exc.errors()]}) from exc


def _drop_none(values: Dict[str, Any]) -> Dict[str, Any]:
    cleaned = {}
    for key, value in values.items():
        if isinstance(value, dict):
            nested = _drop_none(value)
            if nested:
                cleaned[key] = nested
        elif value is not None:
            cleaned[key] = value
    return cleaned


__all__ = [
    "load_environment",
    "configure_threads",
    "worker_count",
    "derive_seed",
    "rng_for",
    "read_config_file",
    "resolve_run_config",
]
