"""
Robust JSON Serialization Utils - numpy / JAX / pandas values in run artifacts
"""
import json
from enum import Enum
from pathlib import Path

import numpy as np
import pandas as pd
from pydantic import BaseModel


class RobustJSONEncoder(json.JSONEncoder):
    """
    JSON encoder for artifact files:
    - NaN, Inf, -Inf → None
    - numpy / JAX scalars and arrays → Python numbers and lists
    - pydantic models → their JSON-mode dump
    - Enums → their value, Paths → strings
    """

    def default(self, obj):
        return serialize_for_json(obj) if not isinstance(obj, (dict, list)) else super().default(obj)


def _is_array_like(obj) -> bool:
    # jax.Array exposes __array__ and a shape; avoids importing jax here
    return hasattr(obj, "__array__") and hasattr(obj, "shape") and not isinstance(obj, (np.ndarray, np.generic))


def serialize_for_json(obj):
    """
    Recursively convert an object to JSON-safe values

    Handles nested dicts/lists/tuples, numpy and JAX arrays, numpy scalars,
    non-finite floats, pandas NA, enums, paths and pydantic models.
    """
    if isinstance(obj, dict):
        return {str(k): serialize_for_json(v) for k, v in obj.items()}

    elif isinstance(obj, (list, tuple)):
        return [serialize_for_json(v) for v in obj]

    elif isinstance(obj, BaseModel):
        return serialize_for_json(obj.model_dump(mode="json"))

    elif isinstance(obj, Enum):
        return serialize_for_json(obj.value)

    elif isinstance(obj, bool):
        return obj

    # Handle floats (NaN, Inf)
    elif isinstance(obj, float):
        if np.isnan(obj) or np.isinf(obj):
            return None
        return obj

    # Handle numpy types
    elif isinstance(obj, np.bool_):
        return bool(obj)
    elif isinstance(obj, (np.integer, np.floating)):
        if isinstance(obj, np.floating) and (np.isnan(obj) or np.isinf(obj)):
            return None
        return float(obj) if isinstance(obj, np.floating) else int(obj)

    # Handle numpy / JAX arrays
    elif isinstance(obj, np.ndarray):
        return serialize_for_json(obj.tolist())
    elif _is_array_like(obj):
        return serialize_for_json(np.asarray(obj).tolist())

    elif isinstance(obj, Path):
        return str(obj)

    # Handle pandas NA/NaT
    elif obj is not None and not isinstance(obj, (str, int)) and pd.api.types.is_scalar(obj) and pd.isna(obj):
        return None

    return obj


def safe_json_dumps(obj, **kwargs):
    """
    Safe JSON serialization with custom encoder

    Usage:
        json_str = safe_json_dumps(data, indent=2, sort_keys=True)
    """
    return json.dumps(serialize_for_json(obj), cls=RobustJSONEncoder, allow_nan=False, **kwargs)


def write_json(path, obj) -> Path:
    """Write an artifact with sorted keys so reruns are byte-identical"""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(safe_json_dumps(obj, indent=2, sort_keys=True) + "\n", encoding="utf-8")
    return path


def safe_json_loads(json_str):
    """
    Safe JSON deserialization
    """
    return json.loads(json_str)
