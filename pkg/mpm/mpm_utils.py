"""
Shared utilities: exception hierarchy, default loading and JSON conversion.
"""
import json
import os
from enum import Enum
from typing import Any, Dict, List, Optional

import numpy as np
import structlog

logger = structlog.get_logger(__name__)

DEFAULTS_FILE = os.path.join(os.path.dirname(__file__), "..", "config", "experiment_defaults.json")


class MPMError(Exception):
    """Base class for toolkit errors."""


class GeometryError(MPMError, ValueError):
    """Invalid mesh dimensions, region literals or mismatched grids."""


class MaterialError(MPMError, ValueError):
    """Invalid law, violated contrast condition or unsupported law kind."""


class ExcitationError(MPMError, ValueError):
    """Invalid boundary data or family recipe."""


class DegenerateExcitationError(ExcitationError):
    """Boundary data vanished after zero-mean projection (input was constant)."""


class ImagingError(MPMError, ValueError):
    """Incomplete measurements, empty test family or invalid noise sequence."""


class OracleError(MPMError, ValueError):
    """Oracle called outside its size limits."""


class SolverError(MPMError, RuntimeError):
    """Forward solve did not converge."""

    def __init__(self, message: str, residual_history: Optional[List[float]] = None):
        super().__init__(message)
        self.residual_history = list(residual_history or [])


class ConfigValidationError(MPMError, ValueError):
    """Aggregated configuration violations; every violated clause is listed."""

    def __init__(self, violations: List[str]):
        self.violations = list(violations)
        super().__init__("Invalid experiment configuration:\n" + "\n".join(f"  - {v}" for v in self.violations))


def deep_merge(base: Dict[str, Any], override: Dict[str, Any]) -> Dict[str, Any]:
    """Recursively merge ``override`` into a copy of ``base``."""
    merged = dict(base)
    for key, value in override.items():
        if isinstance(value, dict) and isinstance(merged.get(key), dict):
            merged[key] = deep_merge(merged[key], value)
        else:
            merged[key] = value
    return merged


def load_experiment_defaults() -> Dict[str, Any]:
    """Loads the default experiment document from the config directory."""
    try:
        if os.path.exists(DEFAULTS_FILE):
            with open(DEFAULTS_FILE, "r") as f:
                params = json.load(f)
            logger.debug("✅ Loaded experiment defaults", path=DEFAULTS_FILE)
            return params
        logger.warning("❌ Experiment defaults file not found", path=DEFAULTS_FILE)
    except (OSError, json.JSONDecodeError) as e:
        logger.warning("❌ Error loading experiment defaults", error=str(e))

    logger.info("🔄 Using built-in experiment defaults")
    return {
        "mesh": {"nx": 16, "ny": 16, "extent": [1.0, 1.0]},
        "background": {"value": 1.0},
        "anomaly": {
            "regions": [{"shape": "rect", "i0": 6, "j0": 6, "i1": 10, "j1": 10}],
            "law": {"name": "sigmoid", "params": {"a": 2.0, "b": 1.0, "s0": 1.0},
                    "kind": "bounded-nl", "gamma_lo": 2.0, "gamma_hi": 3.0},
            "contrast": "high",
            "limit": "none",
        },
        "excitations": {"type": "fourier", "K": 8, "n_max": 8},
        "noise": {"eta1": 0.0, "eta2": 0.0, "seed": 0},
        "regularization": {},
        "tests": {"block": 2, "stride": 1},
    }


def convert_to_json_serializable(data: Any) -> Any:
    """Converts data (numpy scalars/arrays, enums, nested containers) to be JSON serializable."""
    if isinstance(data, dict):
        return {str(k): convert_to_json_serializable(v) for k, v in data.items()}
    elif isinstance(data, (list, tuple)):
        return [convert_to_json_serializable(i) for i in data]
    elif isinstance(data, np.ndarray):
        return convert_to_json_serializable(data.tolist())
    elif isinstance(data, np.bool_):
        return bool(data)
    elif isinstance(data, np.integer):
        return int(data)
    elif isinstance(data, np.floating):
        return float(data)
    elif isinstance(data, Enum):
        return data.value
    elif hasattr(data, "model_dump"):
        return convert_to_json_serializable(data.model_dump(mode="json"))
    elif hasattr(data, "isoformat"):
        return data.isoformat()
    return data
