"""
Error hierarchy for the IPGP toolkit.

Every error carries the exit code the command line reports for it.
"""

from typing import Any, Dict, Optional


class IPGPError(Exception):
    """Base class for all toolkit errors"""

    exit_code: int = 1

    def __init__(self, message: str, diagnostics: Optional[Dict[str, Any]] = None):
        super().__init__(message)
        self.message = message
        self.diagnostics = diagnostics or {}

    def __str__(self) -> str:
        if not self.diagnostics:
            return self.message
        details = ", ".join(f"{key}={value}" for key, value in self.diagnostics.items())
        return f"{self.message} ({details})"


class ConfigError(IPGPError):
    """Invalid or inconsistent configuration"""
    exit_code = 2


class StructuralError(IPGPError):
    """Dimension mismatch or inconsistent model structure"""
    exit_code = 2


class DataError(IPGPError):
    """Malformed, duplicated or out-of-range observations"""
    exit_code = 3


class ComparisonError(IPGPError):
    """Models compared on different observations"""
    exit_code = 3


class NumericalError(IPGPError):
    """Factorization failure, NaN objective, degenerate matrix"""
    exit_code = 4


class ParameterDomainError(IPGPError):
    """Parameter outside its domain (non-positive length scale, unordered cuts)"""
    exit_code = 4


class MetricError(IPGPError):
    """Metric undefined for the given inputs"""
    exit_code = 4


__all__ = [
    "IPGPError",
    "ConfigError",
    "StructuralError",
    "DataError",
    "ComparisonError",
    "NumericalError",
    "ParameterDomainError",
    "MetricError",
]
