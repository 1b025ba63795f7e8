"""
App Schemas Package
Exports all schemas for easy importing
"""

from .ipgp_schemas import (
    ClusterReport,
    ComparisonRow,
    ComparisonTable,
    CriterionResult,
    FitReport,
    MetricReport,
    ModelSpec,
    ModelVariant,
    RunConfig,
    RunManifest,
    SimulationConfig,
    TrainConfig,
    WPopMode,
)

__all__ = [
    # Configuration
    'ModelSpec',
    'ModelVariant',
    'WPopMode',
    'TrainConfig',
    'SimulationConfig',
    'RunConfig',
    # Reports
    'MetricReport',
    'FitReport',
    'ComparisonRow',
    'ComparisonTable',
    'ClusterReport',
    'CriterionResult',
    'RunManifest',
]
