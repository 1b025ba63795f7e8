"""
Comparison Pipeline - ELBO-based Bayes factors over variants or factor counts
"""

from kedro.pipeline import Pipeline, node

from ..training import create_data_pipeline
from .nodes import compare_models, comparison_specs, fit_comparison_models


def create_comparison_pipeline() -> Pipeline:
    """
    Create the compare pipeline

    Inputs:
        run_config: resolved RunConfig

    Returns:
        Kedro Pipeline object producing comparison_table
    """
    return create_data_pipeline() + Pipeline([
        node(
            func=comparison_specs,
            inputs="run_config",
            outputs="comparison_specs",
            name="comparison_pool",
            tags=["comparison"]
        ),
        node(
            func=fit_comparison_models,
            inputs=["run_config", "evaluation_splits", "comparison_specs"],
            outputs="comparison_models",
            name="fit_comparison_models",
            tags=["comparison", "training"]
        ),
        node(
            func=compare_models,
            inputs=["run_config", "evaluation_splits", "comparison_models"],
            outputs="comparison_table",
            name="bayes_factor_table",
            tags=["comparison"]
        ),
    ])


__all__ = ["create_comparison_pipeline"]
