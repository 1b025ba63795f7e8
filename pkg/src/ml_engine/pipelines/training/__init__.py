"""
Training Pipeline - fit a model variant under an evaluation protocol

Produces:
- evaluation_splits: train/test partitions (random, forecast or leave-one-trait-out)
- fitted_models: one FittedModel per split
- split_metrics: in-sample and held-out ACC/LL per split
- forecast_sweep: ACC/LL against forecast horizon (forecast protocol only)

The prediction pipeline scores a query file with a previously fitted model.
"""

from kedro.pipeline import Pipeline, node

from .nodes import (
    EvaluationSplit,
    build_evaluation_splits,
    evaluate_splits,
    fit_splits,
    forecast_sweep_table,
    load_input_datasets,
    predict_queries,
    prior_loadings_for,
    train_config_for,
)


def create_data_pipeline() -> Pipeline:
    """Ingestion and protocol splitting shared by every data-driven command"""
    return Pipeline([
        node(
            func=load_input_datasets,
            inputs="run_config",
            outputs="input_datasets",
            name="ingest_csv",
            tags=["data"]
        ),
        node(
            func=build_evaluation_splits,
            inputs=["run_config", "input_datasets"],
            outputs="evaluation_splits",
            name="evaluation_protocol",
            tags=["data"]
        ),
    ])


def create_training_pipeline() -> Pipeline:
    """
    Create the fit pipeline

    Inputs:
        run_config: resolved RunConfig

    Returns:
        Kedro Pipeline object
    """
    return create_data_pipeline() + Pipeline([
        node(
            func=fit_splits,
            inputs=["run_config", "evaluation_splits"],
            outputs="fitted_models",
            name="fit_model",
            tags=["training"]
        ),
        node(
            func=evaluate_splits,
            inputs=["evaluation_splits", "fitted_models"],
            outputs="split_metrics",
            name="evaluate_model",
            tags=["training", "metrics"]
        ),
        node(
            func=forecast_sweep_table,
            inputs=["run_config", "input_datasets", "fitted_models"],
            outputs="forecast_sweep",
            name="forecast_horizon_sweep",
            tags=["training", "metrics"]
        ),
    ])


def create_prediction_pipeline() -> Pipeline:
    """
    Create the predict pipeline

    Inputs:
        fitted_model: FittedModel loaded from a fit output directory
        query_dataset: ResponseDataset of (unit, item, time) queries
    """
    return Pipeline([
        node(
            func=predict_queries,
            inputs=["fitted_model", "query_dataset"],
            outputs=["predictions", "prediction_metrics"],
            name="predict_responses",
            tags=["prediction"]
        ),
    ])


__all__ = [
    "EvaluationSplit",
    "create_data_pipeline",
    "create_training_pipeline",
    "create_prediction_pipeline",
    "prior_loadings_for",
    "train_config_for",
]
