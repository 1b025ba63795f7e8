"""Project pipelines, one per CLI command"""

from typing import Dict

from kedro.pipeline import Pipeline

from .pipelines.clustering import create_clustering_pipeline
from .pipelines.comparison import create_comparison_pipeline
from .pipelines.reproduction import create_reproduction_pipeline
from .pipelines.simulation import create_simulation_pipeline
from .pipelines.training import create_prediction_pipeline, create_training_pipeline


def register_pipelines() -> Dict[str, Pipeline]:
    """
    Register the project's pipelines

    Returns:
        mapping from command name to Pipeline
    """
    return {
        "simulate": create_simulation_pipeline(),
        "fit": create_training_pipeline(),
        "predict": create_prediction_pipeline(),
        "compare": create_comparison_pipeline(),
        "cluster": create_clustering_pipeline(),
        "reproduce-sim-study": create_reproduction_pipeline(),
    }
