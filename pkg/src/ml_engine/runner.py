"""
In-process Kedro execution over an in-memory catalog
"""

import logging
from typing import Any, Dict

from kedro.io import DataCatalog, MemoryDataset
from kedro.pipeline import Pipeline
from kedro.runner import SequentialRunner

logger = logging.getLogger(__name__)


class RetainedMemoryDataset(MemoryDataset):
    """MemoryDataset that keeps its data when the runner releases it"""

    def _release(self) -> None:
        # intermediate outputs are read back after the run
        pass


def run_in_memory(pipeline: Pipeline, inputs: Dict[str, Any]) -> Dict[str, Any]:
    """
    Run a pipeline with its free inputs fed from memory

    Objects are passed by reference between nodes (no copies), so fitted
    models and datasets keep their identity.

    Args:
        pipeline: Kedro pipeline
        inputs: value for every free input of the pipeline

    Returns:
        every dataset the pipeline produced, by name
    """
    missing = sorted(pipeline.inputs() - set(inputs))
    if missing:
        raise ValueError(f"pipeline inputs not provided: {missing}")

    datasets = {name: RetainedMemoryDataset(data=value, copy_mode="assign") for name, value in inputs.items()}
    for name in pipeline.all_outputs():
        datasets[name] = RetainedMemoryDataset(copy_mode="assign")
    catalog = DataCatalog(datasets=datasets)

    logger.info(f"🔄 Running pipeline with {len(pipeline.nodes)} nodes")
    SequentialRunner().run(pipeline, catalog)
    return {name: catalog.load(name) for name in sorted(pipeline.all_outputs())}


__all__ = ["RetainedMemoryDataset", "run_in_memory"]
