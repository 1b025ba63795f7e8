"""
CLI Commands - run a command's Kedro pipeline and write its artifacts
"""

import logging
from pathlib import Path
from typing import Callable, Dict

import pandas as pd

from app.cli.artifacts import ArtifactWriter, merge_metrics, split_prefix
from app.core.dataset import ingest_csv
from app.core.errors import ConfigError
from app.core.svi_engine import load_fitted
from app.schemas.ipgp_schemas import RunConfig
from src.ml_engine.pipeline_registry import register_pipelines
from src.ml_engine.runner import run_in_memory

logger = logging.getLogger(__name__)

CRITERIA_FAILED_EXIT = 4


# ============================================================================
# COMMAND HANDLERS
# ============================================================================

def simulate_command(run_config: RunConfig) -> int:
    outputs = run_in_memory(register_pipelines()["simulate"], {"run_config": run_config})
    writer = ArtifactWriter(run_config.out)
    writer.dataset("train.csv", outputs["train_dataset"])
    writer.dataset("test.csv", outputs["test_dataset"])
    writer.ground_truth(outputs["ground_truth"])
    writer.manifest("simulate", run_config)
    return 0


def fit_command(run_config: RunConfig) -> int:
    outputs = run_in_memory(register_pipelines()["fit"], {"run_config": run_config})
    splits, fitted, reports = outputs["evaluation_splits"], outputs["fitted_models"], outputs["split_metrics"]

    writer = ArtifactWriter(run_config.out)
    for split in splits:
        writer.fitted_model(fitted[split.name], prefix=split_prefix(split.name, len(splits)))
    writer.json("metrics.json", {name: report.model_dump(mode="json") for name, report in reports.items()})
    sweep = outputs["forecast_sweep"]
    if not sweep.empty:
        writer.csv("forecast_sweep.csv", sweep)
    writer.manifest("fit", run_config)
    return 0


def predict_command(run_config: RunConfig) -> int:
    """Score --data with the model that `fit` wrote into --out (single-split runs)"""
    if not run_config.data:
        raise ConfigError("predict needs a query CSV (--data)")
    fitted = load_fitted(run_config.out)
    queries = ingest_csv(run_config.data, fitted.structure.num_levels)
    outputs = run_in_memory(
        register_pipelines()["predict"],
        {"fitted_model": fitted, "query_dataset": queries},
    )

    writer = ArtifactWriter(run_config.out)
    writer.csv("predictions.csv", outputs["predictions"])
    metrics_path = Path(run_config.out) / "metrics.json"
    writer.json("metrics.json", merge_metrics(metrics_path, {"predict": outputs["prediction_metrics"].model_dump(mode="json")}))
    writer.manifest("predict", run_config, name="predict_manifest.json")
    return 0


def compare_command(run_config: RunConfig) -> int:
    outputs = run_in_memory(register_pipelines()["compare"], {"run_config": run_config})
    writer = ArtifactWriter(run_config.out)
    writer.json("comparison.json", outputs["comparison_table"].model_dump(mode="json"))
    writer.manifest("compare", run_config)
    return 0


def cluster_command(run_config: RunConfig) -> int:
    outputs = run_in_memory(register_pipelines()["cluster"], {"run_config": run_config})
    result, model = outputs["cluster_result"], outputs["cluster_model"]

    writer = ArtifactWriter(run_config.out)
    writer.fitted_model(model)
    item_ids = list(model.instance.item_ids)
    for index, centroid in enumerate(result.centroids):
        writer.csv(f"cluster_centroid_{index}.csv", pd.DataFrame(centroid, index=item_ids, columns=item_ids), index=True)
    writer.json("clusters.json", outputs["cluster_report"].model_dump(mode="json"))
    writer.csv("residual_profiles.csv", outputs["residual_profiles"])
    writer.manifest("cluster", run_config)
    return 0


def reproduce_command(run_config: RunConfig) -> int:
    outputs = run_in_memory(register_pipelines()["reproduce-sim-study"], {"run_config": run_config})
    criteria, reports = outputs["criteria"], outputs["criteria_reports"]
    passed = all(result.passed for result in criteria)

    writer = ArtifactWriter(run_config.out)
    writer.csv("table1_desk.csv", outputs["study_table"])
    writer.csv("per_seed_results.csv", outputs["per_seed_results"])
    writer.json("criteria.json", {
        "passed": passed,
        "criteria": [result.model_dump(mode="json") for result in criteria],
        "reports": [result.model_dump(mode="json") for result in reports],
    })
    writer.manifest("reproduce-sim-study", run_config)

    if not passed:
        failed = [result.name for result in criteria if not result.passed]
        logger.error(f"❌ Ordering criteria failed: {', '.join(failed)}")
        return CRITERIA_FAILED_EXIT
    logger.info("✅ All ordering criteria passed")
    return 0


HANDLERS: Dict[str, Callable[[RunConfig], int]] = {
    "simulate": simulate_command,
    "fit": fit_command,
    "predict": predict_command,
    "compare": compare_command,
    "cluster": cluster_command,
    "reproduce-sim-study": reproduce_command,
}


def run_pipeline(command: str, run_config: RunConfig) -> int:
    """
    Run one command end to end

    Returns:
        process exit status (0 on success)

    Raises:
        IPGPError: mapped to its exit code by the caller
    """
    if command not in HANDLERS:
        raise ConfigError(f"unknown command '{command}'", {"available": sorted(HANDLERS)})
    logger.info(f"🔄 {command}: output directory {run_config.out}")
    status = HANDLERS[command](run_config)
    if status == 0:
        logger.info(f"✅ {command} finished")
    return status


__all__ = ["HANDLERS", "run_pipeline"]
