"""
Training Pipeline Nodes - data loading, evaluation protocols, fitting and prediction
"""

import logging
from dataclasses import dataclass
from pathlib import Path
from typing import Dict, List, Optional, Tuple

import numpy as np
import pandas as pd

from app.core.dataset import ResponseDataset, ingest_csv, read_loadings_csv
from app.core.errors import ConfigError
from app.core.metrics import accuracy_and_ll
from app.core.simulation import forecast_split, forecast_sweep, leave_one_trait_out_splits, random_split
from app.core.svi_engine import FittedModel, predict_responses
from app.models.ipgp_models import ModelFitter, evaluate_model
from app.schemas.ipgp_schemas import FitReport, MetricReport, RunConfig, TrainConfig, WPopMode

logger = logging.getLogger(__name__)

SWEEP_COLUMNS = ["horizon_days", "accuracy", "mean_log_lik", "count"]


@dataclass(frozen=True)
class EvaluationSplit:
    """One train/test partition of the input data"""

    name: str
    train: ResponseDataset
    test: ResponseDataset


def train_config_for(run_config: RunConfig) -> TrainConfig:
    """Training settings with the run's root seed"""
    return run_config.train.model_copy(update={"seed": run_config.seed})


# ============================================================================
# DATA LOADING
# ============================================================================

def _require_file(path: Optional[str], flag: str) -> str:
    if not path:
        raise ConfigError(f"no input data: pass {flag} or set it in the config file")
    if not Path(path).is_file():
        raise ConfigError(f"referenced file does not exist: {path}")
    return path


def load_input_datasets(run_config: RunConfig) -> Dict[str, Optional[ResponseDataset]]:
    """
    Kedro node: ingest the data CSV and the optional held-out CSV

    Both files share one level count C: the configured one, or the larger of
    the two inferred counts.
    """
    data_path = _require_file(run_config.data, "--data")
    levels = run_config.model.num_levels
    data = ingest_csv(data_path, levels)
    test = None
    if run_config.test_data:
        test_path = _require_file(run_config.test_data, "test_data")
        test = ingest_csv(test_path, levels)
        if levels is None and test.num_levels != data.num_levels:
            levels = max(test.num_levels, data.num_levels)
            data, test = ingest_csv(data_path, levels), ingest_csv(test_path, levels)
    return {"data": data, "test": test}


def build_evaluation_splits(run_config: RunConfig, input_datasets: Dict[str, Optional[ResponseDataset]]) -> List[EvaluationSplit]:
    """
    Kedro node: apply the evaluation protocol

    random:   the held-out CSV, or a seeded observation split
    forecast: first train_days for training, the next horizon_days for testing
    loto:     one split per trait, testing on that trait's items
    """
    data, test = input_datasets["data"], input_datasets["test"]
    protocol = run_config.protocol
    if test is not None and protocol != "random":
        logger.warning(f"⚠️ Held-out CSV ignored under the {protocol} protocol")

    if protocol == "random":
        if test is None:
            train, test = random_split(data, run_config.train_fraction, run_config.seed)
        else:
            train = data
        splits = [EvaluationSplit("random", train, test)]
    elif protocol == "forecast":
        if run_config.train_days is None or run_config.horizon_days is None:
            raise ConfigError("the forecast protocol needs train_days and horizon_days")
        train, test = forecast_split(data, run_config.train_days, run_config.horizon_days)
        splits = [EvaluationSplit("forecast", train, test)]
    else:
        splits = [EvaluationSplit(f"loto_{trait}", train, test) for trait, train, test in leave_one_trait_out_splits(data)]

    for split in splits:
        logger.info(f"📄 Split {split.name}: {split.train.num_observations} train / {split.test.num_observations} test")
    return splits


# ============================================================================
# FITTING AND EVALUATION
# ============================================================================

def prior_loadings_for(run_config: RunConfig, dataset: ResponseDataset) -> Optional[np.ndarray]:
    if not run_config.prior_loadings:
        return None
    return read_loadings_csv(run_config.prior_loadings, dataset.item_ids)


def fit_splits(run_config: RunConfig, evaluation_splits: List[EvaluationSplit]) -> Dict[str, FittedModel]:
    """Kedro node: fit the configured model on every training fold"""
    config = train_config_for(run_config)
    fitted = {}
    for split in evaluation_splits:
        prior = prior_loadings_for(run_config, split.train)
        if split.name.startswith("loto_") and prior is None and run_config.model.w_pop_mode == WPopMode.FROZEN:
            logger.warning(f"⚠️ {split.name}: stage-1 prior is fitted without the held-out trait; pass prior loadings to fix W_pop")
        fitter = ModelFitter(split.train, config, prior_loadings=prior, two_stage=run_config.two_stage)
        logger.info(f"🔄 Fitting {run_config.model.label} on split {split.name}")
        fitted[split.name] = fitter.fit(run_config.model)
    return fitted


def evaluate_splits(evaluation_splits: List[EvaluationSplit], fitted_models: Dict[str, FittedModel]) -> Dict[str, FitReport]:
    """Kedro node: in-sample and held-out metrics per split"""
    reports = {}
    for split in evaluation_splits:
        fitted = fitted_models[split.name]
        train_metrics, test_metrics = evaluate_model(fitted, split.train), evaluate_model(fitted, split.test)
        reports[split.name] = FitReport(
            model=fitted.label,
            log_evidence=fitted.log_evidence,
            num_train=fitted.num_train,
            elbo_final=float(fitted.elbo_trace[-1]) if len(fitted.elbo_trace) else None,
            metrics={"train": train_metrics, "test": test_metrics},
        )
        logger.info(f"✅ {split.name}: test ACC={test_metrics.accuracy:.3f}, LL={test_metrics.mean_log_lik:.3f}")
    return reports


def forecast_sweep_table(
    run_config: RunConfig,
    input_datasets: Dict[str, Optional[ResponseDataset]],
    fitted_models: Dict[str, FittedModel],
) -> pd.DataFrame:
    """
    Kedro node: accuracy and log likelihood against forecast horizon

    Empty unless the forecast protocol runs with a horizon sweep.
    """
    if run_config.protocol != "forecast" or not run_config.horizon_sweep:
        return pd.DataFrame(columns=SWEEP_COLUMNS)
    fitted = fitted_models["forecast"]
    rows = []
    for horizon, _, test in forecast_sweep(input_datasets["data"], run_config.train_days, run_config.horizon_sweep):
        report = evaluate_model(fitted, test)
        rows.append({"horizon_days": horizon, "accuracy": report.accuracy, "mean_log_lik": report.mean_log_lik, "count": report.count})
    return pd.DataFrame(rows, columns=SWEEP_COLUMNS)


# ============================================================================
# PREDICTION
# ============================================================================

def predict_queries(fitted_model: FittedModel, query_dataset: ResponseDataset) -> Tuple[pd.DataFrame, MetricReport]:
    """
    Kedro node: level probabilities for every query row, plus metrics against
    the responses the query file carries
    """
    levels = fitted_model.structure.num_levels
    frame = query_dataset.frame[["unit_id", "item_id", "time", "response"]].reset_index(drop=True)
    probs = predict_responses(fitted_model, frame) if len(frame) else np.zeros((0, levels))
    predictions = frame.copy()
    for level in range(1, levels + 1):
        predictions[f"p_{level}"] = probs[:, level - 1]
    predictions["predicted"] = np.argmax(probs, axis=1) + 1 if len(frame) else np.zeros(0, dtype=int)
    report = accuracy_and_ll(probs, frame["response"].to_numpy())
    logger.info(f"✅ Predicted {len(frame)} queries: ACC={report.accuracy:.3f}, LL={report.mean_log_lik:.3f}")
    return predictions, report
