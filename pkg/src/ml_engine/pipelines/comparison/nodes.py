"""
Comparison Pipeline Nodes - fit a model pool on one training set and rank it by evidence
"""

import logging
from typing import Dict, List

from app.core.svi_engine import FittedModel
from app.models.comparison import bayes_factor_table
from app.models.ipgp_models import ModelFitter, evaluate_model
from app.schemas.ipgp_schemas import ComparisonTable, MetricReport, ModelSpec, RunConfig

from ..training.nodes import EvaluationSplit, prior_loadings_for, train_config_for

logger = logging.getLogger(__name__)


def comparison_specs(run_config: RunConfig) -> List[ModelSpec]:
    """
    Kedro node: the model pool

    A factor-count list compares the configured variant across K; otherwise
    the listed variants are compared at the configured K.
    """
    levels = run_config.model.num_levels
    if run_config.compare_factors:
        specs = [ModelSpec.for_variant(run_config.model.variant, num_factors=k, num_levels=levels) for k in run_config.compare_factors]
    else:
        specs = [ModelSpec.for_variant(variant, num_factors=run_config.model.num_factors, num_levels=levels) for variant in run_config.compare_models]
    logger.info(f"📄 Comparison pool: {', '.join(spec.label for spec in specs)}")
    return specs


def fit_comparison_models(run_config: RunConfig, evaluation_splits: List[EvaluationSplit], specs: List[ModelSpec]) -> List[FittedModel]:
    """Kedro node: fit every pooled model on the first split's training data"""
    split = evaluation_splits[0]
    fitter = ModelFitter(
        split.train,
        train_config_for(run_config),
        prior_loadings=prior_loadings_for(run_config, split.train),
        two_stage=run_config.two_stage,
    )
    return [fitter.fit(spec) for spec in specs]


def compare_models(run_config: RunConfig, evaluation_splits: List[EvaluationSplit], comparison_models: List[FittedModel]) -> ComparisonTable:
    """Kedro node: Bayes-factor table with per-model train/test metrics"""
    table = bayes_factor_table(comparison_models, prior_weights=run_config.prior_weights)
    split = evaluation_splits[0]
    metrics: Dict[str, Dict[str, MetricReport]] = {}
    for row, fitted in zip(table.rows, comparison_models):
        metrics[row.label] = {"train": evaluate_model(fitted, split.train), "test": evaluate_model(fitted, split.test)}
    return table.model_copy(update={"metrics": metrics})
