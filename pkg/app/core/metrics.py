"""
Metrics - predictive accuracy, log likelihood, correlation matrix distance
"""

import logging
from typing import Dict, Sequence

import numpy as np
import pandas as pd
from sklearn.metrics import rand_score

from app.core.errors import DataError, MetricError
from app.schemas.ipgp_schemas import MetricReport

logger = logging.getLogger(__name__)

_TINY = np.finfo(float).tiny


def accuracy_and_ll(predictions, truth) -> MetricReport:
    """
    Accuracy of the argmax level and mean log probability of the true level

    Args:
        predictions: (N, C) categorical distributions over levels 1..C
        truth: (N,) observed levels

    Ties in the argmax go to the lower level.
    """
    truth = np.asarray(truth).reshape(-1)
    if truth.shape[0] == 0:
        return MetricReport(accuracy=0.0, mean_log_lik=0.0, count=0)
    predictions = np.atleast_2d(np.asarray(predictions, dtype=float))
    if predictions.shape[0] != truth.shape[0]:
        raise DataError("predictions and truth are not aligned", {"predictions": predictions.shape, "truth": truth.shape})
    levels = predictions.shape[1]
    if np.any(truth < 1) or np.any(truth > levels):
        raise DataError("observed level outside the predicted range", {"levels": levels})

    predicted = np.argmax(predictions, axis=1) + 1
    realized = predictions[np.arange(truth.shape[0]), truth.astype(int) - 1]
    return MetricReport(
        accuracy=float(np.mean(predicted == truth)),
        mean_log_lik=float(np.mean(np.log(np.clip(realized, _TINY, None)))),
        count=int(truth.shape[0]),
    )


def cmd(r1, r2) -> float:
    """
    Correlation matrix distance 1 - tr(R1 R2) / (‖R1‖_F ‖R2‖_F)

    0 for matrices equal up to a positive scale, 1 for orthogonal ones.
    """
    r1 = np.atleast_2d(np.asarray(r1, dtype=float))
    r2 = np.atleast_2d(np.asarray(r2, dtype=float))
    if r1.shape != r2.shape or r1.shape[0] != r1.shape[1]:
        raise MetricError("CMD needs two square matrices of the same shape", {"r1": r1.shape, "r2": r2.shape})
    norm1, norm2 = np.linalg.norm(r1), np.linalg.norm(r2)
    if norm1 == 0.0 or norm2 == 0.0:
        raise MetricError("CMD is undefined for a zero matrix", {"norms": [float(norm1), float(norm2)]})
    # summing both orders keeps cmd(A, B) == cmd(B, A) bit-exact
    trace = 0.5 * (np.sum(r1 * r2.T) + np.sum(r2 * r1.T))
    return float(1.0 - trace / (norm1 * norm2))


def mean_cmd(estimated: Dict[str, np.ndarray], truth: Dict[str, np.ndarray]) -> float:
    """Average CMD over the units present in both mappings"""
    units = [unit for unit in estimated if unit in truth]
    if not units:
        raise MetricError("no units in common between estimate and truth")
    return float(np.mean([cmd(estimated[unit], truth[unit]) for unit in units]))


def residual_profile(centroid, population, trait_map: Dict[str, str], item_ids: Sequence[str]) -> pd.DataFrame:
    """
    Trait-level residual correlation: (centroid - population) averaged over
    every entry of each trait × trait block

    Returns:
        square DataFrame indexed by sorted trait labels
    """
    centroid = np.asarray(centroid, dtype=float)
    population = np.asarray(population, dtype=float)
    item_ids = list(item_ids)
    if centroid.shape != population.shape or centroid.shape != (len(item_ids), len(item_ids)):
        raise MetricError("centroid, population and item list disagree", {"centroid": centroid.shape, "population": population.shape, "items": len(item_ids)})
    missing = [item for item in item_ids if item not in trait_map]
    if missing:
        raise MetricError("trait map does not cover every item", {"missing": missing[:5]})

    residual = centroid - population
    labels = np.array([trait_map[item] for item in item_ids])
    traits = sorted(set(labels))
    members = {trait: np.flatnonzero(labels == trait) for trait in traits}
    profile = np.array([[residual[np.ix_(members[a], members[b])].mean() for b in traits] for a in traits])
    return pd.DataFrame(profile, index=traits, columns=traits)


def rand_index(labels_a, labels_b) -> float:
    """Fraction of point pairs on which two labelings agree"""
    return float(rand_score(np.asarray(labels_a), np.asarray(labels_b)))


__all__ = ["accuracy_and_ll", "cmd", "mean_cmd", "residual_profile", "rand_index"]
