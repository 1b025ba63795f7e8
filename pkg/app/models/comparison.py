"""
Model Comparison - ELBO-based Bayes factors over a pool of fitted models

log evidence(M) ≈ optimized full-data ELBO(M)
log BF(A, B)    = ELBO(A) - ELBO(B)
p(M_i | y)      = p(M_i) e^{ELBO_i} / Σ_k p(M_k) e^{ELBO_k}   (in log space)
"""

import logging
from typing import List, Optional, Sequence, Union

import numpy as np
from scipy.special import logsumexp

from app.core.errors import ComparisonError
from app.core.svi_engine import FittedModel
from app.schemas.ipgp_schemas import ComparisonRow, ComparisonTable

logger = logging.getLogger(__name__)


def _evidence(model: Union[FittedModel, float]) -> float:
    return float(model.log_evidence) if isinstance(model, FittedModel) else float(model)


def log_bayes_factor(model_a: Union[FittedModel, float], model_b: Union[FittedModel, float]) -> float:
    """ELBO-based log Bayes factor of A against B"""
    if isinstance(model_a, FittedModel) and isinstance(model_b, FittedModel) and model_a.fingerprint != model_b.fingerprint:
        raise ComparisonError("models were fitted on different observations", {"a": model_a.label, "b": model_b.label})
    return _evidence(model_a) - _evidence(model_b)


def _unique_labels(models: Sequence[FittedModel]) -> List[str]:
    seen = {}
    labels = []
    for model in models:
        count = seen.get(model.label, 0)
        seen[model.label] = count + 1
        labels.append(model.label if count == 0 else f"{model.label}#{count + 1}")
    return labels


def bayes_factor_table(
    fitted_models: Sequence[FittedModel],
    prior_weights: Optional[Sequence[float]] = None,
    reference: Optional[str] = None,
) -> ComparisonTable:
    """
    Posterior model probabilities and log Bayes factors against a reference

    Args:
        fitted_models: models fitted on identical observations
        prior_weights: p(M_i); uniform when omitted
        reference: label of the reference model (first model by default)

    Raises:
        ComparisonError: empty pool, mismatched datasets or bad prior weights
    """
    models = list(fitted_models)
    if not models:
        raise ComparisonError("no models to compare")
    fingerprints = {model.fingerprint for model in models}
    if len(fingerprints) > 1:
        raise ComparisonError("models were fitted on different observations", {"labels": [model.label for model in models]})

    if prior_weights is None:
        priors = np.full(len(models), 1.0 / len(models))
    else:
        priors = np.asarray(prior_weights, dtype=float)
        if priors.shape != (len(models),) or np.any(priors < 0) or abs(priors.sum() - 1.0) > 1e-9:
            raise ComparisonError("prior weights must be a probability vector over the models", {"weights": priors.tolist()})

    labels = _unique_labels(models)
    reference = reference or labels[0]
    if reference not in labels:
        raise ComparisonError(f"unknown reference model '{reference}'", {"labels": labels})
    evidences = np.array([_evidence(model) for model in models])
    reference_evidence = evidences[labels.index(reference)]

    with np.errstate(divide="ignore"):
        log_joint = np.log(priors) + evidences
    posterior = np.exp(log_joint - logsumexp(log_joint))

    rows = [
        ComparisonRow(
            label=label,
            log_evidence=float(evidence),
            log_bayes_factor=float(evidence - reference_evidence),
            prior_weight=float(prior),
            posterior_weight=float(weight),
        )
        for label, evidence, prior, weight in zip(labels, evidences, priors, posterior)
    ]
    pairwise = {a: {b: float(evidences[i] - evidences[j]) for j, b in enumerate(labels)} for i, a in enumerate(labels)}

    best = labels[int(np.argmax(posterior))]
    logger.info(f"✅ Compared {len(models)} models; highest posterior weight: {best}")
    return ComparisonTable(reference=reference, rows=rows, pairwise_log_bayes_factors=pairwise)


__all__ = ["log_bayes_factor", "bayes_factor_table"]
