"""
IPGP Models - model variants and the two-stage informative-prior workflow
==========================================================================

Variants:
- IPGP:      W_pop frozen from an IPGP-NOM fit, plus per-unit w_i
- IPGP-NOM:  W_pop free, no unit-specific term
- IPGP-IND:  per-unit w_i only, no population term
- IPGP-LOW:  as IPGP with a rank-2 population prior
- IPGP-NP:   W_pop free (PCA-initialized) plus per-unit w_i
"""

import logging
from dataclasses import dataclass
from typing import Dict, Optional, Union

import numpy as np

from app.core.dataset import ResponseDataset
from app.core.errors import DataError, NumericalError, StructuralError
from app.core.metrics import accuracy_and_ll
from app.core.svi_engine import FittedModel, ModelInstance, fit, initialize_instance, predict_responses
from app.schemas.ipgp_schemas import MetricReport, ModelSpec, ModelVariant, TrainConfig, WPopMode

logger = logging.getLogger(__name__)


# ============================================================================
# POPULATION LOADING INITIALIZATION
# ============================================================================

def pooled_item_correlation(dataset: ResponseDataset) -> np.ndarray:
    """Pairwise-complete item correlation over all (unit, time) assessments"""
    wide = dataset.frame.pivot_table(index=["unit_id", "time"], columns="item_id", values="response", aggfunc="mean")
    wide = wide.reindex(columns=list(dataset.item_ids))
    corr = wide.corr(min_periods=2).to_numpy(dtype=float)
    corr = np.nan_to_num(corr, nan=0.0)
    np.fill_diagonal(corr, 1.0)
    return 0.5 * (corr + corr.T)


def pca_loading_init(dataset: ResponseDataset, num_factors: int) -> np.ndarray:
    """
    Free W_pop initialization from the top-K eigenpairs of the pooled item
    correlation matrix: W = diag(√λ) Vᵀ (K×J)

    Each row's largest-magnitude entry is made positive so the result is
    deterministic.
    """
    if num_factors > dataset.num_items:
        raise StructuralError("more factors than items", {"factors": num_factors, "items": dataset.num_items})
    eigenvalues, eigenvectors = np.linalg.eigh(pooled_item_correlation(dataset))
    order = np.argsort(eigenvalues)[::-1][:num_factors]
    loadings = np.sqrt(np.clip(eigenvalues[order], 0.0, None))[:, None] * eigenvectors[:, order].T
    signs = np.sign(loadings[np.arange(num_factors), np.argmax(np.abs(loadings), axis=1)])
    return loadings * np.where(signs == 0, 1.0, signs)[:, None]


# ============================================================================
# MODEL ASSEMBLY
# ============================================================================

PriorLike = Union[np.ndarray, FittedModel, "PopulationPrior", None]


@dataclass(frozen=True)
class PopulationPrior:
    """Stage-1 IPGP-NOM fit whose W_pop becomes a frozen prior"""

    w_pop: np.ndarray
    model: Optional[FittedModel] = None

    @property
    def num_factors(self) -> int:
        return int(self.w_pop.shape[0])


def _prior_matrix(prior: PriorLike) -> Optional[np.ndarray]:
    if prior is None:
        return None
    if isinstance(prior, PopulationPrior):
        return prior.w_pop
    if isinstance(prior, FittedModel):
        if "w_pop" not in prior.params:
            raise StructuralError("prior model has no population loadings", {"label": prior.label})
        return np.asarray(prior.params["w_pop"])
    return np.atleast_2d(np.asarray(prior, dtype=float))


def build_model(
    spec: ModelSpec,
    dataset: ResponseDataset,
    config: Optional[TrainConfig] = None,
    prior: PriorLike = None,
    warm_start: Optional[FittedModel] = None,
) -> ModelInstance:
    """
    Wire the task kernel and free-parameter set for a variant

    Raises:
        StructuralError: inconsistent spec, frozen W_pop without a prior,
                         or dimensions that do not match the dataset
    """
    spec.check_consistency()
    config = config or TrainConfig()
    if spec.num_factors > dataset.num_items:
        raise StructuralError("more factors than items", {"factors": spec.num_factors, "items": dataset.num_items})

    w_pop, frozen = None, ()
    if spec.num_factors > 0:
        if spec.w_pop_mode == WPopMode.FROZEN:
            w_pop = _prior_matrix(prior)
            if w_pop is None:
                raise StructuralError(f"{spec.variant.value} needs population loadings from a prior fit")
            if w_pop.shape != (spec.num_factors, dataset.num_items):
                raise StructuralError("prior loadings have the wrong shape", {"expected": (spec.num_factors, dataset.num_items), "got": w_pop.shape})
            frozen = ("w_pop",)
        else:
            w_pop = pca_loading_init(dataset, spec.num_factors)

    instance = initialize_instance(
        dataset,
        num_factors=spec.num_factors,
        idiographic=spec.idiographic_rank == 1,
        config=config,
        w_pop=w_pop,
        frozen=frozen,
        num_levels=spec.num_levels,
        label=spec.label,
        variant=spec.variant.value,
    )
    if warm_start is not None:
        instance = instance.warm_started_from(warm_start, skip=("w_ind",))
    return instance


def fit_population_prior(dataset: ResponseDataset, num_factors: int, config: Optional[TrainConfig] = None) -> PopulationPrior:
    """
    Stage 1: fit IPGP-NOM and keep its W_pop as the informative prior
    """
    if dataset.num_observations == 0:
        raise DataError("cannot fit a population prior on an empty dataset")
    spec = ModelSpec.for_variant(ModelVariant.NOM, num_factors=num_factors)
    logger.info(f"🔄 Stage 1: population prior from {spec.label}")
    nomothetic = fit(dataset, build_model(spec, dataset, config), config)
    return PopulationPrior(w_pop=np.asarray(nomothetic.params["w_pop"]), model=nomothetic)


def fit_model(
    spec: ModelSpec,
    dataset: ResponseDataset,
    config: Optional[TrainConfig] = None,
    prior: PriorLike = None,
) -> FittedModel:
    """
    Fit any variant; frozen variants without a prior run the two-stage workflow

    When the prior carries its stage-1 model, stage 2 starts from that optimum.
    """
    config = config or TrainConfig()
    spec.check_consistency()
    if spec.w_pop_mode == WPopMode.FROZEN and spec.num_factors > 0 and prior is None:
        prior = fit_population_prior(dataset, spec.num_factors, config)

    warm = None
    if isinstance(prior, PopulationPrior) and prior.model is not None and prior.num_factors == spec.num_factors:
        warm = prior.model
    elif isinstance(prior, FittedModel):
        warm = prior
    instance = build_model(spec, dataset, config, prior=prior, warm_start=warm)
    return fit(dataset, instance, config)


class ModelFitter:
    """
    Fits variants on one training set, sharing stage-1 population priors

    Frozen variants take their W_pop from user-supplied loadings when given,
    otherwise from one cached IPGP-NOM fit per factor count. An IPGP-NOM
    request that matches a cached stage-1 fit reuses it.
    """

    def __init__(
        self,
        dataset: ResponseDataset,
        config: Optional[TrainConfig] = None,
        prior_loadings: Optional[np.ndarray] = None,
        two_stage: bool = True,
    ):
        self.dataset = dataset
        self.config = config or TrainConfig()
        self.prior_loadings = None if prior_loadings is None else np.atleast_2d(np.asarray(prior_loadings, dtype=float))
        self.two_stage = two_stage
        self._priors: Dict[int, PopulationPrior] = {}

    def prior(self, num_factors: int) -> PopulationPrior:
        if self.prior_loadings is not None and self.prior_loadings.shape[0] == num_factors:
            return PopulationPrior(w_pop=self.prior_loadings)
        if not self.two_stage:
            raise StructuralError(
                "frozen population loadings need a matching prior loadings file or the two-stage workflow",
                {"factors": num_factors, "prior_rows": None if self.prior_loadings is None else int(self.prior_loadings.shape[0])},
            )
        if num_factors not in self._priors:
            self._priors[num_factors] = fit_population_prior(self.dataset, num_factors, self.config)
        return self._priors[num_factors]

    def fit(self, spec: ModelSpec) -> FittedModel:
        spec.check_consistency()
        cached = self._priors.get(spec.num_factors)
        if (
            spec.variant == ModelVariant.NOM
            and cached is not None
            and cached.model is not None
            and spec.num_levels in (None, self.dataset.num_levels)
        ):
            logger.info(f"✅ Reusing stage-1 fit for {spec.label}")
            return cached.model
        if spec.w_pop_mode == WPopMode.FROZEN and spec.num_factors > 0:
            return fit_model(spec, self.dataset, self.config, prior=self.prior(spec.num_factors))
        return fit_model(spec, self.dataset, self.config)


def evaluate_model(fitted: FittedModel, dataset: ResponseDataset) -> MetricReport:
    """Accuracy and mean log likelihood of a fitted model on a dataset"""
    if dataset.num_observations == 0:
        return accuracy_and_ll(np.zeros((0, fitted.structure.num_levels)), np.zeros(0, dtype=int))
    return accuracy_and_ll(predict_responses(fitted, dataset.frame), dataset.responses)


# ============================================================================
# CORRELATION ESTIMATES
# ============================================================================

def covariance_to_correlation(covariance) -> np.ndarray:
    """R = D^-1/2 K D^-1/2 with an exact unit diagonal"""
    covariance = np.asarray(covariance, dtype=float)
    diagonal = np.diag(covariance)
    if np.any(diagonal <= 0.0):
        raise NumericalError("covariance has a non-positive diagonal entry", {"min_diagonal": float(diagonal.min())})
    scale = 1.0 / np.sqrt(diagonal)
    correlation = covariance * scale[:, None] * scale[None, :]
    correlation = np.clip(0.5 * (correlation + correlation.T), -1.0, 1.0)
    np.fill_diagonal(correlation, 1.0)
    return correlation


def estimated_task_correlation(fitted: FittedModel, unit: Optional[str] = None) -> np.ndarray:
    """Unit-level (idiographic) or population task correlation matrix"""
    return covariance_to_correlation(fitted.task_covariance(unit))


__all__ = [
    "PopulationPrior",
    "pooled_item_correlation",
    "pca_loading_init",
    "build_model",
    "fit_population_prior",
    "fit_model",
    "ModelFitter",
    "evaluate_model",
    "covariance_to_correlation",
    "estimated_task_correlation",
]
