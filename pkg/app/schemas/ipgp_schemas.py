"""
IPGP Schemas
Pydantic models for run configuration, model specifications and reports
"""

from enum import Enum
from typing import Any, Dict, List, Literal, Optional, Tuple

from pydantic import BaseModel, ConfigDict, Field, field_validator, model_validator

from app.core.errors import StructuralError

# ============================================================================
# MODEL SPECIFICATION
# ============================================================================

class ModelVariant(str, Enum):
    """Model variants: full model and its ablations"""
    IPGP = "IPGP"
    NOM = "IPGP-NOM"
    IND = "IPGP-IND"
    LOW = "IPGP-LOW"
    NP = "IPGP-NP"


class WPopMode(str, Enum):
    FROZEN = "frozen-from-prior"
    FREE = "free"


LOW_RANK_FACTORS = 2


def _variant_settings(variant: ModelVariant, num_factors: int) -> Tuple[int, int, WPopMode]:
    """(K, idiographic rank, W_pop mode) consistent with a variant"""
    return {
        ModelVariant.IPGP: (num_factors, 1, WPopMode.FROZEN),
        ModelVariant.NOM: (num_factors, 0, WPopMode.FREE),
        ModelVariant.IND: (0, 1, WPopMode.FREE),
        ModelVariant.LOW: (LOW_RANK_FACTORS, 1, WPopMode.FROZEN),
        ModelVariant.NP: (num_factors, 1, WPopMode.FREE),
    }[variant]


class ModelSpec(BaseModel):
    """Which task kernel to build and which parameters are free"""

    model_config = ConfigDict(extra="forbid")

    variant: ModelVariant = Field(default=ModelVariant.IPGP, description="Model variant")
    num_factors: int = Field(default=5, ge=0, description="Population factor count K")
    idiographic_rank: int = Field(default=1, ge=0, le=1, description="Rank of the per-unit loading term")
    w_pop_mode: WPopMode = Field(default=WPopMode.FROZEN, description="Whether W_pop is fixed from a prior fit")
    num_levels: Optional[int] = Field(default=None, ge=2, description="Ordinal level count C (inferred from data when unset)")

    @model_validator(mode="before")
    @classmethod
    def _variant_defaults(cls, data: Any) -> Any:
        """Fields left unset take the values consistent with the variant"""
        if isinstance(data, dict) and "variant" in data:
            factors, rank, mode = _variant_settings(ModelVariant(data["variant"]), data.get("num_factors", 5))
            data = {"num_factors": factors, "idiographic_rank": rank, "w_pop_mode": mode, **data}
        return data

    @classmethod
    def for_variant(cls, variant, num_factors: int = 5, num_levels: Optional[int] = None) -> "ModelSpec":
        """Consistent spec for a variant; IPGP-LOW always uses the low rank"""
        variant = ModelVariant(variant)
        factors, rank, mode = _variant_settings(variant, num_factors)
        return cls(variant=variant, num_factors=factors, idiographic_rank=rank, w_pop_mode=mode, num_levels=num_levels)

    def check_consistency(self) -> None:
        """Raise StructuralError when the fields contradict the variant"""
        problems = []
        if self.variant == ModelVariant.NOM and self.idiographic_rank != 0:
            problems.append("IPGP-NOM has no idiographic term")
        if self.variant == ModelVariant.IND and self.num_factors != 0:
            problems.append("IPGP-IND omits the population term")
        if self.variant in (ModelVariant.IPGP, ModelVariant.LOW) and self.w_pop_mode != WPopMode.FROZEN:
            problems.append(f"{self.variant.value} requires frozen population loadings")
        if self.variant == ModelVariant.NP and self.w_pop_mode != WPopMode.FREE:
            problems.append("IPGP-NP requires free population loadings")
        if self.variant != ModelVariant.NOM and self.idiographic_rank != 1:
            problems.append(f"{self.variant.value} requires an idiographic term")
        if self.variant != ModelVariant.IND and self.num_factors == 0:
            problems.append(f"{self.variant.value} needs at least one population factor")
        if problems:
            raise StructuralError("inconsistent model spec", {"variant": self.variant.value, "problems": problems})

    @property
    def label(self) -> str:
        return f"{self.variant.value}(K={self.num_factors})"


# ============================================================================
# TRAINING
# ============================================================================

class TrainConfig(BaseModel):
    """Stochastic variational inference settings"""

    model_config = ConfigDict(extra="forbid")

    learning_rate: float = Field(default=0.05, gt=0, description="Adam step size")
    epochs: int = Field(default=10, ge=0, description="Passes over the training observations")
    batch_size: int = Field(default=256, gt=0, description="Observations per minibatch (global)")
    num_inducing: int = Field(default=100, gt=0, description="Inducing points per unit")
    quadrature_points: int = Field(default=20, gt=0, description="Gauss-Hermite order")
    seed: int = Field(default=0, description="Seed for initialization and minibatch order")
    link: Literal["logit", "probit"] = Field(default="logit", description="Ordinal link function")
    freeze_lengthscale: bool = Field(default=False, description="Keep length scales at their initial values")


# ============================================================================
# SIMULATION
# ============================================================================

class SimulationConfig(BaseModel):
    """Synthetic longitudinal ordinal data generator settings"""

    model_config = ConfigDict(extra="forbid")

    num_units: int = Field(default=10, gt=0)
    num_periods: int = Field(default=30, gt=0)
    num_factors: int = Field(default=5, gt=0)
    num_items: int = Field(default=20, gt=0)
    num_levels: int = Field(default=5, ge=2)
    lengthscale_pool: List[float] = Field(default_factory=lambda: [10.0, 20.0, 30.0])
    dominant_loading: float = Field(default=3.0)
    off_loading_range: Tuple[float, float] = Field(default=(-1.0, 1.0))
    idio_range: Tuple[float, float] = Field(default=(-1.0, 1.0))
    sparsity_fraction: float = Field(default=0.5, ge=0, le=1)
    train_fraction: float = Field(default=0.8, ge=0, le=1)
    task_noise: float = Field(default=0.0, ge=0, description="Variance of i.i.d. latent item noise")
    seed: int = Field(default=0)

    @field_validator("lengthscale_pool")
    @classmethod
    def _positive_pool(cls, pool: List[float]) -> List[float]:
        if not pool or any(value <= 0 for value in pool):
            raise ValueError("length scale pool must be non-empty and positive")
        return pool

    @field_validator("off_loading_range", "idio_range")
    @classmethod
    def _ordered_range(cls, bounds: Tuple[float, float]) -> Tuple[float, float]:
        if bounds[0] > bounds[1]:
            raise ValueError("range lower bound exceeds upper bound")
        return bounds

    @model_validator(mode="after")
    def _items_divisible(self) -> "SimulationConfig":
        if self.num_items % self.num_factors != 0:
            raise ValueError("num_items must be divisible by num_factors")
        return self


# ============================================================================
# RUN CONFIGURATION
# ============================================================================

Protocol = Literal["random", "forecast", "loto"]


class RunConfig(BaseModel):
    """Fully resolved configuration of one CLI run"""

    model: ModelSpec = Field(default_factory=ModelSpec)
    train: TrainConfig = Field(default_factory=TrainConfig)
    simulation: SimulationConfig = Field(default_factory=SimulationConfig)

    seed: int = Field(default=0, description="Root seed every random stream derives from")
    data: Optional[str] = Field(default=None, description="Training (or full) long-format CSV")
    test_data: Optional[str] = Field(default=None, description="Held-out CSV for the random protocol")
    out: str = Field(default="outputs", description="Output directory")
    protocol: Protocol = Field(default="random")
    train_fraction: float = Field(default=0.8, ge=0, le=1, description="Random-split train share when no test CSV is given")
    train_days: Optional[float] = Field(default=None, ge=0)
    horizon_days: Optional[float] = Field(default=None, ge=0)
    horizon_sweep: List[float] = Field(default_factory=list, description="Extra forecast horizons for the sweep table")
    planned_missing: bool = Field(default=False, description="Drop one of every three sub-factor items per assessment from simulated training data")
    prior_loadings: Optional[str] = Field(default=None, description="CSV with a frozen K×J W_pop")
    two_stage: bool = Field(default=True, description="Fit an IPGP-NOM prior when a frozen W_pop is needed")
    compare_models: List[ModelVariant] = Field(default_factory=lambda: [ModelVariant.IPGP, ModelVariant.NOM])
    compare_factors: List[int] = Field(default_factory=list, description="Factor counts compared in one run")
    prior_weights: Optional[List[float]] = Field(default=None)
    clusters: int = Field(default=4, gt=0)
    cluster_restarts: int = Field(default=10, gt=0)
    centroid_rule: Literal["normalized_mean", "mean"] = Field(default="normalized_mean")
    num_seeds: int = Field(default=5, gt=0, description="Seeds for the simulation-study reproduction")
    threads: Optional[int] = Field(default=None, gt=0)

    @field_validator("prior_weights")
    @classmethod
    def _weights_are_probabilities(cls, weights: Optional[List[float]]) -> Optional[List[float]]:
        if weights is None:
            return weights
        if any(value < 0 for value in weights) or abs(sum(weights) - 1.0) > 1e-9:
            raise ValueError("prior weights must be nonnegative and sum to 1")
        return weights

    model_config = ConfigDict(
        extra="forbid",
        json_schema_extra={
            "example": {
                "model": {"variant": "IPGP", "num_factors": 5},
                "train": {"learning_rate": 0.05, "epochs": 10, "batch_size": 256},
                "seed": 0,
                "data": "outputs/sim/train.csv",
                "out": "outputs/fit",
                "protocol": "random",
            }
        },
    )


# ============================================================================
# REPORTS
# ============================================================================

class MetricReport(BaseModel):
    """Predictive accuracy and mean log likelihood on one split"""
    accuracy: float = Field(..., ge=0, le=1)
    mean_log_lik: float
    count: int = Field(..., ge=0)


class FitReport(BaseModel):
    """Contents of metrics.json"""
    model: str
    log_evidence: float
    num_train: int
    elbo_final: Optional[float] = None
    metrics: Dict[str, MetricReport] = Field(default_factory=dict)
    mean_cmd: Optional[float] = None


class ComparisonRow(BaseModel):
    label: str
    log_evidence: float = Field(..., description="Optimized full-data ELBO")
    log_bayes_factor: float = Field(..., description="ELBO-based log BF against the reference model")
    prior_weight: float = Field(..., ge=0, le=1)
    posterior_weight: float = Field(..., ge=0, le=1)


class ComparisonTable(BaseModel):
    """ELBO-based Bayes-factor comparison over a pool of models"""
    reference: str
    evidence_estimator: str = "optimized ELBO"
    rows: List[ComparisonRow]
    pairwise_log_bayes_factors: Dict[str, Dict[str, float]] = Field(default_factory=dict)
    metrics: Dict[str, Dict[str, MetricReport]] = Field(default_factory=dict, description="Per-model metrics by split")

    @model_validator(mode="after")
    def _posterior_normalized(self) -> "ComparisonTable":
        total = sum(row.posterior_weight for row in self.rows)
        if self.rows and abs(total - 1.0) > 1e-9:
            raise ValueError("posterior weights must sum to 1")
        return self

    def row(self, label: str) -> ComparisonRow:
        for candidate in self.rows:
            if candidate.label == label:
                return candidate
        raise KeyError(label)


class ClusterReport(BaseModel):
    """Contents of clusters.json"""
    k: int
    assignments: Dict[str, int]
    total_cost: float
    cost_history: List[float]
    centroid_rule: str
    trait_order: List[str] = Field(default_factory=list)


class CriterionResult(BaseModel):
    name: str
    description: str
    passed: bool
    detail: Dict[str, Any] = Field(default_factory=dict)


class RunManifest(BaseModel):
    """Everything needed to rerun a command and reproduce its artifacts"""
    command: str
    code_version: str
    seed: int
    config: Dict[str, Any]
    artifacts: List[str] = Field(default_factory=list)


__all__ = [
    "ModelVariant",
    "WPopMode",
    "LOW_RANK_FACTORS",
    "ModelSpec",
    "TrainConfig",
    "SimulationConfig",
    "RunConfig",
    "MetricReport",
    "FitReport",
    "ComparisonRow",
    "ComparisonTable",
    "ClusterReport",
    "CriterionResult",
    "RunManifest",
]
