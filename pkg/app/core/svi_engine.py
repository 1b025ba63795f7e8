"""
SVI Engine - sparse variational inference for the multi-task ordinal GP

Each unit i has its own coregionalized GP over (item, time) with covariance
K_task_i ⊗ K_time(ℓ_i) and its own whitened variational posterior over m
inducing values placed on an item × time grid:

    u_i = chol(K_uu,i) v_i,   q(v_i) = N(μ_i, L_i L_iᵀ)

Shared across units: W_pop, task noise v, ordinal thresholds. The ELBO is

    (N / |batch|) Σ_batch E_q(f)[log p(y | f)] - Σ_i KL(q(v_i) || N(0, I))

with the expectation done by Gauss-Hermite quadrature. Gradients come from
JAX autodiff; Adam (app.core.optimizer) performs ascent.
"""

import functools
import io
import json
import logging
import zipfile
from dataclasses import dataclass, field
from pathlib import Path
from typing import Dict, FrozenSet, Iterable, Optional, Tuple

import jax
import jax.numpy as jnp
import jax.scipy.linalg as jsl
import numpy as np
import pandas as pd
import scipy.linalg

from app.core.config import rng_for
from app.core.dataset import ResponseDataset
from app.core.errors import ConfigError, DataError, NumericalError, ParameterDomainError, StructuralError
from app.core.kernels import DEFAULT_JITTER, JointCovariance, LoadingSet, RBFTimeKernel, TimeKernelParams, _rbf, _task_kernel
from app.core.optimizer import Adam
from app.core.ordinal_likelihood import (
    OrdinalThresholds,
    _cuts_from_raw,
    _log_prob,
    _probs,
    default_cuts,
    get_link,
    ordinal_log_prob,
    parameterize_thresholds,
    thresholds_to_raw,
)
from app.core.serializer_utils import safe_json_dumps
from app.schemas.ipgp_schemas import TrainConfig

logger = logging.getLogger(__name__)

jax.config.update("jax_enable_x64", True)

JITTER_LADDER = (1e-6, 1e-5, 1e-4)
MIN_VARIANCE = 1e-12
INITIAL_Q_SCALE = 0.1
INITIAL_IDIO_SCALE = 0.1
SQRT_PI = float(np.sqrt(np.pi))

STATE_FILE = "model_state.npz"
METADATA_FILE = "model_state.json"
NPZ_TIMESTAMP = (1980, 1, 1, 0, 0, 0)


# ============================================================================
# GAUSS-HERMITE QUADRATURE
# ============================================================================

@functools.lru_cache(maxsize=None)
def gauss_hermite_rule(order: int) -> Tuple[np.ndarray, np.ndarray]:
    """Physicists' Gauss-Hermite nodes and weights (weight function e^{-x²})"""
    if int(order) < 1:
        raise ConfigError("quadrature order must be at least 1", {"order": order})
    nodes, weights = np.polynomial.hermite.hermgauss(int(order))
    return nodes, weights


def gauss_hermite_expectation(
    mean,
    variance,
    y=None,
    thresholds: Optional[OrdinalThresholds] = None,
    order: int = 20,
    link: str = "logit",
    integrand=None,
) -> np.ndarray:
    """
    E_{f ~ N(mean, variance)}[g(f)] ≈ (1/√π) Σ_k w_k g(mean + √(2 variance) x_k)

    g defaults to ordinal_log_prob(y, ·); pass `integrand` to integrate any
    other (vectorized) function of f.
    """
    nodes, weights = gauss_hermite_rule(order)
    mean = np.asarray(mean, dtype=float)
    variance = np.asarray(variance, dtype=float)
    if np.any(~np.isfinite(variance)) or np.any(variance <= 0.0):
        raise ParameterDomainError("variance must be positive", {"min_variance": float(np.min(variance))})

    points = mean[..., None] + np.sqrt(2.0 * variance)[..., None] * nodes
    if integrand is None:
        if y is None or thresholds is None:
            raise ConfigError("a level and thresholds are required for the ordinal integrand")
        values = ordinal_log_prob(np.asarray(y)[..., None], points, thresholds, link)
    else:
        values = integrand(points)
    return np.asarray(jnp.sum(jnp.asarray(values) * weights, axis=-1) / SQRT_PI)


# ============================================================================
# VARIATIONAL STATE AND MARGINALS
# ============================================================================

@dataclass(frozen=True)
class VariationalState:
    """
    q(u) = N(μ_u, L Lᵀ) at m inducing inputs [item index, time]

    When `whitened` is set, μ and L describe q(v) with u = chol(K_uu) v.
    """

    inducing_inputs: np.ndarray
    mean: np.ndarray
    cov_factor: np.ndarray
    thresholds: OrdinalThresholds
    whitened: bool = False

    def __post_init__(self):
        inputs = np.atleast_2d(np.asarray(self.inducing_inputs, dtype=float))
        mean = np.asarray(self.mean, dtype=float).reshape(-1)
        factor = np.tril(np.atleast_2d(np.asarray(self.cov_factor, dtype=float)))
        m = mean.shape[0]
        if m < 1:
            raise StructuralError("at least one inducing point is required")
        if inputs.shape != (m, 2) or factor.shape != (m, m):
            raise StructuralError("inducing inputs, mean and covariance factor disagree", {"inputs": inputs.shape, "mean": mean.shape, "factor": factor.shape})
        if np.any(np.diag(factor) <= 0.0):
            raise ParameterDomainError("covariance factor needs a strictly positive diagonal")
        if np.unique(inputs, axis=0).shape[0] != m:
            raise StructuralError("inducing inputs must be distinct")
        object.__setattr__(self, "inducing_inputs", inputs)
        object.__setattr__(self, "mean", mean)
        object.__setattr__(self, "cov_factor", factor)

    @property
    def num_inducing(self) -> int:
        return int(self.mean.shape[0])

    @property
    def covariance(self) -> np.ndarray:
        return self.cov_factor @ self.cov_factor.T


@dataclass(frozen=True)
class MarginalPrediction:
    """Per-query Gaussian marginal of q(f)"""

    mean: np.ndarray
    variance: np.ndarray

    def __post_init__(self):
        if np.any(np.asarray(self.variance) <= 0.0):
            raise NumericalError("marginal variance must be positive")


def safe_cholesky(matrix, jitters: Iterable[float] = JITTER_LADDER, name: str = "matrix") -> np.ndarray:
    """
    Lower Cholesky factor of matrix + jitter·I, escalating the jitter on failure

    Raises:
        NumericalError: every jitter level failed (diagnostics attached)
    """
    matrix = np.asarray(matrix, dtype=float)
    jitters = tuple(jitters)
    if matrix.ndim != 2 or matrix.shape[0] != matrix.shape[1]:
        raise StructuralError(f"{name} must be square", {"shape": matrix.shape})
    if not np.all(np.isfinite(matrix)):
        raise NumericalError(f"{name} contains non-finite entries", {"shape": matrix.shape})

    eye = np.eye(matrix.shape[0])
    for attempt, jitter in enumerate(jitters):
        try:
            factor = scipy.linalg.cholesky(matrix + jitter * eye, lower=True)
        except np.linalg.LinAlgError:
            continue
        if attempt > 0:
            logger.warning(f"⚠️ Cholesky of {name} needed jitter {jitter:g}")
        return factor

    symmetric = 0.5 * (matrix + matrix.T)
    raise NumericalError(
        f"Cholesky factorization of {name} failed",
        {
            "shape": matrix.shape,
            "min_eigenvalue": float(np.linalg.eigvalsh(symmetric).min()),
            "max_asymmetry": float(np.max(np.abs(matrix - matrix.T))),
            "jitter_tried": list(jitters),
        },
    )


def marginal_q_f(state: VariationalState, joint_cov: JointCovariance, query_points) -> MarginalPrediction:
    """
    q(f) = ∫ p(f | u) q(u) du at query points [item index, time]

    mean = K_fu K_uu⁻¹ μ
    var  = K_ff - diag(K_fu K_uu⁻¹ K_uf) + diag(K_fu K_uu⁻¹ Σ K_uu⁻¹ K_uf)
    (whitened: mean = Aᵀμ, var = K_ff - ‖A‖² + ‖LᵀA‖², A = chol(K_uu)⁻¹ K_uf)
    """
    query_points = np.atleast_2d(np.asarray(query_points, dtype=float))
    inducing = state.inducing_inputs

    kuu = np.asarray(joint_cov.evaluate(inducing, inducing))
    kuf = np.asarray(joint_cov.evaluate(inducing, query_points))
    kff = np.asarray(joint_cov.evaluate_diag(query_points))

    chol = safe_cholesky(kuu, name="K_uu")
    projected = scipy.linalg.solve_triangular(chol, kuf, lower=True)
    if state.whitened:
        mean = projected.T @ state.mean
        spread = state.cov_factor.T @ projected
    else:
        solved = scipy.linalg.solve_triangular(chol.T, projected, lower=False)
        mean = solved.T @ state.mean
        spread = state.cov_factor.T @ solved

    variance = kff - np.sum(projected ** 2, axis=0) + np.sum(spread ** 2, axis=0)
    return MarginalPrediction(mean=mean, variance=np.maximum(variance, MIN_VARIANCE))


def kl_gaussian(state: VariationalState, prior_cov=None) -> float:
    """
    KL(q(u) || N(0, K_uu)) in closed form

    ½[tr(K⁻¹Σ) + μᵀK⁻¹μ - m + ln det K - ln det Σ]; for a whitened state the
    prior is N(0, I) and prior_cov is not needed.
    """
    m = state.num_inducing
    factor = state.cov_factor
    logdet_q = 2.0 * float(np.sum(np.log(np.diag(factor))))

    if state.whitened:
        trace = float(np.sum(factor ** 2))
        mahalanobis = float(state.mean @ state.mean)
        logdet_p = 0.0
    else:
        if prior_cov is None:
            raise StructuralError("an unwhitened state needs the prior covariance")
        prior_cov = np.atleast_2d(np.asarray(prior_cov, dtype=float))
        if prior_cov.shape != (m, m):
            raise StructuralError("prior covariance shape must match the state", {"prior": prior_cov.shape, "m": m})
        prior_chol = safe_cholesky(prior_cov, jitters=(0.0,) + JITTER_LADDER, name="prior covariance")
        trace = float(np.sum(scipy.linalg.solve_triangular(prior_chol, factor, lower=True) ** 2))
        mahalanobis = float(np.sum(scipy.linalg.solve_triangular(prior_chol, state.mean, lower=True) ** 2))
        logdet_p = 2.0 * float(np.sum(np.log(np.diag(prior_chol))))

    return 0.5 * (trace + mahalanobis - m + logdet_p - logdet_q)


# ============================================================================
# MODEL STRUCTURE AND INSTANCES
# ============================================================================

@dataclass(frozen=True)
class ModelStructure:
    """Static dimensions of a model; inducing_times is (units × times per item)"""

    num_units: int
    num_items: int
    num_factors: int
    idiographic: bool
    num_levels: int
    inducing_times: np.ndarray
    link: str = "logit"
    quadrature_points: int = 20
    jitter: float = DEFAULT_JITTER

    @property
    def inducing_per_item(self) -> int:
        return int(self.inducing_times.shape[1])

    @property
    def num_inducing(self) -> int:
        return self.num_items * self.inducing_per_item

    def inducing_inputs(self, unit: int) -> np.ndarray:
        """m×2 [item index, time], item-major to match K_task ⊗ K_time"""
        items = np.repeat(np.arange(self.num_items), self.inducing_per_item)
        times = np.tile(self.inducing_times[unit], self.num_items)
        return np.column_stack([items, times]).astype(float)


@dataclass(frozen=True)
class ObservationBatch:
    unit_index: np.ndarray
    item_index: np.ndarray
    times: np.ndarray
    responses: np.ndarray

    @property
    def size(self) -> int:
        return int(self.unit_index.shape[0])

    def take(self, rows) -> "ObservationBatch":
        return ObservationBatch(self.unit_index[rows], self.item_index[rows], self.times[rows], self.responses[rows])


@dataclass(frozen=True)
class ModelInstance:
    """A model ready to train: structure, initial parameters, frozen names"""

    structure: ModelStructure
    params: Dict[str, jnp.ndarray]
    frozen: FrozenSet[str]
    unit_ids: Tuple[str, ...]
    item_ids: Tuple[str, ...]
    label: str = "model"
    variant: Optional[str] = None

    def split_params(self) -> Tuple[Dict[str, jnp.ndarray], Dict[str, jnp.ndarray]]:
        trainable = {name: value for name, value in self.params.items() if name not in self.frozen}
        frozen = {name: value for name, value in self.params.items() if name in self.frozen}
        return trainable, frozen

    def with_params(self, updates: Dict[str, np.ndarray]) -> "ModelInstance":
        params = dict(self.params)
        for name, value in updates.items():
            if name not in params:
                raise StructuralError(f"model has no parameter '{name}'", {"label": self.label})
            value = jnp.asarray(value, dtype=float)
            if value.shape != params[name].shape:
                raise StructuralError(f"shape mismatch for '{name}'", {"expected": tuple(params[name].shape), "got": tuple(value.shape)})
            params[name] = value
        return ModelInstance(self.structure, params, self.frozen, self.unit_ids, self.item_ids, self.label, self.variant)

    def warm_started_from(self, source: "FittedModel", skip: Iterable[str] = ()) -> "ModelInstance":
        """Copy every compatible parameter of a fitted model (frozen ones excluded)"""
        if source.instance.unit_ids != self.unit_ids or source.instance.item_ids != self.item_ids:
            raise StructuralError("warm start requires identical unit and item maps")
        skip = set(skip) | set(self.frozen)
        updates = {
            name: value
            for name, value in source.params.items()
            if name in self.params and name not in skip and np.shape(value) == tuple(self.params[name].shape)
        }
        logger.info(f"🔄 Warm start of {self.label} from {source.label}: {sorted(updates)}")
        return self.with_params(updates)

    def batch_from(self, dataset: ResponseDataset) -> ObservationBatch:
        """Observation arrays aligned to this model's unit and item order"""
        if dataset.unit_ids == self.unit_ids and dataset.item_ids == self.item_ids:
            units, items = dataset.unit_index, dataset.item_index
        else:
            unit_lookup = {unit: i for i, unit in enumerate(self.unit_ids)}
            item_lookup = {item: j for j, item in enumerate(self.item_ids)}
            unknown_units = sorted(set(dataset.frame["unit_id"]) - set(unit_lookup))
            if unknown_units:
                raise DataError("observations for units the model was not built with", {"units": unknown_units[:5]})
            unknown_items = sorted(set(dataset.frame["item_id"]) - set(item_lookup))
            if unknown_items:
                raise StructuralError("observations for items the model was not built with", {"items": unknown_items[:5]})
            units = dataset.frame["unit_id"].map(unit_lookup).to_numpy(dtype=np.int64)
            items = dataset.frame["item_id"].map(item_lookup).to_numpy(dtype=np.int64)
        if dataset.num_observations and int(dataset.responses.max()) > self.structure.num_levels:
            raise StructuralError("responses exceed the model's level count", {"levels": self.structure.num_levels})
        return ObservationBatch(np.asarray(units, dtype=np.int64), np.asarray(items, dtype=np.int64), dataset.times, dataset.responses.astype(np.int64))


def place_inducing_times(dataset: ResponseDataset, num_inducing: int) -> np.ndarray:
    """
    Per unit, max(1, m // J) inducing times spread uniformly over its observed range

    A unit with a single observed time gets a unit-width window around it;
    a unit with no observations falls back to the dataset's overall range.
    """
    per_item = max(1, int(num_inducing) // max(dataset.num_items, 1))
    overall = dataset.time_range()
    grouped = dataset.frame.groupby("unit_index")["time"].agg(["min", "max"])
    rows = []
    for unit in range(dataset.num_units):
        low, high = (grouped.loc[unit, "min"], grouped.loc[unit, "max"]) if unit in grouped.index else overall
        if high - low <= 0.0:
            low, high = low - 0.5, high + 0.5
        rows.append(np.array([0.5 * (low + high)]) if per_item == 1 else np.linspace(low, high, per_item))
    return np.vstack(rows).astype(float)


def initialize_instance(
    dataset: ResponseDataset,
    num_factors: int,
    idiographic: bool,
    config: TrainConfig,
    w_pop: Optional[np.ndarray] = None,
    frozen: Iterable[str] = (),
    num_levels: Optional[int] = None,
    label: str = "model",
    variant: Optional[str] = None,
) -> ModelInstance:
    """
    Default initialization: μ = 0, L = 0.1·I, ℓ = range/4, v = 1,
    w_i ~ N(0, 0.1²), cuts equally spaced over [-2, 2]
    """
    if dataset.num_observations == 0:
        raise DataError("cannot build a model from an empty dataset")
    levels = int(num_levels or dataset.num_levels)
    if levels < dataset.num_levels:
        raise StructuralError("level count is smaller than the data's", {"levels": levels, "observed": dataset.num_levels})

    rng = rng_for(config.seed, f"init:{label}")
    inducing_times = place_inducing_times(dataset, config.num_inducing)
    structure = ModelStructure(
        num_units=dataset.num_units,
        num_items=dataset.num_items,
        num_factors=int(num_factors),
        idiographic=bool(idiographic),
        num_levels=levels,
        inducing_times=inducing_times,
        link=config.link,
        quadrature_points=config.quadrature_points,
    )
    get_link(config.link)
    gauss_hermite_rule(config.quadrature_points)

    n, m = structure.num_units, structure.num_inducing
    ranges = inducing_times[:, -1] - inducing_times[:, 0]
    ranges = np.where(ranges > 0.0, ranges, 1.0)

    params: Dict[str, jnp.ndarray] = {
        "log_noise": jnp.zeros(structure.num_items),
        "log_lengthscale": jnp.log(jnp.asarray(ranges / 4.0)),
        "raw_thresholds": jnp.asarray(thresholds_to_raw(default_cuts(levels))),
        "q_mu": jnp.zeros((n, m)),
        "q_sqrt": jnp.broadcast_to(jnp.log(INITIAL_Q_SCALE) * jnp.eye(m), (n, m, m)),
    }
    if structure.num_factors > 0:
        if w_pop is None:
            w_pop = rng.normal(0.0, INITIAL_IDIO_SCALE, size=(structure.num_factors, structure.num_items))
        w_pop = np.atleast_2d(np.asarray(w_pop, dtype=float))
        if w_pop.shape != (structure.num_factors, structure.num_items):
            raise StructuralError("population loadings must be K×J", {"expected": (structure.num_factors, structure.num_items), "got": w_pop.shape})
        params["w_pop"] = jnp.asarray(w_pop)
    if structure.idiographic:
        params["w_ind"] = jnp.asarray(rng.normal(0.0, INITIAL_IDIO_SCALE, size=(n, structure.num_items)))

    frozen = frozenset(frozen)
    if config.freeze_lengthscale:
        frozen = frozen | {"log_lengthscale"}
    unknown = frozen - set(params)
    if unknown:
        raise StructuralError("cannot freeze parameters the model does not have", {"names": sorted(unknown)})

    return ModelInstance(structure, params, frozen, dataset.unit_ids, dataset.item_ids, label, variant)


# ============================================================================
# TRACEABLE OBJECTIVE
# ============================================================================

def _unit_task_kernels(params):
    """(n, J, J) task kernels; the loading terms present in params decide the form"""
    num_units = params["log_lengthscale"].shape[0]
    base = _task_kernel(params.get("w_pop"), None, jnp.exp(params["log_noise"]))
    if "w_ind" in params:
        w_ind = params["w_ind"]
        return base[None] + w_ind[:, :, None] * w_ind[:, None, :]
    return jnp.broadcast_to(base, (num_units,) + base.shape)


def _q_factor(raw):
    """Lower-triangular factor with exp-parameterized diagonal"""
    diagonal = jnp.diagonal(raw, axis1=-2, axis2=-1)
    return jnp.tril(raw, -1) + jnp.exp(diagonal)[..., None] * jnp.eye(raw.shape[-1])


def _predictive(params, inducing_times, unit_idx, item_idx, times, jitter):
    """Per-observation mean and variance of q(f)"""
    task = _unit_task_kernels(params)
    scales = jnp.exp(params["log_lengthscale"])
    kzz = jax.vmap(_rbf)(inducing_times, inducing_times, scales)
    kuu = jax.vmap(jnp.kron)(task, kzz)
    m = kuu.shape[-1]
    eye = jnp.eye(m)
    chol = jnp.linalg.cholesky(kuu + jitter * eye)
    chol_inv = jax.vmap(lambda factor: jsl.solve_triangular(factor, eye, lower=True))(chol)

    kz = jnp.exp(-((times[:, None] - inducing_times[unit_idx]) ** 2) / scales[unit_idx][:, None] ** 2)
    task_rows = task[unit_idx, item_idx]
    kfu = (task_rows[:, :, None] * kz[:, None, :]).reshape(times.shape[0], m)
    kff = task[unit_idx, item_idx, item_idx]

    projected = jnp.einsum("nab,nb->na", chol_inv[unit_idx], kfu)
    mean = jnp.sum(projected * params["q_mu"][unit_idx], axis=-1)
    spread = jnp.einsum("nba,nb->na", _q_factor(params["q_sqrt"])[unit_idx], projected)
    variance = kff - jnp.sum(projected ** 2, axis=-1) + jnp.sum(spread ** 2, axis=-1)
    return mean, jnp.maximum(variance, MIN_VARIANCE)


def _expected_log_lik(params, inducing_times, unit_idx, item_idx, times, responses, nodes, weights, jitter, link):
    mean, variance = _predictive(params, inducing_times, unit_idx, item_idx, times, jitter)
    points = mean[:, None] + jnp.sqrt(2.0 * variance)[:, None] * nodes[None, :]
    log_probs = _log_prob(responses[:, None], points, _cuts_from_raw(params["raw_thresholds"]), get_link(link))
    return log_probs @ weights / SQRT_PI


def _kl_whitened(params):
    """Σ_i KL(N(μ_i, L_i L_iᵀ) || N(0, I)); log diag L is the raw diagonal"""
    raw = params["q_sqrt"]
    factor = _q_factor(raw)
    num_units, m = params["q_mu"].shape
    log_diag = jnp.diagonal(raw, axis1=-2, axis2=-1)
    return 0.5 * (jnp.sum(factor ** 2) + jnp.sum(params["q_mu"] ** 2) - num_units * m - 2.0 * jnp.sum(log_diag))


def _objective(trainable, frozen, inducing_times, unit_idx, item_idx, times, responses, mask, num_total, nodes, weights, jitter, link):
    params = {**frozen, **trainable}
    expectations = _expected_log_lik(params, inducing_times, unit_idx, item_idx, times, responses, nodes, weights, jitter, link)
    count = jnp.sum(mask)
    scale = jnp.where(count > 0, num_total / jnp.maximum(count, 1.0), 0.0)
    return scale * jnp.sum(mask * expectations) - _kl_whitened(params)


_objective_jit = jax.jit(_objective, static_argnames=("link",))
_gradient_jit = jax.jit(jax.grad(_objective), static_argnames=("link",))
_expected_log_lik_jit = jax.jit(_expected_log_lik, static_argnames=("link",))
_predictive_jit = jax.jit(_predictive)
_kl_whitened_jit = jax.jit(_kl_whitened)


@functools.partial(jax.jit, static_argnames=("link", "optimizer"))
def _train_step(trainable, opt_state, frozen, inducing_times, unit_idx, item_idx, times, responses, mask, num_total, nodes, weights, jitter, link, optimizer):
    value, grads = jax.value_and_grad(_objective)(
        trainable, frozen, inducing_times, unit_idx, item_idx, times, responses, mask, num_total, nodes, weights, jitter, link
    )
    trainable, opt_state = optimizer.update(trainable, grads, opt_state)
    return value, trainable, opt_state


def _padded(batch: ObservationBatch, rows: np.ndarray, size: int):
    """Fixed-size arrays (so jit compiles once) plus a 0/1 mask"""
    count = rows.shape[0]
    padded = np.zeros(size, dtype=np.int64)
    padded[:count] = rows
    mask = np.zeros(size)
    mask[:count] = 1.0
    responses = batch.responses[padded] if batch.size else np.ones(size, dtype=np.int64)
    if not batch.size:
        return (jnp.zeros(size, dtype=jnp.int64), jnp.zeros(size, dtype=jnp.int64), jnp.zeros(size), jnp.asarray(responses), jnp.asarray(mask))
    return (
        jnp.asarray(batch.unit_index[padded]),
        jnp.asarray(batch.item_index[padded]),
        jnp.asarray(batch.times[padded]),
        jnp.asarray(responses),
        jnp.asarray(mask),
    )


# ============================================================================
# PUBLIC OBJECTIVE OPERATIONS
# ============================================================================

def _as_batch(batch, instance: ModelInstance) -> ObservationBatch:
    return instance.batch_from(batch) if isinstance(batch, ResponseDataset) else batch


def _quadrature(instance: ModelInstance):
    nodes, weights = gauss_hermite_rule(instance.structure.quadrature_points)
    return jnp.asarray(nodes), jnp.asarray(weights)


def elbo(batch, params: Optional[Dict] = None, instance: ModelInstance = None, num_total: Optional[int] = None) -> float:
    """
    Minibatch ELBO estimate: (num_total / |batch|) Σ_batch E_q[log p(y|f)] - KL

    num_total defaults to the batch size, i.e. the full-data ELBO when the
    batch is the whole training set. An empty batch gives -KL.
    """
    if instance is None:
        raise StructuralError("elbo needs the model instance")
    batch = _as_batch(batch, instance)
    params = instance.params if params is None else params
    nodes, weights = _quadrature(instance)
    total = batch.size if num_total is None else num_total
    arrays = _padded(batch, np.arange(batch.size), max(batch.size, 1))
    trainable = {name: jnp.asarray(value) for name, value in params.items()}
    value = _objective_jit(
        trainable, {}, jnp.asarray(instance.structure.inducing_times), *arrays, float(total), nodes, weights,
        instance.structure.jitter, link=instance.structure.link,
    )
    return float(value)


def gradients(batch, params: Optional[Dict] = None, instance: ModelInstance = None, num_total: Optional[int] = None) -> Dict[str, np.ndarray]:
    """Gradient of elbo w.r.t. every free parameter; frozen parameters are absent"""
    if instance is None:
        raise StructuralError("gradients needs the model instance")
    batch = _as_batch(batch, instance)
    params = instance.params if params is None else params
    trainable = {name: jnp.asarray(value) for name, value in params.items() if name not in instance.frozen}
    frozen = {name: jnp.asarray(value) for name, value in params.items() if name in instance.frozen}
    nodes, weights = _quadrature(instance)
    total = batch.size if num_total is None else num_total
    arrays = _padded(batch, np.arange(batch.size), max(batch.size, 1))
    grads = _gradient_jit(
        trainable, frozen, jnp.asarray(instance.structure.inducing_times), *arrays, float(total), nodes, weights,
        instance.structure.jitter, link=instance.structure.link,
    )
    return {name: np.asarray(value) for name, value in grads.items()}


def _sum_expectations(instance: ModelInstance, params, batch: ObservationBatch, chunk: int) -> float:
    nodes, weights = _quadrature(instance)
    inducing_times = jnp.asarray(instance.structure.inducing_times)
    params = {name: jnp.asarray(value) for name, value in params.items()}
    total = 0.0
    size = max(1, min(chunk, batch.size))
    for start in range(0, batch.size, size):
        rows = np.arange(start, min(start + size, batch.size))
        unit_idx, item_idx, times, responses, mask = _padded(batch, rows, size)
        values = _expected_log_lik_jit(params, inducing_times, unit_idx, item_idx, times, responses, nodes, weights, instance.structure.jitter, link=instance.structure.link)
        total += float(jnp.sum(values * mask))
    return total


def full_data_elbo(model, dataset: ResponseDataset, params: Optional[Dict] = None, batch_size: int = 512) -> float:
    """ELBO over every observation of `dataset`, evaluated in chunks"""
    instance = model.instance if isinstance(model, FittedModel) else model
    if params is None:
        params = model.params
    batch = instance.batch_from(dataset)
    expectation = _sum_expectations(instance, params, batch, batch_size)
    kl = float(_kl_whitened_jit({name: jnp.asarray(value) for name, value in params.items()}))
    value = expectation - kl
    if not np.isfinite(value):
        raise NumericalError("full-data ELBO is not finite", {"label": instance.label, "expectation": expectation, "kl": kl})
    return value


# ============================================================================
# FITTED MODEL
# ============================================================================

@dataclass(frozen=True)
class FittedModel:
    """Trained parameters (frozen ones included) with their provenance"""

    instance: ModelInstance
    params: Dict[str, np.ndarray]
    elbo_trace: np.ndarray
    log_evidence: float
    fingerprint: str
    num_train: int
    train_config: TrainConfig = field(default_factory=TrainConfig)

    @property
    def label(self) -> str:
        return self.instance.label

    @property
    def structure(self) -> ModelStructure:
        return self.instance.structure

    def unit_position(self, unit_id: str) -> int:
        if unit_id not in self.instance.unit_ids:
            raise DataError(f"unknown unit '{unit_id}' (no cold-start units)")
        return self.instance.unit_ids.index(unit_id)

    def thresholds(self) -> OrdinalThresholds:
        return parameterize_thresholds(self.params["raw_thresholds"])

    def loadings(self) -> LoadingSet:
        return LoadingSet(
            w_pop=self.params.get("w_pop"),
            w_ind=self.params.get("w_ind"),
            noise=np.exp(self.params["log_noise"]),
            unit_ids=self.instance.unit_ids if "w_ind" in self.params else None,
        )

    def time_kernel_params(self) -> TimeKernelParams:
        return TimeKernelParams(np.exp(self.params["log_lengthscale"]))

    def task_covariance(self, unit: Optional[str] = None) -> np.ndarray:
        """Idiographic task kernel of a unit, or the population kernel when unit is None"""
        task = np.asarray(_unit_task_kernels({name: jnp.asarray(value) for name, value in self.params.items()}))
        if unit is None:
            noise = np.exp(self.params["log_noise"])
            w_pop = self.params.get("w_pop")
            return np.diag(noise) + (w_pop.T @ w_pop if w_pop is not None else 0.0)
        return task[self.unit_position(unit)]

    def variational_state(self, unit: str) -> VariationalState:
        index = self.unit_position(unit)
        return VariationalState(
            inducing_inputs=self.structure.inducing_inputs(index),
            mean=self.params["q_mu"][index],
            cov_factor=np.asarray(_q_factor(jnp.asarray(self.params["q_sqrt"][index]))),
            thresholds=self.thresholds(),
            whitened=True,
        )

    def joint_covariance(self, unit: str) -> JointCovariance:
        index = self.unit_position(unit)
        kernel = RBFTimeKernel(float(np.exp(self.params["log_lengthscale"][index])))
        times = self.structure.inducing_times[index]
        return JointCovariance(
            task_cov=jnp.asarray(self.task_covariance(unit)),
            time_cov=kernel(times, times),
            times=times,
            time_kernel=kernel,
        )


def _param_norms(params) -> Dict[str, float]:
    return {name: float(jnp.linalg.norm(jnp.ravel(value))) for name, value in params.items()}


def fit(dataset: ResponseDataset, model, config: Optional[TrainConfig] = None) -> FittedModel:
    """
    Maximize the ELBO with Adam over shuffled, fixed-size global minibatches

    Args:
        dataset: training observations
        model: a ModelInstance, or a ModelSpec (built here without a prior)
        config: training settings (defaults when omitted)

    Returns:
        FittedModel; frozen parameters come back bit-identical

    Raises:
        NumericalError: non-finite ELBO (step diagnostics attached)
    """
    config = config or TrainConfig()
    if not isinstance(model, ModelInstance):
        from app.models.ipgp_models import build_model

        model = build_model(model, dataset, config)
    instance = model
    if dataset.num_observations == 0:
        raise DataError("cannot fit on an empty dataset")
    if dataset.item_ids != instance.item_ids:
        raise StructuralError("dataset items differ from the model's", {"dataset": dataset.num_items, "model": instance.structure.num_items})

    batch = instance.batch_from(dataset)
    optimizer = Adam(learning_rate=config.learning_rate)
    trainable, frozen = instance.split_params()
    opt_state = optimizer.init(trainable)
    nodes, weights = _quadrature(instance)
    inducing_times = jnp.asarray(instance.structure.inducing_times)
    link = instance.structure.link
    num_total = float(batch.size)
    batch_size = min(config.batch_size, batch.size)
    rng = rng_for(config.seed, f"minibatch:{instance.label}")

    logger.info(f"🔄 Fitting {instance.label}: {batch.size} observations, {instance.structure.num_units} units, "
                f"m={instance.structure.num_inducing}, {config.epochs} epochs")
    trace = []
    step = 0
    for epoch in range(config.epochs):
        order = rng.permutation(batch.size)
        for start in range(0, batch.size, batch_size):
            arrays = _padded(batch, order[start:start + batch_size], batch_size)
            value, new_trainable, new_state = _train_step(
                trainable, opt_state, frozen, inducing_times, *arrays, num_total, nodes, weights,
                instance.structure.jitter, link=link, optimizer=optimizer,
            )
            value = float(value)
            if not np.isfinite(value):
                raise NumericalError(
                    "ELBO became non-finite during training",
                    {"label": instance.label, "epoch": epoch, "step": step, "param_norms": _param_norms(trainable)},
                )
            trainable, opt_state = new_trainable, new_state
            trace.append(value)
            step += 1
            logger.debug(f"{instance.label} epoch {epoch} step {step} ELBO {value:.4f}")
        recent = trace[-max(1, batch.size // batch_size):]
        logger.info(f"   epoch {epoch + 1}/{config.epochs} mean ELBO {np.mean(recent):.3f}")

    params = {name: np.asarray(value) for name, value in {**frozen, **trainable}.items()}
    log_evidence = full_data_elbo(instance, dataset, params=params, batch_size=config.batch_size)
    logger.info(f"✅ {instance.label} fitted: full-data ELBO {log_evidence:.3f}")
    return FittedModel(
        instance=instance,
        params=params,
        elbo_trace=np.asarray(trace, dtype=float),
        log_evidence=log_evidence,
        fingerprint=dataset.fingerprint(),
        num_train=dataset.num_observations,
        train_config=config,
    )


# ============================================================================
# PREDICTION
# ============================================================================

def _query_batch(fitted: FittedModel, queries) -> ObservationBatch:
    frame = queries.frame if isinstance(queries, ResponseDataset) else pd.DataFrame(queries)
    unit_lookup = {unit: i for i, unit in enumerate(fitted.instance.unit_ids)}
    item_lookup = {item: j for j, item in enumerate(fitted.instance.item_ids)}
    unit_ids = frame["unit_id"].astype(str)
    item_ids = frame["item_id"].astype(str)
    unknown_units = sorted(set(unit_ids) - set(unit_lookup))
    if unknown_units:
        raise DataError("queries reference units the model was not fitted on", {"units": unknown_units[:5]})
    unknown_items = sorted(set(item_ids) - set(item_lookup))
    if unknown_items:
        raise DataError("queries reference unknown items", {"items": unknown_items[:5]})
    return ObservationBatch(
        unit_index=unit_ids.map(unit_lookup).to_numpy(dtype=np.int64),
        item_index=item_ids.map(item_lookup).to_numpy(dtype=np.int64),
        times=frame["time"].to_numpy(dtype=float),
        responses=np.ones(len(frame), dtype=np.int64),
    )


def predictive_marginals(fitted: FittedModel, queries, chunk: int = 1024) -> MarginalPrediction:
    """q(f*) mean and variance for query (unit_id, item_id, time) rows"""
    batch = _query_batch(fitted, queries)
    params = {name: jnp.asarray(value) for name, value in fitted.params.items()}
    inducing_times = jnp.asarray(fitted.structure.inducing_times)
    means, variances = [], []
    size = max(1, min(chunk, batch.size))
    for start in range(0, batch.size, size):
        rows = np.arange(start, min(start + size, batch.size))
        unit_idx, item_idx, times, _, _ = _padded(batch, rows, size)
        mean, variance = _predictive_jit(params, inducing_times, unit_idx, item_idx, times, fitted.structure.jitter)
        means.append(np.asarray(mean)[: rows.shape[0]])
        variances.append(np.asarray(variance)[: rows.shape[0]])
    if not means:
        return MarginalPrediction(np.zeros(0), np.ones(0))
    return MarginalPrediction(np.concatenate(means), np.concatenate(variances))


def predict_responses(fitted: FittedModel, queries, chunk: int = 1024) -> np.ndarray:
    """
    Per-query categorical distribution over the C levels

    p(y* = c) ≈ (1/√π) Σ_k w_k p(c | μ* + √(2σ*²) x_k)

    Returns:
        (num_queries, C) array; rows sum to 1
    """
    marginals = predictive_marginals(fitted, queries, chunk)
    levels = fitted.structure.num_levels
    if marginals.mean.shape[0] == 0:
        return np.zeros((0, levels))
    nodes, weights = gauss_hermite_rule(fitted.structure.quadrature_points)
    points = marginals.mean[:, None] + np.sqrt(2.0 * marginals.variance)[:, None] * nodes[None, :]
    cuts = jnp.asarray(fitted.thresholds().cuts)
    probs = np.asarray(_probs(jnp.asarray(points), cuts, get_link(fitted.structure.link)))
    probs = np.einsum("nkc,k->nc", probs, weights) / SQRT_PI
    probs = np.clip(probs, 0.0, 1.0)
    return probs / probs.sum(axis=1, keepdims=True)


# ============================================================================
# PERSISTENCE
# ============================================================================

def _write_npz(path: Path, arrays: Dict[str, np.ndarray]) -> None:
    """np.savez layout with fixed entry timestamps, so identical states give identical bytes"""
    with zipfile.ZipFile(path, "w", compression=zipfile.ZIP_STORED) as archive:
        for name, value in arrays.items():
            buffer = io.BytesIO()
            np.lib.format.write_array(buffer, np.asarray(value), allow_pickle=False)
            archive.writestr(zipfile.ZipInfo(f"{name}.npy", date_time=NPZ_TIMESTAMP), buffer.getvalue())


def save_fitted(fitted: FittedModel, directory: str) -> Tuple[Path, Path]:
    """Write model_state.npz (arrays) and model_state.json (metadata)"""
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    arrays = {f"param__{name}": np.asarray(value) for name, value in sorted(fitted.params.items())}
    arrays["inducing_times"] = fitted.structure.inducing_times
    arrays["elbo_trace"] = fitted.elbo_trace
    state_path = directory / STATE_FILE
    _write_npz(state_path, arrays)

    structure = fitted.structure
    metadata = {
        "label": fitted.label,
        "variant": fitted.instance.variant,
        "unit_ids": list(fitted.instance.unit_ids),
        "item_ids": list(fitted.instance.item_ids),
        "frozen": sorted(fitted.instance.frozen),
        "structure": {
            "num_units": structure.num_units,
            "num_items": structure.num_items,
            "num_factors": structure.num_factors,
            "idiographic": structure.idiographic,
            "num_levels": structure.num_levels,
            "link": structure.link,
            "quadrature_points": structure.quadrature_points,
            "jitter": structure.jitter,
        },
        "log_evidence": fitted.log_evidence,
        "fingerprint": fitted.fingerprint,
        "num_train": fitted.num_train,
        "train_config": fitted.train_config.model_dump(),
    }
    metadata_path = directory / METADATA_FILE
    metadata_path.write_text(safe_json_dumps(metadata, indent=2, sort_keys=True), encoding="utf-8")
    return state_path, metadata_path


def load_fitted(directory: str) -> FittedModel:
    directory = Path(directory)
    state_path, metadata_path = directory / STATE_FILE, directory / METADATA_FILE
    if not state_path.is_file() or not metadata_path.is_file():
        raise DataError(f"no fitted model state in {directory}")
    metadata = json.loads(metadata_path.read_text(encoding="utf-8"))
    with np.load(state_path) as archive:
        params = {key[len("param__"):]: archive[key] for key in archive.files if key.startswith("param__")}
        inducing_times = archive["inducing_times"]
        trace = archive["elbo_trace"]

    structure = ModelStructure(inducing_times=inducing_times, **metadata["structure"])
    instance = ModelInstance(
        structure=structure,
        params={name: jnp.asarray(value) for name, value in params.items()},
        frozen=frozenset(metadata["frozen"]),
        unit_ids=tuple(metadata["unit_ids"]),
        item_ids=tuple(metadata["item_ids"]),
        label=metadata["label"],
        variant=metadata["variant"],
    )
    return FittedModel(
        instance=instance,
        params=params,
        elbo_trace=trace,
        log_evidence=float(metadata["log_evidence"]),
        fingerprint=metadata["fingerprint"],
        num_train=int(metadata["num_train"]),
        train_config=TrainConfig.model_validate(metadata["train_config"]),
    )


__all__ = [
    "VariationalState",
    "MarginalPrediction",
    "ModelStructure",
    "ModelInstance",
    "ObservationBatch",
    "FittedModel",
    "gauss_hermite_rule",
    "gauss_hermite_expectation",
    "safe_cholesky",
    "marginal_q_f",
    "kl_gaussian",
    "place_inducing_times",
    "initialize_instance",
    "elbo",
    "gradients",
    "full_data_elbo",
    "fit",
    "predictive_marginals",
    "predict_responses",
    "save_fitted",
    "load_fitted",
]
