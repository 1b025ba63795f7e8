"""
Simulation - synthetic longitudinal ordinal data and evaluation splits

Generator (per unit i, times 1..T):
    x_i^(k)(t) ~ GP(0, RBF(ℓ_i)),  k = 1..K       population factor paths
    g_i(t)     ~ GP(0, RBF(ℓ_i))                  idiographic path
    f_ij(t)    = Σ_k W_pop[k, j] x_i^(k)(t) + w_i[j] g_i(t) (+ task noise)
    y_ij(t)    = inverse-CDF draw from the ordinal model at f_ij(t)

so each unit's task covariance is W_popᵀW_pop + w_i w_iᵀ (+ v I).
"""

import logging
from dataclasses import dataclass
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np
import pandas as pd

from app.core.config import rng_for
from app.core.dataset import ResponseDataset
from app.core.errors import ConfigError, DataError
from app.core.kernels import rbf_time_kernel
from app.core.ordinal_likelihood import OrdinalThresholds, default_cuts, sample_ordinal
from app.schemas.ipgp_schemas import SimulationConfig

logger = logging.getLogger(__name__)

PATH_JITTER = 1e-8


# ============================================================================
# GROUND TRUTH
# ============================================================================

@dataclass(frozen=True)
class GroundTruth:
    """Everything the generator drew; enough to re-emit every response"""

    times: np.ndarray                 # (T,)
    lengthscales: np.ndarray          # (n,)
    latent_paths: np.ndarray          # (n, K, T)
    idiographic_paths: np.ndarray     # (n, T)
    w_pop: np.ndarray                 # (K, J)
    w_ind: np.ndarray                 # (n, J)
    task_noise: float
    thresholds: OrdinalThresholds
    latent_f: np.ndarray              # (n, J, T)
    uniforms: np.ndarray              # (n, J, T)
    unit_ids: Tuple[str, ...]
    item_ids: Tuple[str, ...]
    trait_map: Dict[str, str]

    def task_covariance(self, unit: int) -> np.ndarray:
        w = self.w_ind[unit]
        return self.w_pop.T @ self.w_pop + np.outer(w, w) + self.task_noise * np.eye(self.w_pop.shape[1])

    def task_correlation(self, unit: int) -> np.ndarray:
        """Correlation of the true task covariance; zero-variance items are uncorrelated"""
        covariance = self.task_covariance(unit)
        diagonal = np.diag(covariance)
        scale = np.where(diagonal > 0.0, 1.0 / np.sqrt(np.where(diagonal > 0.0, diagonal, 1.0)), 0.0)
        correlation = covariance * scale[:, None] * scale[None, :]
        np.fill_diagonal(correlation, 1.0)
        return np.clip(correlation, -1.0, 1.0)

    def correlations(self) -> Dict[str, np.ndarray]:
        return {unit_id: self.task_correlation(i) for i, unit_id in enumerate(self.unit_ids)}

    def regenerate_responses(self) -> np.ndarray:
        """Re-emit y (n, J, T) from the stored latent values and uniforms"""
        return sample_ordinal(self.latent_f, self.thresholds, self.uniforms)

    def to_dict(self) -> Dict:
        return {
            "unit_ids": list(self.unit_ids),
            "item_ids": list(self.item_ids),
            "trait_map": dict(self.trait_map),
            "times": self.times,
            "lengthscales": self.lengthscales,
            "w_pop": self.w_pop,
            "w_ind": self.w_ind,
            "task_noise": self.task_noise,
            "thresholds": self.thresholds.cuts,
            "task_correlations": self.correlations(),
            "latent_f": self.latent_f,
            "uniforms": self.uniforms,
        }


def true_cuts(num_levels: int) -> np.ndarray:
    """Symmetric generator thresholds: [-2, -1, 1, 2] for C=5"""
    if num_levels == 5:
        return np.array([-2.0, -1.0, 1.0, 2.0])
    return default_cuts(num_levels)


# ============================================================================
# GENERATOR
# ============================================================================

def _gp_paths(rng: np.random.Generator, times: np.ndarray, lengthscale: float, count: int) -> np.ndarray:
    kernel = np.asarray(rbf_time_kernel(times, lengthscale)) + PATH_JITTER * np.eye(times.shape[0])
    factor = np.linalg.cholesky(kernel)
    return (factor @ rng.standard_normal((times.shape[0], count))).T


def sparsify_loadings(loadings: np.ndarray, fraction: float, rng: np.random.Generator) -> np.ndarray:
    """
    Zero round(fraction·size) entries uniformly at random, then flip the sign
    of round(fraction·survivors) of the survivors
    """
    result = np.array(loadings, dtype=float)
    flat = result.reshape(-1)
    size = flat.shape[0]
    zeroed = rng.choice(size, size=int(round(fraction * size)), replace=False)
    flat[zeroed] = 0.0
    survivors = np.setdiff1d(np.arange(size), zeroed)
    flipped = rng.choice(survivors, size=int(round(fraction * survivors.shape[0])), replace=False)
    flat[flipped] = -flat[flipped]
    return result


def _block_loadings(config: SimulationConfig, rng: np.random.Generator) -> np.ndarray:
    block = config.num_items // config.num_factors
    low, high = config.off_loading_range
    w_pop = rng.uniform(low, high, size=(config.num_factors, config.num_items)) if high > low else np.full((config.num_factors, config.num_items), low)
    for k in range(config.num_factors):
        w_pop[k, k * block:(k + 1) * block] = config.dominant_loading
    return w_pop


def _labels(prefix: str, count: int) -> Tuple[str, ...]:
    width = len(str(max(count - 1, 0)))
    return tuple(f"{prefix}{i:0{width}d}" for i in range(count))


def simulate(config: SimulationConfig) -> Tuple[ResponseDataset, ResponseDataset, GroundTruth]:
    """
    Generate a full synthetic panel and split its observations at random

    Returns:
        (train, test, ground truth); train and test share index maps
    """
    rng = rng_for(config.seed, "simulation")
    n, T, K, J, C = config.num_units, config.num_periods, config.num_factors, config.num_items, config.num_levels
    times = np.arange(1, T + 1, dtype=float)

    lengthscales = rng.choice(np.asarray(config.lengthscale_pool, dtype=float), size=n)
    latent = np.empty((n, K, T))
    idiographic = np.empty((n, T))
    for i in range(n):
        paths = _gp_paths(rng, times, lengthscales[i], K + 1)
        latent[i], idiographic[i] = paths[:K], paths[K]

    w_pop = sparsify_loadings(_block_loadings(config, rng), config.sparsity_fraction, rng)
    low, high = config.idio_range
    w_ind = np.vstack([
        sparsify_loadings(rng.uniform(low, high, size=J) if high > low else np.full(J, low), config.sparsity_fraction, rng)
        for _ in range(n)
    ])

    latent_f = np.einsum("kj,ikt->ijt", w_pop, latent) + w_ind[:, :, None] * idiographic[:, None, :]
    if config.task_noise > 0:
        latent_f = latent_f + np.sqrt(config.task_noise) * rng.standard_normal(latent_f.shape)

    thresholds = OrdinalThresholds(true_cuts(C))
    uniforms = rng.uniform(size=latent_f.shape)
    responses = sample_ordinal(latent_f, thresholds, uniforms)

    unit_ids, item_ids = _labels("u", n), _labels("i", J)
    block = J // K
    trait_map = {item: f"F{j // block + 1}" for j, item in enumerate(item_ids)}
    unit_grid, item_grid, time_grid = np.meshgrid(np.arange(n), np.arange(J), np.arange(T), indexing="ij")
    frame = pd.DataFrame({
        "unit_id": np.asarray(unit_ids)[unit_grid.ravel()],
        "item_id": np.asarray(item_ids)[item_grid.ravel()],
        "time": times[time_grid.ravel()],
        "response": responses.ravel(),
    })
    full = ResponseDataset.from_frame(frame, num_levels=C, unit_ids=unit_ids, item_ids=item_ids, trait_map=trait_map)

    split_rng = rng_for(config.seed, "simulation:split")
    order = split_rng.permutation(full.num_observations)
    train_mask = np.zeros(full.num_observations, dtype=bool)
    train_mask[order[:int(round(config.train_fraction * full.num_observations))]] = True
    train, test = full.subset(train_mask), full.subset(~train_mask)

    truth = GroundTruth(
        times=times,
        lengthscales=lengthscales,
        latent_paths=latent,
        idiographic_paths=idiographic,
        w_pop=w_pop,
        w_ind=w_ind,
        task_noise=float(config.task_noise),
        thresholds=thresholds,
        latent_f=latent_f,
        uniforms=uniforms,
        unit_ids=unit_ids,
        item_ids=item_ids,
        trait_map=trait_map,
    )
    logger.info(f"✅ Simulated {full.num_observations} observations: {train.num_observations} train / {test.num_observations} test")
    return train, test, truth


def random_split(dataset: ResponseDataset, train_fraction: float, seed: int) -> Tuple[ResponseDataset, ResponseDataset]:
    """Uniform random observation split"""
    if not 0.0 <= train_fraction <= 1.0:
        raise ConfigError("train fraction must lie in [0, 1]", {"train_fraction": train_fraction})
    order = rng_for(seed, "split").permutation(dataset.num_observations)
    mask = np.zeros(dataset.num_observations, dtype=bool)
    mask[order[:int(round(train_fraction * dataset.num_observations))]] = True
    return dataset.subset(mask), dataset.subset(~mask)


# ============================================================================
# EVALUATION PROTOCOLS
# ============================================================================

def forecast_split(dataset: ResponseDataset, train_days: float, horizon_days: float) -> Tuple[ResponseDataset, ResponseDataset]:
    """
    Time-threshold split relative to the first observed time t0

    train: t < t0 + train_days
    test:  t0 + train_days <= t < t0 + train_days + horizon_days
    """
    if train_days < 0 or horizon_days < 0:
        raise ConfigError("forecast windows must be nonnegative", {"train_days": train_days, "horizon_days": horizon_days})
    if dataset.num_observations == 0:
        raise DataError("cannot split an empty dataset")
    times = dataset.times
    start = float(times.min())
    cut = start + train_days
    if horizon_days > 0 and not np.any(times >= cut):
        raise DataError("time range does not extend past the training window", {"last_time": float(times.max()), "cut": cut})
    train_mask = times < cut
    test_mask = (times >= cut) & (times < cut + horizon_days)
    return dataset.subset(train_mask), dataset.subset(test_mask)


def forecast_sweep(dataset: ResponseDataset, train_days: float, horizons: Sequence[float]) -> List[Tuple[float, ResponseDataset, ResponseDataset]]:
    """One forecast split per horizon, sharing the training window"""
    return [(float(h),) + forecast_split(dataset, train_days, h) for h in sorted(horizons)]


def leave_one_trait_out_splits(dataset: ResponseDataset, trait_map: Optional[Dict[str, str]] = None) -> List[Tuple[str, ResponseDataset, ResponseDataset]]:
    """
    For each trait: test = that trait's items, train = every other item

    Returns:
        (trait, train, test) triples in sorted trait order
    """
    trait_map = trait_map or dataset.trait_map
    if not trait_map:
        raise DataError("leave-one-trait-out needs an item→trait map")
    unmapped = [item for item in dataset.item_ids if item not in trait_map]
    if unmapped:
        raise DataError("every item must be mapped to a trait", {"unmapped": unmapped[:5]})

    item_traits = dataset.frame["item_id"].map(trait_map).to_numpy()
    splits = []
    for trait in sorted(set(trait_map[item] for item in dataset.item_ids)):
        test_mask = item_traits == trait
        if not np.any(~test_mask):
            logger.warning(f"⚠️ Trait '{trait}' covers every observation; its training fold is empty")
        splits.append((trait, dataset.subset(~test_mask), dataset.subset(test_mask)))
    return splits


def planned_missing_mask(
    dataset: ResponseDataset,
    items_per_subfactor: int = 3,
    shown: int = 2,
    seed: int = 0,
    subfactor_map: Optional[Dict[str, str]] = None,
) -> ResponseDataset:
    """
    Planned-missing design: per (unit, time, sub-factor) keep `shown` items
    chosen uniformly at random and drop the rest

    Sub-factors are consecutive groups of `items_per_subfactor` items (in item
    order) unless an explicit item→sub-factor map is given.
    """
    if shown < 1 or items_per_subfactor < 1:
        raise ConfigError("shown and items_per_subfactor must be positive", {"shown": shown, "items_per_subfactor": items_per_subfactor})
    if dataset.num_observations == 0:
        return dataset

    frame = dataset.frame
    if subfactor_map is not None:
        unmapped = [item for item in dataset.item_ids if item not in subfactor_map]
        if unmapped:
            raise DataError("sub-factor map does not cover every item", {"unmapped": unmapped[:5]})
        groups = frame["item_id"].map(subfactor_map).astype(str)
    else:
        groups = (frame["item_index"] // items_per_subfactor).astype(str)

    keys = pd.Series(rng_for(seed, "planned-missing").random(len(frame)), index=frame.index)
    ranks = keys.groupby([frame["unit_index"], frame["time"], groups]).rank(method="first") - 1
    masked = dataset.subset((ranks < shown).to_numpy())
    logger.info(f"✅ Planned-missing mask kept {masked.num_observations}/{dataset.num_observations} observations")
    return masked


__all__ = [
    "GroundTruth",
    "true_cuts",
    "sparsify_loadings",
    "simulate",
    "random_split",
    "forecast_split",
    "forecast_sweep",
    "leave_one_trait_out_splits",
    "planned_missing_mask",
]
