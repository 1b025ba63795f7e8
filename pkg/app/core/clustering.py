"""
CMD Clustering - k-means over correlation matrices under the correlation matrix distance
=======================================================================================

Lloyd iterations: assign each matrix to the nearest centroid by CMD, then
recompute centroids. The default centroid (mean of Frobenius-normalized
members) is the CMD minimizer, so the within-cluster cost never increases.
Restarts run on a thread pool; the best restart is chosen by (cost, index).
"""

import logging
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from typing import Callable, Dict, List, Mapping, Optional, Sequence, Union

import numpy as np

from app.core.config import rng_for, worker_count
from app.core.errors import ConfigError, MetricError
from app.core.metrics import cmd, residual_profile

logger = logging.getLogger(__name__)

DEFAULT_MAX_ITER = 100


# ============================================================================
# CENTROID RULES
# ============================================================================

def _unit_diagonal(matrix: np.ndarray) -> np.ndarray:
    diagonal = np.diag(matrix)
    if np.any(diagonal <= 0.0):
        raise MetricError("centroid has a non-positive diagonal entry", {"min_diagonal": float(diagonal.min())})
    scale = 1.0 / np.sqrt(diagonal)
    return matrix * scale[:, None] * scale[None, :]


def normalized_mean_centroid(members: Sequence[np.ndarray]) -> np.ndarray:
    """Mean of Frobenius-normalized members, rescaled to a unit diagonal"""
    stacked = np.stack([member / np.linalg.norm(member) for member in members])
    return _unit_diagonal(stacked.mean(axis=0))


def mean_centroid(members: Sequence[np.ndarray]) -> np.ndarray:
    """Elementwise mean, rescaled to a unit diagonal"""
    return _unit_diagonal(np.stack(members).mean(axis=0))


CENTROID_RULES: Dict[str, Callable[[Sequence[np.ndarray]], np.ndarray]] = {
    "normalized_mean": normalized_mean_centroid,
    "mean": mean_centroid,
}


# ============================================================================
# RESULT
# ============================================================================

@dataclass(frozen=True)
class ClusterResult:
    """Best restart of a CMD k-means run"""

    labels: np.ndarray
    centroids: List[np.ndarray]
    total_cost: float
    cost_history: List[float]
    restart: int
    unit_ids: List[str] = field(default_factory=list)
    centroid_rule: str = "normalized_mean"
    residuals: Optional[List[np.ndarray]] = None

    @property
    def k(self) -> int:
        return len(self.centroids)

    @property
    def assignments(self) -> Dict[str, int]:
        return {unit: int(label) for unit, label in zip(self.unit_ids, self.labels)}

    def members(self, cluster: int) -> List[str]:
        return [unit for unit, label in zip(self.unit_ids, self.labels) if label == cluster]


# ============================================================================
# LLOYD ITERATIONS
# ============================================================================

def _distances(matrices: Sequence[np.ndarray], centroids: Sequence[np.ndarray]) -> np.ndarray:
    return np.array([[cmd(matrix, centroid) for centroid in centroids] for matrix in matrices])


def _seed_centroids(matrices: Sequence[np.ndarray], k: int, rng: np.random.Generator) -> List[int]:
    """k-means++ seeding with squared CMD as the spread weight"""
    chosen = [int(rng.integers(len(matrices)))]
    while len(chosen) < k:
        nearest = _distances(matrices, [matrices[i] for i in chosen]).min(axis=1)
        weights = np.clip(nearest, 0.0, None) ** 2
        weights[chosen] = 0.0
        if weights.sum() <= 0.0:
            # remaining matrices coincide with chosen ones
            weights = np.ones(len(matrices))
            weights[chosen] = 0.0
        chosen.append(int(rng.choice(len(matrices), p=weights / weights.sum())))
    return chosen


def _lloyd(
    matrices: Sequence[np.ndarray],
    k: int,
    rng: np.random.Generator,
    centroid_rule: Callable[[Sequence[np.ndarray]], np.ndarray],
    max_iter: int,
) -> tuple:
    centroids = [matrices[i] for i in _seed_centroids(matrices, k, rng)]
    labels = None
    converged = False
    history: List[float] = []

    for _ in range(max_iter):
        distances = _distances(matrices, centroids)
        new_labels = np.argmin(distances, axis=1)
        for cluster in range(k):
            if np.any(new_labels == cluster):
                continue
            # reseed an empty cluster with the worst-served matrix
            cost_per_point = distances[np.arange(len(matrices)), new_labels]
            movable = [i for i in np.argsort(-cost_per_point) if np.sum(new_labels == new_labels[i]) > 1]
            if not movable:
                break
            farthest = int(movable[0])
            logger.warning(f"⚠️ Empty cluster {cluster}; reseeding from matrix {farthest}")
            new_labels[farthest] = cluster
            distances[farthest, cluster] = 0.0
            centroids[cluster] = matrices[farthest]

        history.append(float(distances[np.arange(len(matrices)), new_labels].sum()))
        if labels is not None and np.array_equal(new_labels, labels):
            converged = True
            break
        labels = new_labels
        centroids = [centroid_rule([matrices[i] for i in np.flatnonzero(labels == cluster)]) for cluster in range(k)]

    final = _distances(matrices, centroids)
    if not converged:
        # iteration cap reached: assign to the returned centroids unless a cluster would empty
        nearest = np.argmin(final, axis=1)
        if len(np.unique(nearest)) == k:
            labels = nearest
    cost = float(final[np.arange(len(matrices)), labels].sum())
    return labels, centroids, cost, history


def kmeans_cmd(
    matrices: Union[Sequence[np.ndarray], Mapping[str, np.ndarray]],
    k: int,
    restarts: int = 10,
    seed: int = 0,
    centroid_rule: str = "normalized_mean",
    max_iter: int = DEFAULT_MAX_ITER,
    workers: Optional[int] = None,
    population=None,
) -> ClusterResult:
    """
    Cluster correlation matrices by CMD

    Args:
        matrices: list of J×J matrices, or a mapping unit_id -> matrix
        k: number of clusters, 1 <= k <= number of matrices
        restarts: independent k-means++ initializations
        seed: root seed; restart r draws from its own derived stream
        centroid_rule: 'normalized_mean' (CMD-optimal) or 'mean'
        workers: thread count for restarts (IPGP_THREADS when omitted)
        population: J×J population correlation; fills ClusterResult.residuals

    Raises:
        ConfigError: bad k, restarts, max_iter or centroid rule
        MetricError: matrices of different shapes or zero matrices
    """
    if isinstance(matrices, Mapping):
        unit_ids = [str(unit) for unit in matrices]
        matrices = [np.asarray(matrices[unit], dtype=float) for unit in matrices]
    else:
        matrices = [np.asarray(matrix, dtype=float) for matrix in matrices]
        unit_ids = [str(i) for i in range(len(matrices))]

    if not matrices:
        raise ConfigError("no matrices to cluster")
    if not 1 <= k <= len(matrices):
        raise ConfigError(f"k must lie in [1, {len(matrices)}]", {"k": k})
    if restarts < 1:
        raise ConfigError("restarts must be at least 1", {"restarts": restarts})
    if max_iter < 1:
        raise ConfigError("max_iter must be at least 1", {"max_iter": max_iter})
    if centroid_rule not in CENTROID_RULES:
        raise ConfigError(f"unknown centroid rule '{centroid_rule}'", {"available": sorted(CENTROID_RULES)})
    if len({matrix.shape for matrix in matrices}) > 1:
        raise MetricError("matrices have different shapes")

    rule = CENTROID_RULES[centroid_rule]

    def run(restart: int):
        return _lloyd(matrices, k, rng_for(seed, f"kmeans:{restart}"), rule, max_iter)

    with ThreadPoolExecutor(max_workers=workers or worker_count()) as pool:
        outcomes = list(pool.map(run, range(restarts)))

    best = min(range(restarts), key=lambda r: (outcomes[r][2], r))
    labels, centroids, cost, history = outcomes[best]
    residuals = None
    if population is not None:
        population = np.asarray(population, dtype=float)
        if population.shape != centroids[0].shape:
            raise MetricError("population matrix has the wrong shape", {"expected": centroids[0].shape, "got": population.shape})
        residuals = [centroid - population for centroid in centroids]
    logger.info(f"✅ CMD k-means: k={k}, best restart {best} of {restarts}, cost {cost:.4f}")
    return ClusterResult(
        labels=np.asarray(labels, dtype=int),
        centroids=centroids,
        total_cost=cost,
        cost_history=history,
        restart=best,
        unit_ids=unit_ids,
        centroid_rule=centroid_rule,
        residuals=residuals,
    )


def residual_profiles(result: ClusterResult, population, trait_map: Mapping[str, str], item_ids: Sequence[str]):
    """Trait-level (centroid - population) profile for every cluster"""
    return [residual_profile(centroid, population, dict(trait_map), item_ids) for centroid in result.centroids]


__all__ = [
    "CENTROID_RULES",
    "ClusterResult",
    "kmeans_cmd",
    "mean_centroid",
    "normalized_mean_centroid",
    "residual_profiles",
]
