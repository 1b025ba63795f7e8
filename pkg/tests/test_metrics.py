"""
Metrics Test Suite
Predictive metrics, correlation matrix distance and CMD k-means clustering
"""

import logging

import numpy as np
import pytest
from numpy.testing import assert_allclose

from app.core.clustering import kmeans_cmd, normalized_mean_centroid, residual_profiles
from app.core.errors import ConfigError, DataError, MetricError
from app.core.metrics import accuracy_and_ll, cmd, mean_cmd, rand_index, residual_profile

logger = logging.getLogger(__name__)


def _correlation(covariance: np.ndarray) -> np.ndarray:
    scale = 1.0 / np.sqrt(np.diag(covariance))
    return covariance * scale[:, None] * scale[None, :]


def _random_correlation(rng: np.random.Generator, size: int) -> np.ndarray:
    factor = rng.normal(size=(size, size + 2))
    return _correlation(factor @ factor.T)


def _pattern_group(rng: np.random.Generator, pattern: np.ndarray, count: int) -> list:
    group = []
    for _ in range(count):
        loadings = pattern + 0.1 * rng.normal(size=pattern.shape)
        group.append(_correlation(loadings @ loadings.T + 0.2 * np.eye(pattern.shape[0])))
    return group


# Items 0-1 and 2-3 load together in the first pattern, 0-2 and 1-3 in the second.
BLOCK_PATTERN = np.array([[1.0, 0.0], [1.0, 0.0], [0.0, 1.0], [0.0, 1.0]])
CROSS_PATTERN = np.array([[1.0, 0.0], [0.0, 1.0], [1.0, 0.0], [0.0, 1.0]])


# ============================================================================
# ACCURACY AND LOG LIKELIHOOD
# ============================================================================

def test_point_mass_predictions_are_perfect():
    predictions = np.eye(3)[[0, 2, 1]]
    report = accuracy_and_ll(predictions, [1, 3, 2])
    assert report.accuracy == 1.0
    assert report.mean_log_lik == 0.0
    assert report.count == 3


def test_uniform_predictions_score_log_one_fifth():
    report = accuracy_and_ll(np.full((4, 5), 0.2), [1, 2, 4, 5])
    assert_allclose(report.mean_log_lik, np.log(0.2), rtol=1e-12)


def test_three_observation_hand_oracle():
    predictions = np.array([
        [0.7, 0.2, 0.1],
        [0.2, 0.5, 0.3],
        [0.4, 0.4, 0.2],
    ])
    report = accuracy_and_ll(predictions, [1, 3, 2])
    # the tie in the last row resolves to level 1
    assert_allclose(report.accuracy, 1.0 / 3.0)
    assert_allclose(report.mean_log_lik, np.mean(np.log([0.7, 0.3, 0.4])), rtol=1e-12)


def test_zero_probability_is_clipped():
    report = accuracy_and_ll(np.array([[1.0, 0.0]]), [2])
    assert np.isfinite(report.mean_log_lik)
    assert report.accuracy == 0.0


def test_empty_input_gives_zero_report():
    report = accuracy_and_ll(np.zeros((0, 5)), [])
    assert report.count == 0


def test_misaligned_or_out_of_range_truth():
    with pytest.raises(DataError):
        accuracy_and_ll(np.full((2, 3), 1.0 / 3.0), [1])
    with pytest.raises(DataError):
        accuracy_and_ll(np.full((2, 3), 1.0 / 3.0), [1, 4])


# ============================================================================
# CORRELATION MATRIX DISTANCE
# ============================================================================

def test_cmd_identical_and_scaled():
    rng = np.random.default_rng(0)
    matrix = _random_correlation(rng, 4)
    assert abs(cmd(matrix, matrix)) < 1e-12
    assert abs(cmd(matrix, 5.0 * matrix)) < 1e-12


def test_cmd_orthogonal():
    assert_allclose(cmd(np.diag([1.0, 0.0]), np.diag([0.0, 1.0])), 1.0)


def test_cmd_is_symmetric_and_bounded():
    rng = np.random.default_rng(1)
    for _ in range(100):
        a, b = _random_correlation(rng, 5), _random_correlation(rng, 5)
        assert cmd(a, b) == cmd(b, a)
        assert -1e-12 <= cmd(a, b) <= 1.0 + 1e-12


def test_cmd_errors():
    with pytest.raises(MetricError):
        cmd(np.zeros((2, 2)), np.eye(2))
    with pytest.raises(MetricError):
        cmd(np.eye(2), np.eye(3))


def test_mean_cmd_over_common_units():
    a = np.eye(2)
    b = np.array([[1.0, 0.5], [0.5, 1.0]])
    estimated = {"u1": a, "u2": b, "extra": a}
    truth = {"u1": a, "u2": a}
    assert_allclose(mean_cmd(estimated, truth), 0.5 * cmd(b, a))
    with pytest.raises(MetricError):
        mean_cmd({"x": a}, {"y": a})


def test_rand_index():
    assert rand_index([0, 0, 1, 1], [1, 1, 0, 0]) == 1.0
    assert rand_index([0, 0, 1, 1], [0, 1, 0, 1]) < 1.0


# ============================================================================
# RESIDUAL PROFILES
# ============================================================================

ITEMS = ["e1", "e2", "n1", "n2", "n3"]
TRAITS = {"e1": "E", "e2": "E", "n1": "N", "n2": "N", "n3": "N"}


def test_residual_profile_of_population_is_zero():
    population = _random_correlation(np.random.default_rng(2), 5)
    profile = residual_profile(population, population, TRAITS, ITEMS)
    assert list(profile.index) == ["E", "N"]
    assert_allclose(profile.to_numpy(), np.zeros((2, 2)))


def test_single_pair_perturbation_shifts_its_block():
    population = np.eye(5)
    centroid = population.copy()
    centroid[0, 3] += 0.3
    centroid[3, 0] += 0.3
    profile = residual_profile(centroid, population, TRAITS, ITEMS)
    assert_allclose(profile.loc["E", "N"], 0.3 / 6.0)
    assert_allclose(profile.loc["N", "E"], 0.3 / 6.0)
    assert_allclose(profile.loc["E", "E"], 0.0)
    assert_allclose(profile.to_numpy(), profile.to_numpy().T)


def test_residual_profile_needs_full_trait_map():
    with pytest.raises(MetricError):
        residual_profile(np.eye(5), np.eye(5), {"e1": "E"}, ITEMS)


# ============================================================================
# CMD K-MEANS
# ============================================================================

def test_single_cluster_centroid_is_normalized_mean():
    rng = np.random.default_rng(3)
    matrices = [_random_correlation(rng, 4) for _ in range(6)]
    result = kmeans_cmd(matrices, k=1, restarts=2, seed=0, workers=1)
    assert result.k == 1
    assert np.all(result.labels == 0)
    assert_allclose(result.centroids[0], normalized_mean_centroid(matrices), atol=1e-12)
    assert_allclose(np.diag(result.centroids[0]), np.ones(4))


def test_one_cluster_per_matrix_costs_nothing():
    rng = np.random.default_rng(4)
    matrices = [_random_correlation(rng, 3) for _ in range(5)]
    result = kmeans_cmd(matrices, k=5, restarts=3, seed=1, workers=1)
    assert abs(result.total_cost) < 1e-10
    assert sorted(result.labels.tolist()) == [0, 1, 2, 3, 4]


def test_two_separated_groups_are_recovered():
    rng = np.random.default_rng(5)
    matrices = _pattern_group(rng, BLOCK_PATTERN, 10) + _pattern_group(rng, CROSS_PATTERN, 10)
    truth = [0] * 10 + [1] * 10
    result = kmeans_cmd(matrices, k=2, restarts=5, seed=7, workers=2)
    assert rand_index(result.labels, truth) == 1.0


def test_cost_history_never_increases():
    rng = np.random.default_rng(6)
    matrices = [_random_correlation(rng, 4) for _ in range(30)]
    result = kmeans_cmd(matrices, k=3, restarts=4, seed=2, workers=1)
    history = np.asarray(result.cost_history)
    assert np.all(np.diff(history) <= 1e-10)
    assert result.total_cost <= history[-1] + 1e-10


def test_restarts_are_reproducible_across_thread_counts():
    rng = np.random.default_rng(7)
    matrices = [_random_correlation(rng, 4) for _ in range(12)]
    serial = kmeans_cmd(matrices, k=3, restarts=6, seed=11, workers=1)
    parallel = kmeans_cmd(matrices, k=3, restarts=6, seed=11, workers=4)
    assert serial.restart == parallel.restart
    assert np.array_equal(serial.labels, parallel.labels)
    assert serial.total_cost == parallel.total_cost


def test_mapping_input_and_residuals():
    rng = np.random.default_rng(8)
    units = {f"u{i}": _random_correlation(rng, 5) for i in range(8)}
    population = np.eye(5)
    result = kmeans_cmd(units, k=2, restarts=2, seed=0, workers=1, population=population)
    assert set(result.assignments) == set(units)
    assert sorted(result.members(0) + result.members(1)) == sorted(units)
    for centroid, residual in zip(result.centroids, result.residuals):
        assert_allclose(residual, centroid - population)

    profiles = residual_profiles(result, population, TRAITS, ITEMS)
    assert len(profiles) == 2
    assert profiles[0].shape == (2, 2)


def test_mean_centroid_rule_is_selectable():
    rng = np.random.default_rng(9)
    matrices = [_random_correlation(rng, 3) for _ in range(6)]
    result = kmeans_cmd(matrices, k=2, restarts=2, seed=0, centroid_rule="mean", workers=1)
    assert result.centroid_rule == "mean"


@pytest.mark.parametrize("kwargs", [
    {"k": 0},
    {"k": 4},
    {"k": 1, "restarts": 0},
    {"k": 1, "max_iter": 0},
    {"k": 1, "centroid_rule": "median"},
])
def test_kmeans_configuration_errors(kwargs):
    with pytest.raises(ConfigError):
        kmeans_cmd([np.eye(2)] * 3, **kwargs)


def test_zero_iterations_is_a_config_error():
    strong = _correlation(np.array([[1.0, 0.9], [0.9, 1.0]]))
    opposed = _correlation(np.array([[1.0, -0.9], [-0.9, 1.0]]))
    with pytest.raises(ConfigError, match="max_iter") as excinfo:
        kmeans_cmd([np.eye(2), strong, opposed], k=2, restarts=1, max_iter=0)
    assert excinfo.value.diagnostics == {"max_iter": 0}


@pytest.mark.parametrize("max_iter", [1, 2])
def test_capped_run_assigns_to_returned_centroids(max_iter):
    rng = np.random.default_rng(12)
    matrices = [_random_correlation(rng, 4) for _ in range(30)]
    result = kmeans_cmd(matrices, k=3, restarts=3, seed=5, max_iter=max_iter, workers=1)

    distances = np.array([[cmd(matrix, centroid) for centroid in result.centroids] for matrix in matrices])
    assigned = distances[np.arange(len(matrices)), result.labels]
    assert_allclose(result.total_cost, assigned.sum(), rtol=1e-12)
    nearest = distances.argmin(axis=1)
    if len(np.unique(nearest)) == 3:
        assert np.array_equal(result.labels, nearest)
        assert_allclose(result.total_cost, distances.min(axis=1).sum(), rtol=1e-12)
    else:
        # nearest-centroid assignment would empty a cluster; the last Lloyd labels are kept
        assert len(np.unique(result.labels)) == 3


def test_kmeans_rejects_mixed_shapes():
    with pytest.raises(MetricError):
        kmeans_cmd([np.eye(2), np.eye(3)], k=1)
