"""
Kernels: time kernels, task kernels and their Kronecker joint covariance

The joint covariance of a unit's latent functions over (item, time) pairs is
    K_task ⊗ K_time
with the flattened index j * T + t. Public functions validate their inputs
and return JAX arrays; the underscore helpers are traceable and are used
inside the differentiable objective.
"""

import logging
from dataclasses import dataclass
from typing import Optional, Protocol, Sequence, Union, runtime_checkable

import jax
import jax.numpy as jnp
import numpy as np

from app.core.errors import ParameterDomainError, StructuralError

logger = logging.getLogger(__name__)

# Gradient checks and Cholesky factorizations need double precision.
jax.config.update("jax_enable_x64", True)

DEFAULT_JITTER = 1e-6
SYMMETRY_TOLERANCE = 1e-8


# ============================================================================
# TRACEABLE HELPERS
# ============================================================================

def _rbf(times_a, times_b, lengthscale):
    """exp(-(t - t')^2 / l^2) between two time vectors"""
    diff = times_a[:, None] - times_b[None, :]
    return jnp.exp(-(diff ** 2) / lengthscale ** 2)


def _task_kernel(w_pop, w_ind_row, noise):
    """W_popᵀW_pop + w_i w_iᵀ + diag(v); either loading term may be None"""
    kernel = jnp.diag(noise)
    if w_pop is not None:
        kernel = kernel + w_pop.T @ w_pop
    if w_ind_row is not None:
        kernel = kernel + jnp.outer(w_ind_row, w_ind_row)
    return kernel


# ============================================================================
# TIME KERNELS
# ============================================================================

@runtime_checkable
class TimeKernel(Protocol):
    """Stationary kernel over the real-valued time axis"""

    def __call__(self, times_a, times_b): ...

    def diag(self, times): ...


@dataclass(frozen=True)
class RBFTimeKernel:
    """RBF time kernel with a single length scale"""

    lengthscale: float

    def __post_init__(self):
        _check_lengthscale(self.lengthscale)

    def __call__(self, times_a, times_b):
        return _rbf(jnp.asarray(times_a, dtype=float), jnp.asarray(times_b, dtype=float), self.lengthscale)

    def diag(self, times):
        return jnp.ones(jnp.shape(times)[0])


@dataclass(frozen=True)
class TimeKernelParams:
    """Per-unit RBF length scales"""

    lengthscale_per_unit: np.ndarray

    def __post_init__(self):
        scales = np.asarray(self.lengthscale_per_unit, dtype=float)
        if scales.ndim != 1:
            raise StructuralError("length scales must be a vector", {"shape": scales.shape})
        for value in scales:
            _check_lengthscale(value)
        object.__setattr__(self, "lengthscale_per_unit", scales)

    @property
    def num_units(self) -> int:
        return int(self.lengthscale_per_unit.shape[0])

    def kernel(self, unit: int) -> RBFTimeKernel:
        return RBFTimeKernel(float(self.lengthscale_per_unit[unit]))


def _check_lengthscale(lengthscale) -> None:
    value = float(lengthscale)
    if not np.isfinite(value) or value <= 0.0:
        raise ParameterDomainError("length scale must be positive and finite", {"lengthscale": value})


def rbf_time_kernel(times: Sequence[float], lengthscale: float) -> jnp.ndarray:
    """
    RBF kernel matrix over a vector of times

    Args:
        times: real-valued time stamps (irregular sampling allowed)
        lengthscale: positive length scale l

    Returns:
        T×T matrix K[a, b] = exp(-(t_a - t_b)^2 / l^2)
    """
    _check_lengthscale(lengthscale)
    times = np.asarray(times, dtype=float).reshape(-1)
    if not np.all(np.isfinite(times)):
        raise ParameterDomainError("times must be finite")
    return RBFTimeKernel(float(lengthscale))(times, times)


# ============================================================================
# LOADINGS AND TASK KERNELS
# ============================================================================

@dataclass(frozen=True)
class LoadingSet:
    """
    Population and idiographic loadings plus task noise

    w_pop: K×J population loadings (K may be 0 when the population term is absent)
    w_ind: n×J idiographic loadings, one row per unit (None when absent)
    noise: J positive task variances v
    """

    w_pop: Optional[np.ndarray]
    w_ind: Optional[np.ndarray]
    noise: np.ndarray
    unit_ids: Optional[tuple] = None

    def __post_init__(self):
        noise = np.asarray(self.noise, dtype=float).reshape(-1)
        if np.any(~np.isfinite(noise)) or np.any(noise <= 0.0):
            raise ParameterDomainError("task noise entries must be strictly positive", {"min_noise": float(noise.min()) if noise.size else None})
        num_items = noise.shape[0]

        w_pop = None if self.w_pop is None else np.atleast_2d(np.asarray(self.w_pop, dtype=float))
        if w_pop is not None and w_pop.shape[1] != num_items:
            raise StructuralError("w_pop column count must equal the number of items", {"w_pop": w_pop.shape, "items": num_items})

        w_ind = None if self.w_ind is None else np.atleast_2d(np.asarray(self.w_ind, dtype=float))
        if w_ind is not None and w_ind.shape[1] != num_items:
            raise StructuralError("idiographic loading length must equal the number of items", {"w_ind": w_ind.shape, "items": num_items})
        if self.unit_ids is not None and w_ind is not None and len(self.unit_ids) != w_ind.shape[0]:
            raise StructuralError("one idiographic loading row per unit id is required")

        object.__setattr__(self, "noise", noise)
        object.__setattr__(self, "w_pop", w_pop)
        object.__setattr__(self, "w_ind", w_ind)

    @property
    def num_items(self) -> int:
        return int(self.noise.shape[0])

    @property
    def num_factors(self) -> int:
        return 0 if self.w_pop is None else int(self.w_pop.shape[0])

    def unit_index(self, unit: Union[int, str]) -> int:
        if self.w_ind is None:
            raise StructuralError("loading set has no idiographic component")
        if isinstance(unit, str):
            if self.unit_ids is None or unit not in self.unit_ids:
                raise StructuralError(f"unknown unit '{unit}'")
            return self.unit_ids.index(unit)
        index = int(unit)
        if not 0 <= index < self.w_ind.shape[0]:
            raise StructuralError("unit index out of range", {"unit": index, "units": self.w_ind.shape[0]})
        return index


def task_kernel_idiographic(loadings: LoadingSet, unit: Union[int, str]) -> jnp.ndarray:
    """Unit-individualized task kernel W_popᵀW_pop + w_i w_iᵀ + diag(v)"""
    row = loadings.w_ind[loadings.unit_index(unit)]
    w_pop = None if loadings.num_factors == 0 else jnp.asarray(loadings.w_pop)
    return _task_kernel(w_pop, jnp.asarray(row), jnp.asarray(loadings.noise))


def task_kernel_nomothetic(loadings: LoadingSet) -> jnp.ndarray:
    """Population task kernel W_popᵀW_pop + diag(v), without unit-specific terms"""
    w_pop = None if loadings.num_factors == 0 else jnp.asarray(loadings.w_pop)
    return _task_kernel(w_pop, None, jnp.asarray(loadings.noise))


# ============================================================================
# JOINT (KRONECKER) COVARIANCE
# ============================================================================

@dataclass(frozen=True)
class JointCovariance:
    """
    Structured covariance over (item, time) pairs

    Stored as its two factors; the JT×JT matrix is only built by dense().
    When a time kernel is attached the covariance can also be evaluated
    between arbitrary (item index, time) point sets.
    """

    task_cov: jnp.ndarray
    time_cov: jnp.ndarray
    times: Optional[np.ndarray] = None
    time_kernel: Optional[TimeKernel] = None

    @property
    def num_items(self) -> int:
        return int(self.task_cov.shape[0])

    @property
    def num_times(self) -> int:
        return int(self.time_cov.shape[0])

    @property
    def shape(self) -> tuple:
        size = self.num_items * self.num_times
        return (size, size)

    def entry(self, item_a: int, time_a: int, item_b: int, time_b: int) -> float:
        return float(self.task_cov[item_a, item_b] * self.time_cov[time_a, time_b])

    def dense(self) -> jnp.ndarray:
        return jnp.kron(self.task_cov, self.time_cov)

    def evaluate(self, points_a, points_b) -> jnp.ndarray:
        """
        Cross-covariance between (item index, time) point sets

        Args:
            points_a: N×2 array of [item index, time]
            points_b: M×2 array of [item index, time]
        """
        if self.time_kernel is None:
            raise StructuralError("joint covariance has no time kernel attached")
        points_a = np.atleast_2d(np.asarray(points_a, dtype=float))
        points_b = np.atleast_2d(np.asarray(points_b, dtype=float))
        items_a = points_a[:, 0].astype(int)
        items_b = points_b[:, 0].astype(int)
        task_block = self.task_cov[items_a][:, items_b]
        return task_block * self.time_kernel(points_a[:, 1], points_b[:, 1])

    def evaluate_diag(self, points) -> jnp.ndarray:
        if self.time_kernel is None:
            raise StructuralError("joint covariance has no time kernel attached")
        points = np.atleast_2d(np.asarray(points, dtype=float))
        items = points[:, 0].astype(int)
        return jnp.diag(self.task_cov)[items] * self.time_kernel.diag(points[:, 1])


def _check_symmetric(matrix: jnp.ndarray, name: str) -> None:
    if matrix.ndim != 2 or matrix.shape[0] != matrix.shape[1]:
        raise StructuralError(f"{name} must be square", {"shape": tuple(matrix.shape)})
    asymmetry = float(jnp.max(jnp.abs(matrix - matrix.T))) if matrix.size else 0.0
    scale = max(1.0, float(jnp.max(jnp.abs(matrix))) if matrix.size else 1.0)
    if asymmetry > SYMMETRY_TOLERANCE * scale:
        raise StructuralError(f"{name} is not symmetric", {"max_asymmetry": asymmetry})


def joint_covariance(
    task_cov,
    time_cov,
    times: Optional[Sequence[float]] = None,
    time_kernel: Optional[TimeKernel] = None,
) -> JointCovariance:
    """
    Combine a J×J task kernel and a T×T time kernel into K_task ⊗ K_time

    Args:
        task_cov: symmetric PSD task covariance
        time_cov: symmetric PSD time covariance
        times: optional time stamps the time covariance was built on
        time_kernel: optional kernel used to evaluate off-grid points

    Returns:
        JointCovariance storing both factors
    """
    task_cov = jnp.asarray(task_cov, dtype=float)
    time_cov = jnp.asarray(time_cov, dtype=float)
    _check_symmetric(task_cov, "task covariance")
    _check_symmetric(time_cov, "time covariance")
    if times is not None:
        times = np.asarray(times, dtype=float).reshape(-1)
        if times.shape[0] != time_cov.shape[0]:
            raise StructuralError("times length must match the time covariance", {"times": times.shape[0], "time_cov": tuple(time_cov.shape)})
    return JointCovariance(task_cov=task_cov, time_cov=time_cov, times=times, time_kernel=time_kernel)


def block_coregionalization_covariance(w_pop, time_cov) -> jnp.ndarray:
    """
    Two-level block assembly of the coregionalized covariance

    Block (j, j') is (w_jᵀ w_j') K_time where w_j is column j of the K×J
    loading matrix. For two items this is the four-block layout; the result
    equals kron(W_popᵀW_pop, K_time).
    """
    w_pop = jnp.atleast_2d(jnp.asarray(w_pop, dtype=float))
    time_cov = jnp.asarray(time_cov, dtype=float)
    num_items = w_pop.shape[1]
    rows = []
    for j in range(num_items):
        rows.append([jnp.dot(w_pop[:, j], w_pop[:, k]) * time_cov for k in range(num_items)])
    return jnp.block(rows)


__all__ = [
    "DEFAULT_JITTER",
    "TimeKernel",
    "RBFTimeKernel",
    "TimeKernelParams",
    "LoadingSet",
    "JointCovariance",
    "rbf_time_kernel",
    "task_kernel_idiographic",
    "task_kernel_nomothetic",
    "joint_covariance",
    "block_coregionalization_covariance",
]
