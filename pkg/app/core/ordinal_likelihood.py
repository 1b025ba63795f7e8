"""
Ordinal Likelihood - cumulative link model for C ordered levels

    p(y = c | f) = F(b_c - f) - F(b_{c-1} - f),   b_0 = -inf, b_C = +inf

F is a symmetric CDF: the logistic sigmoid ("logit", default) or the
standard normal CDF ("probit"). Cuts are shared by every item and unit.
"""

import logging
from dataclasses import dataclass
from typing import Callable, Dict, Union

import jax
import jax.numpy as jnp
import jax.scipy.special as jsp
import numpy as np

from app.core.errors import DataError, ParameterDomainError, StructuralError

logger = logging.getLogger(__name__)

jax.config.update("jax_enable_x64", True)

# Smallest admissible gap between consecutive cuts after parameterization.
MIN_CUT_GAP = 1e-9
_LOG_HALF = float(np.log(0.5))


# ============================================================================
# LINK FUNCTIONS
# ============================================================================

@dataclass(frozen=True)
class LinkFunction:
    """Symmetric CDF used as the ordinal link"""

    name: str
    cdf: Callable
    log_cdf: Callable


LINKS: Dict[str, LinkFunction] = {
    "logit": LinkFunction("logit", jax.nn.sigmoid, jax.nn.log_sigmoid),
    "probit": LinkFunction("probit", jsp.ndtr, jsp.log_ndtr),
}


def get_link(link: Union[str, LinkFunction]) -> LinkFunction:
    if isinstance(link, LinkFunction):
        return link
    if link not in LINKS:
        raise StructuralError(f"unknown link '{link}'", {"available": sorted(LINKS)})
    return LINKS[link]


# ============================================================================
# THRESHOLDS
# ============================================================================

@dataclass(frozen=True)
class OrdinalThresholds:
    """Strictly increasing cuts b_1 < ... < b_{C-1}"""

    cuts: np.ndarray

    def __post_init__(self):
        cuts = np.asarray(self.cuts, dtype=float).reshape(-1)
        if not np.all(np.isfinite(cuts)):
            raise ParameterDomainError("threshold cuts must be finite")
        if cuts.size > 1 and np.any(np.diff(cuts) <= 0.0):
            raise ParameterDomainError("threshold cuts must be strictly increasing", {"cuts": cuts.tolist()})
        object.__setattr__(self, "cuts", cuts)

    @property
    def num_levels(self) -> int:
        return int(self.cuts.shape[0]) + 1


def _cuts_from_raw(raw):
    """Traceable raw -> cuts map: first cut free, then positive increments"""
    if raw.shape[0] <= 1:
        return raw
    increments = jnp.maximum(jax.nn.softplus(raw[1:]), MIN_CUT_GAP)
    return jnp.concatenate([raw[:1], raw[0] + jnp.cumsum(increments)])


def parameterize_thresholds(raw) -> OrdinalThresholds:
    """
    Map an unconstrained vector of length C-1 to strictly increasing cuts

    cuts[0] = raw[0]; cuts[k] = cuts[k-1] + softplus(raw[k])
    """
    raw = jnp.asarray(raw, dtype=float).reshape(-1)
    return OrdinalThresholds(np.asarray(_cuts_from_raw(raw)))


def thresholds_to_raw(thresholds: Union[OrdinalThresholds, np.ndarray]) -> np.ndarray:
    """Inverse of parameterize_thresholds"""
    cuts = thresholds.cuts if isinstance(thresholds, OrdinalThresholds) else OrdinalThresholds(thresholds).cuts
    if cuts.size <= 1:
        return cuts.copy()
    gaps = np.diff(cuts)
    # softplus^-1(d) = log(expm1(d)) = d + log(-expm1(-d))
    return np.concatenate([cuts[:1], gaps + np.log(-np.expm1(-gaps))])


def default_cuts(num_levels: int) -> np.ndarray:
    """Equally spaced cuts over [-2, 2]; a single cut sits at 0"""
    if num_levels < 2:
        return np.zeros(0)
    if num_levels == 2:
        return np.zeros(1)
    return np.linspace(-2.0, 2.0, num_levels - 1)


# ============================================================================
# STABLE LOG PROBABILITIES
# ============================================================================

def _log1mexp(x):
    """log(1 - exp(x)) for x < 0"""
    x = jnp.minimum(x, -1e-300)
    use_expm1 = x > _LOG_HALF
    safe_near = jnp.where(use_expm1, x, -1.0)
    safe_far = jnp.where(use_expm1, -1.0, x)
    return jnp.where(use_expm1, jnp.log(-jnp.expm1(safe_near)), jnp.log1p(-jnp.exp(safe_far)))


def _log_cdf_difference(upper, lower, log_cdf):
    """log(F(upper) - F(lower)) for upper > lower, symmetric F"""
    direct = log_cdf(upper) + _log1mexp(log_cdf(lower) - log_cdf(upper))
    # F(u) - F(l) = F(-l) - F(-u); better conditioned when both arguments are positive
    mirrored = log_cdf(-lower) + _log1mexp(log_cdf(-upper) - log_cdf(-lower))
    return jnp.where(lower > 0.0, mirrored, direct)


def _log_prob(y, f, cuts, link: LinkFunction):
    """Traceable log p(y | f) for integer levels y in 1..C"""
    num_cuts = cuts.shape[0]
    if num_cuts == 0:
        return jnp.zeros(jnp.broadcast_shapes(jnp.shape(y), jnp.shape(f)))
    upper_index = jnp.clip(y - 1, 0, num_cuts - 1)
    lower_index = jnp.clip(y - 2, 0, num_cuts - 1)
    upper = cuts[upper_index] - f
    lower = cuts[lower_index] - f
    first = link.log_cdf(cuts[0] - f)
    last = link.log_cdf(f - cuts[num_cuts - 1])
    middle = _log_cdf_difference(upper, jnp.where(lower < upper, lower, upper - 1.0), link.log_cdf)
    return jnp.where(y <= 1, first, jnp.where(y >= num_cuts + 1, last, middle))


def _log_prob_all_levels(f, cuts, link: LinkFunction):
    """Traceable log p(y = c | f) for every level, trailing axis of size C"""
    levels = jnp.arange(1, cuts.shape[0] + 2)
    return _log_prob(levels, jnp.asarray(f)[..., None], cuts, link)


def _probs(f, cuts, link: LinkFunction):
    """Traceable category probabilities as CDF differences (sum telescopes to 1)"""
    f = jnp.asarray(f)[..., None]
    cdf = link.cdf(cuts - f)
    zeros = jnp.zeros(cdf.shape[:-1] + (1,))
    ones = jnp.ones(cdf.shape[:-1] + (1,))
    upper = jnp.concatenate([cdf, ones], axis=-1)
    lower = jnp.concatenate([zeros, cdf], axis=-1)
    return upper - lower


# ============================================================================
# PUBLIC OPERATIONS
# ============================================================================

def ordinal_probs(f, thresholds: OrdinalThresholds, link: Union[str, LinkFunction] = "logit") -> jnp.ndarray:
    """
    Category probabilities for latent value(s) f

    Returns:
        array with a trailing axis of length C; entries in [0, 1] summing to 1
    """
    f = jnp.asarray(f, dtype=float)
    if not bool(jnp.all(jnp.isfinite(f))):
        raise ParameterDomainError("latent values must be finite")
    return _probs(f, jnp.asarray(thresholds.cuts), get_link(link))


def ordinal_log_prob(y, f, thresholds: OrdinalThresholds, link: Union[str, LinkFunction] = "logit") -> jnp.ndarray:
    """
    Numerically stable log p(y | f)

    Args:
        y: level(s) in 1..C
        f: latent value(s), broadcast against y
    """
    levels = np.asarray(y)
    if np.any(levels < 1) or np.any(levels > thresholds.num_levels) or np.any(levels != np.round(levels)):
        raise DataError("response level out of range", {"levels": thresholds.num_levels})
    return _log_prob(jnp.asarray(levels, dtype=int), jnp.asarray(f, dtype=float), jnp.asarray(thresholds.cuts), get_link(link))


def sample_ordinal(f, thresholds: OrdinalThresholds, uniforms, link: Union[str, LinkFunction] = "logit") -> np.ndarray:
    """
    Inverse-CDF draw of levels given latent values and stored uniforms

    y = 1 + #{c : P(Y <= c | f) < u}
    """
    f = np.asarray(f, dtype=float)
    cumulative = np.asarray(get_link(link).cdf(jnp.asarray(thresholds.cuts) - jnp.asarray(f)[..., None]))
    return 1 + np.sum(cumulative < np.asarray(uniforms)[..., None], axis=-1)


__all__ = [
    "LINKS",
    "LinkFunction",
    "OrdinalThresholds",
    "get_link",
    "parameterize_thresholds",
    "thresholds_to_raw",
    "default_cuts",
    "ordinal_probs",
    "ordinal_log_prob",
    "sample_ordinal",
]
