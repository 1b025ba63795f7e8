"""
Models Test Suite
Variant wiring, the two-stage prior workflow, Bayes factors and correlation estimates
"""

import dataclasses
import logging

import numpy as np
import pytest
from numpy.testing import assert_allclose

from app.core.errors import ComparisonError, NumericalError, StructuralError
from app.core.svi_engine import FittedModel, elbo
from app.models import (
    ModelFitter,
    PopulationPrior,
    bayes_factor_table,
    build_model,
    covariance_to_correlation,
    estimated_task_correlation,
    evaluate_model,
    fit_model,
    log_bayes_factor,
    pca_loading_init,
)
from app.schemas.ipgp_schemas import ModelSpec, ModelVariant, TrainConfig, WPopMode

logger = logging.getLogger(__name__)

QUICK = TrainConfig(num_inducing=12, epochs=2, batch_size=64, seed=0)


@pytest.fixture
def train(small_panel):
    return small_panel[0]


def _as_fitted(instance, params=None, log_evidence=0.0, fingerprint="same") -> FittedModel:
    params = {name: np.asarray(value) for name, value in (params or instance.params).items()}
    return FittedModel(instance=instance, params=params, elbo_trace=np.zeros(0), log_evidence=log_evidence, fingerprint=fingerprint, num_train=0)


def _pool(train, evidences, labels=None, fingerprints=None):
    instance = build_model(ModelSpec.for_variant("IPGP-NOM", num_factors=2), train, QUICK)
    labels = labels or [f"M{i}" for i in range(len(evidences))]
    fingerprints = fingerprints or ["same"] * len(evidences)
    return [
        _as_fitted(dataclasses.replace(instance, label=label), log_evidence=value, fingerprint=fingerprint)
        for label, value, fingerprint in zip(labels, evidences, fingerprints)
    ]


# ============================================================================
# MODEL SPECIFICATIONS
# ============================================================================

@pytest.mark.parametrize(
    "variant, factors, rank, mode",
    [
        ("IPGP", 5, 1, WPopMode.FROZEN),
        ("IPGP-NOM", 5, 0, WPopMode.FREE),
        ("IPGP-IND", 0, 1, WPopMode.FREE),
        ("IPGP-LOW", 2, 1, WPopMode.FROZEN),
        ("IPGP-NP", 5, 1, WPopMode.FREE),
    ],
)
def test_variant_settings(variant, factors, rank, mode):
    spec = ModelSpec.for_variant(variant, num_factors=5)
    assert (spec.num_factors, spec.idiographic_rank, spec.w_pop_mode) == (factors, rank, mode)
    spec.check_consistency()
    assert ModelSpec(variant=variant) == spec


def test_inconsistent_spec_is_structural_error():
    spec = ModelSpec(variant="IPGP-NOM", idiographic_rank=1)
    with pytest.raises(StructuralError):
        spec.check_consistency()
    with pytest.raises(StructuralError):
        ModelSpec(variant="IPGP", w_pop_mode="free").check_consistency()


# ============================================================================
# MODEL ASSEMBLY
# ============================================================================

def test_frozen_variant_needs_a_prior(train):
    with pytest.raises(StructuralError):
        build_model(ModelSpec.for_variant("IPGP", num_factors=2), train, QUICK)
    with pytest.raises(StructuralError):
        build_model(ModelSpec.for_variant("IPGP", num_factors=2), train, QUICK, prior=np.ones((3, 6)))


def test_nomothetic_kernels_are_shared_across_units(train):
    instance = build_model(ModelSpec.for_variant("IPGP-NOM", num_factors=2), train, QUICK)
    assert "w_ind" not in instance.params
    fitted = _as_fitted(instance)
    kernels = [fitted.task_covariance(unit) for unit in train.unit_ids]
    for kernel in kernels[1:]:
        assert np.array_equal(kernel, kernels[0])
    assert_allclose(kernels[0], fitted.task_covariance(None))


def test_parameter_sets_per_variant(train):
    prior = np.full((2, 6), 0.5)
    ipgp = build_model(ModelSpec.for_variant("IPGP", num_factors=2), train, QUICK, prior=prior)
    assert ipgp.frozen == frozenset({"w_pop"})
    assert np.array_equal(np.asarray(ipgp.params["w_pop"]), prior)

    individual = build_model(ModelSpec.for_variant("IPGP-IND"), train, QUICK)
    assert "w_pop" not in individual.params and "w_ind" in individual.params

    free = build_model(ModelSpec.for_variant("IPGP-NP", num_factors=2), train, QUICK)
    assert not free.frozen
    assert_allclose(np.asarray(free.params["w_pop"]), pca_loading_init(train, 2))


def test_pca_initialization_is_sign_normalized(train):
    loadings = pca_loading_init(train, 2)
    assert loadings.shape == (2, 6)
    peaks = loadings[np.arange(2), np.argmax(np.abs(loadings), axis=1)]
    assert np.all(peaks > 0)
    with pytest.raises(StructuralError):
        pca_loading_init(train, 7)


def test_zero_idiographic_loadings_reduce_to_nomothetic(train):
    full = build_model(ModelSpec.for_variant("IPGP", num_factors=2), train, QUICK, prior=pca_loading_init(train, 2))
    nomothetic = build_model(ModelSpec.for_variant("IPGP-NOM", num_factors=2), train, QUICK)

    rng = np.random.default_rng(0)
    shared = {name: np.asarray(value) for name, value in full.params.items() if name != "w_ind"}
    shared["q_mu"] = rng.normal(0.0, 0.3, size=shared["q_mu"].shape)
    pinned = {**shared, "w_ind": np.zeros_like(np.asarray(full.params["w_ind"]))}
    assert abs(elbo(train, pinned, full) - elbo(train, shared, nomothetic)) < 1e-9


# ============================================================================
# TWO-STAGE WORKFLOW
# ============================================================================

def test_frozen_prior_survives_fit_bit_exactly(train):
    prior = PopulationPrior(w_pop=pca_loading_init(train, 2))
    fitted = fit_model(ModelSpec.for_variant("IPGP", num_factors=2), train, QUICK, prior=prior)
    assert np.array_equal(fitted.params["w_pop"], prior.w_pop)


def test_fitter_shares_stage_one_fit(train):
    fitter = ModelFitter(train, QUICK)
    full = fitter.fit(ModelSpec.for_variant("IPGP", num_factors=2))
    prior = fitter.prior(2)
    assert np.array_equal(full.params["w_pop"], prior.w_pop)
    assert prior.model.label == "IPGP-NOM(K=2)"
    assert fitter.fit(ModelSpec.for_variant("IPGP-NOM", num_factors=2)) is prior.model
    logger.info(f"stage 1 ELBO {prior.model.log_evidence:.3f}, stage 2 ELBO {full.log_evidence:.3f}")


def test_low_rank_variant_has_two_factors(train):
    fitted = ModelFitter(train, QUICK).fit(ModelSpec.for_variant("IPGP-LOW", num_factors=5))
    assert fitted.params["w_pop"].shape == (2, 6)


def test_user_loadings_replace_stage_one(train):
    loadings = np.full((2, 6), 0.3)
    fitter = ModelFitter(train, QUICK, prior_loadings=loadings, two_stage=False)
    fitted = fitter.fit(ModelSpec.for_variant("IPGP", num_factors=2))
    assert np.array_equal(fitted.params["w_pop"], loadings)
    with pytest.raises(StructuralError):
        fitter.prior(3)


def test_evaluate_model(train, small_panel):
    test = small_panel[1]
    fitted = fit_model(ModelSpec.for_variant("IPGP-NOM", num_factors=2), train, QUICK)
    report = evaluate_model(fitted, test)
    assert report.count == test.num_observations
    assert 0.0 <= report.accuracy <= 1.0
    assert report.mean_log_lik < 0.0
    assert evaluate_model(fitted, test.subset(np.zeros(test.num_observations, dtype=bool))).count == 0


# ============================================================================
# BAYES FACTORS
# ============================================================================

def test_identical_models_keep_their_priors(train):
    table = bayes_factor_table(_pool(train, [-50.0, -50.0]), prior_weights=[0.3, 0.7])
    assert table.row("M1").log_bayes_factor == 0.0
    assert_allclose([row.posterior_weight for row in table.rows], [0.3, 0.7], rtol=1e-12)


def test_ten_nat_gap_posterior(train):
    table = bayes_factor_table(_pool(train, [-100.0, -110.0]))
    expected = np.array([1.0, np.exp(-10.0)]) / (1.0 + np.exp(-10.0))
    assert_allclose([row.posterior_weight for row in table.rows], expected, rtol=1e-12)
    assert abs(sum(row.posterior_weight for row in table.rows) - 1.0) < 1e-12
    assert table.row("M1").log_bayes_factor == -10.0


def test_log_bayes_factor_is_antisymmetric(train):
    a, b = _pool(train, [-12.345, -17.5])
    assert log_bayes_factor(a, b) == -log_bayes_factor(b, a)
    table = bayes_factor_table([a, b])
    assert table.pairwise_log_bayes_factors["M0"]["M1"] == -table.pairwise_log_bayes_factors["M1"]["M0"]


def test_models_on_different_data_cannot_be_compared(train):
    a, b = _pool(train, [-1.0, -2.0], fingerprints=["x", "y"])
    with pytest.raises(ComparisonError):
        log_bayes_factor(a, b)
    with pytest.raises(ComparisonError):
        bayes_factor_table([a, b])


def test_comparison_input_errors(train):
    pool = _pool(train, [-1.0, -2.0])
    with pytest.raises(ComparisonError):
        bayes_factor_table([])
    with pytest.raises(ComparisonError):
        bayes_factor_table(pool, prior_weights=[0.9, 0.2])
    with pytest.raises(ComparisonError):
        bayes_factor_table(pool, reference="missing")


def test_duplicate_labels_are_disambiguated(train):
    table = bayes_factor_table(_pool(train, [-1.0, -1.5], labels=["IPGP(K=5)", "IPGP(K=5)"]))
    assert [row.label for row in table.rows] == ["IPGP(K=5)", "IPGP(K=5)#2"]


# ============================================================================
# CORRELATION ESTIMATES
# ============================================================================

def test_diagonal_kernel_gives_identity():
    assert_allclose(covariance_to_correlation(np.diag([0.5, 2.0, 9.0])), np.eye(3))


@pytest.mark.parametrize("noise", [0.1, 1.0, 10.0])
def test_rank_one_correlation_shrinks_with_noise(noise):
    w = np.array([1.0, 1.0])
    correlation = covariance_to_correlation(np.outer(w, w) + noise * np.eye(2))
    assert_allclose(correlation[0, 1], 1.0 / (1.0 + noise), rtol=1e-12)


def test_correlation_is_scale_invariant():
    rng = np.random.default_rng(1)
    factor = rng.normal(size=(4, 4))
    kernel = factor @ factor.T + 0.1 * np.eye(4)
    assert_allclose(covariance_to_correlation(7.5 * kernel), covariance_to_correlation(kernel), atol=1e-12)


def test_zero_diagonal_is_numerical_error():
    with pytest.raises(NumericalError):
        covariance_to_correlation(np.diag([1.0, 0.0]))


def test_unit_correlations_are_valid(train):
    instance = build_model(ModelSpec.for_variant("IPGP-NP", num_factors=2), train, QUICK)
    fitted = _as_fitted(instance)
    for unit in train.unit_ids:
        correlation = estimated_task_correlation(fitted, unit)
        assert_allclose(np.diag(correlation), 1.0)
        assert_allclose(correlation, correlation.T)
        assert np.all(np.abs(correlation) <= 1.0)
        assert np.linalg.eigvalsh(correlation).min() > -1e-10
