"""Models Module - IPGP variants, informative priors and model comparison"""

from .comparison import bayes_factor_table, log_bayes_factor
from .ipgp_models import (
    ModelFitter,
    PopulationPrior,
    build_model,
    covariance_to_correlation,
    estimated_task_correlation,
    evaluate_model,
    fit_model,
    fit_population_prior,
    pca_loading_init,
)

__all__ = [
    'PopulationPrior',
    'ModelFitter',
    'evaluate_model',
    'build_model',
    'fit_model',
    'fit_population_prior',
    'pca_loading_init',
    'covariance_to_correlation',
    'estimated_task_correlation',
    'bayes_factor_table',
    'log_bayes_factor',
]
