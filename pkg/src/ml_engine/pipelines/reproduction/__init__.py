"""
Reproduction Pipeline - desk-scale simulation study with ordering checks

Produces:
- per_seed_results: one row per (seed, model)
- study_table: mean ± standard error per model
- criteria / criteria_reports: ordering checks and informational reports
"""

from kedro.pipeline import Pipeline, node

from .nodes import STUDY_VARIANTS, check_criteria, run_seed_studies, summarize_study


def create_reproduction_pipeline() -> Pipeline:
    """
    Create the reproduce-sim-study pipeline

    Inputs:
        run_config: resolved RunConfig (num_seeds, simulation and train sections)

    Returns:
        Kedro Pipeline object
    """
    return Pipeline([
        node(
            func=run_seed_studies,
            inputs="run_config",
            outputs="per_seed_results",
            name="run_seed_studies",
            tags=["reproduction"]
        ),
        node(
            func=summarize_study,
            inputs="per_seed_results",
            outputs="study_table",
            name="summarize_study",
            tags=["reproduction"]
        ),
        node(
            func=check_criteria,
            inputs=["run_config", "per_seed_results"],
            outputs=["criteria", "criteria_reports"],
            name="check_criteria",
            tags=["reproduction"]
        ),
    ])


__all__ = ["create_reproduction_pipeline", "STUDY_VARIANTS"]
