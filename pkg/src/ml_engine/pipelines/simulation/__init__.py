"""
Simulation Pipeline - synthetic ordinal panels

Produces:
- train_dataset / test_dataset: 80/20 observation split of the simulated panel
- ground_truth: latent paths, loadings, thresholds and true task correlations
"""

from kedro.pipeline import Pipeline, node

from .nodes import apply_planned_missing, simulate_datasets


def create_simulation_pipeline() -> Pipeline:
    """
    Create the simulation pipeline

    Inputs:
        run_config: resolved RunConfig

    Returns:
        Kedro Pipeline object
    """
    return Pipeline([
        node(
            func=simulate_datasets,
            inputs="run_config",
            outputs=["simulated_train", "test_dataset", "ground_truth"],
            name="simulate_panel",
            tags=["simulation"]
        ),
        node(
            func=apply_planned_missing,
            inputs=["simulated_train", "run_config"],
            outputs="train_dataset",
            name="planned_missing_mask",
            tags=["simulation", "masking"]
        ),
    ])


__all__ = ["create_simulation_pipeline"]
