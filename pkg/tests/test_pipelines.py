"""
Pipelines Test Suite
Kedro wiring, protocol and study nodes, and end-to-end CLI runs on a tiny study

Run the fast subset with: pytest -m "not slow"
"""

import json
import logging
import math

import numpy as np
import pandas as pd
import pytest
from numpy.testing import assert_allclose

from app.cli import commands
from app.cli.main import main
from app.core.errors import ConfigError
from app.schemas.ipgp_schemas import RunConfig
from src.ml_engine.pipeline_registry import register_pipelines
from src.ml_engine.pipelines.reproduction.nodes import STUDY_VARIANTS, check_criteria, summarize_study
from src.ml_engine.pipelines.simulation import create_simulation_pipeline
from src.ml_engine.pipelines.training.nodes import build_evaluation_splits, forecast_sweep_table
from src.ml_engine.runner import run_in_memory

logger = logging.getLogger(__name__)

TINY_CONFIG = "\n".join([
    "simulation.num_units=3",
    "simulation.num_periods=12",
    "simulation.num_factors=2",
    "simulation.num_items=6",
    "model.num_factors=2",
    "model.num_levels=5",
    "train.epochs=1",
    "train.num_inducing=6",
    "train.batch_size=64",
    "run.seed=1",
]) + "\n"


@pytest.fixture
def tiny_config(tmp_path):
    path = tmp_path / "tiny.cfg"
    path.write_text(TINY_CONFIG, encoding="utf-8")
    return str(path)


@pytest.fixture
def simulated_dir(tmp_path, tiny_config):
    out = tmp_path / "sim"
    assert main(["simulate", "--config", tiny_config, "--out", str(out)]) == 0
    return out


def _read_json(path):
    return json.loads(path.read_text(encoding="utf-8"))


# ============================================================================
# PIPELINE WIRING
# ============================================================================

def test_every_command_has_a_pipeline():
    assert set(register_pipelines()) == set(commands.HANDLERS)


def test_runner_requires_every_free_input():
    with pytest.raises(ValueError, match="run_config"):
        run_in_memory(create_simulation_pipeline(), {})


def test_simulation_pipeline_in_memory(small_config):
    run_config = RunConfig(simulation=small_config, seed=1)
    outputs = run_in_memory(create_simulation_pipeline(), {"run_config": run_config})

    train, test = outputs["train_dataset"], outputs["test_dataset"]
    assert train.num_observations == 173
    assert test.num_observations == 43
    assert outputs["ground_truth"].task_correlation(0).shape == (6, 6)
    assert train.equals(outputs["simulated_train"])
    logger.info("✅ Simulation pipeline ran in memory")


def test_planned_missing_thins_training_data(small_config):
    run_config = RunConfig(simulation=small_config, seed=1, planned_missing=True)
    outputs = run_in_memory(create_simulation_pipeline(), {"run_config": run_config})
    assert outputs["train_dataset"].num_observations < outputs["simulated_train"].num_observations
    assert outputs["test_dataset"].num_observations == 43


# ============================================================================
# PROTOCOL NODES
# ============================================================================

def test_forecast_protocol_needs_windows(full_panel):
    data = full_panel[0]
    with pytest.raises(ConfigError, match="train_days"):
        build_evaluation_splits(RunConfig(protocol="forecast"), {"data": data, "test": None})


def test_loto_protocol_gives_one_split_per_trait(full_panel):
    data = full_panel[0]
    splits = build_evaluation_splits(RunConfig(protocol="loto"), {"data": data, "test": None})

    assert [split.name for split in splits] == ["loto_F1", "loto_F2"]
    for split in splits:
        assert split.train.num_observations + split.test.num_observations == data.num_observations


def test_random_protocol_prefers_held_out_file(small_panel):
    train, test, _ = small_panel
    splits = build_evaluation_splits(RunConfig(), {"data": train, "test": test})
    assert len(splits) == 1
    assert splits[0].train is train
    assert splits[0].test is test


def test_sweep_table_is_empty_outside_forecast(small_panel):
    table = forecast_sweep_table(RunConfig(horizon_sweep=[2.0]), {"data": small_panel[0], "test": None}, {})
    assert table.empty
    assert list(table.columns) == ["horizon_days", "accuracy", "mean_log_lik", "count"]


# ============================================================================
# STUDY SUMMARY AND CRITERIA
# ============================================================================

def _study_results(seeds=(0, 1), nom_evidence=5.0):
    rows = []
    for seed in seeds:
        for variant in STUDY_VARIANTS:
            best = variant == STUDY_VARIANTS[0]
            rows.append({
                "seed": seed,
                "model": variant.value,
                "label": variant.value,
                "accuracy": 0.9 if best else 0.7,
                "mean_log_lik": -0.3 if best else -1.0,
                "cmd": 0.1 if best else 0.4,
                "log_evidence": 10.0 if best else (nom_evidence if variant.value == "IPGP-NOM" else 5.0),
                "train_accuracy": 0.95,
            })
    return pd.DataFrame(rows)


def test_summary_has_mean_and_standard_error():
    results = _study_results()
    results.loc[results["seed"] == 1, "accuracy"] -= 0.1
    table = summarize_study(results)

    assert table["model"].tolist() == [variant.value for variant in STUDY_VARIANTS]
    ipgp = table.iloc[0]
    assert_allclose(ipgp["accuracy_mean"], 0.85)
    assert_allclose(ipgp["accuracy_se"], np.std([0.9, 0.8], ddof=1) / math.sqrt(2))


def test_single_seed_leaves_standard_error_empty():
    table = summarize_study(_study_results(seeds=(0,)))
    assert table["accuracy_se"].isna().all()


def test_clear_ordering_passes_every_criterion():
    criteria, reports = check_criteria(RunConfig(), _study_results())
    assert all(result.passed for result in criteria), [result.name for result in criteria if not result.passed]
    assert [result.name for result in reports] == ["stage2_elbo_not_below_stage1"]


def test_evidence_reversal_fails_bayes_factor_direction():
    criteria, reports = check_criteria(RunConfig(), _study_results(nom_evidence=20.0))
    outcome = {result.name: result.passed for result in criteria}

    assert outcome["bayes_factor_direction"] is False
    assert outcome["ipgp_predictive_level"] is True
    assert reports[0].passed is False


# ============================================================================
# END-TO-END CLI RUNS
# ============================================================================

def test_simulate_writes_dataset_artifacts(simulated_dir):
    manifest = _read_json(simulated_dir / "manifest.json")
    assert manifest["command"] == "simulate"
    assert manifest["seed"] == 1
    assert manifest["artifacts"] == ["ground_truth.json", "test.csv", "train.csv"]

    train = pd.read_csv(simulated_dir / "train.csv")
    assert list(train.columns) == ["unit_id", "item_id", "time", "response", "trait"]
    assert len(train) == 173


def test_rerun_from_manifest_is_byte_identical(tmp_path, simulated_dir):
    rerun = tmp_path / "rerun"
    assert main(["simulate", "--config", str(simulated_dir / "manifest.json"), "--out", str(rerun)]) == 0
    for name in ("train.csv", "test.csv", "ground_truth.json"):
        assert (rerun / name).read_bytes() == (simulated_dir / name).read_bytes(), name


@pytest.mark.slow
def test_fit_then_predict(tmp_path, tiny_config, simulated_dir):
    out = tmp_path / "fit"
    data = ["--data", str(simulated_dir / "train.csv"), "--test-data", str(simulated_dir / "test.csv")]
    assert main(["fit", "--config", tiny_config, *data, "--model", "IPGP", "--factors", "2", "--out", str(out)]) == 0

    for name in ("model_state.npz", "model_state.json", "elbo_trace.csv", "loadings_population.csv",
                 "loadings_individual.csv", "correlation_unit_u0.csv", "metrics.json", "manifest.json"):
        assert (out / name).is_file(), name
    metrics = _read_json(out / "metrics.json")
    assert metrics["random"]["model"] == "IPGP(K=2)"
    assert metrics["random"]["metrics"]["test"]["count"] == 43
    correlation = pd.read_csv(out / "correlation_unit_u0.csv", index_col=0).to_numpy()
    assert_allclose(np.diag(correlation), 1.0, atol=1e-9)

    assert main(["predict", "--data", str(simulated_dir / "test.csv"), "--out", str(out)]) == 0
    predictions = pd.read_csv(out / "predictions.csv")
    probs = predictions[[f"p_{level}" for level in range(1, 6)]].to_numpy()
    assert len(predictions) == 43
    assert_allclose(probs.sum(axis=1), 1.0, atol=1e-6)
    assert predictions["predicted"].between(1, 5).all()

    merged = _read_json(out / "metrics.json")
    assert set(merged) == {"random", "predict"}
    assert (out / "predict_manifest.json").is_file()
    logger.info("✅ fit and predict artifacts written")


@pytest.mark.slow
def test_compare_writes_antisymmetric_table(tmp_path, tiny_config, simulated_dir):
    out = tmp_path / "compare"
    args = ["compare", "--config", tiny_config, "--data", str(simulated_dir / "train.csv"),
            "--test-data", str(simulated_dir / "test.csv"), "--models", "IPGP", "IPGP-NOM", "--out", str(out)]
    assert main(args) == 0

    table = _read_json(out / "comparison.json")
    labels = [row["label"] for row in table["rows"]]
    assert labels == ["IPGP(K=2)", "IPGP-NOM(K=2)"]
    assert table["reference"] == "IPGP(K=2)"
    assert table["rows"][0]["log_bayes_factor"] == 0.0
    assert_allclose(sum(row["posterior_weight"] for row in table["rows"]), 1.0)

    pairwise = table["pairwise_log_bayes_factors"]
    assert_allclose(pairwise[labels[0]][labels[1]], -pairwise[labels[1]][labels[0]])
    assert set(table["metrics"][labels[1]]) == {"train", "test"}


@pytest.mark.slow
def test_cluster_writes_assignments_and_centroids(tmp_path, tiny_config, simulated_dir):
    out = tmp_path / "cluster"
    args = ["cluster", "--config", tiny_config, "--data", str(simulated_dir / "train.csv"), "--clusters", "2", "--out", str(out)]
    assert main(args) == 0

    report = _read_json(out / "clusters.json")
    assert report["k"] == 2
    assert set(report["assignments"]) == {"u0", "u1", "u2"}
    assert set(report["assignments"].values()) <= {0, 1}
    assert report["cost_history"] == sorted(report["cost_history"], reverse=True)
    for index in range(2):
        centroid = pd.read_csv(out / f"cluster_centroid_{index}.csv", index_col=0).to_numpy()
        assert centroid.shape == (6, 6)
    assert (out / "residual_profiles.csv").is_file()


@pytest.mark.slow
def test_reproduction_exit_status_follows_criteria(tmp_path, tiny_config):
    out = tmp_path / "study"
    status = main(["reproduce-sim-study", "--config", tiny_config, "--num-seeds", "1", "--out", str(out)])

    criteria = _read_json(out / "criteria.json")
    assert status == (0 if criteria["passed"] else 4)
    assert len(pd.read_csv(out / "per_seed_results.csv")) == len(STUDY_VARIANTS)
    assert len(pd.read_csv(out / "table1_desk.csv")) == len(STUDY_VARIANTS)
    assert (out / "manifest.json").is_file()


STUDY_CONFIG = "\n".join([
    "simulation.num_units=4",
    "simulation.num_periods=20",
    "simulation.num_factors=2",
    "simulation.num_items=6",
    "model.num_factors=2",
    "model.num_levels=5",
    "train.epochs=40",
    "train.num_inducing=8",
    "train.batch_size=64",
    "run.seed=1",
]) + "\n"


@pytest.mark.slow
def test_reduced_study_orders_models_like_the_full_study(tmp_path):
    config = tmp_path / "study.cfg"
    config.write_text(STUDY_CONFIG, encoding="utf-8")
    out = tmp_path / "study"
    status = main(["reproduce-sim-study", "--config", str(config), "--num-seeds", "2", "--out", str(out)])

    report = _read_json(out / "criteria.json")
    criteria = {result["name"]: result for result in report["criteria"]}
    assert status == (0 if report["passed"] else 4)
    assert report["passed"] == all(result["passed"] for result in criteria.values())

    recovery = criteria["cmd_recovery"]["detail"]
    logger.info(f"IPGP CMD {recovery['ipgp_cmd']}, IPGP-IND CMD {recovery['ind_cmd']}")
    assert len(recovery["ipgp_cmd"]) == 2
    # the full-scale gap needs longer training; only the ordering is held at this size
    assert all(ind > ipgp for ipgp, ind in zip(recovery["ipgp_cmd"], recovery["ind_cmd"]))

    log_bf = criteria["bayes_factor_direction"]["detail"]["log_bayes_factor"]
    assert len(log_bf) == 2
    assert all(value > 0.0 for value in log_bf)
    assert criteria["bayes_factor_direction"]["passed"]

    floor = criteria["uniform_prediction_floor"]
    assert_allclose(floor["detail"]["floor"], math.log(0.2))
    assert floor["passed"]
    assert all(worst > floor["detail"]["floor"] for worst in floor["detail"]["worst_by_model"].values())
