"""
Dataset and CLI Test Suite
CSV ingestion, loading files, layered configuration, flag parsing and exit codes
"""

import json
import logging

import numpy as np
import pytest
from numpy.testing import assert_allclose
from pydantic import ValidationError

from app.cli import commands
from app.cli.artifacts import ArtifactWriter, merge_metrics, split_prefix
from app.cli.main import main
from app.cli.parser import build_parser, overrides_from_args, parse_args
from app.core.config import derive_seed, read_config_file, resolve_run_config, rng_for
from app.core.dataset import ingest_csv, read_loadings_csv, to_csv, write_loadings_csv
from app.core.errors import ConfigError, DataError, NumericalError, StructuralError
from app.schemas.ipgp_schemas import ModelVariant, RunConfig, WPopMode

logger = logging.getLogger(__name__)

HEADER = "unit_id,item_id,time,response\n"


def _write(path, text):
    path.write_text(text, encoding="utf-8")
    return str(path)


# ============================================================================
# CSV INGESTION
# ============================================================================

def test_header_only_file_gives_empty_dataset(tmp_path):
    dataset = ingest_csv(_write(tmp_path / "empty.csv", HEADER), num_levels=5)
    assert dataset.num_observations == 0
    assert dataset.num_units == 0
    assert dataset.num_levels == 5


def test_three_row_file_is_indexed_lexicographically(tmp_path):
    path = _write(tmp_path / "data.csv", HEADER + "u2,i1,1,3\nu1,i2,1,2\nu1,i1,2,1\n")
    dataset = ingest_csv(path)

    assert dataset.unit_ids == ("u1", "u2")
    assert dataset.item_ids == ("i1", "i2")
    assert dataset.num_levels == 3
    assert dataset.frame["unit_id"].tolist() == ["u1", "u1", "u2"]
    assert dataset.frame["item_id"].tolist() == ["i1", "i2", "i1"]
    assert dataset.unit_index.tolist() == [0, 0, 1]
    assert dataset.item_index.tolist() == [0, 1, 0]
    assert dataset.responses.tolist() == [1, 2, 3]
    logger.info("✅ Rows sorted by (unit, item, time)")


def test_duplicate_triple_is_rejected(tmp_path):
    path = _write(tmp_path / "dup.csv", HEADER + "u1,i1,1,2\nu1,i1,1,3\n")
    with pytest.raises(DataError, match="duplicate"):
        ingest_csv(path)


def test_response_above_level_count_is_rejected(tmp_path):
    path = _write(tmp_path / "range.csv", HEADER + "u1,i1,1,2\nu1,i1,2,6\n")
    with pytest.raises(DataError, match="outside"):
        ingest_csv(path, num_levels=5)


def test_zero_response_is_rejected(tmp_path):
    path = _write(tmp_path / "zero.csv", HEADER + "u1,i1,1,0\n")
    with pytest.raises(DataError):
        ingest_csv(path)


@pytest.mark.parametrize("rows, line", [
    ("u1,i1,1,2\nu1,i1,abc,3\n", 3),
    ("u1,i1,1,2\nu1,i2,2,2\nu1,i1,3,2.5\n", 4),
    ("u1,i1,1,2\n,i1,2,3\n", 3),
    ("u1,i1,1,\n", 2),
])
def test_malformed_rows_report_their_line(tmp_path, rows, line):
    path = _write(tmp_path / "bad.csv", HEADER + rows)
    with pytest.raises(DataError) as excinfo:
        ingest_csv(path)
    assert f"line {line}" in str(excinfo.value)
    assert excinfo.value.diagnostics["line"] == line


def test_missing_column_and_missing_file(tmp_path):
    with pytest.raises(DataError, match="header"):
        ingest_csv(_write(tmp_path / "cols.csv", "unit_id,item_id,time\nu1,i1,1\n"))
    with pytest.raises(DataError, match="not found"):
        ingest_csv(str(tmp_path / "absent.csv"))


def test_trait_column_builds_trait_map(tmp_path):
    path = _write(tmp_path / "traits.csv", "unit_id,item_id,time,response,trait\nu1,a,1,1,F1\nu1,b,1,2,F2\nu1,a,2,2,F1\n")
    dataset = ingest_csv(path)
    assert dataset.trait_map == {"a": "F1", "b": "F2"}


def test_conflicting_trait_mapping_is_rejected(tmp_path):
    path = _write(tmp_path / "conflict.csv", "unit_id,item_id,time,response,trait\nu1,a,1,1,F1\nu1,a,2,2,F2\n")
    with pytest.raises(DataError, match="trait"):
        ingest_csv(path)


def test_written_dataset_reads_back_equal(tmp_path, small_panel):
    train, _, _ = small_panel
    path = tmp_path / "train.csv"
    to_csv(train, path)
    restored = ingest_csv(str(path), num_levels=train.num_levels)

    assert restored.equals(train)
    assert restored.fingerprint() == train.fingerprint()
    assert restored.trait_map == train.trait_map


# ============================================================================
# LOADING FILES
# ============================================================================

def test_loadings_are_reordered_to_item_order(tmp_path):
    values = np.array([[1.0, 2.0, 3.0], [-0.5, 0.25, 0.0]])
    path = write_loadings_csv(values, ["factor_1", "factor_2"], ["a", "b", "c"], tmp_path / "loadings.csv")

    assert_allclose(read_loadings_csv(str(path), ["a", "b", "c"]), values)
    assert_allclose(read_loadings_csv(str(path), ["c", "a"]), values[:, [2, 0]])


def test_loadings_must_cover_every_item(tmp_path):
    path = write_loadings_csv(np.ones((1, 2)), ["factor_1"], ["a", "b"], tmp_path / "loadings.csv")
    with pytest.raises(StructuralError):
        read_loadings_csv(str(path), ["a", "b", "z"])
    with pytest.raises(DataError):
        read_loadings_csv(str(tmp_path / "absent.csv"), ["a"])


# ============================================================================
# CONFIGURATION
# ============================================================================

def test_defaults_without_file_or_flags():
    config = resolve_run_config()
    assert config.seed == 0
    assert config.model.variant == ModelVariant.IPGP
    assert config.train.learning_rate == 0.05
    assert config.protocol == "random"


def test_run_config_schema_example_validates():
    example = RunConfig.model_json_schema()["example"]
    config = RunConfig.model_validate(example)

    assert RunConfig.model_config["extra"] == "forbid"
    assert config.out == "outputs/fit"
    assert config.train.batch_size == 256
    with pytest.raises(ValidationError):
        RunConfig.model_validate({**example, "unknown": 1})


def test_file_values_are_nested_and_coerced(tmp_path):
    path = _write(tmp_path / "run.cfg", "\n".join([
        "model.variant=IPGP-NOM",
        "train.learning_rate=0.01",
        "train.epochs=3",
        "simulation.num_units=4",
        "run.seed=3",
        "compare_models=IPGP,IPGP-NOM",
        "horizon_sweep=5",
    ]) + "\n")
    config = resolve_run_config(path)

    assert config.seed == 3
    assert config.model.variant == ModelVariant.NOM
    assert config.model.idiographic_rank == 0
    assert config.model.w_pop_mode == WPopMode.FREE
    assert config.train.learning_rate == 0.01
    assert config.train.epochs == 3
    assert config.simulation.num_units == 4
    assert config.compare_models == [ModelVariant.IPGP, ModelVariant.NOM]
    assert config.horizon_sweep == [5.0]


def test_flags_override_file(tmp_path):
    path = _write(tmp_path / "run.cfg", "run.seed=3\ntrain.epochs=3\nout=from_file\n")
    config = resolve_run_config(path, {"seed": 7, "out": None, "train": {"epochs": None}})

    assert config.seed == 7
    assert config.out == "from_file"
    assert config.train.epochs == 3


def test_manifest_is_accepted_as_config(tmp_path):
    manifest = {"command": "fit", "config": {"seed": 11, "train": {"epochs": 2}}}
    path = _write(tmp_path / "manifest.json", json.dumps(manifest))
    config = resolve_run_config(path)
    assert config.seed == 11
    assert config.train.epochs == 2


@pytest.mark.parametrize("line", [
    "train.learning_rate=-1",
    "bogus_key=1",
    "simulation.num_items=7",
    "prior_weights=0.7,0.7",
])
def test_invalid_values_raise_config_error(tmp_path, line):
    path = _write(tmp_path / "run.cfg", line + "\n")
    with pytest.raises(ConfigError) as excinfo:
        resolve_run_config(path)
    assert excinfo.value.diagnostics["errors"]


def test_missing_or_broken_config_file(tmp_path):
    with pytest.raises(ConfigError, match="not found"):
        read_config_file(str(tmp_path / "absent.cfg"))
    with pytest.raises(ConfigError, match="JSON"):
        read_config_file(_write(tmp_path / "broken.json", "{not json"))


def test_seed_streams_are_reproducible_and_distinct():
    first = rng_for(5, "minibatch").standard_normal(4)
    again = rng_for(5, "minibatch").standard_normal(4)
    other = rng_for(5, "init").standard_normal(4)

    assert_allclose(first, again)
    assert not np.allclose(first, other)
    assert_allclose(derive_seed(5, "a").generate_state(4), derive_seed(5, "a").generate_state(4))


# ============================================================================
# FLAG PARSING
# ============================================================================

def test_parser_knows_every_command():
    parser = build_parser()
    for command in commands.HANDLERS:
        assert parser.parse_args([command]).command == command


def test_fit_flags_become_nested_overrides():
    args = parse_args(["fit", "--model", "IPGP-NOM", "--factors", "3", "--seed", "2", "--data", "train.csv", "--protocol", "forecast"])
    overrides = overrides_from_args(args)

    assert overrides["model"] == {"variant": "IPGP-NOM", "num_factors": 3}
    assert overrides["seed"] == 2
    assert overrides["data"] == "train.csv"
    assert overrides["protocol"] == "forecast"
    assert overrides["clusters"] is None


def test_compare_flags_list_models():
    args = parse_args(["compare", "--models", "IPGP", "IPGP-IND", "--compare-factors", "2", "3"])
    overrides = overrides_from_args(args)
    assert overrides["compare_models"] == ["IPGP", "IPGP-IND"]
    assert overrides["compare_factors"] == [2, 3]


def test_unknown_variant_is_rejected_by_parser():
    with pytest.raises(SystemExit):
        parse_args(["fit", "--model", "GP"])


# ============================================================================
# EXIT CODES
# ============================================================================

def test_missing_config_file_exits_2(tmp_path):
    assert main(["simulate", "--config", str(tmp_path / "absent.cfg"), "--out", str(tmp_path / "out")]) == 2


def test_missing_data_file_exits_2(tmp_path):
    assert main(["fit", "--data", str(tmp_path / "absent.csv"), "--out", str(tmp_path / "out")]) == 2


def test_malformed_data_exits_3(tmp_path):
    data = _write(tmp_path / "dup.csv", HEADER + "u1,i1,1,2\nu1,i1,1,3\n")
    assert main(["fit", "--data", data, "--out", str(tmp_path / "out")]) == 3


@pytest.mark.parametrize("error, code", [
    (NumericalError("cholesky failed"), 4),
    (StructuralError("shape mismatch"), 2),
    (RuntimeError("boom"), 1),
])
def test_errors_map_to_exit_codes(tmp_path, monkeypatch, error, code):
    def failing(run_config):
        raise error

    monkeypatch.setitem(commands.HANDLERS, "simulate", failing)
    assert main(["simulate", "--out", str(tmp_path / "out")]) == code


def test_handler_receives_resolved_config(tmp_path, monkeypatch):
    seen = {}

    def capture(run_config):
        seen["config"] = run_config
        return 0

    monkeypatch.setitem(commands.HANDLERS, "fit", capture)
    assert main(["fit", "--model", "IPGP-IND", "--seed", "9", "--out", str(tmp_path / "out")]) == 0
    config = seen["config"]
    assert config.seed == 9
    assert config.model.variant == ModelVariant.IND
    assert config.model.num_factors == 0


# ============================================================================
# ARTIFACTS
# ============================================================================

def test_artifact_writer_tracks_files(tmp_path):
    writer = ArtifactWriter(str(tmp_path / "run"))
    writer.json("metrics.json", {"b": 1.0, "a": float("nan")})
    writer.json("nested/extra.json", {"x": [1, 2]})
    manifest = writer.manifest("fit", resolve_run_config(overrides={"seed": 4}))

    payload = json.loads(manifest.read_text(encoding="utf-8"))
    assert payload["artifacts"] == ["metrics.json", "nested/extra.json"]
    assert payload["seed"] == 4
    assert payload["command"] == "fit"
    metrics = json.loads((tmp_path / "run" / "metrics.json").read_text(encoding="utf-8"))
    assert list(metrics) == ["a", "b"]
    assert metrics["a"] is None


def test_merge_metrics_keeps_existing_entries(tmp_path):
    path = tmp_path / "metrics.json"
    assert merge_metrics(path, {"predict": {"accuracy": 1.0}}) == {"predict": {"accuracy": 1.0}}

    path.write_text(json.dumps({"random": {"model": "IPGP"}}), encoding="utf-8")
    merged = merge_metrics(path, {"predict": {"accuracy": 0.5}})
    assert merged == {"random": {"model": "IPGP"}, "predict": {"accuracy": 0.5}}


def test_split_prefix_only_for_multi_split_runs():
    assert split_prefix("random", 1) == ""
    assert split_prefix("loto_F1", 3) == "loto_F1/"
