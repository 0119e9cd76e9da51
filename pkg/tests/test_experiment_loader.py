import json
import os
from unittest.mock import patch

import pytest

from src.exceptions import ConfigError
from src.experiment_loader import (
    EXPERIMENTS_DIR,
    ExperimentConfig,
    GridSpec,
    dump_experiment,
    load_experiment,
    load_experiments,
    resolve_experiment,
)

# --- load_experiment ---

def test_load_experiment_valid(experiment_file):
    """Test loading a valid experiment file."""
    config = load_experiment(experiment_file)

    assert config.name == "tiny"
    assert config.model.lookback == 12
    assert config.dlw.policy == "tarw"
    assert config.member_seeds == [1, 2]


def test_dump_and_load_preserve_the_config(tmp_path, experiment_file):
    """Test that a dumped config loads back equal."""
    config = load_experiment(experiment_file)
    again = load_experiment(dump_experiment(config, tmp_path / "copy.json"))
    assert again == config


def test_unknown_key_reports_its_line(tmp_path, experiment_dict):
    """Test that an unknown key is rejected with the line it sits on."""
    experiment_dict["train"]["momentum"] = 0.9
    path = tmp_path / "bad.json"
    text = json.dumps(experiment_dict, indent=4)
    path.write_text(text, encoding="utf-8")
    expected_line = next(i for i, line in enumerate(text.splitlines(), start=1) if '"momentum"' in line)

    with pytest.raises(ConfigError) as excinfo:
        load_experiment(path)

    assert excinfo.value.line == expected_line
    assert "train.momentum" in str(excinfo.value)


def test_invalid_json_reports_its_line(tmp_path):
    """Test that a JSON syntax error carries the decoder's line."""
    path = tmp_path / "broken.json"
    path.write_text('{\n    "name": "x",\n    "model": {,\n}\n', encoding="utf-8")

    with pytest.raises(ConfigError) as excinfo:
        load_experiment(path)

    assert excinfo.value.line == 3
    assert str(excinfo.value).startswith("line 3:")


def test_missing_file_raises_config_error(tmp_path):
    """Test loading a file that does not exist."""
    with pytest.raises(ConfigError):
        load_experiment(tmp_path / "absent.json")


def test_lookback_multiple_sets_lookback(experiment_dict):
    """Test the lookback_multiple shorthand."""
    config = ExperimentConfig.model_validate(experiment_dict)
    assert config.model.lookback == 2 * 6


def test_lookback_and_multiple_together_are_rejected(experiment_dict):
    """Test that lookback and lookback_multiple cannot both be given."""
    experiment_dict["model"]["lookback"] = 12
    with pytest.raises(ValueError):
        ExperimentConfig.model_validate(experiment_dict)


def test_seed_count_must_match_ensemble(experiment_dict):
    """Test that seeds and ensemble_size must agree."""
    experiment_dict["seeds"] = [1, 2, 3]
    with pytest.raises(ValueError):
        ExperimentConfig.model_validate(experiment_dict)


def test_duplicate_seeds_are_rejected(experiment_dict):
    """Test that member seeds must be distinct."""
    experiment_dict["seeds"] = [4, 4]
    with pytest.raises(ValueError):
        ExperimentConfig.model_validate(experiment_dict)


def test_defaults_for_seeds_and_output(experiment_dict):
    """Test default member seeds and output directory."""
    experiment_dict.pop("seeds")
    experiment_dict.pop("output_dir")
    config = ExperimentConfig.model_validate(experiment_dict)
    assert config.member_seeds == [1, 2]
    assert config.output_path == os.path.join("runs", "tiny")


# --- Derived configs ---

def test_train_config_per_member(experiment_dict):
    """Test that each member gets the shared settings and its own seed."""
    config = ExperimentConfig.model_validate(experiment_dict)
    member = config.train_config(seed=2)

    assert member.seed == 2
    assert member.iterations == 3
    assert member.log_every == 1
    assert member.dlw.kappa == 0.35
    assert member.model == config.model


def test_overrides_revalidate(experiment_dict):
    """Test CLI overrides of seeds, dataset and output directory."""
    config = ExperimentConfig.model_validate(experiment_dict)
    changed = config.with_overrides(seeds=[7, 8, 9], dataset="other.csv", fmt="m4", output_dir="elsewhere")

    assert changed.ensemble_size == 3
    assert changed.member_seeds == [7, 8, 9]
    assert changed.dataset.path == "other.csv"
    assert changed.dataset.format == "m4"
    assert changed.output_path == "elsewhere"


def test_bad_override_raises_config_error(experiment_dict):
    """Test that an override failing validation becomes a ConfigError."""
    config = ExperimentConfig.model_validate(experiment_dict)
    with pytest.raises(ConfigError):
        config.with_overrides(fmt="tsf")


# --- Grids ---

def test_grid_cells_are_the_cartesian_product():
    """Test grid expansion order."""
    grid = GridSpec(params={"kappa": [0.25, 0.35], "learning_rate": [1e-3, 1e-4]})
    assert grid.cells() == [
        {"kappa": 0.25, "learning_rate": 1e-3},
        {"kappa": 0.25, "learning_rate": 1e-4},
        {"kappa": 0.35, "learning_rate": 1e-3},
        {"kappa": 0.35, "learning_rate": 1e-4},
    ]


@pytest.mark.parametrize("params", [{}, {"momentum": [0.9]}, {"kappa": []}])
def test_invalid_grids_are_rejected(params):
    """Test empty grids, unknown parameters and empty value lists."""
    with pytest.raises(ValueError):
        GridSpec(params=params)


def test_with_cell_applies_values_and_drops_grid(experiment_dict):
    """Test applying one grid cell to an experiment."""
    experiment_dict["grid"] = {"params": {"kappa": [0.15, 0.55]}}
    config = ExperimentConfig.model_validate(experiment_dict)

    cell = config.with_cell({"kappa": 0.55, "iterations": 7})
    assert cell.dlw.kappa == 0.55
    assert cell.train.iterations == 7
    assert cell.grid is None
    assert cell.member_seeds == [1]

    full = config.with_cell({"kappa": 0.55}, single_run=False)
    assert full.member_seeds == [1, 2]


# --- load_experiments / resolve_experiment ---

@patch("src.experiment_loader.os.path.isdir")
def test_load_experiments_missing_dir(mock_isdir):
    """Test scanning a directory that does not exist."""
    mock_isdir.return_value = False
    assert load_experiments() == {}
    mock_isdir.assert_called_once_with(EXPERIMENTS_DIR)


@patch("src.experiment_loader.logger")
def test_load_experiments_skips_invalid_files(mock_logger, tmp_path, experiment_file):
    """Test that invalid configs are logged and skipped, non-JSON files ignored."""
    directory = experiment_file.parent
    (directory / "broken.json").write_text("{", encoding="utf-8")
    (directory / "notes.txt").write_text("hello", encoding="utf-8")

    experiments = load_experiments(str(directory))

    assert list(experiments) == ["tiny"]
    mock_logger.error.assert_called_once()


def test_resolve_by_path_and_by_name(experiment_file):
    """Test resolving a config from a path or from a name in the experiments dir."""
    directory = str(experiment_file.parent)
    assert resolve_experiment(str(experiment_file), directory).name == "tiny"
    assert resolve_experiment("tiny", directory).name == "tiny"
    assert resolve_experiment("tiny.json", directory).name == "tiny"


def test_resolve_unknown_name(tmp_path):
    """Test that an unknown config name raises ConfigError."""
    with pytest.raises(ConfigError):
        resolve_experiment("nope", str(tmp_path))


def test_shipped_experiments_validate():
    """Test that every experiment config in the repository validates."""
    root = os.path.join(os.path.dirname(os.path.dirname(__file__)), EXPERIMENTS_DIR)
    experiments = load_experiments(root)
    shipped = [name for name in os.listdir(root) if name.endswith(".json")]
    assert len(experiments) == len(shipped) > 0


def test_benchmark_experiments_refit_on_train_and_validation():
    """Test that the M3/M4 setups retrain on train + validation and desk setups do not."""
    root = os.path.join(os.path.dirname(os.path.dirname(__file__)), EXPERIMENTS_DIR)
    experiments = load_experiments(root)

    benchmark = {name: e for name, e in experiments.items() if name.startswith(("m3_", "m4_"))}
    assert len(benchmark) == 16
    assert all(e.train.final_fit for e in benchmark.values())
    assert not experiments["desk_tarw_kappa_grid"].train.final_fit
