import itertools
import json
import logging
import os
from typing import Literal, Optional, Union

from pydantic import BaseModel, ConfigDict, Field, ValidationError, model_validator

from src.data import SamplerConfig, SplitSpec
from src.dlw import DlwConfig
from src.exceptions import ConfigError
from src.model import ModelConfig
from src.trainer import TrainConfig

logger = logging.getLogger(__name__)

# Constants
EXPERIMENTS_DIR = "experiments"

# Grid parameter -> (section, field) of ExperimentConfig
GRID_PARAMETERS = {
    "kappa": ("dlw", "kappa"),
    "lambda_static": ("dlw", "lambda_static"),
    "alpha": ("dlw", "alpha"),
    "lambda0": ("dlw", "lambda0"),
    "learning_rate": ("train", "learning_rate"),
    "iterations": ("train", "iterations"),
}


class DatasetSource(BaseModel):
    model_config = ConfigDict(extra="forbid", frozen=True)

    path: str
    format: Literal["m4", "long", "m4-horizontal-csv", "canonical-long-csv"] = "long"


class TrainSection(BaseModel):
    model_config = ConfigDict(extra="forbid", frozen=True)

    iterations: int = Field(ge=1)
    learning_rate: float = Field(gt=0.0)
    sampler: SamplerConfig = SamplerConfig()
    # None falls back to the NBEATSS_PROGRESS_EVERY setting
    log_every: Optional[int] = Field(default=None, ge=1)
    checkpoint_every: Optional[int] = Field(default=None, ge=1)
    # Train on train + validation before the test roll
    final_fit: bool = False


class GridSpec(BaseModel):
    model_config = ConfigDict(extra="forbid", frozen=True)

    params: dict[str, list[Union[int, float]]]
    selection_metric: Literal["validation_smape"] = "validation_smape"

    @model_validator(mode="after")
    def _check_cells(self):
        if not self.params:
            raise ValueError("grid needs at least one parameter")
        for name, values in self.params.items():
            if name not in GRID_PARAMETERS:
                raise ValueError(f"unknown grid parameter '{name}'; expected one of {sorted(GRID_PARAMETERS)}")
            if not values:
                raise ValueError(f"grid parameter '{name}' has no values")
        return self

    def cells(self):
        """Cartesian product in declaration order, one dict per cell."""
        names = list(self.params)
        return [dict(zip(names, combo)) for combo in itertools.product(*(self.params[n] for n in names))]


class ExperimentConfig(BaseModel):
    """One JSON experiment: data, model, training, loss weighting and ensemble."""
    model_config = ConfigDict(extra="forbid", frozen=True)

    name: str
    description: str = ""
    dataset: DatasetSource
    split: SplitSpec = SplitSpec()
    model: ModelConfig
    train: TrainSection
    dlw: DlwConfig = DlwConfig()
    ensemble_size: int = Field(default=5, ge=1)
    seeds: Optional[list[int]] = None
    output_dir: Optional[str] = None
    grid: Optional[GridSpec] = None

    @model_validator(mode="before")
    @classmethod
    def _lookback_multiple(cls, data):
        # "lookback_multiple": m is shorthand for lookback = m * horizon
        if isinstance(data, dict) and isinstance(data.get("model"), dict) and "lookback_multiple" in data["model"]:
            model = dict(data["model"])
            multiple = model.pop("lookback_multiple")
            if "lookback" in model:
                raise ValueError("model: give either lookback or lookback_multiple, not both")
            if not isinstance(multiple, int) or not isinstance(model.get("horizon"), int):
                raise ValueError("model: lookback_multiple needs an integer multiple and an integer horizon")
            model["lookback"] = multiple * model["horizon"]
            data = {**data, "model": model}
        return data

    @model_validator(mode="after")
    def _check_seeds(self):
        if self.seeds is not None:
            if len(self.seeds) != self.ensemble_size:
                raise ValueError(f"{len(self.seeds)} seeds given for an ensemble of {self.ensemble_size}")
            if len(set(self.seeds)) != len(self.seeds):
                raise ValueError("seeds must be distinct")
        return self

    @property
    def member_seeds(self):
        return list(self.seeds) if self.seeds is not None else list(range(1, self.ensemble_size + 1))

    @property
    def output_path(self):
        return self.output_dir or os.path.join("runs", self.name)

    def train_config(self, seed, progress_every=100):
        return TrainConfig(
            iterations=self.train.iterations,
            learning_rate=self.train.learning_rate,
            model=self.model,
            dlw=self.dlw,
            sampler=self.train.sampler,
            seed=seed,
            log_every=self.train.log_every or progress_every,
            checkpoint_every=self.train.checkpoint_every,
        )

    def with_overrides(self, seeds=None, dataset=None, fmt=None, output_dir=None):
        """Applies CLI flags and re-validates."""
        data = self.model_dump()
        if seeds is not None:
            data["seeds"] = list(seeds)
            data["ensemble_size"] = len(seeds)
        if dataset is not None:
            data["dataset"]["path"] = str(dataset)
        if fmt is not None:
            data["dataset"]["format"] = fmt
        if output_dir is not None:
            data["output_dir"] = str(output_dir)
        return _validate(data)

    def with_cell(self, cell, single_run=True):
        """Copy with one grid cell applied and no grid; `single_run` keeps only the first seed."""
        data = self.model_dump()
        for name, value in cell.items():
            section, key = GRID_PARAMETERS[name]
            data[section][key] = value
        data["grid"] = None
        if single_run:
            data["ensemble_size"] = 1
            data["seeds"] = [self.member_seeds[0]]
        return _validate(data)


def _validate(data):
    try:
        return ExperimentConfig.model_validate(data)
    except ValidationError as e:
        raise ConfigError(_first_error(e)) from e


def _first_error(error):
    first = error.errors()[0]
    where = ".".join(str(part) for part in first["loc"]) or "<root>"
    return f"{where}: {first['msg']}"


def _line_of(text, loc):
    """1-based line of the deepest JSON key in `loc` that appears in the text."""
    lines = text.splitlines()
    for part in reversed([p for p in loc if isinstance(p, str)]):
        needle = f'"{part}"'
        for number, line in enumerate(lines, start=1):
            if needle in line:
                return number
    return None


def load_experiment(path):
    """Parses and validates one experiment file; ConfigError carries the offending line."""
    try:
        with open(path, "r", encoding="utf-8") as f:
            text = f.read()
    except OSError as e:
        raise ConfigError(f"Cannot read experiment config {path}: {e}") from e

    try:
        data = json.loads(text)
    except json.JSONDecodeError as e:
        raise ConfigError(f"{path}: invalid JSON ({e.msg})", line=e.lineno) from e

    try:
        return ExperimentConfig.model_validate(data)
    except ValidationError as e:
        first = e.errors()[0]
        raise ConfigError(f"{path}: {_first_error(e)}", line=_line_of(text, first["loc"])) from e


def dump_experiment(config, path):
    with open(path, "w", encoding="utf-8") as f:
        f.write(config.model_dump_json(indent=4, exclude_none=True))
        f.write("\n")
    return path


def load_experiments(directory=EXPERIMENTS_DIR):
    """
    Scans the experiments directory and returns the configs that validate,
    keyed by file stem. Invalid files are logged and skipped.
    """
    experiments = {}
    if not os.path.isdir(directory):
        logger.warning(f"Experiments directory '{directory}' not found.")
        return experiments

    for filename in sorted(os.listdir(directory)):
        if not filename.endswith(".json"):
            continue
        try:
            experiments[filename[: -len(".json")]] = load_experiment(os.path.join(directory, filename))
        except ConfigError as e:
            logger.error(f"Skipping experiment {filename}: {e}")
    return experiments


def resolve_experiment(name_or_path, directory=EXPERIMENTS_DIR):
    """A config file path, or the name of a config in the experiments directory."""
    if os.path.isfile(name_or_path):
        return load_experiment(name_or_path)
    stem = name_or_path[:-5] if name_or_path.endswith(".json") else name_or_path
    candidate = os.path.join(directory, f"{stem}.json")
    if os.path.isfile(candidate):
        return load_experiment(candidate)
    raise ConfigError(f"No experiment config at '{name_or_path}' or '{candidate}'")
