import json

import numpy as np
import pytest

from src.data import Dataset, SamplerConfig, SplitSpec, SynthSpec, TimeSeries, export_long, synthesize
from src.model import ModelConfig
from src.trainer import TrainConfig


@pytest.fixture
def tiny_model_config():
    """K=2 blocks, width 8, T=12, h=6: small enough for finite differences."""
    return ModelConfig(num_blocks=2, lookback=12, horizon=6, hidden_width=8)


@pytest.fixture
def synthetic_series():
    return synthesize(SynthSpec(num_series=6, length=80), seed=0)


@pytest.fixture
def tiny_dataset(synthetic_series):
    return Dataset.from_series(synthetic_series, SplitSpec())


@pytest.fixture
def tiny_train_config(tiny_model_config):
    return TrainConfig(
        iterations=5,
        learning_rate=1e-3,
        model=tiny_model_config,
        sampler=SamplerConfig(batch_size=16, origin_range=20),
        seed=0,
    )


@pytest.fixture
def long_csv(tmp_path, synthetic_series):
    """Synthetic panel written as canonical long CSV."""
    return export_long(synthetic_series, tmp_path / "data" / "series.csv")


@pytest.fixture
def ramp_series():
    """Strictly increasing series: every lookback window has a positive scale."""
    return TimeSeries("ramp", np.arange(1.0, 61.0))


@pytest.fixture
def experiment_dict(long_csv, tmp_path):
    return {
        "name": "tiny",
        "description": "Tiny run for tests",
        "dataset": {"path": str(long_csv), "format": "long"},
        "split": {"test_length": 18, "validation_length": 18},
        "model": {"num_blocks": 2, "hidden_width": 8, "horizon": 6, "lookback_multiple": 2},
        "train": {
            "iterations": 3,
            "learning_rate": 1e-3,
            "log_every": 1,
            "sampler": {"batch_size": 8, "origin_range": 10},
        },
        "dlw": {"policy": "tarw", "kappa": 0.35},
        "ensemble_size": 2,
        "seeds": [1, 2],
        "output_dir": str(tmp_path / "run"),
    }


@pytest.fixture
def experiment_file(tmp_path, experiment_dict):
    path = tmp_path / "tiny.json"
    path.write_text(json.dumps(experiment_dict, indent=4), encoding="utf-8")
    return path
