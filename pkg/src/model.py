"""
Generic N-BEATS: K blocks of a fully connected trunk with a backcast head and
a forecast head, joined by doubly residual stacking.
"""
import json
import logging
from collections import OrderedDict
from dataclasses import dataclass
from pathlib import Path

import numpy as np
from pydantic import BaseModel, ConfigDict, Field

import src.gradcore as gradcore
from src.exceptions import ContractError, DimensionError
from src.gradcore import ParameterSet, Tensor

logger = logging.getLogger(__name__)

CHECKPOINT_FORMAT = "nbeats-s-checkpoint/1"


class ModelConfig(BaseModel):
    model_config = ConfigDict(extra="forbid", frozen=True)

    num_blocks: int = Field(ge=1)
    lookback: int = Field(ge=2)
    horizon: int = Field(ge=2)
    hidden_width: int = Field(ge=1)
    trunk_depth: int = Field(default=4, ge=1)
    # Heads carry a bias unless switched off
    head_bias: bool = True


@dataclass
class BlockOutput:
    backcast: Tensor
    forecast: Tensor


@dataclass
class TrainedModel:
    """A parameter set together with the architecture it was built for."""
    config: ModelConfig
    params: ParameterSet


def block_prefix(k):
    return f"block{k:02d}"


def param_layout(config):
    """Ordered (name, shape, fan_in) for every trainable tensor."""
    layout = []
    for k in range(config.num_blocks):
        prefix = block_prefix(k)
        fan_in = config.lookback
        for layer in range(config.trunk_depth):
            layout.append((f"{prefix}.trunk{layer}.weight", (fan_in, config.hidden_width), fan_in))
            layout.append((f"{prefix}.trunk{layer}.bias", (config.hidden_width,), fan_in))
            fan_in = config.hidden_width
        for head, width in (("backcast", config.lookback), ("forecast", config.horizon)):
            layout.append((f"{prefix}.{head}.weight", (config.hidden_width, width), config.hidden_width))
            if config.head_bias:
                layout.append((f"{prefix}.{head}.bias", (width,), config.hidden_width))
    return layout


def init_params(config, seed):
    """Uniform in [-1/sqrt(fan_in), 1/sqrt(fan_in)] for weights and biases alike."""
    rng = np.random.default_rng(seed)
    arrays = OrderedDict()
    for name, shape, fan_in in param_layout(config):
        bound = 1.0 / np.sqrt(fan_in)
        arrays[name] = rng.uniform(-bound, bound, size=shape)
    return ParameterSet(arrays)


def zero_params(config):
    return ParameterSet(OrderedDict((name, np.zeros(shape)) for name, shape, _ in param_layout(config)))


def check_layout(params, config):
    expected = OrderedDict((name, shape) for name, shape, _ in param_layout(config))
    actual = OrderedDict((name, params[name].shape if name in params else None) for name in expected)
    if actual != expected or len(params) != len(expected):
        raise ContractError("Parameter set does not match the model configuration")


def _as_nodes(params):
    if isinstance(params, ParameterSet):
        return OrderedDict((name, gradcore.constant(value)) for name, value in params.items())
    return params


def block_params(nodes, k):
    """Block-local view ('trunk0.weight', 'forecast.bias', ...) of block k's tensors."""
    prefix = block_prefix(k) + "."
    return {name[len(prefix):]: node for name, node in nodes.items() if name.startswith(prefix)}


def _head(hidden, params, head, width):
    bias = params.get(f"{head}.bias")
    if bias is None:
        bias = gradcore.constant(np.zeros(width))
    return gradcore.affine(hidden, params[f"{head}.weight"], bias)


def block_forward(residual_input, params, config):
    """Trunk of `trunk_depth` affine+ReLU layers, then two linear heads."""
    if residual_input.value.ndim != 2 or residual_input.shape[1] != config.lookback:
        raise DimensionError(f"Block input must be (batch, {config.lookback}), got {residual_input.shape}")

    hidden = residual_input
    for layer in range(config.trunk_depth):
        hidden = gradcore.relu(
            gradcore.affine(hidden, params[f"trunk{layer}.weight"], params[f"trunk{layer}.bias"])
        )
    return BlockOutput(
        backcast=_head(hidden, params, "backcast", config.lookback),
        forecast=_head(hidden, params, "forecast", config.horizon),
    )


def forward_blocks(x, params, config):
    """
    Runs the residual chain and returns (forecast, block outputs, block inputs).
    Block k+1 receives x_k - backcast_k; the forecast is the sum of all partial forecasts.
    """
    if not isinstance(x, Tensor):
        x = gradcore.constant(x)
    if x.value.ndim != 2 or x.shape[1] != config.lookback:
        raise DimensionError(f"Input must be (batch, {config.lookback}), got {x.shape}")

    nodes = _as_nodes(params)
    residual = x
    forecast = None
    outputs, inputs = [], []
    for k in range(config.num_blocks):
        inputs.append(residual)
        out = block_forward(residual, block_params(nodes, k), config)
        outputs.append(out)
        residual = gradcore.sub(residual, out.backcast)
        forecast = out.forecast if forecast is None else gradcore.add(forecast, out.forecast)
    return forecast, outputs, inputs


def forward(x, params, config):
    forecast, _, _ = forward_blocks(x, params, config)
    return forecast


def predict(model, inputs):
    """Tape-free forecasts for an (n, T) array of lookback windows."""
    inputs = np.atleast_2d(np.asarray(inputs, dtype=np.float64))
    return forward(inputs, model.params, model.config).value


# --- Checkpoints ---

def save_checkpoint(path, model):
    """JSON checkpoint; Python's float repr makes the float64 round-trip exact."""
    payload = {
        "format": CHECKPOINT_FORMAT,
        "config": model.config.model_dump(),
        "parameters": [
            {"name": name, "shape": list(value.shape), "values": value.ravel().tolist()}
            for name, value in model.params.items()
        ],
    }
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", encoding="utf-8") as f:
        json.dump(payload, f, allow_nan=False)
    return path


def load_checkpoint(path):
    with open(path, "r", encoding="utf-8") as f:
        payload = json.load(f)
    if payload.get("format") != CHECKPOINT_FORMAT:
        raise ContractError(f"{path} is not a model checkpoint")

    config = ModelConfig(**payload["config"])
    arrays = OrderedDict(
        (entry["name"], np.asarray(entry["values"], dtype=np.float64).reshape(entry["shape"]))
        for entry in payload["parameters"]
    )
    params = ParameterSet(arrays)
    check_layout(params, config)
    return TrainedModel(config=config, params=params)
