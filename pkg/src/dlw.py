"""
Dynamic loss-weighting policies. Each iteration a policy turns the two task
losses and gradients into a weight lambda in [0, 1]; the trainer then steps
on (1 - lambda) * g_error + lambda * g_instability.
"""
import logging
import math
from abc import ABC, abstractmethod
from dataclasses import dataclass
from typing import Literal, Optional

import numpy as np
import pandas as pd
from pydantic import BaseModel, ConfigDict, Field

import src.gradcore as gradcore
from src.exceptions import ConfigError, ContractError, DimensionError
from src.gradcore import ParameterSet

logger = logging.getLogger(__name__)

POLICIES = ("static", "gradnorm", "uw", "rw", "gcossim", "weighted_gcossim", "tarw")
TRAJECTORY_COLUMNS = ["iteration", "lambda", "cosine_similarity", "L_error", "L_instability"]

# GradNorm weights are clamped here before renormalization
MIN_TASK_WEIGHT = 1e-6


class DlwConfig(BaseModel):
    model_config = ConfigDict(extra="forbid", frozen=True)

    policy: Literal["static", "gradnorm", "uw", "rw", "gcossim", "weighted_gcossim", "tarw"] = "static"
    lambda_static: float = Field(default=0.15, ge=0.0, le=1.0)
    # GradNorm balancing strength
    alpha: float = Field(default=1.5, ge=0.0)
    # Initial weight for GradNorm (default 0.05) and UW (default 0.5)
    lambda0: Optional[float] = Field(default=None, ge=0.0, le=1.0)
    kappa: float = Field(default=0.35, gt=0.0, le=1.0)
    # GradNorm weight step size; None means "same as the network"
    gradnorm_lr: Optional[float] = Field(default=None, gt=0.0)
    seed: Optional[int] = Field(default=None, ge=0)


@dataclass
class DlwInputs:
    iteration: int
    loss_error: float
    loss_instability: float
    grad_error: np.ndarray
    grad_instability: np.ndarray
    initial_loss_error: float
    initial_loss_instability: float

    def __post_init__(self):
        self.grad_error = np.ravel(np.asarray(self.grad_error, dtype=np.float64))
        self.grad_instability = np.ravel(np.asarray(self.grad_instability, dtype=np.float64))
        if self.grad_error.shape != self.grad_instability.shape:
            raise DimensionError(
                f"Task gradients differ in length: {self.grad_error.size} vs {self.grad_instability.size}"
            )


def cosine_similarity(g_error, g_instability):
    """Cosine of the angle between two gradients, or None if either has zero norm."""
    a = np.ravel(np.asarray(g_error, dtype=np.float64))
    b = np.ravel(np.asarray(g_instability, dtype=np.float64))
    norm_a, norm_b = np.linalg.norm(a), np.linalg.norm(b)
    if norm_a == 0.0 or norm_b == 0.0:
        return None
    return float(np.clip(np.dot(a, b) / (norm_a * norm_b), -1.0, 1.0))


# --- Weighting rules ---

def static_lambda(config):
    return config.lambda_static


def gcossim(g_error, g_instability):
    """0 when the gradients conflict or are orthogonal, 0.5 when they agree."""
    cos = cosine_similarity(g_error, g_instability)
    if cos is None:
        logger.warning("Zero-norm task gradient; cosine undefined, using lambda=0")
        return 0.0
    return 0.5 if cos > 0.0 else 0.0


def weighted_gcossim(g_error, g_instability):
    cos = cosine_similarity(g_error, g_instability)
    if cos is None:
        logger.warning("Zero-norm task gradient; cosine undefined, using lambda=0")
        return 0.0
    return max(0.0, cos) / 2.0


def uw_lambda(log_var_error, log_var_instability):
    """Normalized precision of the instability task."""
    precision_error = math.exp(-log_var_error)
    precision_instability = math.exp(-log_var_instability)
    return precision_instability / (precision_error + precision_instability)


# --- Policies ---

class LossWeighting(ABC):
    """Per-run policy state. Emits one lambda per iteration and keeps the trajectory."""

    name = "base"

    def __init__(self, config):
        self.config = config
        self.trajectory = []
        self.last_lambda = None

    def next_lambda(self, inputs):
        lam = float(self.compute(inputs))
        if not (0.0 <= lam <= 1.0):
            raise ContractError(f"{self.name} produced lambda={lam} outside [0, 1]")
        self.trajectory.append(lam)
        self.last_lambda = lam
        return lam

    @abstractmethod
    def compute(self, inputs):
        pass

    def adapt(self, inputs):
        """State update that runs after lambda has been emitted for the iteration."""

    def learnable_parameters(self):
        return ParameterSet()

    def learnable_gradients(self, inputs):
        return {}

    def load_learnable(self, params):
        pass


class StaticWeighting(LossWeighting):
    name = "static"

    def compute(self, inputs):
        return static_lambda(self.config)


class RandomWeighting(LossWeighting):
    name = "rw"
    cap = 1.0

    def __init__(self, config):
        super().__init__(config)
        self.rng = np.random.default_rng(config.seed)

    def compute(self, inputs):
        return self.rng.uniform(0.0, self.cap)


class TaskAwareRandomWeighting(RandomWeighting):
    """Random weighting with the instability weight capped at kappa."""
    name = "tarw"

    def __init__(self, config):
        if not 0.0 < config.kappa <= 1.0:
            raise ConfigError(f"kappa must lie in (0, 1], got {config.kappa}")
        super().__init__(config)
        self.cap = config.kappa


class GCosSimWeighting(LossWeighting):
    name = "gcossim"

    def compute(self, inputs):
        return gcossim(inputs.grad_error, inputs.grad_instability)


class WeightedGCosSimWeighting(LossWeighting):
    name = "weighted_gcossim"

    def compute(self, inputs):
        return weighted_gcossim(inputs.grad_error, inputs.grad_instability)


class GradNormWeighting(LossWeighting):
    """
    Task weights (w_error, w_instability) summing to 1; lambda = w_instability.
    After emitting lambda, one gradient-descent step on
    sum_k |G_k - mean(G) * r_k^alpha| with G_k = w_k * ||g_k|| moves the weights,
    targets held constant.
    """
    name = "gradnorm"

    def __init__(self, config, learning_rate):
        super().__init__(config)
        lambda0 = 0.05 if config.lambda0 is None else config.lambda0
        self.weights = np.array([1.0 - lambda0, lambda0], dtype=np.float64)
        self.alpha = config.alpha
        self.learning_rate = config.gradnorm_lr or learning_rate
        logger.info(
            f"GradNorm: norms over the full shared parameter vector, weight lr={self.learning_rate}, "
            f"alpha={self.alpha}, lambda0={lambda0}, weights renormalized to sum 1"
        )

    def compute(self, inputs):
        return float(self.weights[1])

    def training_rates(self, inputs):
        losses = np.array([inputs.loss_error, inputs.loss_instability])
        initial = np.array([inputs.initial_loss_error, inputs.initial_loss_instability])
        if np.any(initial <= 0.0):
            logger.warning("GradNorm: zero initial loss, training-rate ratio undefined; using r=1")
            return np.ones(2)
        ratios = losses / initial
        if not ratios.mean() > 0.0:
            return np.ones(2)
        return ratios / ratios.mean()

    def adapt(self, inputs):
        norms = np.array([np.linalg.norm(inputs.grad_error), np.linalg.norm(inputs.grad_instability)])
        weighted_norms = self.weights * norms
        targets = weighted_norms.mean() * self.training_rates(inputs) ** self.alpha

        grad = np.sign(weighted_norms - targets) * norms
        weights = np.maximum(self.weights - self.learning_rate * grad, MIN_TASK_WEIGHT)
        self.weights = weights / weights.sum()


class UncertaintyWeighting(LossWeighting):
    """
    Learnable log-variances s_k trained on sum_k exp(-s_k) * L_k + s_k / 2 by the
    trainer's Adam state; lambda is the normalized precision of the instability task.
    """
    name = "uw"
    PARAM_ERROR = "dlw.uw.log_var_error"
    PARAM_INSTABILITY = "dlw.uw.log_var_instability"

    def __init__(self, config):
        super().__init__(config)
        lambda0 = 0.5 if config.lambda0 is None else config.lambda0
        if not 0.0 < lambda0 < 1.0:
            raise ConfigError(f"UW needs lambda0 strictly inside (0, 1), got {lambda0}")
        self.log_var_error = 0.0
        self.log_var_instability = math.log((1.0 - lambda0) / lambda0)
        logger.info("UW: log-variances updated by the shared Adam state from the unweighted UW objective")

    def compute(self, inputs):
        return uw_lambda(self.log_var_error, self.log_var_instability)

    def learnable_parameters(self):
        return ParameterSet({
            self.PARAM_ERROR: np.array([self.log_var_error]),
            self.PARAM_INSTABILITY: np.array([self.log_var_instability]),
        })

    def objective(self, tape, inputs):
        nodes = tape.watch(self.learnable_parameters())
        total = None
        for name, loss in ((self.PARAM_ERROR, inputs.loss_error), (self.PARAM_INSTABILITY, inputs.loss_instability)):
            s = nodes[name]
            term = gradcore.add(
                gradcore.mul(gradcore.exp(gradcore.scale(s, -1.0)), gradcore.constant([loss])),
                gradcore.scale(s, 0.5),
            )
            total = term if total is None else gradcore.add(total, term)
        return gradcore.sum(total)

    def learnable_gradients(self, inputs):
        tape = gradcore.Tape()
        return gradcore.backward(tape, self.objective(tape, inputs))

    def load_learnable(self, params):
        self.log_var_error = float(params[self.PARAM_ERROR][0])
        self.log_var_instability = float(params[self.PARAM_INSTABILITY][0])


# --- The Factory ---
def get_policy(config, learning_rate):
    if config.policy == "static":
        return StaticWeighting(config)
    elif config.policy == "rw":
        return RandomWeighting(config)
    elif config.policy == "tarw":
        return TaskAwareRandomWeighting(config)
    elif config.policy == "gcossim":
        return GCosSimWeighting(config)
    elif config.policy == "weighted_gcossim":
        return WeightedGCosSimWeighting(config)
    elif config.policy == "gradnorm":
        return GradNormWeighting(config, learning_rate)
    elif config.policy == "uw":
        return UncertaintyWeighting(config)

    raise ConfigError(f"Unknown loss-weighting policy: {config.policy}")


def write_trajectory(records, path):
    """CSV of (iteration, lambda, cosine_similarity, L_error, L_instability)."""
    frame = pd.DataFrame(list(records), columns=TRAJECTORY_COLUMNS)
    frame.to_csv(path, index=False, lineterminator="\n")
    return path
