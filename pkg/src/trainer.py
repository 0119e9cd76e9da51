"""
The N-BEATS-S training loop: sample a dual-origin batch, compute both task
losses and their gradients, ask the loss-weighting policy for lambda, and feed
(1 - lambda) * g_error + lambda * g_instability to Adam.
"""
import logging
import time
from collections import OrderedDict
from dataclasses import dataclass, field
from typing import Optional

import numpy as np
import pandas as pd
from pydantic import BaseModel, ConfigDict, Field
from rich.console import Console

import src.gradcore as gradcore
from src.data import BatchSampler, SamplerConfig, stack_batch
from src.dlw import DlwConfig, DlwInputs, TRAJECTORY_COLUMNS, cosine_similarity, get_policy
from src.exceptions import ContractError, TrainingAbortedError
from src.gradcore import AdamState, adam_step, flatten_grads
from src.losses import composite_terms
from src.model import ModelConfig, TrainedModel, forward, init_params, predict

logger = logging.getLogger(__name__)
console = Console(stderr=True)

RUNLOG_COLUMNS = TRAJECTORY_COLUMNS + ["composite", "grad_norm_error", "grad_norm_instability"]


class TrainConfig(BaseModel):
    model_config = ConfigDict(extra="forbid", frozen=True)

    iterations: int = Field(ge=1)
    learning_rate: float = Field(gt=0.0)
    model: ModelConfig
    dlw: DlwConfig = DlwConfig()
    sampler: SamplerConfig = SamplerConfig()
    seed: int = Field(default=0, ge=0)
    # Progress line cadence (iterations)
    log_every: int = Field(default=100, ge=1)
    # Intermediate checkpoint cadence; None writes only the final one
    checkpoint_every: Optional[int] = Field(default=None, ge=1)


@dataclass
class IterationRecord:
    iteration: int
    lam: float
    cosine_similarity: float
    loss_error: float
    loss_instability: float
    composite: float
    grad_norm_error: float
    grad_norm_instability: float

    def as_row(self):
        return [
            self.iteration, self.lam, self.cosine_similarity, self.loss_error, self.loss_instability,
            self.composite, self.grad_norm_error, self.grad_norm_instability,
        ]


@dataclass
class RunLog:
    records: list = field(default_factory=list)
    wall_clock: float = 0.0
    params: Optional[gradcore.ParameterSet] = None
    # Largest series index any training window touched (leak audit)
    max_target_index: int = -1
    target_reach: dict = field(default_factory=dict)

    def __len__(self):
        return len(self.records)

    @property
    def lambdas(self):
        return [r.lam for r in self.records]

    def to_frame(self):
        return pd.DataFrame([r.as_row() for r in self.records], columns=RUNLOG_COLUMNS)

    def trajectory_frame(self):
        return self.to_frame()[TRAJECTORY_COLUMNS]

    def write(self, path):
        # No wall-clock column: identical runs give byte-identical files
        self.to_frame().to_csv(path, index=False, lineterminator="\n")
        return path


@dataclass
class StepTrace:
    """Everything needed to recompute one parameter update."""
    iteration: int
    lam: float
    grad_error: dict
    grad_instability: dict
    combined: dict
    params_before: gradcore.ParameterSet
    adam_before: AdamState
    params_after: gradcore.ParameterSet


@dataclass(frozen=True)
class RunSeeds:
    init: int
    sampler: int
    dlw: int


def run_seeds(seed):
    """Independent streams for initialization, batch sampling and the policy."""
    children = np.random.SeedSequence(seed).spawn(3)
    init, sampler, dlw = (int(child.generate_state(1)[0]) for child in children)
    return RunSeeds(init=init, sampler=sampler, dlw=dlw)


def policy_seed(dlw_seed, seed):
    """Per-member policy stream under a pinned `dlw.seed`."""
    return int(np.random.SeedSequence([dlw_seed, seed]).generate_state(1)[0])


def _abort(message, iteration, lam, losses, norms):
    snapshot = {
        "iteration": iteration,
        "lambda": lam,
        "L_error": losses[0],
        "L_instability": losses[1],
        "grad_norm_error": norms[0],
        "grad_norm_instability": norms[1],
    }
    logger.error(f"Training aborted: {message} {snapshot}")
    raise TrainingAbortedError(message, snapshot)


def train(dataset, config, final_fit=False, hook=None, checkpoint_callback=None, show_progress=True):
    """
    Runs exactly `config.iterations` steps and returns (ParameterSet, RunLog).
    Deterministic given `config.seed`.
    """
    seeds = run_seeds(config.seed)
    model_config = config.model
    sampler = BatchSampler(
        dataset, config.sampler, model_config.lookback, model_config.horizon,
        final_fit=final_fit, seed=seeds.sampler,
    )
    params = init_params(model_config, seeds.init)
    dlw_seed = seeds.dlw if config.dlw.seed is None else policy_seed(config.dlw.seed, config.seed)
    dlw_config = config.dlw.model_copy(update={"seed": dlw_seed})
    policy = get_policy(dlw_config, config.learning_rate)
    extra = policy.learnable_parameters()
    adam = AdamState(learning_rate=config.learning_rate)

    logger.info(
        f"Training {config.iterations} iterations, policy={dlw_config.policy}, "
        f"{params.size} parameters, final_fit={final_fit}, seed={config.seed}"
    )
    log = RunLog()
    initial_losses = None
    lam = None
    started = time.perf_counter()

    for iteration in range(1, config.iterations + 1):
        batch = stack_batch(sampler.sample_batch())

        # 1. Forward both origins on one tape
        tape = gradcore.Tape()
        nodes = tape.watch(params)
        forecast_t = forward(batch.x_t, nodes, model_config)
        forecast_prev = forward(batch.x_prev, nodes, model_config)
        terms = composite_terms(
            forecast_t, forecast_prev, batch.y_t, batch.y_prev, batch.scale_t, batch.scale_prev
        )
        losses = terms.values
        if not np.all(np.isfinite(losses)):
            _abort("non-finite loss", iteration, lam, losses, (float("nan"), float("nan")))

        # 2. One backward pass per task
        grad_error = gradcore.backward(tape, terms.error)
        grad_instability = gradcore.backward(tape, terms.instability)
        flat_error = flatten_grads(grad_error, params.names)
        flat_instability = flatten_grads(grad_instability, params.names)
        norms = (float(np.linalg.norm(flat_error)), float(np.linalg.norm(flat_instability)))
        if not np.all(np.isfinite(norms)):
            _abort("non-finite gradient", iteration, lam, losses, norms)

        if initial_losses is None:
            initial_losses = losses

        # 3. Loss weight, emitted before the policy adapts
        inputs = DlwInputs(
            iteration=iteration,
            loss_error=losses[0],
            loss_instability=losses[1],
            grad_error=flat_error,
            grad_instability=flat_instability,
            initial_loss_error=initial_losses[0],
            initial_loss_instability=initial_losses[1],
        )
        cosine = cosine_similarity(flat_error, flat_instability)
        lam = policy.next_lambda(inputs)
        policy.adapt(inputs)

        # 4. Combined gradient into Adam
        combined = OrderedDict(
            (name, (1.0 - lam) * grad_error[name] + lam * grad_instability[name]) for name in params.names
        )
        full = params
        if len(extra):
            combined.update(policy.learnable_gradients(inputs))
            full = params.merge(extra)
        adam_before = adam.copy() if hook is not None else None
        updated = adam_step(full, combined, adam)

        params = updated.subset(params.names)
        if len(extra):
            extra = updated.subset(extra.names)
            policy.load_learnable(extra)

        log.records.append(IterationRecord(
            iteration=iteration,
            lam=lam,
            cosine_similarity=float("nan") if cosine is None else cosine,
            loss_error=losses[0],
            loss_instability=losses[1],
            composite=(1.0 - lam) * losses[0] + lam * losses[1],
            grad_norm_error=norms[0],
            grad_norm_instability=norms[1],
        ))

        if hook is not None:
            hook(StepTrace(
                iteration=iteration, lam=lam, grad_error=grad_error, grad_instability=grad_instability,
                combined=combined, params_before=full,
                adam_before=adam_before, params_after=updated,
            ))

        if checkpoint_callback is not None and config.checkpoint_every and iteration % config.checkpoint_every == 0:
            checkpoint_callback(iteration, TrainedModel(model_config, params))

        if iteration % config.log_every == 0 or iteration == config.iterations:
            line = (
                f"iter {iteration}/{config.iterations}  L_error={losses[0]:.4f}  "
                f"L_instability={losses[1]:.4f}  lambda={lam:.3f}"
            )
            logger.info(line)
            if show_progress:
                console.print(f"   [dim]{line}[/dim]")

    log.wall_clock = time.perf_counter() - started
    log.params = params
    log.max_target_index = sampler.max_target_index
    log.target_reach = dict(sampler.target_reach)
    return params, log


def final_fit(dataset, config, **kwargs):
    """Trains on train + validation segments; the test window stays out of reach."""
    params, _ = train(dataset, config, final_fit=True, **kwargs)
    return params


def ensemble_forecast(members, inputs):
    """Elementwise median of the members' forecasts for an (n, T) input array."""
    if not members:
        raise ContractError("An ensemble needs at least one member")
    config = members[0].config
    for member in members[1:]:
        if member.config != config or not member.params.same_layout(members[0].params):
            raise ContractError("Ensemble members do not share a model configuration")
    forecasts = np.stack([predict(member, inputs) for member in members])
    return np.median(forecasts, axis=0)
