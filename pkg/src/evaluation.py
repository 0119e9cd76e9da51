"""
Rolling-origin evaluation: forecasts from consecutive origins over an
evaluation window (13 origins of 6-step forecasts over the last 18 points by
default), sMAPE/sMAPC aggregation, and the multiple-comparisons-with-the-best
rank test.
"""
import logging
import math
from dataclasses import dataclass
from pathlib import Path

import numpy as np
import pandas as pd
from scipy.stats import rankdata

from src.exceptions import ConfigError, ContractError, DimensionError
from src.losses import smapc, smape
from src.trainer import ensemble_forecast

logger = logging.getLogger(__name__)

EVAL_HORIZON = 6
PANEL_COLUMNS = ["method", "series_id", "origin", "step", "forecast"]
SCORE_COLUMNS = ["method", "series_id", "smape", "smapc"]

# Two-tailed Nemenyi critical values q_alpha (studentized range / sqrt(2), infinite df)
# indexed by the number of compared methods k = 2..20.
NEMENYI_Q = {
    0.05: [1.959964, 2.343701, 2.569032, 2.727774, 2.849705, 2.948320, 3.030879, 3.101730, 3.163684,
           3.218654, 3.268004, 3.312739, 3.353618, 3.391230, 3.426041, 3.458425, 3.488685, 3.517073,
           3.543799],
    0.10: [1.644854, 2.052293, 2.291341, 2.459516, 2.588521, 2.692732, 2.779884, 2.854606, 2.919889,
           2.977768, 3.029694, 3.076733, 3.119693, 3.159199, 3.195743, 3.229723, 3.261461, 3.291224,
           3.319233],
}


@dataclass
class ForecastPanel:
    """forecasts[s, o, i]: step i+1 forecast for series s from the (o+1)-th origin."""
    method: str
    series_ids: list
    forecasts: np.ndarray

    def __post_init__(self):
        self.forecasts = np.asarray(self.forecasts, dtype=np.float64)
        if self.forecasts.ndim != 3 or self.forecasts.shape[0] != len(self.series_ids):
            raise DimensionError(
                f"Panel must be (series, origins, horizon) with one row per id, got {self.forecasts.shape}"
            )

    @property
    def num_origins(self):
        return self.forecasts.shape[1]

    @property
    def horizon(self):
        return self.forecasts.shape[2]

    def reorder(self, series_ids):
        index = {sid: i for i, sid in enumerate(self.series_ids)}
        missing = [sid for sid in series_ids if sid not in index]
        if missing:
            raise ContractError(f"Panel '{self.method}' lacks series {missing[:5]}")
        return ForecastPanel(self.method, list(series_ids), self.forecasts[[index[sid] for sid in series_ids]])


# --- Forecasters ---

class EnsembleForecaster:
    """Median of the members' forecasts."""

    def __init__(self, members, method="ensemble"):
        if not members:
            raise ContractError("An ensemble needs at least one member")
        self.members = members
        self.method = method
        self.lookback = members[0].config.lookback
        self.horizon = members[0].config.horizon

    def __call__(self, inputs):
        return ensemble_forecast(self.members, inputs)


def seasonal_naive(inputs, horizon, season=12):
    """Forecast for t+i is the observation one season before (wrapping for i > season)."""
    inputs = np.atleast_2d(np.asarray(inputs, dtype=np.float64))
    if inputs.shape[1] < season:
        raise DimensionError(f"Seasonal naive needs at least {season} observations per input")
    last_season = inputs[:, -season:]
    return last_season[:, [i % season for i in range(horizon)]]


class SeasonalNaive:
    def __init__(self, horizon=EVAL_HORIZON, season=12, method="seasonal_naive"):
        self.horizon = horizon
        self.season = season
        self.lookback = season
        self.method = method

    def __call__(self, inputs):
        return seasonal_naive(inputs, self.horizon, self.season)


# --- Rolling origins ---

def _window(split, window):
    if window == "test":
        return split.history, split.test
    if window == "validation":
        return split.train, split.validation
    raise ContractError(f"Unknown evaluation window {window!r}")


def window_actuals(dataset, series_ids, window="test"):
    """Actuals of the evaluation window, one row per requested series."""
    by_id = {s.series_id: s for s in dataset.splits}
    missing = [sid for sid in series_ids if sid not in by_id]
    if missing:
        raise ContractError(f"Series not in dataset: {missing[:5]}")
    return np.stack([_window(by_id[sid], window)[1] for sid in series_ids])


def origin_targets(window_length, horizon=EVAL_HORIZON):
    """0-based window positions targeted from each origin."""
    num_origins = window_length - horizon + 1
    return [list(range(o, o + horizon)) for o in range(num_origins)]


def roll_forecasts(forecaster, dataset, window="test", method=None):
    """
    Forecasts from every origin of the evaluation window. The input for an
    origin is the lookback window of actual observations ending there, earlier
    window actuals included. Returns (panel, actuals[series, window_length]).
    """
    lookback, horizon = forecaster.lookback, forecaster.horizon
    inputs, ids, actuals = [], [], []
    num_origins = None
    for split in dataset.splits:
        history, target = _window(split, window)
        if len(history) < lookback:
            logger.info(f"Excluding series {split.series_id} from evaluation: history shorter than lookback")
            continue
        if num_origins is None:
            num_origins = len(target) - horizon + 1
            if num_origins < 1:
                raise ContractError(f"{window} window of {len(target)} points is shorter than the horizon {horizon}")
        elif len(target) - horizon + 1 != num_origins:
            raise ContractError("Evaluation windows differ in length across series")

        full = np.concatenate([history, target])
        start = len(history)
        inputs.extend(full[start + o - lookback: start + o] for o in range(num_origins))
        ids.append(split.series_id)
        actuals.append(target)

    if not ids:
        raise ContractError("No series has enough history for rolling evaluation")
    forecasts = np.asarray(forecaster(np.stack(inputs)), dtype=np.float64)
    panel = ForecastPanel(
        method or getattr(forecaster, "method", "model"), ids,
        forecasts.reshape(len(ids), num_origins, horizon),
    )
    return panel, np.stack(actuals)


# --- Scores ---

@dataclass
class ScoreTable:
    frame: pd.DataFrame

    def __post_init__(self):
        duplicated = self.frame.duplicated(subset=["method", "series_id"])
        if duplicated.any():
            methods = sorted(set(self.frame.loc[duplicated, "method"]))
            raise ContractError(f"Method(s) {methods} scored more than once for the same series; rename the panels")

    def summary(self):
        """Dataset-level scores: mean of the per-series means, per method."""
        return (
            self.frame.groupby("method", sort=False)[["smape", "smapc"]]
            .mean()
            .reset_index()
        )

    def matrix(self, metric):
        """series x method matrix of one metric, in first-appearance order."""
        methods = list(dict.fromkeys(self.frame["method"]))
        wide = self.frame.pivot(index="series_id", columns="method", values=metric)
        return wide[methods]

    def write(self, path):
        self.frame.to_csv(path, index=False, lineterminator="\n")
        return path

    @classmethod
    def concat(cls, tables):
        return cls(pd.concat([t.frame for t in tables], ignore_index=True))

    @classmethod
    def read(cls, path):
        frame = pd.read_csv(path, dtype={"series_id": str, "method": str})
        missing = [c for c in SCORE_COLUMNS if c not in frame.columns]
        if missing:
            raise ContractError(f"{path}: missing columns {missing}")
        return cls(frame[SCORE_COLUMNS])


def score(panel, actuals):
    """
    Per-series sMAPE (mean over origins) and sMAPC (mean over adjacent origin
    pairs, all pairs weighted equally).
    """
    actuals = np.asarray(actuals, dtype=np.float64)
    num_series, num_origins, horizon = panel.forecasts.shape
    if actuals.shape != (num_series, num_origins + horizon - 1):
        raise DimensionError(f"Actuals {actuals.shape} do not match panel {panel.forecasts.shape}")

    rows = []
    for s, series_id in enumerate(panel.series_ids):
        f = panel.forecasts[s]
        accuracy = np.mean([smape(f[o], actuals[s, o: o + horizon]) for o in range(num_origins)])
        if num_origins > 1:
            stability = np.mean([smapc(f[o], f[o - 1]) for o in range(1, num_origins)])
        else:
            stability = float("nan")
        rows.append((panel.method, series_id, float(accuracy), float(stability)))
    return ScoreTable(pd.DataFrame(rows, columns=SCORE_COLUMNS))


# --- Panel files ---

def write_panel(panel, path):
    num_series, num_origins, horizon = panel.forecasts.shape
    rows = [
        (panel.method, sid, o + 1, i + 1, panel.forecasts[s, o, i])
        for s, sid in enumerate(panel.series_ids)
        for o in range(num_origins)
        for i in range(horizon)
    ]
    pd.DataFrame(rows, columns=PANEL_COLUMNS).to_csv(path, index=False, lineterminator="\n")
    return path


def read_panels(path):
    """Reads panel CSV (in-engine or external forecasts) into {method: ForecastPanel}."""
    frame = pd.read_csv(path, dtype={"method": str, "series_id": str})
    missing = [c for c in PANEL_COLUMNS if c not in frame.columns]
    if missing:
        raise ContractError(f"{Path(path).name}: missing columns {missing}")
    if frame[PANEL_COLUMNS].isna().any().any():
        raise ContractError(f"{Path(path).name}: empty cells in forecast file")

    panels = {}
    for method, group in frame.groupby("method", sort=False):
        ids = list(dict.fromkeys(group["series_id"]))
        num_origins = int(group["origin"].max())
        horizon = int(group["step"].max())
        if len(group) != len(ids) * num_origins * horizon or group.duplicated(["series_id", "origin", "step"]).any():
            raise ContractError(f"Method '{method}': forecast grid is incomplete or has duplicates")
        cube = np.full((len(ids), num_origins, horizon), np.nan)
        position = {sid: i for i, sid in enumerate(ids)}
        for sid, origin, step, value in group[["series_id", "origin", "step", "forecast"]].itertuples(index=False):
            cube[position[sid], int(origin) - 1, int(step) - 1] = value
        if np.isnan(cube).any():
            raise ContractError(f"Method '{method}': forecast grid is incomplete")
        panels[method] = ForecastPanel(method, ids, cube)
    return panels


# --- MCB ---

def critical_value(alpha, k):
    if alpha not in NEMENYI_Q:
        raise ConfigError(f"No critical values for significance level {alpha}; use one of {sorted(NEMENYI_Q)}")
    table = NEMENYI_Q[alpha]
    if not 2 <= k <= len(table) + 1:
        raise ConfigError(f"Critical values cover 2..{len(table) + 1} methods, got {k}")
    return table[k - 2]


def mcb_half_width(alpha, k, num_series):
    return 0.5 * critical_value(alpha, k) * math.sqrt(k * (k + 1) / (6.0 * num_series))


def significantly_different(rank_a, rank_b, half_width):
    """True when the two rank intervals do not overlap."""
    return abs(rank_a - rank_b) > 2.0 * half_width


@dataclass
class McbResult:
    methods: list
    average_ranks: np.ndarray
    half_width: float
    alpha: float
    num_series: int

    @property
    def lower(self):
        return self.average_ranks - self.half_width

    @property
    def upper(self):
        return self.average_ranks + self.half_width

    @property
    def best(self):
        return self.methods[int(np.argmin(self.average_ranks))]

    @property
    def significance(self):
        """significance[a, b] is True when methods a and b differ significantly."""
        diff = np.abs(self.average_ranks[:, None] - self.average_ranks[None, :])
        return diff > 2.0 * self.half_width

    def to_frame(self):
        best = int(np.argmin(self.average_ranks))
        return pd.DataFrame({
            "method": self.methods,
            "average_rank": self.average_ranks,
            "half_width": self.half_width,
            "lower": self.lower,
            "upper": self.upper,
            "differs_from_best": self.significance[best],
        })

    def write(self, path):
        self.to_frame().to_csv(path, index=False, lineterminator="\n")
        return path


def mcb(per_series_scores, alpha=0.05):
    """
    Average ranks (ties mid-ranked, lower score = better rank) per method with
    Nemenyi-style intervals. `per_series_scores` is a series x method DataFrame.
    """
    frame = pd.DataFrame(per_series_scores)
    if frame.isna().any().any():
        raise ContractError("Score matrix has missing cells")
    num_series, k = frame.shape
    if k < 2 or num_series < 2:
        raise ContractError(f"MCB needs at least 2 methods and 2 series, got {k} and {num_series}")

    ranks = rankdata(frame.to_numpy(dtype=np.float64), method="average", axis=1)
    return McbResult(
        methods=[str(m) for m in frame.columns],
        average_ranks=ranks.mean(axis=0),
        half_width=mcb_half_width(alpha, k, num_series),
        alpha=alpha,
        num_series=num_series,
    )
