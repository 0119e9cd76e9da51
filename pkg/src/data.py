"""
Monthly series ingestion, train/validation/test splits, dual-origin training
samples and a synthetic series generator.

Index conventions: series values are 0-indexed; an origin t is the index of
the last observation in the lookback window x_{T|t} = y[t-T+1 .. t], and the
targets are y_{h|t} = y[t+1 .. t+h]. The paired sample at t-1 is the same
construction shifted one step back.
"""
import logging
from dataclasses import dataclass
from pathlib import Path
from typing import Optional

import numpy as np
import pandas as pd
from pydantic import BaseModel, ConfigDict, Field, model_validator
from scipy.signal import lfilter

from src.exceptions import ContractError, DegenerateScaleError, IngestionError
from src.losses import insample_scale

logger = logging.getLogger(__name__)

FORMATS = {
    "m4": "m4-horizontal-csv",
    "m4-horizontal-csv": "m4-horizontal-csv",
    "long": "canonical-long-csv",
    "canonical-long-csv": "canonical-long-csv",
}
LONG_COLUMNS = ["series_id", "t_index", "value"]
SEASON = 12


class SplitSpec(BaseModel):
    model_config = ConfigDict(extra="forbid", frozen=True)

    test_length: int = Field(default=18, ge=1)
    validation_length: int = Field(default=18, ge=0)
    # Shortest training segment a series may keep
    min_train_length: int = Field(default=2, ge=1)


class SamplerConfig(BaseModel):
    model_config = ConfigDict(extra="forbid", frozen=True)

    batch_size: int = Field(default=512, ge=1)
    # Number of most recent valid origins each series may be sampled from
    origin_range: int = Field(default=120, ge=1)
    seed: Optional[int] = None


class SynthSpec(BaseModel):
    model_config = ConfigDict(extra="forbid", frozen=True)

    num_series: int = Field(default=200, ge=1)
    length: int = Field(default=120, ge=2)
    level: tuple[float, float] = (50.0, 500.0)
    # Per-step trend relative to the level
    trend: tuple[float, float] = (-0.002, 0.006)
    # Seasonal amplitude relative to the level
    seasonal_amplitude: tuple[float, float] = (0.0, 0.25)
    ar_coefficient: tuple[float, float] = (0.0, 0.8)
    # Innovation standard deviation relative to the level
    noise: tuple[float, float] = (0.01, 0.06)
    max_attempts: int = Field(default=100, ge=1)

    @model_validator(mode="after")
    def _ordered_ranges(self):
        for name in ("level", "trend", "seasonal_amplitude", "ar_coefficient", "noise"):
            low, high = getattr(self, name)
            if low > high:
                raise ValueError(f"{name} range is reversed: ({low}, {high})")
        if self.level[0] <= 0:
            raise ValueError("level range must be positive")
        return self


@dataclass(frozen=True, eq=False)
class TimeSeries:
    id: str
    values: np.ndarray

    def __post_init__(self):
        values = np.array(self.values, dtype=np.float64)
        values.setflags(write=False)
        object.__setattr__(self, "values", values)
        if not self.id:
            raise ContractError("Series id must be non-empty")
        if values.ndim != 1:
            raise ContractError(f"Series {self.id}: values must be 1-D")
        if not np.all(np.isfinite(values)) or np.any(values <= 0):
            raise ContractError(f"Series {self.id}: all values must be finite and positive")

    @property
    def n(self):
        return int(self.values.size)


# --- Ingestion ---

def _is_number(text):
    try:
        float(text)
        return True
    except (TypeError, ValueError):
        return False


def _parse_values(series_id, cells, offset=1):
    values = []
    for position, cell in enumerate(cells, start=offset):
        if not _is_number(cell):
            raise IngestionError(f"Series {series_id}: non-numeric value {cell!r} at position {position}")
        value = float(cell)
        if not np.isfinite(value) or value <= 0:
            raise IngestionError(f"Series {series_id}: non-positive value {value} at position {position}")
        values.append(value)
    return values


def _read_horizontal(path):
    with open(path, "r", encoding="utf-8") as f:
        width = max((line.count(",") + 1 for line in f if line.strip()), default=0)
    if width == 0:
        return []
    frame = pd.read_csv(
        path, header=None, names=range(width), dtype=str,
        keep_default_na=False, skipinitialspace=True, skip_blank_lines=True,
    )
    rows = [[str(cell).strip() for cell in row] for row in frame.fillna("").itertuples(index=False)]

    # M4 files start with a "V1","V2",... header
    first = [cell for cell in rows[0][1:] if cell] if rows else []
    if first and not any(_is_number(cell) for cell in first):
        rows = rows[1:]

    series, seen = [], set()
    for row in rows:
        series_id = row[0]
        cells = list(row[1:])
        while cells and cells[-1] == "":
            cells.pop()
        if series_id in seen:
            raise IngestionError(f"Duplicate series id {series_id}")
        seen.add(series_id)
        if not cells:
            raise IngestionError(f"Series {series_id} has no observations")
        series.append(TimeSeries(series_id, _parse_values(series_id, cells)))
    return series


def _read_long(path):
    frame = pd.read_csv(path, dtype={"series_id": str, "t_index": str, "value": str}, keep_default_na=False)
    missing = [column for column in LONG_COLUMNS if column not in frame.columns]
    if missing:
        raise IngestionError(f"{path}: missing columns {missing}")

    series = []
    for series_id, group in frame.groupby("series_id", sort=False):
        if not all(_is_number(t) and float(t).is_integer() for t in group["t_index"]):
            raise IngestionError(f"Series {series_id}: t_index must be integer")
        order = group["t_index"].astype(float).astype(np.int64)
        if order.duplicated().any():
            raise IngestionError(f"Duplicate series id/t_index pair in series {series_id}")
        group = group.assign(t_index=order).sort_values("t_index")
        expected = np.arange(group["t_index"].iloc[0], group["t_index"].iloc[0] + len(group))
        if not np.array_equal(group["t_index"].to_numpy(), expected):
            raise IngestionError(f"Series {series_id}: t_index is not contiguous")
        series.append(TimeSeries(series_id, _parse_values(series_id, group["value"].tolist(), offset=0)))
    return series


def ingest(path, fmt="long"):
    """Reads M4-style horizontal CSV or canonical long CSV into TimeSeries."""
    path = Path(path)
    if not path.exists():
        raise IngestionError(f"Dataset file not found: {path}")
    try:
        kind = FORMATS[fmt]
    except KeyError:
        raise IngestionError(f"Unknown dataset format {fmt!r}; expected one of {sorted(FORMATS)}") from None

    logger.info(f"Ingesting {path} as {kind}")
    try:
        series = _read_horizontal(path) if kind == "m4-horizontal-csv" else _read_long(path)
    except (pd.errors.ParserError, UnicodeDecodeError) as e:
        raise IngestionError(f"Could not parse {path}: {e}") from e
    logger.info(f"Ingested {len(series)} series from {path}")
    return series


def export_long(series, path):
    """Writes series as canonical long CSV (series_id, t_index, value)."""
    frame = pd.DataFrame(
        [(s.id, t, value) for s in series for t, value in enumerate(s.values.tolist())],
        columns=LONG_COLUMNS,
    )
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    frame.to_csv(path, index=False, lineterminator="\n")
    return path


def write_exclusion_log(entries, path):
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", encoding="utf-8") as f:
        for series_id, reason in entries:
            f.write(f"{series_id}\t{reason}\n")
    return path


# --- Splits ---

@dataclass(frozen=True, eq=False)
class SeriesSplit:
    series_id: str
    train: np.ndarray
    validation: np.ndarray
    test: np.ndarray

    @property
    def history(self):
        """Everything before the test window."""
        return np.concatenate([self.train, self.validation])

    def fit_segment(self, final_fit=False):
        return self.history if final_fit else self.train


def split(series, spec, final_fit=False):
    """
    Last `test_length` points are test, the `validation_length` points before
    them validation, the rest training. In final-fit mode validation is merged
    back into training.
    """
    reserved = spec.test_length + spec.validation_length
    if series.n < reserved + spec.min_train_length:
        raise ContractError(
            f"Series {series.id} has {series.n} observations; needs at least {reserved + spec.min_train_length}"
        )
    values = series.values
    test_start = series.n - spec.test_length
    validation_start = test_start - spec.validation_length
    if final_fit:
        return SeriesSplit(series.id, values[:test_start], values[test_start:test_start], values[test_start:])
    return SeriesSplit(
        series.id, values[:validation_start], values[validation_start:test_start], values[test_start:]
    )


@dataclass(frozen=True, eq=False)
class Dataset:
    """Immutable collection of split series."""
    splits: tuple
    spec: SplitSpec
    excluded: tuple = ()

    @classmethod
    def from_series(cls, series, spec):
        splits, excluded = [], []
        for s in series:
            try:
                splits.append(split(s, spec))
            except ContractError as e:
                logger.info(f"Excluding series {s.id}: {e}")
                excluded.append((s.id, "too short for the train/validation/test split"))
        return cls(tuple(splits), spec, tuple(excluded))

    def __len__(self):
        return len(self.splits)

    @property
    def ids(self):
        return [s.series_id for s in self.splits]

    def segments(self, final_fit=False):
        return [(s.series_id, s.fit_segment(final_fit)) for s in self.splits]


# --- Dual-origin samples ---

@dataclass(frozen=True, eq=False)
class DualOriginSample:
    series_id: str
    origin: int
    x_t: np.ndarray
    y_t: np.ndarray
    x_prev: np.ndarray
    y_prev: np.ndarray
    scale_t: float
    scale_prev: float

    @classmethod
    def from_segment(cls, series_id, segment, origin, lookback, horizon):
        if origin - lookback < 0 or origin + horizon >= len(segment):
            raise ContractError(f"Origin {origin} of series {series_id} does not admit a dual-origin sample")
        x_t = segment[origin - lookback + 1: origin + 1]
        x_prev = segment[origin - lookback: origin]
        return cls(
            series_id=series_id,
            origin=origin,
            x_t=x_t,
            y_t=segment[origin + 1: origin + horizon + 1],
            x_prev=x_prev,
            y_prev=segment[origin: origin + horizon],
            scale_t=insample_scale(x_t),
            scale_prev=insample_scale(x_prev),
        )


def valid_origins(segment, lookback, horizon, origin_range):
    """
    The (at most) `origin_range` most recent origins whose dual-origin windows
    fit inside the segment, minus those with a constant lookback window.
    """
    last = len(segment) - 1 - horizon
    first = max(lookback, last - origin_range + 1)
    origins = []
    for t in range(first, last + 1):
        try:
            insample_scale(segment[t - lookback + 1: t + 1])
            insample_scale(segment[t - lookback: t])
        except DegenerateScaleError:
            continue
        origins.append(t)
    return np.asarray(origins, dtype=np.int64)


@dataclass
class Batch:
    x_t: np.ndarray
    y_t: np.ndarray
    x_prev: np.ndarray
    y_prev: np.ndarray
    scale_t: np.ndarray
    scale_prev: np.ndarray

    def __len__(self):
        return len(self.scale_t)


def stack_batch(samples):
    return Batch(
        x_t=np.stack([s.x_t for s in samples]),
        y_t=np.stack([s.y_t for s in samples]),
        x_prev=np.stack([s.x_prev for s in samples]),
        y_prev=np.stack([s.y_prev for s in samples]),
        scale_t=np.array([s.scale_t for s in samples]),
        scale_prev=np.array([s.scale_prev for s in samples]),
    )


class BatchSampler:
    """
    Seeded sampler: a series uniformly at random, then an origin uniformly from
    that series' origin range. Only the training segment (train, or train +
    validation in final-fit mode) is visible.
    """

    def __init__(self, dataset, config, lookback, horizon, final_fit=False, seed=None):
        self.config = config
        self.lookback = lookback
        self.horizon = horizon
        self.rng = np.random.default_rng(config.seed if seed is None else seed)
        self.max_target_index = -1
        # Largest target index touched per series
        self.target_reach = {}
        self.excluded = []

        self._pool = []
        for series_id, segment in dataset.segments(final_fit):
            origins = valid_origins(segment, lookback, horizon, config.origin_range)
            if origins.size == 0:
                self.excluded.append((series_id, "no valid training origin"))
                continue
            self._pool.append((series_id, segment, origins))

        if self.excluded:
            logger.info(f"{len(self.excluded)} series have no valid training origin and are not sampled")
        if not self._pool:
            raise ContractError("No series admits a training sample")

    @property
    def series_ids(self):
        return [series_id for series_id, _, _ in self._pool]

    def origins_for(self, series_id):
        for sid, _, origins in self._pool:
            if sid == series_id:
                return origins
        raise KeyError(series_id)

    def sample_batch(self):
        samples = []
        for _ in range(self.config.batch_size):
            series_id, segment, origins = self._pool[self.rng.integers(len(self._pool))]
            origin = int(origins[self.rng.integers(origins.size)])
            samples.append(DualOriginSample.from_segment(series_id, segment, origin, self.lookback, self.horizon))
            reach = origin + self.horizon
            self.max_target_index = max(self.max_target_index, reach)
            self.target_reach[series_id] = max(self.target_reach.get(series_id, -1), reach)
        return samples


# --- Synthetic data ---

def _synth_one(rng, spec):
    t = np.arange(spec.length)
    level = rng.uniform(*spec.level)
    trend = rng.uniform(*spec.trend)
    amplitude = rng.uniform(*spec.seasonal_amplitude) * level
    phase = rng.uniform(0.0, 2.0 * np.pi)
    phi = rng.uniform(*spec.ar_coefficient)
    sigma = rng.uniform(*spec.noise) * level

    shocks = rng.normal(0.0, sigma, size=spec.length)
    noise = lfilter([1.0], [1.0, -phi], shocks)
    return level * (1.0 + trend * t) + amplitude * np.sin(2.0 * np.pi * t / SEASON + phase) + noise


def synthesize(spec, seed):
    """Level + trend + 12-month seasonality + AR(1) noise; non-positive draws are resampled."""
    rng = np.random.default_rng(seed)
    series = []
    for i in range(spec.num_series):
        for _ in range(spec.max_attempts):
            values = _synth_one(rng, spec)
            if np.all(values > 0):
                break
        else:
            raise ContractError(f"Could not draw a positive series in {spec.max_attempts} attempts; adjust SynthSpec")
        series.append(TimeSeries(f"S{i + 1:05d}", values))
    return series
