"""
Scaled training losses (RMSSE, RMSSC), percentage evaluation metrics
(sMAPE, sMAPC) and the composite accuracy/instability objective.

Alignment convention for two forecasts of length h made at adjacent origins:
`new` spans t+1..t+h and `old` spans t..t+h-1, so new[i] and old[i+1] target
the same period for i = 0..h-2.
"""
from dataclasses import dataclass

import numpy as np

import src.gradcore as gradcore
from src.exceptions import ContractError, DegenerateScaleError, DimensionError


def _vector(values, name):
    arr = np.asarray(values, dtype=np.float64)
    if arr.ndim != 1:
        raise DimensionError(f"{name} must be a 1-D vector, got shape {arr.shape}")
    return arr


def _pair(a, b, names):
    a, b = _vector(a, names[0]), _vector(b, names[1])
    if a.shape != b.shape:
        raise DimensionError(f"{names[0]} {a.shape} and {names[1]} {b.shape} differ in length")
    return a, b


def insample_scale(insample):
    """Mean squared one-step difference of the in-sample window (the RMSSE/RMSSC denominator)."""
    window = _vector(insample, "insample")
    if window.size < 2:
        raise ContractError("In-sample window needs at least 2 observations")
    scale = float(np.mean(np.diff(window) ** 2))
    if not scale > 0.0:
        raise DegenerateScaleError("In-sample window is constant; the scaled losses are undefined")
    return scale


def overlap(forecast_new, forecast_old):
    """(new, old) restricted to the h-1 periods both forecasts cover."""
    new, old = _pair(forecast_new, forecast_old, ("forecast_new", "forecast_old"))
    if new.size < 2:
        raise ContractError("Forecast horizon must be at least 2 to overlap")
    return new[:-1], old[1:]


def rmsse(forecast, actual, insample):
    forecast, actual = _pair(forecast, actual, ("forecast", "actual"))
    return float(np.sqrt(np.mean((actual - forecast) ** 2) / insample_scale(insample)))


def rmssc(forecast_new, forecast_old, insample):
    new, old = overlap(forecast_new, forecast_old)
    return float(np.sqrt(np.mean((old - new) ** 2) / insample_scale(insample)))


def smape(forecast, actual):
    """sMAPE in percent, bounded by [0, 200]."""
    forecast, actual = _pair(forecast, actual, ("forecast", "actual"))
    denominator = np.abs(actual) + np.abs(forecast)
    if np.any(denominator == 0):
        raise ContractError("sMAPE undefined: forecast and actual are both zero at some step")
    return float(200.0 * np.mean(np.abs(actual - forecast) / denominator))


def smapc(forecast_new, forecast_old):
    """sMAPC in percent over the h-1 overlapping periods, bounded by [0, 200]."""
    new, old = overlap(forecast_new, forecast_old)
    denominator = np.abs(old) + np.abs(new)
    if np.any(denominator == 0):
        raise ContractError("sMAPC undefined: both forecasts are zero at an overlapping period")
    return float(200.0 * np.mean(np.abs(old - new) / denominator))


# --- Differentiable batch losses ---

def rmsse_loss(forecast, actual, scale):
    """Per-sample RMSSE (shape [batch]) for a forecast tensor [batch x h]."""
    actual = np.asarray(actual, dtype=np.float64)
    if forecast.shape != actual.shape:
        raise DimensionError(f"forecast {forecast.shape} and actual {actual.shape} differ")
    squared = gradcore.square(gradcore.sub(forecast, gradcore.constant(actual)))
    return gradcore.sqrt(gradcore.divide(gradcore.mean(squared, axis=1), np.asarray(scale, dtype=np.float64)))


def rmssc_loss(forecast_new, forecast_old, scale):
    """Per-sample RMSSC (shape [batch]) between forecasts at origins t and t-1."""
    if forecast_new.shape != forecast_old.shape:
        raise DimensionError(f"forecasts {forecast_new.shape} and {forecast_old.shape} differ")
    h = forecast_new.shape[1]
    if h < 2:
        raise ContractError("Forecast horizon must be at least 2 to overlap")
    change = gradcore.sub(gradcore.columns(forecast_old, 1, h), gradcore.columns(forecast_new, 0, h - 1))
    squared = gradcore.square(change)
    return gradcore.sqrt(gradcore.divide(gradcore.mean(squared, axis=1), np.asarray(scale, dtype=np.float64)))


@dataclass
class LossTerms:
    """
    error: batch mean of (RMSSE_t + RMSSE_{t-1}) / 2
    instability: batch mean of RMSSC
    """
    error: gradcore.Tensor
    instability: gradcore.Tensor

    @property
    def values(self):
        return self.error.item(), self.instability.item()

    def combine(self, lam):
        check_lambda(lam)
        return gradcore.add(gradcore.scale(self.error, 1.0 - lam), gradcore.scale(self.instability, lam))


def check_lambda(lam):
    if not 0.0 <= lam <= 1.0:
        raise ContractError(f"Loss weight must lie in [0, 1], got {lam}")


def composite_terms(forecast_t, forecast_prev, actual_t, actual_prev, scale_t, scale_prev):
    error_t = rmsse_loss(forecast_t, actual_t, scale_t)
    error_prev = rmsse_loss(forecast_prev, actual_prev, scale_prev)
    error = gradcore.mean(gradcore.scale(gradcore.add(error_t, error_prev), 0.5))
    instability = gradcore.mean(rmssc_loss(forecast_t, forecast_prev, scale_t))
    return LossTerms(error=error, instability=instability)


def composite_loss(forecast_t, forecast_prev, actual_t, actual_prev, scale_t, scale_prev, lam):
    """(1 - lam) * L_error + lam * L_instability as a differentiable scalar."""
    check_lambda(lam)
    terms = composite_terms(forecast_t, forecast_prev, actual_t, actual_prev, scale_t, scale_prev)
    return terms.combine(lam), terms
