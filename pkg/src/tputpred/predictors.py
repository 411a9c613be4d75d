"""Baseline throughput predictors, AR/ARMA fitting and the error metric.

Predictors map a history of per-epoch throughputs ``W_{t-k} .. W_{t-1}``
to forecasts for the next ``horizon`` epochs ``W_t .. W_{t+horizon-1}``.
"""

from __future__ import annotations

import csv
import json
import math
from dataclasses import dataclass
from typing import IO, Iterable, Protocol, Sequence

import numpy as np
from scipy.linalg import solve_toeplitz

from .errors import DegenerateFitError
from .trace import SessionTrace, percentile

MIN_PREDICTION_KBPS = 1.0
DEFAULT_WINDOW = 5


@dataclass(frozen=True)
class HistoryWindow:
    values: tuple[float, ...]
    horizon: int = 1

    def __post_init__(self):
        values = tuple(float(v) for v in self.values)
        object.__setattr__(self, "values", values)
        if not values:
            raise ValueError("history must contain at least one value")
        if any(not v > 0 for v in values):
            raise ValueError("history values must be positive")
        if self.horizon < 1:
            raise ValueError("horizon must be >= 1")


@dataclass(frozen=True)
class PredictionRecord:
    session_id: str
    slot: int
    predicted_kbps: float
    actual_kbps: float
    err: float


@dataclass(frozen=True)
class ArModel:
    order_p: int
    intercept: float
    coeffs: tuple[float, ...]
    noise_variance: float

    def __post_init__(self):
        object.__setattr__(self, "coeffs", tuple(float(c) for c in self.coeffs))
        if self.order_p < 1 or len(self.coeffs) != self.order_p:
            raise ValueError("coeffs length must equal order_p >= 1")
        if self.noise_variance < 0:
            raise ValueError("noise_variance must be nonnegative")

    @property
    def stationary_mean(self) -> float | None:
        denom = 1.0 - sum(self.coeffs)
        return self.intercept / denom if abs(denom) > 1e-12 else None


@dataclass(frozen=True)
class ArmaModel:
    order_p: int
    order_q: int
    intercept: float
    coeffs: tuple[float, ...]
    ma_coeffs: tuple[float, ...]
    noise_variance: float

    def __post_init__(self):
        object.__setattr__(self, "coeffs", tuple(float(c) for c in self.coeffs))
        object.__setattr__(self, "ma_coeffs", tuple(float(c) for c in self.ma_coeffs))
        if self.order_p < 1 or len(self.coeffs) != self.order_p:
            raise ValueError("coeffs length must equal order_p >= 1")
        if self.order_q < 1 or len(self.ma_coeffs) != self.order_q:
            raise ValueError("ma_coeffs length must equal order_q >= 1")
        if self.noise_variance < 0:
            raise ValueError("noise_variance must be nonnegative")


# --------------------------------------------------------------------------
# Window predictors


def predict_last_sample(history: HistoryWindow) -> list[float]:
    return [history.values[-1]] * history.horizon


def predict_arithmetic_mean(history: HistoryWindow, p: int = DEFAULT_WINDOW) -> list[float]:
    if p < 1:
        raise ValueError("window p must be >= 1")
    window = history.values[-p:]
    return [math.fsum(window) / len(window)] * history.horizon


def predict_harmonic_mean(history: HistoryWindow, p: int = DEFAULT_WINDOW) -> list[float]:
    """Standard harmonic mean ``k / sum(1/W)`` of the last ``k = min(p, len)`` values."""
    if p < 1:
        raise ValueError("window p must be >= 1")
    window = history.values[-p:]
    if any(v <= 0 for v in window):
        raise ValueError("harmonic mean needs strictly positive history")
    return [len(window) / math.fsum(1.0 / v for v in window)] * history.horizon


# --------------------------------------------------------------------------
# AR / ARMA fitting


def _pooled_arrays(sequences: Sequence[SessionTrace | Sequence[float]]) -> list[np.ndarray]:
    out = []
    for s in sequences:
        out.append(s.values if isinstance(s, SessionTrace) else np.asarray(s, dtype=float))
    return out


def _pooled_autocov(seqs: list[np.ndarray], mean: float, max_lag: int) -> np.ndarray:
    """Length-weighted average of per-sequence biased autocovariances."""
    acov = np.zeros(max_lag + 1)
    total = 0
    for x in seqs:
        d = x - mean
        n = d.size
        for k in range(min(max_lag, n - 1) + 1):
            acov[k] += np.dot(d[: n - k], d[k:])
        total += n
    return acov / total


def _yule_walker(acov: np.ndarray, p: int) -> tuple[np.ndarray, float]:
    if acov[0] <= 0 or not np.isfinite(acov[0]):
        raise DegenerateFitError("zero variance in training data; autocovariance matrix is singular")
    r = acov[: p + 1]
    toeplitz = np.array([[r[abs(i - j)] for j in range(p)] for i in range(p)])
    if np.linalg.cond(toeplitz) > 1e12:
        raise DegenerateFitError("autocovariance matrix is singular")
    phi = solve_toeplitz(r[:p], r[1 : p + 1])
    sigma2 = float(r[0] - np.dot(phi, r[1 : p + 1]))
    return phi, max(sigma2, 0.0)


def fit_ar(sequences: Sequence[SessionTrace], p: int = DEFAULT_WINDOW) -> ArModel:
    """Yule-Walker AR(p) fit on pooled, globally mean-centred sequences."""
    if p < 1:
        raise ValueError("order p must be >= 1")
    seqs = _pooled_arrays(sequences)
    if not seqs:
        raise ValueError("no training sequences")
    if any(x.size <= p for x in seqs):
        raise ValueError(f"every sequence must be longer than p={p}")
    total = sum(x.size for x in seqs)
    if total < 10 * p:
        raise ValueError(f"need at least {10 * p} training points, got {total}")
    mean = float(np.concatenate(seqs).mean())
    acov = _pooled_autocov(seqs, mean, p)
    phi, sigma2 = _yule_walker(acov, p)
    intercept = mean * (1.0 - float(phi.sum()))
    return ArModel(p, intercept, tuple(phi.tolist()), sigma2)


def _long_ar_order(seqs: list[np.ndarray], mean: float, max_order: int) -> int:
    """AIC-selected order for the innovation-estimating autoregression."""
    acov = _pooled_autocov(seqs, mean, max_order)
    n = sum(x.size for x in seqs)
    best_order, best_aic = 0, n * math.log(acov[0]) if acov[0] > 0 else math.inf
    for m in range(1, max_order + 1):
        try:
            _, s2 = _yule_walker(acov, m)
        except DegenerateFitError:
            break
        if s2 <= 0:
            break
        aic = n * math.log(s2) + 2 * m
        if aic < best_aic:
            best_order, best_aic = m, aic
    return best_order


# Singular values of the standardized regression design below this fraction
# of the largest are treated as zero (AR/MA common-factor ridge).
_HR_RCOND = 0.05


def fit_arma(sequences: Sequence[SessionTrace], p: int = DEFAULT_WINDOW, q: int = 1) -> ArmaModel:
    """Hannan-Rissanen ARMA(p, q) estimate.

    A long autoregression (order picked by AIC) estimates the innovations;
    the ARMA coefficients are then the least-squares regression of ``W_t``
    on lagged values and lagged innovation estimates, pooled over sequences.
    Near-collinear directions of the regression (an AR root cancelling an
    MA root) get the minimum-norm solution.
    """
    if q < 1:
        raise ValueError("q must be >= 1; use fit_ar for a pure autoregression")
    if p < 1:
        raise ValueError("order p must be >= 1")
    seqs = _pooled_arrays(sequences)
    if not seqs:
        raise ValueError("no training sequences")
    if any(x.size <= p for x in seqs):
        raise ValueError(f"every sequence must be longer than p={p}")
    total = sum(x.size for x in seqs)
    if total < 10 * p:
        raise ValueError(f"need at least {10 * p} training points, got {total}")
    mean = float(np.concatenate(seqs).mean())
    acov0 = _pooled_autocov(seqs, mean, 0)
    if acov0[0] <= 0:
        raise DegenerateFitError("zero variance in training data; autocovariance matrix is singular")

    min_len = min(x.size for x in seqs)
    max_long = max(p + q, min(20, max(p + q, min_len // 2)))
    max_long = min(max_long, min_len - p - q - 1)
    if max_long < 0:
        raise ValueError("sequences too short for Hannan-Rissanen estimation")
    m = _long_ar_order(seqs, mean, max_long)
    if m > 0:
        phi_long, _ = _yule_walker(_pooled_autocov(seqs, mean, m), m)
    else:
        phi_long = np.zeros(0)

    start = m + q
    rows, targets = [], []
    for x in seqs:
        d = x - mean
        n = d.size
        resid = np.zeros(n)
        for t in range(m, n):
            resid[t] = d[t] - (np.dot(phi_long, d[t - m : t][::-1]) if m else 0.0)
        for t in range(max(start, p), n):
            rows.append(np.concatenate([d[t - p : t][::-1], resid[t - q : t][::-1]]))
            targets.append(d[t])
    if len(rows) <= p + q:
        raise DegenerateFitError("not enough regression rows for ARMA estimation")
    X = np.asarray(rows)
    y = np.asarray(targets)
    X = X - X.mean(axis=0)
    y_mean = y.mean()
    y = y - y_mean
    scale = X.std(axis=0)
    if np.any(scale[:p] == 0):
        raise DegenerateFitError("lagged observations are constant; regression is rank deficient")
    scale[scale == 0] = 1.0
    Z = X / scale
    U, s, Vt = np.linalg.svd(Z, full_matrices=False)
    keep = s > _HR_RCOND * s[0]
    if not keep.any():
        raise DegenerateFitError("ARMA regression design has rank zero")
    beta_z = Vt[keep].T @ ((U[:, keep].T @ y) / s[keep])
    beta = beta_z / scale
    resid = y - X @ beta
    a = beta[:p]
    b = beta[p:]
    # Stationary mean of the fitted model equals the pooled sample mean.
    intercept = mean * (1.0 - float(a.sum()))
    return ArmaModel(p, q, intercept, tuple(a.tolist()), tuple(b.tolist()), float(np.mean(resid**2)))


def predict_with_model(model: ArModel | ArmaModel, history: HistoryWindow) -> list[float]:
    """Recursive multi-step forecast with future innovations at zero.

    For ARMA the in-sample innovations are reconstructed over the history
    (pre-sample innovations taken as zero).  Outputs are clamped at 1 kbps.
    """
    p = model.order_p
    x = list(history.values)
    if len(x) < p:
        raise ValueError(f"history of length {len(x)} shorter than model order {p}")
    a = np.asarray(model.coeffs)
    if isinstance(model, ArmaModel):
        b = np.asarray(model.ma_coeffs)
        q = model.order_q
        innov = [0.0] * len(x)
        for t in range(p, len(x)):
            ar = model.intercept + float(np.dot(a, x[t - p : t][::-1]))
            lags = innov[max(0, t - q) : t][::-1]
            ma = float(np.dot(b[: len(lags)], lags))
            innov[t] = x[t] - ar - ma
    else:
        b = np.zeros(0)
        innov = [0.0] * len(x)

    out = []
    for _ in range(history.horizon):
        t = len(x)
        pred = model.intercept + float(np.dot(a, x[t - p : t][::-1]))
        if b.size:
            lags = innov[max(0, t - b.size) : t][::-1]
            pred += float(np.dot(b[: len(lags)], lags))
        x.append(pred)
        innov.append(0.0)
        out.append(max(pred, MIN_PREDICTION_KBPS))
    return out


# --------------------------------------------------------------------------
# Predictor objects used by the evaluation and the simulator


class Predictor(Protocol):
    name: str

    def predict(self, history: Sequence[float], horizon: int) -> list[float]: ...


@dataclass(frozen=True)
class LastSample:
    name: str = "ls"

    def predict(self, history, horizon):
        return predict_last_sample(HistoryWindow(tuple(history), horizon))


@dataclass(frozen=True)
class ArithmeticMean:
    p: int = DEFAULT_WINDOW
    name: str = "am"

    def predict(self, history, horizon):
        return predict_arithmetic_mean(HistoryWindow(tuple(history), horizon), self.p)


@dataclass(frozen=True)
class HarmonicMean:
    p: int = DEFAULT_WINDOW
    name: str = "hm"

    def predict(self, history, horizon):
        return predict_harmonic_mean(HistoryWindow(tuple(history), horizon), self.p)


@dataclass(frozen=True)
class ModelPredictor:
    """AR/ARMA forecaster; short histories are left-padded with their own mean."""

    model: ArModel | ArmaModel
    name: str = "ar"

    def predict(self, history, horizon):
        values = list(history)
        if not values:
            raise ValueError("history must contain at least one value")
        p = self.model.order_p
        if len(values) < p:
            values = [math.fsum(values) / len(values)] * (p - len(values)) + values
        return predict_with_model(self.model, HistoryWindow(tuple(values), horizon))


# --------------------------------------------------------------------------
# Error metric


def compute_error(predicted: float, actual: float) -> float:
    """Absolute normalized error ``|predicted - actual| / actual``."""
    if not actual > 0:
        raise ValueError("actual throughput must be positive")
    return abs(predicted - actual) / actual


def aggregate_errors(
    records: Iterable[PredictionRecord],
    within_percentile: float = 90.0,
    across_percentile: float = 50.0,
) -> float:
    """Two-stage summary: per-session percentile, then percentile across sessions."""
    by_session: dict[str, list[float]] = {}
    for r in records:
        by_session.setdefault(r.session_id, []).append(r.err)
    if not by_session:
        raise ValueError("no prediction records to aggregate")
    for q in (within_percentile, across_percentile):
        if not 0 <= q <= 100:
            raise ValueError("percentiles must lie in [0, 100]")
    per_session = [percentile(errs, within_percentile) for errs in by_session.values()]
    return percentile(per_session, across_percentile)


PREDICTION_COLUMNS = ("session_id", "slot", "predicted_kbps", "actual_kbps", "err")


def write_predictions_csv(records: Iterable[PredictionRecord], stream: IO[str]) -> None:
    writer = csv.writer(stream, lineterminator="\n")
    writer.writerow(PREDICTION_COLUMNS)
    for r in records:
        writer.writerow([r.session_id, r.slot, repr(r.predicted_kbps), repr(r.actual_kbps), repr(r.err)])


def read_predictions_csv(stream: IO[str]) -> list[PredictionRecord]:
    reader = csv.DictReader(stream)
    return [
        PredictionRecord(
            row["session_id"],
            int(row["slot"]),
            float(row["predicted_kbps"]),
            float(row["actual_kbps"]),
            float(row["err"]),
        )
        for row in reader
    ]


# --------------------------------------------------------------------------
# Model files


def model_to_dict(model: ArModel | ArmaModel) -> dict:
    if isinstance(model, ArmaModel):
        return {
            "type": "arma",
            "order_p": model.order_p,
            "order_q": model.order_q,
            "intercept": model.intercept,
            "coeffs": list(model.coeffs),
            "ma_coeffs": list(model.ma_coeffs),
            "noise_variance": model.noise_variance,
        }
    return {
        "type": "ar",
        "order_p": model.order_p,
        "intercept": model.intercept,
        "coeffs": list(model.coeffs),
        "noise_variance": model.noise_variance,
    }


def model_from_dict(data: dict) -> ArModel | ArmaModel:
    if data.get("type", "ar") == "arma" or "ma_coeffs" in data:
        return ArmaModel(
            int(data["order_p"]),
            int(data["order_q"]),
            float(data["intercept"]),
            tuple(data["coeffs"]),
            tuple(data["ma_coeffs"]),
            float(data["noise_variance"]),
        )
    return ArModel(
        int(data["order_p"]), float(data["intercept"]), tuple(data["coeffs"]), float(data["noise_variance"])
    )


def dumps_model(model: ArModel | ArmaModel) -> str:
    return json.dumps(model_to_dict(model), indent=2, sort_keys=True) + "\n"


def loads_model(text: str) -> ArModel | ArmaModel:
    return model_from_dict(json.loads(text))
