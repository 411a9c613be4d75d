"""Per-epoch throughput traces: I/O, filtering, stability analytics, synthesis.

All throughput values are in kbps.  One sample is the average throughput
over one epoch (60 s by default).
"""

from __future__ import annotations

import csv
import io
import math
from dataclasses import dataclass
from typing import IO, TYPE_CHECKING, Iterable, Sequence

import numpy as np

from .errors import TraceParseError, TraceValidationError

if TYPE_CHECKING:
    from .hmm import HmmModel

TRACE_HEADER = ("session_id", "epoch_index", "throughput_kbps")
DEFAULT_EPOCH_SECONDS = 60
# Lower clamp for synthesized samples.
SYNTHETIC_FLOOR_KBPS = 1.0


@dataclass(frozen=True)
class SessionTrace:
    session_id: str
    samples: tuple[float, ...]
    epoch_seconds: int = DEFAULT_EPOCH_SECONDS

    def __post_init__(self):
        samples = tuple(float(v) for v in self.samples)
        object.__setattr__(self, "samples", samples)
        if not samples:
            raise TraceValidationError(f"session {self.session_id!r} has no samples")
        for i, v in enumerate(samples):
            if not math.isfinite(v) or v <= 0:
                raise TraceValidationError(
                    f"session {self.session_id!r} epoch {i}: throughput must be "
                    f"positive and finite, got {v!r}"
                )
        if int(self.epoch_seconds) != self.epoch_seconds or self.epoch_seconds <= 0:
            raise TraceValidationError(
                f"session {self.session_id!r}: epoch_seconds must be a positive integer"
            )

    def __len__(self) -> int:
        return len(self.samples)

    @property
    def values(self) -> np.ndarray:
        return np.asarray(self.samples, dtype=float)

    @property
    def duration_seconds(self) -> float:
        return len(self.samples) * self.epoch_seconds


@dataclass(frozen=True)
class StabilityReport:
    session_id: str
    num_epochs: int
    mean_kbps: float
    stddev_kbps: float
    coeff_variation: float
    iqr_spread_kbps: float
    autocorr: tuple[float, ...]
    degenerate: bool


@dataclass(frozen=True)
class BinSummary:
    bin_low_kbps: float
    bin_width_kbps: float
    mean_coeff_variation: float
    session_count: int


# --------------------------------------------------------------------------
# CSV I/O


def parse_traces(
    stream: IO[str] | Iterable[str], epoch_seconds: int = DEFAULT_EPOCH_SECONDS
) -> list[SessionTrace]:
    """Read the ``session_id,epoch_index,throughput_kbps`` CSV format.

    Rows may interleave sessions.  Sessions are returned in order of first
    appearance, each with samples ordered by epoch index.  Line numbers in
    errors count data rows from 1 (the header is line 0).
    """
    reader = csv.reader(stream)
    try:
        header = next(reader)
    except StopIteration:
        raise TraceParseError(0, "missing header") from None
    if tuple(h.strip() for h in header) != TRACE_HEADER:
        raise TraceParseError(0, f"expected header {','.join(TRACE_HEADER)}")

    rows: dict[str, dict[int, float]] = {}
    for lineno, row in enumerate(reader, start=1):
        if not row or (len(row) == 1 and not row[0].strip()):
            continue
        if len(row) != 3:
            raise TraceParseError(lineno, f"expected 3 columns, got {len(row)}")
        sid, epoch_txt, tput_txt = (c.strip() for c in row)
        if not sid:
            raise TraceParseError(lineno, "empty session_id")
        try:
            epoch = int(epoch_txt)
        except ValueError:
            raise TraceParseError(lineno, f"non-integer epoch_index {epoch_txt!r}") from None
        try:
            tput = float(tput_txt)
        except ValueError:
            raise TraceParseError(lineno, f"non-numeric throughput {tput_txt!r}") from None
        if epoch < 0:
            raise TraceParseError(lineno, f"negative epoch_index {epoch}")
        if not math.isfinite(tput) or tput <= 0:
            raise TraceValidationError(
                f"session {sid!r} epoch {epoch}: non-positive throughput {tput_txt!r}"
            )
        epochs = rows.setdefault(sid, {})
        if epoch in epochs:
            raise TraceValidationError(f"session {sid!r}: duplicate epoch_index {epoch}")
        epochs[epoch] = tput

    traces = []
    for sid, epochs in rows.items():
        order = sorted(epochs)
        if order != list(range(len(order))):
            raise TraceValidationError(
                f"session {sid!r}: epoch indices must be contiguous from 0"
            )
        traces.append(SessionTrace(sid, tuple(epochs[e] for e in order), epoch_seconds))
    return traces


def serialize_traces(traces: Sequence[SessionTrace], stream: IO[str]) -> None:
    writer = csv.writer(stream, lineterminator="\n")
    writer.writerow(TRACE_HEADER)
    for tr in traces:
        for i, v in enumerate(tr.samples):
            writer.writerow((tr.session_id, i, repr(v)))


def load_traces(path, epoch_seconds: int = DEFAULT_EPOCH_SECONDS) -> list[SessionTrace]:
    with open(path, newline="", encoding="utf-8") as fh:
        return parse_traces(fh, epoch_seconds)


def traces_to_text(traces: Sequence[SessionTrace]) -> str:
    buf = io.StringIO()
    serialize_traces(traces, buf)
    return buf.getvalue()


# --------------------------------------------------------------------------
# Filtering and stability analytics


def filter_by_duration(sessions: Sequence[SessionTrace], min_epochs: int = 6) -> list[SessionTrace]:
    """Keep sessions lasting strictly more than ``min_epochs`` epochs."""
    if min_epochs < 1:
        raise ValueError("min_epochs must be >= 1")
    return [s for s in sessions if len(s) > min_epochs]


def percentile(values, q: float) -> float:
    """Percentile with linear interpolation at rank ``q/100 * (n - 1)``."""
    arr = np.asarray(values, dtype=float)
    if arr.size == 0:
        raise ValueError("percentile of empty sequence")
    return float(np.percentile(arr, q, method="linear"))


def autocorrelation(x: np.ndarray, max_lag: int) -> tuple[np.ndarray, bool]:
    """Biased (divide-by-T) autocorrelation for lags 1..max_lag.

    Returns ``(acf, degenerate)``; a zero-variance series gives zeros and
    ``degenerate=True``.
    """
    x = np.asarray(x, dtype=float)
    n = x.size
    mu = x.mean()
    var = float(np.mean((x - mu) ** 2))
    if var == 0.0:
        return np.zeros(max_lag), True
    d = x - mu
    acf = np.array([np.dot(d[: n - k], d[k:]) / n / var for k in range(1, max_lag + 1)])
    return acf, False


def compute_stability(trace: SessionTrace, max_lag: int = 5) -> StabilityReport:
    n = len(trace)
    if max_lag < 1:
        raise ValueError("max_lag must be >= 1")
    if max_lag >= n:
        raise ValueError(
            f"session {trace.session_id!r}: max_lag={max_lag} needs at least "
            f"{max_lag + 1} samples, got {n}"
        )
    x = trace.values
    mu = float(x.mean())
    sigma = float(np.sqrt(np.mean((x - mu) ** 2)))
    acf, degenerate = autocorrelation(x, max_lag)
    return StabilityReport(
        session_id=trace.session_id,
        num_epochs=n,
        mean_kbps=mu,
        stddev_kbps=sigma,
        coeff_variation=sigma / mu,
        iqr_spread_kbps=percentile(x, 75) - percentile(x, 25),
        autocorr=tuple(float(v) for v in acf),
        degenerate=degenerate,
    )


def bin_normalized_stddev(
    sessions: Sequence[SessionTrace], bin_width_kbps: float = 800.0
) -> list[BinSummary]:
    """Average coefficient of variation per mean-throughput bin.

    Bins are ``[k*width, (k+1)*width)``; empty bins are omitted and the
    result is sorted by ascending bin.
    """
    if bin_width_kbps <= 0:
        raise ValueError("bin_width_kbps must be positive")
    groups: dict[int, list[float]] = {}
    for s in sessions:
        x = s.values
        mu = float(x.mean())
        cov = float(np.sqrt(np.mean((x - mu) ** 2))) / mu
        groups.setdefault(int(mu // bin_width_kbps), []).append(cov)
    return [
        BinSummary(
            bin_low_kbps=k * bin_width_kbps,
            bin_width_kbps=bin_width_kbps,
            mean_coeff_variation=float(np.mean(covs)),
            session_count=len(covs),
        )
        for k, covs in sorted(groups.items())
    ]


def autocorr_quantiles(
    reports: Sequence[StabilityReport], quantiles=(0, 25, 50, 75, 100)
) -> list[tuple[int, list[float]]]:
    """Per-lag quantiles of R(tau) across non-degenerate sessions."""
    usable = [r for r in reports if not r.degenerate]
    if not usable:
        return []
    max_lag = min(len(r.autocorr) for r in usable)
    out = []
    for lag in range(1, max_lag + 1):
        vals = [r.autocorr[lag - 1] for r in usable]
        out.append((lag, [percentile(vals, q) for q in quantiles]))
    return out


STABILITY_COLUMNS = (
    "session_id",
    "num_epochs",
    "mean_kbps",
    "stddev_kbps",
    "coeff_variation",
    "iqr_spread_kbps",
    "degenerate",
)
BIN_COLUMNS = ("bin_low_kbps", "bin_width_kbps", "mean_coeff_variation", "session_count")


def write_stability_csv(reports: Sequence[StabilityReport], stream: IO[str]) -> None:
    """Columns: STABILITY_COLUMNS followed by ``acf_1 .. acf_L``."""
    max_lag = max((len(r.autocorr) for r in reports), default=0)
    writer = csv.writer(stream, lineterminator="\n")
    writer.writerow(STABILITY_COLUMNS + tuple(f"acf_{k}" for k in range(1, max_lag + 1)))
    for r in reports:
        acf = [repr(v) for v in r.autocorr] + [""] * (max_lag - len(r.autocorr))
        writer.writerow(
            [
                r.session_id,
                r.num_epochs,
                repr(r.mean_kbps),
                repr(r.stddev_kbps),
                repr(r.coeff_variation),
                repr(r.iqr_spread_kbps),
                int(r.degenerate),
            ]
            + acf
        )


def write_bins_csv(bins: Sequence[BinSummary], stream: IO[str]) -> None:
    writer = csv.writer(stream, lineterminator="\n")
    writer.writerow(BIN_COLUMNS)
    for b in bins:
        writer.writerow(
            [repr(b.bin_low_kbps), repr(b.bin_width_kbps), repr(b.mean_coeff_variation), b.session_count]
        )


# --------------------------------------------------------------------------
# Synthetic traces


def generate_synthetic(
    model: "HmmModel",
    num_sessions: int,
    length: int,
    seed: int,
    epoch_seconds: int = DEFAULT_EPOCH_SECONDS,
    id_prefix: str = "syn",
) -> list[SessionTrace]:
    """Sample sessions from a Gaussian-emission HMM.

    Emissions are clamped below at 1 kbps.  Output depends only on the
    arguments.
    """
    if num_sessions < 1 or length < 1:
        raise ValueError("num_sessions and length must be positive")
    rng = np.random.default_rng(seed)
    init_cdf = np.cumsum(model.initial)
    trans_cdf = np.cumsum(model.transition, axis=1)
    means = np.asarray(model.emission_means, dtype=float)
    sds = np.sqrt(np.asarray(model.emission_variances, dtype=float))
    m = len(means)

    u = rng.random((num_sessions, length))
    z = rng.standard_normal((num_sessions, length))
    states = np.empty((num_sessions, length), dtype=np.int64)
    states[:, 0] = np.minimum(np.searchsorted(init_cdf, u[:, 0], side="right"), m - 1)
    for t in range(1, length):
        rows = trans_cdf[states[:, t - 1]]
        states[:, t] = np.minimum((rows <= u[:, t, None]).sum(axis=1), m - 1)
    obs = np.maximum(means[states] + sds[states] * z, SYNTHETIC_FLOOR_KBPS)

    width = max(5, len(str(num_sessions - 1)))
    return [
        SessionTrace(f"{id_prefix}{i:0{width}d}", tuple(obs[i].tolist()), epoch_seconds)
        for i in range(num_sessions)
    ]
