"""Trace-driven DASH playback: buffer dynamics, ABR policies and QoE.

Player model.  Chunk ``k`` at bitrate ``R`` carries ``R * chunk_seconds``
kilobits and is downloaded against the trace throughput, held constant
within each epoch (and at the last epoch's value past the end of the
trace).  The first chunk's download time is the startup delay.  Afterwards
the buffer drains in real time while downloading; if it empties, the
shortfall is rebuffering.  Before each download the player idles until the
next chunk fits under the buffer capacity.

QoE = sum q(R_k) - switch_penalty * sum |q(R_k+1) - q(R_k)|
      - rebuffer_penalty * rebuffer_s - startup_penalty * startup_s
"""

from __future__ import annotations

import csv
import itertools
import json
import math
from dataclasses import asdict, dataclass, replace
from functools import lru_cache
from typing import IO, Mapping, Sequence

import numpy as np

from .errors import InfeasibleTraceError
from .trace import SessionTrace

DEFAULT_LADDER_KBPS = (350.0, 600.0, 1000.0, 2000.0, 3000.0)


@dataclass(frozen=True)
class SimulationConfig:
    chunk_seconds: float = 4.0
    ladder_kbps: tuple[float, ...] = DEFAULT_LADDER_KBPS
    # Per-level quality; None means bitrate in Mbps.
    quality: tuple[float, ...] | None = None
    buffer_capacity_seconds: float = 30.0
    switch_penalty: float = 1.0
    rebuffer_penalty: float = 3.0
    # None means equal to rebuffer_penalty.
    startup_penalty: float | None = None
    mpc_horizon_chunks: int = 5
    bb_reservoir_seconds: float = 5.0
    bb_cushion_seconds: float = 20.0
    max_chunks: int | None = None
    dp_buffer_resolution: float = 0.1
    # Plan spaces up to this size are searched exhaustively by offline_optimal.
    exhaustive_plan_limit: int = 20000

    def __post_init__(self):
        ladder = tuple(float(r) for r in self.ladder_kbps)
        object.__setattr__(self, "ladder_kbps", ladder)
        if not ladder or any(b <= a for a, b in zip(ladder, ladder[1:])) or ladder[0] <= 0:
            raise ValueError("ladder must be non-empty, positive and strictly ascending")
        if self.quality is not None:
            q = tuple(float(v) for v in self.quality)
            object.__setattr__(self, "quality", q)
            if len(q) != len(ladder):
                raise ValueError("quality needs one value per ladder level")
            if any(b < a for a, b in zip(q, q[1:])):
                raise ValueError("quality must be non-decreasing in bitrate")
        if self.chunk_seconds <= 0 or self.buffer_capacity_seconds <= 0:
            raise ValueError("chunk_seconds and buffer_capacity_seconds must be positive")
        if self.buffer_capacity_seconds < self.chunk_seconds:
            raise ValueError("buffer must hold at least one chunk")
        for name in ("switch_penalty", "rebuffer_penalty"):
            if getattr(self, name) < 0:
                raise ValueError(f"{name} must be nonnegative")
        if self.startup_penalty is not None and self.startup_penalty < 0:
            raise ValueError("startup_penalty must be nonnegative")
        if self.mpc_horizon_chunks < 1:
            raise ValueError("mpc_horizon_chunks must be >= 1")
        if not 0 < self.bb_reservoir_seconds < self.bb_cushion_seconds <= self.buffer_capacity_seconds:
            raise ValueError("need 0 < reservoir < cushion <= buffer capacity")
        if self.max_chunks is not None and self.max_chunks < 1:
            raise ValueError("max_chunks must be positive")
        if self.dp_buffer_resolution <= 0:
            raise ValueError("dp_buffer_resolution must be positive")

    @property
    def qualities(self) -> np.ndarray:
        if self.quality is None:
            return np.asarray(self.ladder_kbps) / 1000.0
        return np.asarray(self.quality)

    @property
    def startup_weight(self) -> float:
        return self.rebuffer_penalty if self.startup_penalty is None else self.startup_penalty

    def to_dict(self) -> dict:
        d = asdict(self)
        d["ladder_kbps"] = list(self.ladder_kbps)
        d["quality"] = None if self.quality is None else list(self.quality)
        return d

    @classmethod
    def from_dict(cls, data: Mapping) -> "SimulationConfig":
        known = {f for f in cls.__dataclass_fields__}
        unknown = set(data) - known
        if unknown:
            raise ValueError(f"unknown config keys: {sorted(unknown)}")
        kw = dict(data)
        if "ladder_kbps" in kw:
            kw["ladder_kbps"] = tuple(kw["ladder_kbps"])
        if kw.get("quality") is not None:
            kw["quality"] = tuple(kw["quality"])
        return cls(**kw)


@dataclass(frozen=True)
class PlaybackOutcome:
    session_id: str
    chosen_levels: tuple[int, ...]
    chosen_bitrates: tuple[float, ...]
    total_rebuffer_seconds: float
    startup_seconds: float
    avg_quality: float
    quality_variation_sum: float
    qoe_value: float
    normalized_qoe: float | None = None


def qoe_value(quality_sum, variation_sum, rebuffer_s, startup_s, config: SimulationConfig):
    """The linear QoE; the single place the objective is assembled."""
    return (
        quality_sum
        - config.switch_penalty * variation_sum
        - config.rebuffer_penalty * rebuffer_s
        - config.startup_weight * startup_s
    )


# --------------------------------------------------------------------------
# Dynamics


class ThroughputCurve:
    """Piecewise-constant throughput with its cumulative-kilobits inverse."""

    def __init__(self, rates_kbps: Sequence[float], epoch_seconds: float):
        rates = np.asarray(rates_kbps, dtype=float)
        if rates.ndim != 1 or rates.size == 0 or np.any(rates <= 0):
            raise ValueError("rates must be a non-empty positive vector")
        self.rates = rates
        self.epoch_seconds = float(epoch_seconds)
        self.knots = np.arange(rates.size + 1) * self.epoch_seconds
        self.cum = np.concatenate([[0.0], np.cumsum(rates * self.epoch_seconds)])

    @property
    def end(self) -> float:
        return self.knots[-1]

    def kilobits_by(self, t):
        t = np.asarray(t, dtype=float)
        inside = np.interp(t, self.knots, self.cum)
        return np.where(t <= self.end, inside, self.cum[-1] + (t - self.end) * self.rates[-1])

    def finish_time(self, start, kilobits):
        target = self.kilobits_by(start) + kilobits
        inside = np.interp(target, self.cum, self.knots)
        return np.where(target <= self.cum[-1], inside, self.end + (target - self.cum[-1]) / self.rates[-1])


def _advance(curve: ThroughputCurve, time, buffer, first: bool, kilobits, config: SimulationConfig):
    """Download one chunk from state ``(time, buffer)``; vectorized over candidates.

    Returns ``(time, buffer, rebuffer, startup, download_seconds)`` after
    the download.
    """
    L = config.chunk_seconds
    if first:
        end = curve.finish_time(time, kilobits)
        startup = end - time
        return end, np.full_like(end, L), np.zeros_like(end), startup, startup
    idle = np.maximum(buffer + L - config.buffer_capacity_seconds, 0.0)
    start = time + idle
    buf = buffer - idle
    end = curve.finish_time(start, kilobits)
    dl = end - start
    rebuf = np.maximum(dl - buf, 0.0)
    return end, np.maximum(buf - dl, 0.0) + L, rebuf, np.zeros_like(end), dl


def num_chunks(trace: SessionTrace, config: SimulationConfig) -> int:
    k = int(math.floor(trace.duration_seconds / config.chunk_seconds + 1e-9))
    if config.max_chunks is not None:
        k = min(k, config.max_chunks)
    lowest = config.ladder_kbps[0] * config.chunk_seconds
    if k < 1 or float(np.sum(trace.values)) * trace.epoch_seconds < lowest:
        raise InfeasibleTraceError(
            f"session {trace.session_id!r}: trace cannot carry one chunk at the lowest bitrate"
        )
    return k


@dataclass(frozen=True)
class PlayerState:
    chunk_index: int
    num_chunks: int
    time: float
    buffer: float
    last_level: int | None
    last_throughput_kbps: float | None
    observed_epochs: tuple[float, ...]
    epoch_seconds: int


def simulate(trace: SessionTrace, policy, config: SimulationConfig = SimulationConfig()) -> PlaybackOutcome:
    """Play ``trace`` with ``policy`` choosing each chunk's ladder level.

    ``policy`` exposes ``select(state, config) -> level``; an optional
    ``prepare(trace, config)`` returns a per-session policy.
    """
    if hasattr(policy, "prepare"):
        policy = policy.prepare(trace, config)
    curve = ThroughputCurve(trace.samples, trace.epoch_seconds)
    k_total = num_chunks(trace, config)
    ladder = config.ladder_kbps
    E = trace.epoch_seconds

    t, buf = 0.0, 0.0
    levels: list[int] = []
    rebuffer = startup = 0.0
    last_tput = None
    for k in range(k_total):
        observed = trace.samples[: min(int(t // E), len(trace))]
        state = PlayerState(k, k_total, t, buf, levels[-1] if levels else None, last_tput, observed, E)
        lvl = int(policy.select(state, config))
        if not 0 <= lvl < len(ladder):
            raise ValueError(f"policy returned invalid level {lvl}")
        size = ladder[lvl] * config.chunk_seconds
        t_new, buf_new, rb, st, dl = _advance(curve, np.float64(t), np.float64(buf), k == 0, size, config)
        last_tput = size / float(dl) if dl > 0 else None
        t, buf = float(t_new), float(buf_new)
        rebuffer += float(rb)
        startup += float(st)
        levels.append(lvl)
    return _outcome(trace.session_id, levels, rebuffer, startup, config)


def _outcome(session_id, levels, rebuffer, startup, config) -> PlaybackOutcome:
    q = config.qualities
    quals = q[np.asarray(levels)]
    quality_sum = float(np.sum(quals))
    variation = float(np.sum(np.abs(np.diff(quals))))
    return PlaybackOutcome(
        session_id=session_id,
        chosen_levels=tuple(levels),
        chosen_bitrates=tuple(config.ladder_kbps[l] for l in levels),
        total_rebuffer_seconds=rebuffer,
        startup_seconds=startup,
        avg_quality=quality_sum / len(levels),
        quality_variation_sum=variation,
        qoe_value=qoe_value(quality_sum, variation, rebuffer, startup, config),
    )


# --------------------------------------------------------------------------
# Policies


@dataclass(frozen=True)
class FixedPolicy:
    bitrate_kbps: float

    def select(self, state, config):
        try:
            return config.ladder_kbps.index(float(self.bitrate_kbps))
        except ValueError:
            raise ValueError(f"{self.bitrate_kbps} kbps is not on the ladder") from None


@dataclass(frozen=True)
class PlanPolicy:
    """Replays a fixed sequence of ladder levels."""

    levels: tuple[int, ...]

    def select(self, state, config):
        return self.levels[state.chunk_index]


def policy_buffer_based(buffer_seconds: float, config: SimulationConfig) -> int:
    """Reservoir/cushion rate map; returns a ladder level index.

    Between reservoir and cushion the target bitrate moves linearly from the
    lowest to the highest rung and is rounded down to a ladder level.
    """
    if buffer_seconds < 0:
        raise ValueError("buffer must be nonnegative")
    ladder = config.ladder_kbps
    lo, hi = config.bb_reservoir_seconds, config.bb_cushion_seconds
    if buffer_seconds <= lo:
        return 0
    if buffer_seconds >= hi:
        return len(ladder) - 1
    target = ladder[0] + (buffer_seconds - lo) / (hi - lo) * (ladder[-1] - ladder[0])
    return max(i for i, r in enumerate(ladder) if r <= target)


@dataclass(frozen=True)
class BufferBasedPolicy:
    name: str = "bb"

    def select(self, state, config):
        return policy_buffer_based(state.buffer, config)


@lru_cache(maxsize=64)
def _plans(num_levels: int, horizon: int) -> np.ndarray:
    """All level sequences in lexicographic order, shape (n**h, h)."""
    return np.array(list(itertools.product(range(num_levels), repeat=horizon)), dtype=np.int64).reshape(-1, horizon)


def plan_scores(
    curve: ThroughputCurve,
    horizon: int,
    start_index: int,
    time: float,
    buffer: float,
    last_level: int | None,
    config: SimulationConfig,
) -> np.ndarray:
    """QoE contribution of every level sequence of length ``horizon``.

    Scores are indexed like ``_plans(len(ladder), horizon)``.  Sequences
    sharing a prefix share its simulation: the search tree is expanded one
    chunk at a time in lexicographic order.
    """
    q = config.qualities
    ladder = np.asarray(config.ladder_kbps)
    n_lv = ladder.size
    t = np.array([float(time)])
    b = np.array([float(buffer)])
    qsum = np.zeros(1)
    var = np.zeros(1)
    rebuf = np.zeros(1)
    stall = np.zeros(1)
    prev = None if last_level is None else np.array([last_level])
    for j in range(horizon):
        n = t.size
        src = np.repeat(np.arange(n), n_lv)
        lv = np.tile(np.arange(n_lv), n)
        t, b, rb, st, _ = _advance(
            curve, t[src], b[src], start_index + j == 0, ladder[lv] * config.chunk_seconds, config
        )
        qsum = qsum[src] + q[lv]
        var = var[src]
        if prev is not None:
            var = var + np.abs(q[lv] - q[prev[src]])
        rebuf = rebuf[src] + rb
        stall = stall[src] + st
        prev = lv
    return qoe_value(qsum, var, rebuf, stall, config)


class MpcPolicy:
    """Receding-horizon planner over per-epoch throughput forecasts.

    Every ladder sequence over the horizon is scored with the QoE objective
    under the forecast; the first level of the best (lexicographically
    lowest on ties) sequence is played.  Forecasts come from
    ``predictor.predict(history, n_epochs)`` over the completed epochs.
    Before the first epoch completes there is no epoch history; every
    variant then plans on the throughput measured for the previous chunk,
    and the very first chunk is fetched at the lowest level.
    """

    def __init__(self, predictor, horizon: int | None = None, name: str | None = None):
        self.predictor = predictor
        self.horizon = horizon
        self.name = name or f"mpc:{getattr(predictor, 'name', 'custom')}"
        self._cache: dict = {}

    def forecast_epochs(self, config: SimulationConfig, epoch_seconds: float) -> int:
        h = self.horizon or config.mpc_horizon_chunks
        return math.ceil(h * config.chunk_seconds / epoch_seconds) + 1

    def forecast(self, state: PlayerState, config: SimulationConfig) -> list[float] | None:
        """Rates for epochs ``len(observed_epochs)`` onwards."""
        n = self.forecast_epochs(config, state.epoch_seconds)
        if not state.observed_epochs:
            if state.last_throughput_kbps is None:
                return None
            return [state.last_throughput_kbps] * n
        history = state.observed_epochs
        key = (history, n)
        if key not in self._cache:
            self._cache[key] = [float(v) for v in self.predictor.predict(history, n)]
        return self._cache[key]

    def select(self, state: PlayerState, config: SimulationConfig) -> int:
        rates = self.forecast(state, config)
        if rates is None:
            return 0
        h = min(self.horizon or config.mpc_horizon_chunks, state.num_chunks - state.chunk_index)
        curve = ThroughputCurve(list(state.observed_epochs) + list(rates), state.epoch_seconds)
        scores = plan_scores(curve, h, state.chunk_index, state.time, state.buffer, state.last_level, config)
        # Lexicographic order: the first level is the block index.
        return int(np.argmax(scores)) // len(config.ladder_kbps) ** (h - 1)


class PerfectForesightMpc(MpcPolicy):
    """MPC fed the true future trace instead of predictions."""

    def __init__(self, horizon: int | None = None, trace: SessionTrace | None = None):
        super().__init__(None, horizon, name="mpc:oracle")
        self.trace = trace

    def prepare(self, trace, config):
        return PerfectForesightMpc(self.horizon, trace)

    def forecast(self, state, config):
        return list(self.trace.samples[len(state.observed_epochs) :])


class OptimalPolicy:
    """Plays the offline-optimal plan for each session."""

    name = "optimal"

    def prepare(self, trace, config):
        return PlanPolicy(offline_optimal(trace, config).chosen_levels)


# --------------------------------------------------------------------------
# Offline optimum


def _exhaustive_plan(curve, k_total, config) -> tuple[int, ...]:
    scores = plan_scores(curve, k_total, 0, 0.0, 0.0, None, config)
    return tuple(int(v) for v in _plans(len(config.ladder_kbps), k_total)[int(np.argmax(scores))])


def _dp_plan(curve, k_total, config, epoch_seconds) -> tuple[int, ...]:
    """Forward DP keyed by (previous level, buffer bin, epoch of clock).

    Each cell keeps the exact continuous state of its best partial plan, so
    the surviving plans replay without discretization error.
    """
    q = config.qualities
    ladder = np.asarray(config.ladder_kbps)
    n_lv = ladder.size
    res = config.dp_buffer_resolution
    n_bins = int(math.ceil((config.buffer_capacity_seconds + config.chunk_seconds) / res)) + 2

    t = np.zeros(1)
    b = np.zeros(1)
    value = np.zeros(1)
    prev = np.full(1, -1)
    parents: list[np.ndarray] = []
    chosen: list[np.ndarray] = []
    for k in range(k_total):
        n = t.size
        src = np.repeat(np.arange(n), n_lv)
        lv = np.tile(np.arange(n_lv), n)
        t2, b2, rb, st, _ = _advance(curve, t[src], b[src], k == 0, ladder[lv] * config.chunk_seconds, config)
        gain = q[lv]
        if k:
            gain = gain - config.switch_penalty * np.abs(q[lv] - q[prev[src]])
        v2 = value[src] + gain - config.rebuffer_penalty * rb - config.startup_weight * st
        epoch = np.floor(t2 / epoch_seconds).astype(np.int64)
        bins = np.minimum(np.floor(b2 / res).astype(np.int64), n_bins - 1)
        keys = (lv * n_bins + bins) * (epoch.max() - epoch.min() + 1) + (epoch - epoch.min())
        order = np.lexsort((np.arange(src.size), -v2, keys))
        ks = keys[order]
        first = np.concatenate([[True], ks[1:] != ks[:-1]])
        keep = order[first]
        t, b, value, prev = t2[keep], b2[keep], v2[keep], lv[keep]
        parents.append(src[keep])
        chosen.append(lv[keep])

    idx = int(np.argmax(value))
    plan = []
    for k in range(k_total - 1, -1, -1):
        plan.append(int(chosen[k][idx]))
        idx = int(parents[k][idx])
    return tuple(reversed(plan))


def offline_optimal(trace: SessionTrace, config: SimulationConfig = SimulationConfig()) -> PlaybackOutcome:
    """Best plan with perfect knowledge of the trace, replayed through ``simulate``.

    Small plan spaces are searched exhaustively; otherwise the DP above.
    """
    k_total = num_chunks(trace, config)
    curve = ThroughputCurve(trace.samples, trace.epoch_seconds)
    if len(config.ladder_kbps) ** k_total <= config.exhaustive_plan_limit:
        plan = _exhaustive_plan(curve, k_total, config)
    else:
        plan = _dp_plan(curve, k_total, config, trace.epoch_seconds)
    return simulate(trace, PlanPolicy(plan), config)


# --------------------------------------------------------------------------
# Corpus evaluation


@dataclass(frozen=True)
class QoeRow:
    session_id: str
    policy: str
    outcome: PlaybackOutcome
    optimal_qoe: float
    flagged: bool


def normalize(outcome: PlaybackOutcome, optimal_qoe: float) -> PlaybackOutcome:
    if optimal_qoe > 0:
        return replace(outcome, normalized_qoe=outcome.qoe_value / optimal_qoe)
    return replace(outcome, normalized_qoe=None)


def evaluate_qoe(
    sessions: Sequence[SessionTrace],
    policies: Mapping[str, object],
    config: SimulationConfig = SimulationConfig(),
) -> list[QoeRow]:
    """Simulate every (session, policy) pair and normalize by the offline optimum.

    Sessions whose optimal QoE is not positive keep ``normalized_qoe=None``
    and are flagged.
    """
    rows = []
    for s in sessions:
        opt = offline_optimal(s, config)
        for name, policy in policies.items():
            out = opt if isinstance(policy, OptimalPolicy) else simulate(s, policy, config)
            rows.append(QoeRow(s.session_id, name, normalize(out, opt.qoe_value), opt.qoe_value, opt.qoe_value <= 0))
    return rows


QOE_COLUMNS = (
    "session_id",
    "policy",
    "qoe_value",
    "normalized_qoe",
    "avg_quality",
    "quality_variation_sum",
    "rebuffer_seconds",
    "startup_seconds",
    "flag",
)


def write_qoe_csv(rows: Sequence[QoeRow], stream: IO[str]) -> None:
    """One row per (session, policy); ``flag`` marks non-positive optima."""
    writer = csv.writer(stream, lineterminator="\n")
    writer.writerow(QOE_COLUMNS)
    for r in rows:
        o = r.outcome
        writer.writerow(
            [
                r.session_id,
                r.policy,
                repr(o.qoe_value),
                "" if o.normalized_qoe is None else repr(o.normalized_qoe),
                repr(o.avg_quality),
                repr(o.quality_variation_sum),
                repr(o.total_rebuffer_seconds),
                repr(o.startup_seconds),
                "nonpositive_optimal" if r.flagged else "",
            ]
        )


def load_config(path) -> SimulationConfig:
    with open(path, encoding="utf-8") as fh:
        return SimulationConfig.from_dict(json.load(fh))
