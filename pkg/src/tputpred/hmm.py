"""Gaussian-emission hidden Markov model for per-epoch throughput.

Conventions: ``transition[i, j]`` is the probability of moving from state
``i`` to state ``j`` (rows sum to one), so a row distribution ``pi`` is
advanced one epoch by ``pi @ transition``.  Trained models list their
states in ascending order of emission mean.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass
from typing import Sequence

import numpy as np

from .errors import DegenerateFitError, NumericalError
from .predictors import PredictionRecord, aggregate_errors, compute_error
from .trace import SessionTrace

DEFAULT_NUM_STATES = 6
_SIMPLEX_TOL = 1e-9
_LOG_2PI = math.log(2.0 * math.pi)


def _frozen(a) -> np.ndarray:
    arr = np.array(a, dtype=float)
    arr.setflags(write=False)
    return arr


@dataclass(frozen=True, eq=False)
class HmmModel:
    initial: np.ndarray
    transition: np.ndarray
    emission_means: np.ndarray
    emission_variances: np.ndarray

    def __post_init__(self):
        for name in ("initial", "transition", "emission_means", "emission_variances"):
            object.__setattr__(self, name, _frozen(getattr(self, name)))
        m = self.initial.size
        if m < 1 or self.initial.ndim != 1:
            raise ValueError("initial must be a non-empty vector")
        if self.transition.shape != (m, m):
            raise ValueError(f"transition must be {m}x{m}")
        if self.emission_means.shape != (m,) or self.emission_variances.shape != (m,):
            raise ValueError("need one emission mean and variance per state")
        if np.any(self.initial < 0) or abs(self.initial.sum() - 1) > _SIMPLEX_TOL:
            raise ValueError("initial must be a probability vector")
        if np.any(self.transition < 0) or np.any(np.abs(self.transition.sum(axis=1) - 1) > _SIMPLEX_TOL):
            raise ValueError("transition rows must be probability vectors")
        if not np.all(self.emission_means > 0):
            raise ValueError("emission means must be positive")
        if not np.all(self.emission_variances > 0):
            raise ValueError("emission variances must be positive")

    @property
    def num_states(self) -> int:
        return self.initial.size

    @property
    def emissions(self) -> list[tuple[float, float]]:
        return list(zip(self.emission_means.tolist(), self.emission_variances.tolist()))

    def __eq__(self, other):
        if not isinstance(other, HmmModel):
            return NotImplemented
        return all(
            np.array_equal(getattr(self, f), getattr(other, f))
            for f in ("initial", "transition", "emission_means", "emission_variances")
        )

    def permuted(self, order: Sequence[int]) -> "HmmModel":
        """Same model with state ``order[k]`` relabelled as state ``k``."""
        idx = np.asarray(order)
        return HmmModel(
            self.initial[idx],
            self.transition[np.ix_(idx, idx)],
            self.emission_means[idx],
            self.emission_variances[idx],
        )

    def to_dict(self) -> dict:
        return {
            "num_states": self.num_states,
            "initial": self.initial.tolist(),
            "transition": self.transition.tolist(),
            "emission_means": self.emission_means.tolist(),
            "emission_variances": self.emission_variances.tolist(),
        }

    @classmethod
    def from_dict(cls, data: dict) -> "HmmModel":
        model = cls(
            data["initial"], data["transition"], data["emission_means"], data["emission_variances"]
        )
        if int(data.get("num_states", model.num_states)) != model.num_states:
            raise ValueError("num_states disagrees with parameter shapes")
        return model

    def dumps(self) -> str:
        return json.dumps(self.to_dict(), indent=2, sort_keys=True) + "\n"

    @classmethod
    def loads(cls, text: str) -> "HmmModel":
        return cls.from_dict(json.loads(text))


@dataclass(frozen=True)
class StatePosterior:
    probs: tuple[float, ...]
    as_of_slot: int

    def __post_init__(self):
        probs = tuple(float(v) for v in self.probs)
        object.__setattr__(self, "probs", probs)
        if any(v < 0 for v in probs) or abs(math.fsum(probs) - 1) > _SIMPLEX_TOL:
            raise ValueError("posterior must be a probability vector")


# --------------------------------------------------------------------------
# Recursions


def _log_emission(means: np.ndarray, variances: np.ndarray, x: np.ndarray) -> np.ndarray:
    """Gaussian log-densities with states on the last axis."""
    x = np.asarray(x, dtype=float)[..., None]
    return -0.5 * (_LOG_2PI + np.log(variances) + (x - means) ** 2 / variances)


def _scaled_emission(logb: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    shift = logb.max(axis=-1)
    return np.exp(logb - shift[..., None]), shift


def forward_pass(model: HmmModel, observations) -> tuple[np.ndarray, float]:
    """Scaled forward recursion.

    Returns the filtered state distributions for every prefix (row ``t`` is
    ``P(X_t | W_{0:t})``) and the log-likelihood of the whole sequence.
    """
    x = np.asarray(observations, dtype=float)
    if x.ndim != 1 or x.size == 0:
        raise ValueError("observations must be a non-empty sequence")
    if np.any(x <= 0):
        raise ValueError("observations must be positive")
    b, shift = _scaled_emission(_log_emission(model.emission_means, model.emission_variances, x))
    P = model.transition
    alpha = np.empty_like(b)
    loglik = 0.0
    a = model.initial * b[0]
    for t in range(x.size):
        if t:
            a = (alpha[t - 1] @ P) * b[t]
        c = a.sum()
        if not c > 0 or not np.isfinite(c):
            raise NumericalError(f"forward recursion underflowed at slot {t}")
        alpha[t] = a / c
        loglik += math.log(c) + shift[t]
    return alpha, loglik


def forward_filter(model: HmmModel, observations) -> StatePosterior:
    """Filtered distribution of the state at the last observed slot."""
    alpha, _ = forward_pass(model, observations)
    return StatePosterior(tuple(alpha[-1]), len(alpha) - 1)


def log_likelihood(model: HmmModel, observations) -> float:
    return forward_pass(model, observations)[1]


def propagate(probs, transition: np.ndarray, steps: int) -> np.ndarray:
    """``probs @ transition**steps``."""
    if steps < 0:
        raise ValueError("steps must be nonnegative")
    return np.asarray(probs, dtype=float) @ np.linalg.matrix_power(transition, steps)


def predict_hmm(model: HmmModel, posterior: StatePosterior, tau: int = 0) -> float:
    """Emission mean of the most likely state ``tau + 1`` epochs after the posterior."""
    if tau < 0:
        raise ValueError("tau must be nonnegative")
    dist = propagate(posterior.probs, model.transition, tau + 1)
    return float(model.emission_means[int(np.argmax(dist))])


# --------------------------------------------------------------------------
# Baum-Welch


@dataclass(frozen=True)
class HmmFit:
    model: HmmModel
    log_likelihoods: tuple[float, ...]
    converged: bool

    @property
    def iterations(self) -> int:
        return len(self.log_likelihoods)


def _group_by_length(seqs: list[np.ndarray]) -> list[np.ndarray]:
    by_len: dict[int, list[np.ndarray]] = {}
    for x in seqs:
        by_len.setdefault(x.size, []).append(x)
    return [np.vstack(by_len[n]) for n in sorted(by_len)]


def _e_step(params, groups):
    """Batched scaled forward-backward over equal-length sequence groups.

    Returns total log-likelihood, state posteriors per group, and the pooled
    expected initial-state and transition counts.
    """
    init, P, means, variances = params
    m = init.size
    loglik = 0.0
    gammas = []
    init_counts = np.zeros(m)
    trans_counts = np.zeros((m, m))
    for X in groups:
        s, n = X.shape
        b, shift = _scaled_emission(_log_emission(means, variances, X))
        alpha = np.empty((s, n, m))
        scale = np.empty((s, n))
        a = init * b[:, 0]
        for t in range(n):
            if t:
                a = (alpha[:, t - 1] @ P) * b[:, t]
            c = a.sum(axis=1)
            scale[:, t] = c
            alpha[:, t] = a / c[:, None]
        if not np.all(scale > 0) or not np.all(np.isfinite(scale)):
            return -math.inf, None, None, None
        loglik += float(np.log(scale).sum() + shift.sum())

        beta = np.empty((s, n, m))
        beta[:, n - 1] = 1.0
        for t in range(n - 2, -1, -1):
            beta[:, t] = ((b[:, t + 1] * beta[:, t + 1]) @ P.T) / scale[:, t + 1, None]
        gamma = alpha * beta
        gamma /= gamma.sum(axis=2, keepdims=True)
        gammas.append(gamma)
        init_counts += gamma[:, 0].sum(axis=0)
        if n > 1:
            w = b[:, 1:] * beta[:, 1:] / scale[:, 1:, None]
            trans_counts += P * np.einsum("sti,stj->ij", alpha[:, :-1], w)
    return loglik, gammas, init_counts, trans_counts


def _m_step(params, groups, gammas, init_counts, trans_counts, var_floor):
    init, P, means, variances = params
    new_init = init_counts / init_counts.sum()
    row = trans_counts.sum(axis=1)
    new_P = P.copy()
    ok = row > 0
    new_P[ok] = trans_counts[ok] / row[ok, None]

    weight = np.zeros(init.size)
    wsum = np.zeros(init.size)
    for X, g in zip(groups, gammas):
        weight += g.sum(axis=(0, 1))
        wsum += np.einsum("stm,st->m", g, X)
    live = weight > 1e-300
    new_means = means.copy()
    new_means[live] = wsum[live] / weight[live]
    sq = np.zeros(init.size)
    for X, g in zip(groups, gammas):
        sq += np.einsum("stm,stm->m", g, (X[:, :, None] - new_means) ** 2)
    new_vars = variances.copy()
    new_vars[live] = np.maximum(sq[live] / weight[live], var_floor)
    return new_init, new_P, new_means, new_vars


def _initial_params(
    pooled: np.ndarray, m: int, rng: np.random.Generator, spread_quantiles: bool, self_bias: float = 0.5
):
    if spread_quantiles:
        qs = (np.arange(m) + 0.5) / m
    else:
        qs = np.sort(rng.random(m))
    means = np.quantile(pooled, qs)
    spread = pooled.std()
    means = np.sort(means + rng.normal(0.0, 1e-3 * spread, m))
    means = np.maximum(means, np.finfo(float).tiny)
    variances = np.full(m, pooled.var())
    P = np.full((m, m), (1.0 - self_bias) / m) + self_bias * np.eye(m)
    init = np.full(m, 1.0 / m)
    return init, P, means, variances


def fit_hmm(
    sequences: Sequence[SessionTrace | Sequence[float]],
    num_states: int = DEFAULT_NUM_STATES,
    max_iters: int = 200,
    tol: float = 1e-3,
    seed: int = 0,
    restarts: int = 1,
) -> HmmFit:
    """Baum-Welch over independent sequences.

    The first start places emission means at evenly spaced quantiles of the
    pooled data (plus seeded jitter); further restarts draw the quantile
    levels at random.  Every start uses the pooled variance for each state
    and a diagonal-biased uniform transition matrix.  Iteration
    stops once the log-likelihood gain drops below ``tol``.  Among restarts
    the highest final log-likelihood wins.
    """
    if num_states < 1:
        raise ValueError("num_states must be >= 1")
    if max_iters < 1 or tol <= 0 or restarts < 1:
        raise ValueError("max_iters and restarts must be >= 1 and tol > 0")
    seqs = [s.values if isinstance(s, SessionTrace) else np.asarray(s, dtype=float) for s in sequences]
    if not seqs:
        raise ValueError("no training sequences")
    pooled = np.concatenate(seqs)
    if np.any(pooled <= 0) or not np.all(np.isfinite(pooled)):
        raise ValueError("training observations must be positive and finite")
    if pooled.size < 10 * num_states:
        raise ValueError(f"need at least {10 * num_states} observations for {num_states} states")
    if np.unique(pooled).size < num_states:
        raise DegenerateFitError(
            f"{num_states} states requested but data has only {np.unique(pooled).size} distinct values"
        )
    pooled_var = float(pooled.var())
    var_floor = 1e-6 * pooled_var if pooled_var > 0 else 1e-6
    groups = _group_by_length(seqs)
    rng = np.random.default_rng(seed)

    best = None
    for r in range(restarts):
        params = _initial_params(pooled, num_states, rng, spread_quantiles=r == 0)
        params = params[:3] + (np.maximum(params[3], var_floor),)
        trace: list[float] = []
        converged = False
        for it in range(max_iters):
            ll, gammas, ic, tc = _e_step(params, groups)
            if not math.isfinite(ll):
                raise NumericalError(f"non-finite log-likelihood at iteration {it}")
            trace.append(ll)
            if len(trace) > 1 and trace[-1] - trace[-2] < tol:
                converged = True
                break
            if it == max_iters - 1:
                break
            params = _m_step(params, groups, gammas, ic, tc, var_floor)
        if best is None or trace[-1] > best[1][-1]:
            best = (params, trace, converged)

    (init, P, means, variances), trace, converged = best
    model = HmmModel(init / init.sum(), P / P.sum(axis=1, keepdims=True), means, variances)
    model = model.permuted(np.argsort(model.emission_means, kind="stable"))
    return HmmFit(model, tuple(trace), converged)


# --------------------------------------------------------------------------
# Online prediction and evaluation


@dataclass(frozen=True, eq=False)
class HmmPredictor:
    model: HmmModel
    name: str = "hmm"

    def _from_distribution(self, probs, horizon: int) -> list[float]:
        P = self.model.transition
        dist = np.asarray(probs, dtype=float)
        out = []
        for _ in range(horizon):
            dist = dist @ P
            out.append(float(self.model.emission_means[int(np.argmax(dist))]))
        return out

    def predict(self, history, horizon: int) -> list[float]:
        """Forecasts for the next ``horizon`` epochs.

        An empty history falls back to the learned initial distribution.
        """
        if len(history) == 0:
            init = self.model.initial
            first = float(self.model.emission_means[int(np.argmax(init))])
            return [first] + self._from_distribution(init, horizon - 1)
        post = forward_filter(self.model, history)
        return self._from_distribution(post.probs, horizon)

    def predict_prefixes(self, values, start: int, horizon: int = 1) -> list[list[float]]:
        """``predict(values[:i], horizon)`` for every ``i`` in ``start..len(values)-1``.

        Shares one forward pass across prefixes.
        """
        values = np.asarray(values, dtype=float)
        alpha, _ = forward_pass(self.model, values[:-1]) if values.size > 1 else (np.empty((0, 0)), 0.0)
        out = []
        for i in range(start, values.size):
            if i == 0:
                out.append(self.predict([], horizon))
            else:
                out.append(self._from_distribution(alpha[i - 1], horizon))
        return out


@dataclass(frozen=True)
class EvalConfig:
    warmup: int = 1
    horizon: int = 5
    within_percentile: float = 90.0
    across_percentile: float = 50.0
    max_iters: int = 200
    tol: float = 1e-3
    restarts: int = 1
    seed: int = 0


def evaluate_online(predictor, session: SessionTrace, warmup: int = 1, horizon: int = 5) -> list[PredictionRecord]:
    """One-step-ahead errors for every slot after ``warmup``.

    Slot ``i`` is predicted from ``samples[:i]`` as the first element of a
    ``horizon``-long forecast.
    """
    values = session.samples
    n = len(values)
    if warmup < 0:
        raise ValueError("warmup must be nonnegative")
    if n <= warmup:
        raise ValueError(f"session {session.session_id!r} has no slots after warmup={warmup}")
    fast = getattr(predictor, "predict_prefixes", None)
    if fast is not None:
        forecasts = [f[0] for f in fast(values, warmup, horizon)]
    else:
        forecasts = [predictor.predict(values[:i], horizon)[0] for i in range(warmup, n)]
    return [
        PredictionRecord(session.session_id, i, float(pred), values[i], compute_error(pred, values[i]))
        for i, pred in zip(range(warmup, n), forecasts)
    ]


def evaluate_corpus(predictor, sessions: Sequence[SessionTrace], warmup: int = 1, horizon: int = 5) -> list[PredictionRecord]:
    records: list[PredictionRecord] = []
    for s in sessions:
        if len(s) > warmup:
            records.extend(evaluate_online(predictor, s, warmup, horizon))
    return records


def sweep_model_size(
    train: Sequence[SessionTrace],
    test: Sequence[SessionTrace],
    candidate_ms: Sequence[int],
    config: EvalConfig = EvalConfig(),
) -> list[tuple[int, float]]:
    """Aggregated test error of an HMM fitted at each candidate state count."""
    train_ids = {s.session_id for s in train}
    if any(s.session_id in train_ids for s in test):
        raise ValueError("train and test splits must be disjoint")
    rows = []
    for m in candidate_ms:
        fit = fit_hmm(train, m, config.max_iters, config.tol, config.seed, config.restarts)
        records = evaluate_corpus(HmmPredictor(fit.model), test, config.warmup, config.horizon)
        rows.append((m, aggregate_errors(records, config.within_percentile, config.across_percentile)))
    return rows
