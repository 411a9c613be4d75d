"""Independent reference implementations used as test oracles.

Nothing here imports the package's numerical code paths; each function is
a direct, slow transcription of the definition it checks.
"""

from __future__ import annotations

import itertools
import math

import numpy as np

from tputpred.hmm import HmmModel


def ref_percentile(values, q):
    xs = sorted(float(v) for v in values)
    r = q / 100.0 * (len(xs) - 1)
    lo = math.floor(r)
    hi = min(lo + 1, len(xs) - 1)
    return xs[lo] + (r - lo) * (xs[hi] - xs[lo])


def ref_two_stage(records, within, across):
    by: dict[str, list[float]] = {}
    for r in records:
        by.setdefault(r.session_id, []).append(abs(r.predicted_kbps - r.actual_kbps) / r.actual_kbps)
    return ref_percentile([ref_percentile(v, within) for v in by.values()], across)


def log_gauss(x, mean, var):
    return -((x - mean) ** 2) / (2 * var) - 0.5 * math.log(2 * math.pi * var)


def brute_force_filter(initial, transition, means, variances, obs):
    """Posterior of the last state and log-likelihood by summing over every state path."""
    m = len(initial)
    logs: list[list[float]] = [[] for _ in range(m)]
    for path in itertools.product(range(m), repeat=len(obs)):
        lp = math.log(initial[path[0]]) + log_gauss(obs[0], means[path[0]], variances[path[0]])
        for t in range(1, len(obs)):
            lp += math.log(transition[path[t - 1]][path[t]]) + log_gauss(obs[t], means[path[t]], variances[path[t]])
        logs[path[-1]].append(lp)
    top = max(max(v) for v in logs)
    joint = [math.fsum(math.exp(v - top) for v in vals) for vals in logs]
    total = math.fsum(joint)
    return [j / total for j in joint], top + math.log(total)


def random_hmm(rng: np.random.Generator, m: int) -> HmmModel:
    init = rng.dirichlet(np.ones(m))
    trans = rng.dirichlet(np.ones(m), size=m)
    means = rng.uniform(500, 3000, size=m)
    variances = rng.uniform(100, 600, size=m) ** 2
    return HmmModel(init, trans, means, variances)


def banded_hmm(means, cv=0.07, stay=0.93, near=0.3) -> HmmModel:
    """Sticky chain: ``near`` of the leaving mass to adjacent states, the rest spread over the others."""
    means = np.asarray(means, dtype=float)
    m = means.size
    P = np.zeros((m, m))
    for i in range(m):
        P[i, i] = stay
        nb = [j for j in (i - 1, i + 1) if 0 <= j < m]
        far = [j for j in range(m) if abs(j - i) > 1]
        share_near = near if far else 1.0
        for j in nb:
            P[i, j] += (1 - stay) * share_near / len(nb)
        for j in far:
            P[i, j] += (1 - stay) * (1 - share_near) / len(far)
    return HmmModel(np.full(m, 1.0 / m), P, means, (cv * means) ** 2)


# Six-state ground truth shared by the model-size, predictor and QoE experiments.
REFERENCE_MEANS = (800.0, 1100.0, 1500.0, 2000.0, 2700.0, 3600.0)


def reference_hmm() -> HmmModel:
    return banded_hmm(REFERENCE_MEANS)


# --------------------------------------------------------------------------
# Player


def ref_download(rates, epoch_s, start, kilobits):
    """Finish time of a download, stepping epoch by epoch; the last rate extends forever."""
    t, left = start, kilobits
    while True:
        idx = int(t // epoch_s)
        if idx >= len(rates) - 1:
            return t + left / rates[-1]
        boundary = (idx + 1) * epoch_s
        room = rates[idx] * (boundary - t)
        if left <= room:
            return t + left / rates[idx]
        left -= room
        t = boundary


def ref_play(rates, epoch_s, levels, ladder, chunk_s, capacity, quality=None, start=None):
    """Play ``levels`` and return (qoe_parts, end_state).

    ``start`` is ``(time, buffer, last_level)`` for a mid-session start;
    ``None`` means a fresh session whose first chunk is startup.
    qoe_parts = (quality_sum, variation_sum, rebuffer, startup).
    """
    q = [r / 1000.0 for r in ladder] if quality is None else list(quality)
    fresh = start is None
    t, buf, prev = (0.0, 0.0, None) if fresh else start
    qsum = var = rebuf = startup = 0.0
    for i, lv in enumerate(levels):
        size = ladder[lv] * chunk_s
        if fresh and i == 0:
            end = ref_download(rates, epoch_s, t, size)
            startup += end - t
            t, buf = end, chunk_s
        else:
            if buf + chunk_s > capacity:
                wait = buf + chunk_s - capacity
                t += wait
                buf -= wait
            end = ref_download(rates, epoch_s, t, size)
            dl = end - t
            if dl > buf:
                rebuf += dl - buf
                buf = 0.0
            else:
                buf -= dl
            buf += chunk_s
            t = end
        qsum += q[lv]
        if prev is not None:
            var += abs(q[lv] - q[prev])
        prev = lv
    return (qsum, var, rebuf, startup), (t, buf, prev)


def ref_qoe(parts, switch_penalty, rebuffer_penalty, startup_penalty):
    qsum, var, rebuf, startup = parts
    return qsum - switch_penalty * var - rebuffer_penalty * rebuf - startup_penalty * startup


def ref_best_plan(rates, epoch_s, num_chunks, config):
    """Exhaustive search over every level sequence from a fresh start."""
    best = None
    for plan in itertools.product(range(len(config.ladder_kbps)), repeat=num_chunks):
        parts, _ = ref_play(
            rates, epoch_s, plan, config.ladder_kbps, config.chunk_seconds, config.buffer_capacity_seconds,
            config.quality,
        )
        v = ref_qoe(parts, config.switch_penalty, config.rebuffer_penalty, config.startup_weight)
        if best is None or v > best[0] + 1e-12:
            best = (v, plan)
    return best
