import io
import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from oracles import banded_hmm, ref_percentile
from tputpred.errors import TraceParseError, TraceValidationError
from tputpred.hmm import HmmModel
from tputpred.trace import (
    SessionTrace,
    autocorr_quantiles,
    bin_normalized_stddev,
    compute_stability,
    filter_by_duration,
    generate_synthetic,
    parse_traces,
    percentile,
    serialize_traces,
    traces_to_text,
    write_bins_csv,
    write_stability_csv,
)

HEADER = "session_id,epoch_index,throughput_kbps\n"


def parse(text):
    return parse_traces(io.StringIO(HEADER + text))


# --------------------------------------------------------------------------
# Parsing


def test_two_rows_group_into_one_session():
    (tr,) = parse("s1,0,2500\ns1,1,2900\n")
    assert tr.session_id == "s1"
    assert tr.samples == (2500.0, 2900.0)
    assert tr.epoch_seconds == 60


def test_non_numeric_throughput_reports_line_one():
    with pytest.raises(TraceParseError) as exc:
        parse("s1,0,abc\n")
    assert exc.value.line == 1
    assert "line 1" in str(exc.value)


def test_interleaved_sessions_match_hand_grouping():
    text = "s2,1,20\ns1,2,3\ns1,0,1\ns2,0,10\ns1,1,2\ns2,2,30\n"
    s1, s2 = parse(text)
    assert (s1.session_id, s1.samples) == ("s2", (10.0, 20.0, 30.0))
    assert (s2.session_id, s2.samples) == ("s1", (1.0, 2.0, 3.0))


@pytest.mark.parametrize(
    "text, line",
    [("s1,0\n", 1), ("s1,0,1,2\n", 1), ("s1,0,5\ns1,x,5\n", 2), ("s1,0,5\n,1,5\n", 2), ("s1,-1,5\n", 1)],
)
def test_malformed_rows(text, line):
    with pytest.raises(TraceParseError) as exc:
        parse(text)
    assert exc.value.line == line


def test_non_positive_throughput_names_session_and_epoch():
    with pytest.raises(TraceValidationError, match=r"'s9' epoch 3"):
        parse("s9,0,1\ns9,1,1\ns9,2,1\ns9,3,0\n")


def test_duplicate_epoch_rejected():
    with pytest.raises(TraceValidationError, match="duplicate"):
        parse("s1,0,1\ns1,0,2\n")


def test_gap_in_epochs_rejected():
    with pytest.raises(TraceValidationError, match="contiguous"):
        parse("s1,0,1\ns1,2,2\n")


@pytest.mark.parametrize("text", ["", "a,b,c\n"])
def test_header_required(text):
    with pytest.raises(TraceParseError):
        parse_traces(io.StringIO(text))


def test_blank_lines_ignored():
    (tr,) = parse("s1,0,5\n\ns1,1,6\n")
    assert tr.samples == (5.0, 6.0)


@pytest.mark.parametrize("bad", [[], [1.0, -2.0], [float("nan")], [float("inf")]])
def test_session_trace_invariants(bad):
    with pytest.raises(TraceValidationError):
        SessionTrace("s", bad)


def test_epoch_seconds_must_be_positive_integer():
    with pytest.raises(TraceValidationError):
        SessionTrace("s", [1.0], epoch_seconds=0)


positive = st.floats(min_value=1e-3, max_value=1e7, allow_nan=False, allow_infinity=False)
session_lists = st.lists(
    st.tuples(st.text(alphabet="abcxyz019_-", min_size=1, max_size=6), st.lists(positive, min_size=1, max_size=8)),
    min_size=0,
    max_size=5,
    unique_by=lambda t: t[0],
)


@given(session_lists)
def test_serialize_parse_round_trip(raw):
    traces = [SessionTrace(sid, tuple(vals)) for sid, vals in raw]
    buf = io.StringIO()
    serialize_traces(traces, buf)
    buf.seek(0)
    assert parse_traces(buf) == traces


# --------------------------------------------------------------------------
# Filtering


def _sessions(lengths):
    return [SessionTrace(f"s{i}", [100.0] * n) for i, n in enumerate(lengths)]


def test_filter_is_strict():
    kept = filter_by_duration(_sessions([5, 6, 7]), 6)
    assert [len(s) for s in kept] == [7]


def test_filter_empty_and_order():
    assert filter_by_duration([], 6) == []
    sessions = _sessions([9, 3, 8, 7])
    assert [s.session_id for s in filter_by_duration(sessions, 6)] == ["s0", "s2", "s3"]


def test_filter_keeps_all_synthetic_length_ten():
    model = HmmModel([1.0], [[1.0]], [1000.0], [100.0**2])
    assert len(filter_by_duration(generate_synthetic(model, 200, 10, seed=4), 6)) == 200


def test_filter_rejects_bad_threshold():
    with pytest.raises(ValueError):
        filter_by_duration(_sessions([3]), 0)


# --------------------------------------------------------------------------
# Stability


def test_outlier_example():
    rep = compute_stability(SessionTrace("s", [2, 2, 2, 2, 20]), max_lag=2)
    assert rep.stddev_kbps == pytest.approx(7.2, abs=1e-12)
    assert rep.iqr_spread_kbps == 0.0
    assert rep.mean_kbps == pytest.approx(5.6)


def test_two_hypothetical_sessions():
    a = compute_stability(SessionTrace("a", [1, 1, 1, 0.5, 0.5, 0.5]), max_lag=1)
    b = compute_stability(SessionTrace("b", [1, 0.5, 1, 0.5, 1, 0.5]), max_lag=1)
    for r in (a, b):
        assert r.mean_kbps == pytest.approx(0.75, abs=1e-12)
        assert r.stddev_kbps == pytest.approx(0.25, abs=1e-12)
    assert a.iqr_spread_kbps == pytest.approx(b.iqr_spread_kbps, abs=1e-12)
    assert a.autocorr[0] == pytest.approx(0.5, abs=1e-12)
    assert b.autocorr[0] == pytest.approx(-5 / 6, abs=1e-12)


def test_constant_session_is_degenerate():
    rep = compute_stability(SessionTrace("c", [5, 5, 5, 5]), max_lag=3)
    assert rep.degenerate
    assert rep.stddev_kbps == 0.0
    assert rep.autocorr == (0.0, 0.0, 0.0)


def test_max_lag_must_be_below_length():
    with pytest.raises(ValueError):
        compute_stability(SessionTrace("s", [1, 2, 3]), max_lag=3)


def _ref_acf(x, lag):
    n = len(x)
    mu = sum(x) / n
    var = sum((v - mu) ** 2 for v in x) / n
    return sum((x[t] - mu) * (x[t + lag] - mu) for t in range(n - lag)) / n / var


series = st.lists(st.floats(min_value=1.0, max_value=1e5, allow_nan=False), min_size=3, max_size=40)


@given(series)
def test_stability_matches_definitions(x):
    lag = min(5, len(x) - 1)
    rep = compute_stability(SessionTrace("s", x), max_lag=lag)
    mu = math.fsum(x) / len(x)
    sd = math.sqrt(math.fsum((v - mu) ** 2 for v in x) / len(x))
    assert rep.mean_kbps == pytest.approx(mu, rel=1e-12)
    assert rep.stddev_kbps == pytest.approx(sd, rel=1e-9, abs=1e-9 * mu)
    assert rep.iqr_spread_kbps == pytest.approx(ref_percentile(x, 75) - ref_percentile(x, 25), rel=1e-12, abs=1e-9)
    assert rep.iqr_spread_kbps >= 0
    if rep.stddev_kbps > 0:
        assert rep.coeff_variation == pytest.approx(rep.stddev_kbps / rep.mean_kbps)
    if not rep.degenerate and sd > 1e-6 * mu:
        for k, r in enumerate(rep.autocorr, start=1):
            assert -1 - 1e-9 <= r <= 1 + 1e-9
            assert r == pytest.approx(_ref_acf(x, k), abs=1e-9)


@given(series)
def test_reversal_symmetry(x):
    lag = min(5, len(x) - 1)
    fwd = compute_stability(SessionTrace("s", x), lag)
    rev = compute_stability(SessionTrace("s", x[::-1]), lag)
    assert fwd.autocorr == pytest.approx(rev.autocorr, abs=1e-9)
    assert fwd.iqr_spread_kbps == pytest.approx(rev.iqr_spread_kbps, abs=1e-9)


@given(series, st.randoms())
def test_permutation_invariant_metrics(x, rnd):
    y = list(x)
    rnd.shuffle(y)
    a, b = compute_stability(SessionTrace("s", x), 1), compute_stability(SessionTrace("s", y), 1)
    assert a.mean_kbps == pytest.approx(b.mean_kbps, rel=1e-12)
    assert a.stddev_kbps == pytest.approx(b.stddev_kbps, rel=1e-9, abs=1e-9)
    assert a.iqr_spread_kbps == pytest.approx(b.iqr_spread_kbps, abs=1e-9)


@given(st.lists(st.floats(min_value=-1e6, max_value=1e6), min_size=1, max_size=30), st.floats(0, 100))
def test_percentile_matches_reference(values, q):
    assert percentile(values, q) == pytest.approx(ref_percentile(values, q), rel=1e-12, abs=1e-9)


def test_autocorr_quantiles_skip_degenerate():
    reports = [
        compute_stability(SessionTrace("a", [1, 1, 1, 0.5, 0.5, 0.5]), 1),
        compute_stability(SessionTrace("b", [1, 0.5, 1, 0.5, 1, 0.5]), 1),
        compute_stability(SessionTrace("c", [3, 3, 3]), 1),
    ]
    ((lag, qs),) = autocorr_quantiles(reports, (0, 50, 100))
    assert lag == 1
    assert qs == pytest.approx([-5 / 6, (0.5 - 5 / 6) / 2, 0.5])


# --------------------------------------------------------------------------
# Bins


def test_bin_floor():
    (b,) = bin_normalized_stddev([SessionTrace("s", [800, 1000])], 800)
    assert b.bin_low_kbps == 800
    assert b.session_count == 1


def test_bin_mean_of_covs():
    s1 = SessionTrace("a", [800, 1200])  # CoV 0.2
    s2 = SessionTrace("b", [600, 1400])  # CoV 0.4
    (b,) = bin_normalized_stddev([s1, s2], 800)
    assert b.mean_coeff_variation == pytest.approx(0.3)
    assert b.session_count == 2


@given(st.lists(st.lists(st.floats(1, 6000), min_size=1, max_size=5), min_size=1, max_size=12))
def test_bins_partition_sessions(raw):
    sessions = [SessionTrace(f"s{i}", v) for i, v in enumerate(raw)]
    bins = bin_normalized_stddev(sessions, 800)
    assert sum(b.session_count for b in bins) == len(sessions)
    for b in bins:
        inside = [s for s in sessions if b.bin_low_kbps <= np.mean(s.values) < b.bin_low_kbps + 800]
        assert len(inside) == b.session_count
    assert [b.bin_low_kbps for b in bins] == sorted(b.bin_low_kbps for b in bins)


def test_bins_trend_when_noise_shrinks_with_mean():
    # One single-state model per level; relative noise falls as the mean rises.
    sessions = []
    for k, (mean, cv) in enumerate([(400, 0.4), (1200, 0.3), (2000, 0.2), (2800, 0.1), (3600, 0.05)]):
        model = HmmModel([1.0], [[1.0]], [mean], [(cv * mean) ** 2])
        sessions += generate_synthetic(model, 60, 40, seed=k, id_prefix=f"m{k}_")
    covs = [b.mean_coeff_variation for b in bin_normalized_stddev(sessions, 800) if b.session_count >= 10]
    assert len(covs) >= 4
    assert all(a > b for a, b in zip(covs, covs[1:]))


def test_csv_writers_have_fixed_columns():
    reps = [compute_stability(SessionTrace("s", [1, 2, 3, 4]), 2)]
    buf = io.StringIO()
    write_stability_csv(reps, buf)
    lines = buf.getvalue().splitlines()
    assert lines[0] == "session_id,num_epochs,mean_kbps,stddev_kbps,coeff_variation,iqr_spread_kbps,degenerate,acf_1,acf_2"
    assert lines[1].startswith("s,4,2.5,")
    buf = io.StringIO()
    write_bins_csv(bin_normalized_stddev([SessionTrace("s", [900])]), buf)
    assert buf.getvalue().splitlines() == ["bin_low_kbps,bin_width_kbps,mean_coeff_variation,session_count", "800.0,800.0,0.0,1"]


# --------------------------------------------------------------------------
# Synthesis


def test_single_state_is_near_constant():
    model = HmmModel([1.0], [[1.0]], [1000.0], [1e-6])
    for s in generate_synthetic(model, 5, 20, seed=9):
        assert np.allclose(s.values, 1000.0, atol=0.01)


def test_synthetic_is_deterministic():
    model = banded_hmm([500, 1500, 2500])
    a = generate_synthetic(model, 20, 15, seed=3)
    assert traces_to_text(a) == traces_to_text(generate_synthetic(model, 20, 15, seed=3))
    assert a != generate_synthetic(model, 20, 15, seed=4)


def test_synthetic_state_means():
    model = HmmModel([0.5, 0.5], [[0.9, 0.1], [0.1, 0.9]], [1000.0, 3000.0], [100.0**2, 100.0**2])
    x = np.concatenate([s.values for s in generate_synthetic(model, 20, 1000, seed=5)])
    low, high = x[x < 2000], x[x >= 2000]
    assert low.mean() == pytest.approx(1000, rel=0.02)
    assert high.mean() == pytest.approx(3000, rel=0.02)


def test_synthetic_floor():
    model = HmmModel([1.0], [[1.0]], [5.0], [100.0**2])
    x = np.concatenate([s.values for s in generate_synthetic(model, 10, 50, seed=1)])
    assert x.min() == 1.0


@settings(max_examples=25)
@given(st.integers(1, 8), st.integers(1, 12), st.integers(0, 2**31))
def test_synthetic_shapes(n, length, seed):
    out = generate_synthetic(banded_hmm([700, 2100]), n, length, seed)
    assert len(out) == n and all(len(s) == length for s in out)
    assert len({s.session_id for s in out}) == n
