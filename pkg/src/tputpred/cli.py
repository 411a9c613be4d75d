"""Batch command line: analyze, train, predict, eval, simulate, report, synth.

Every command computes its artifacts in memory first and then publishes
them atomically into ``--out-dir`` together with ``<command>.manifest.json``,
which records the resolved configuration, input digests, the seed and a
digest of every output.  A failing command leaves the directory untouched.
"""

from __future__ import annotations

import argparse
import csv
import hashlib
import io
import json
import os
import sys
import tempfile
from pathlib import Path
from typing import Sequence

import numpy as np

from .hmm import HmmModel, HmmPredictor, evaluate_corpus, fit_hmm
from .predictors import (
    ArithmeticMean,
    HarmonicMean,
    LastSample,
    ModelPredictor,
    aggregate_errors,
    dumps_model,
    fit_ar,
    fit_arma,
    loads_model,
    read_predictions_csv,
    write_predictions_csv,
)
from .simulator import (
    QOE_COLUMNS,
    BufferBasedPolicy,
    FixedPolicy,
    MpcPolicy,
    OptimalPolicy,
    SimulationConfig,
    evaluate_qoe,
    load_config,
    write_qoe_csv,
)
from .trace import (
    SessionTrace,
    autocorr_quantiles,
    bin_normalized_stddev,
    compute_stability,
    filter_by_duration,
    generate_synthetic,
    load_traces,
    percentile,
    traces_to_text,
    write_bins_csv,
    write_stability_csv,
)

WINDOW_PREDICTORS = ("ls", "am", "hm")
MODEL_TYPES = ("hmm", "ar", "arma")
ALL_PREDICTORS = WINDOW_PREDICTORS + MODEL_TYPES
# (within-session, across-session) percentiles reported by eval.
AGGREGATION_SCHEMES = ((50.0, 50.0), (90.0, 50.0))
ACF_QUANTILES = (25, 50, 75)


class UsageError(Exception):
    """Bad flags or missing inputs; reported with usage text."""


# --------------------------------------------------------------------------
# Plumbing


def _digest(data: bytes) -> str:
    return hashlib.sha256(data).hexdigest()


def _file_digest(path: str) -> str:
    with open(path, "rb") as fh:
        return _digest(fh.read())


def _csv_text(write, *args) -> str:
    buf = io.StringIO()
    write(*args, buf)
    return buf.getvalue()


def _rows_text(header: Sequence[str], rows) -> str:
    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(header)
    writer.writerows(rows)
    return buf.getvalue()


def _fmt(v: float) -> str:
    return repr(float(v))


def publish(out_dir: str, command: str, config: dict, inputs: dict[str, str], seed, outputs: dict[str, str]) -> Path:
    """Atomically write ``outputs`` (name -> text) plus the run manifest."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    manifest = {
        "command": command,
        "config": config,
        "inputs": {role: {"path": p, "sha256": _file_digest(p)} for role, p in sorted(inputs.items())},
        "seed": seed,
        "outputs": {name: {"sha256": _digest(text.encode("utf-8"))} for name, text in sorted(outputs.items())},
    }
    files = dict(outputs)
    manifest_name = f"{command}.manifest.json"
    files[manifest_name] = json.dumps(manifest, indent=2, sort_keys=True) + "\n"

    staged = []
    try:
        for name, text in files.items():
            fd, tmp = tempfile.mkstemp(dir=out, prefix=f".{name}.", suffix=".tmp")
            with os.fdopen(fd, "w", encoding="utf-8", newline="") as fh:
                fh.write(text)
            staged.append((tmp, out / name))
    except BaseException:
        for tmp, _ in staged:
            os.unlink(tmp)
        raise
    for tmp, final in staged:
        os.replace(tmp, final)
    return out / manifest_name


def _require_file(path: str | None, flag: str) -> str:
    if path is None:
        raise UsageError(f"{flag} is required")
    if not os.path.isfile(path):
        raise UsageError(f"{flag}: no such file: {path}")
    return path


def _load_sessions(args) -> list[SessionTrace]:
    path = _require_file(args.trace, "--trace")
    sessions = load_traces(path, args.epoch_seconds)
    if not sessions:
        raise ValueError(f"{path}: no sessions")
    if args.min_epochs is not None:
        sessions = filter_by_duration(sessions, args.min_epochs)
        if not sessions:
            raise ValueError(f"{path}: no session lasts more than {args.min_epochs} epochs")
    return sessions


def split_sessions(sessions: Sequence[SessionTrace], seed: int) -> tuple[list[SessionTrace], list[SessionTrace]]:
    """Seeded 50/50 partition by session id; the training side gets the odd one out."""
    ids = sorted(s.session_id for s in sessions)
    order = np.random.default_rng(seed).permutation(len(ids))
    train_ids = {ids[i] for i in order[: (len(ids) + 1) // 2]}
    train = [s for s in sessions if s.session_id in train_ids]
    test = [s for s in sessions if s.session_id not in train_ids]
    return train, test


def _select(sessions, split: str, seed: int) -> list[SessionTrace]:
    if split == "all":
        return list(sessions)
    train, test = split_sessions(sessions, seed)
    chosen = train if split == "train" else test
    if not chosen:
        raise ValueError(f"{split} split is empty")
    return chosen


def load_model_file(path: str):
    """Return ``(kind, model)`` for an HMM or AR/ARMA model file."""
    with open(path, encoding="utf-8") as fh:
        text = fh.read()
    data = json.loads(text)
    if not isinstance(data, dict):
        raise ValueError(f"{path}: not a model file")
    if "emission_means" in data:
        return "hmm", HmmModel.from_dict(data)
    model = loads_model(text)
    return ("arma" if hasattr(model, "ma_coeffs") else "ar"), model


def _models_by_kind(paths: Sequence[str] | None) -> dict[str, object]:
    models: dict[str, object] = {}
    for p in paths or ():
        kind, model = load_model_file(_require_file(p, "--model"))
        if kind in models:
            raise UsageError(f"more than one {kind} model given")
        models[kind] = model
    return models


def make_predictor(name: str, models: dict[str, object]):
    if name == "ls":
        return LastSample()
    if name == "am":
        return ArithmeticMean()
    if name == "hm":
        return HarmonicMean()
    if name in MODEL_TYPES:
        if name not in models:
            raise UsageError(f"predictor {name!r} needs a {name} model file via --model")
        if name == "hmm":
            return HmmPredictor(models[name])
        return ModelPredictor(models[name], name)
    raise UsageError(f"unknown predictor {name!r}; choose from {', '.join(ALL_PREDICTORS)}")


def make_policy(spec: str, models: dict[str, object]):
    """Policy names: ``bb``, ``optimal``, ``fixed:<kbps>``, ``mpc:<predictor>``."""
    if spec == "bb":
        return BufferBasedPolicy()
    if spec == "optimal":
        return OptimalPolicy()
    kind, _, arg = spec.partition(":")
    if kind == "fixed" and arg:
        try:
            return FixedPolicy(float(arg))
        except ValueError:
            raise UsageError(f"bad fixed bitrate in {spec!r}") from None
    if kind == "mpc" and arg:
        return MpcPolicy(make_predictor(arg, models), name=spec)
    raise UsageError(f"unknown policy {spec!r}; use bb, optimal, fixed:<kbps> or mpc:<predictor>")


def _fit(kind: str, train, args):
    if kind == "hmm":
        return fit_hmm(train, args.states, args.max_iters, args.tol, args.seed, args.restarts).model
    if kind == "ar":
        return fit_ar(train, args.order)
    return fit_arma(train, args.order, args.ma_order)


def _dump(kind: str, model) -> str:
    return model.dumps() if kind == "hmm" else dumps_model(model)


def _fit_config(args) -> dict:
    return {
        "states": args.states,
        "max_iters": args.max_iters,
        "tol": args.tol,
        "restarts": args.restarts,
        "order": args.order,
        "ma_order": args.ma_order,
    }


def _trace_config(args) -> dict:
    return {"epoch_seconds": args.epoch_seconds, "min_epochs": args.min_epochs, "split": args.split}


# --------------------------------------------------------------------------
# Commands


def cmd_analyze(args) -> Path:
    sessions = _load_sessions(args)
    sessions = _select(sessions, args.split, args.seed)
    reports = [compute_stability(s, args.max_lag) for s in sessions]
    bins = bin_normalized_stddev(sessions, args.bin_width)
    acf_rows = [
        [lag] + [_fmt(v) for v in qs] for lag, qs in autocorr_quantiles(reports, ACF_QUANTILES)
    ]
    outputs = {
        "stability.csv": _csv_text(write_stability_csv, reports),
        "bins.csv": _csv_text(write_bins_csv, bins),
        "autocorr.csv": _rows_text(["lag"] + [f"p{q}" for q in ACF_QUANTILES], acf_rows),
    }
    config = _trace_config(args) | {"max_lag": args.max_lag, "bin_width_kbps": args.bin_width}
    return publish(args.out_dir, "analyze", config, {"trace": args.trace}, args.seed, outputs)


def cmd_train(args) -> Path:
    sessions = _select(_load_sessions(args), args.split, args.seed)
    if args.model_type == "hmm":
        fit = fit_hmm(sessions, args.states, args.max_iters, args.tol, args.seed, args.restarts)
        model = fit.model
        ll_rows = [[i, _fmt(ll)] for i, ll in enumerate(fit.log_likelihoods)]
        extra = {"hmm_loglik.csv": _rows_text(["iteration", "log_likelihood"], ll_rows)}
    else:
        model, extra = _fit(args.model_type, sessions, args), {}
    outputs = {f"{args.model_type}.json": _dump(args.model_type, model)} | extra
    config = _trace_config(args) | _fit_config(args) | {"model_type": args.model_type}
    return publish(args.out_dir, "train", config, {"trace": args.trace}, args.seed, outputs)


def cmd_predict(args) -> Path:
    sessions = _select(_load_sessions(args), args.split, args.seed)
    models = _models_by_kind(args.model)
    names = args.predictor or list(WINDOW_PREDICTORS) + sorted(models)
    outputs = {}
    for name in names:
        records = evaluate_corpus(make_predictor(name, models), sessions, args.warmup, args.horizon)
        outputs[f"predictions_{name}.csv"] = _csv_text(write_predictions_csv, records)
    config = _trace_config(args) | {"predictors": names, "warmup": args.warmup, "horizon": args.horizon}
    inputs = {"trace": args.trace} | {f"model_{i}": p for i, p in enumerate(args.model or ())}
    return publish(args.out_dir, "predict", config, inputs, args.seed, outputs)


def cmd_eval(args) -> Path:
    """Fit on the training split, score every predictor and sweep HMM sizes on the test split."""
    sessions = _load_sessions(args)
    train, test = split_sessions(sessions, args.seed)
    if not train or not test:
        raise ValueError("need at least two sessions to split into train and test")
    models = {kind: _fit(kind, train, args) for kind in MODEL_TYPES}

    def scores(records):
        return [aggregate_errors(records, w, a) for w, a in AGGREGATION_SCHEMES]

    err_rows = []
    for name in ALL_PREDICTORS:
        records = evaluate_corpus(make_predictor(name, models), test, args.warmup, args.horizon)
        for (w, a), value in zip(AGGREGATION_SCHEMES, scores(records)):
            err_rows.append([name, _fmt(w), _fmt(a), _fmt(value)])

    sweep_rows = []
    for m in args.sweep_states:
        fit = fit_hmm(train, m, args.max_iters, args.tol, args.seed, args.restarts)
        records = evaluate_corpus(HmmPredictor(fit.model), test, args.warmup, args.horizon)
        for (w, a), value in zip(AGGREGATION_SCHEMES, scores(records)):
            sweep_rows.append([m, _fmt(w), _fmt(a), _fmt(value)])

    outputs = {
        "errors.csv": _rows_text(["predictor", "within_percentile", "across_percentile", "error"], err_rows),
        "model_size.csv": _rows_text(["num_states", "within_percentile", "across_percentile", "error"], sweep_rows),
    }
    config = {
        "epoch_seconds": args.epoch_seconds,
        "min_epochs": args.min_epochs,
        "warmup": args.warmup,
        "horizon": args.horizon,
        "sweep_states": list(args.sweep_states),
        "num_train": len(train),
        "num_test": len(test),
    } | _fit_config(args)
    return publish(args.out_dir, "eval", config, {"trace": args.trace}, args.seed, outputs)


def cmd_simulate(args) -> Path:
    sessions = _select(_load_sessions(args), args.split, args.seed)
    sim_config = load_config(_require_file(args.config, "--config")) if args.config else SimulationConfig()
    models = _models_by_kind(args.model)
    specs = args.policy or ["bb", "mpc:hm"]
    if len(set(specs)) != len(specs):
        raise UsageError("duplicate --policy")
    policies = {spec: make_policy(spec, models) for spec in specs}
    rows = evaluate_qoe(sessions, policies, sim_config)
    outputs = {"qoe.csv": _csv_text(write_qoe_csv, rows)}
    config = _trace_config(args) | {"policies": specs, "simulation": sim_config.to_dict()}
    inputs = {"trace": args.trace} | {f"model_{i}": p for i, p in enumerate(args.model or ())}
    if args.config:
        inputs["config"] = args.config
    return publish(args.out_dir, "simulate", config, inputs, args.seed, outputs)


def _cdf_rows(series: str, values) -> list[list[str]]:
    xs = np.sort(np.asarray(values, dtype=float))
    n = xs.size
    return [[series, _fmt(x), _fmt((i + 1) / n)] for i, x in enumerate(xs)]


def cdf_tables(path: str) -> list[list[str]]:
    """CDF points from a QoE CSV (per policy) or a prediction CSV (per-session p50/p90 error)."""
    with open(path, newline="", encoding="utf-8") as fh:
        text = fh.read()
    reader = csv.DictReader(io.StringIO(text))
    header = tuple(reader.fieldnames or ())
    rows = []
    if header == QOE_COLUMNS:
        by_policy: dict[str, list[float]] = {}
        for r in reader:
            if r["normalized_qoe"]:
                by_policy.setdefault(r["policy"], []).append(float(r["normalized_qoe"]))
        for policy, vals in by_policy.items():
            rows += _cdf_rows(policy, vals)
        return rows
    records = read_predictions_csv(io.StringIO(text))
    if not records:
        raise ValueError(f"{path}: no rows")
    label = Path(path).stem.removeprefix("predictions_")
    per_session: dict[str, list[float]] = {}
    for r in records:
        per_session.setdefault(r.session_id, []).append(r.err)
    for q in (50, 90):
        rows += _cdf_rows(f"{label}:p{q}", [percentile(e, q) for e in per_session.values()])
    return rows


def cmd_report(args) -> Path:
    if not args.input:
        raise UsageError("report needs at least one --input CSV")
    rows = []
    for p in args.input:
        try:
            rows += cdf_tables(_require_file(p, "--input"))
        except KeyError as exc:
            raise ValueError(f"{p}: unrecognized CSV layout (missing column {exc})") from None
    outputs = {"cdf.csv": _rows_text(["series", "value", "cumulative_fraction"], rows)}
    inputs = {f"input_{i}": p for i, p in enumerate(args.input)}
    return publish(args.out_dir, "report", {}, inputs, args.seed, outputs)


def cmd_synth(args) -> Path:
    kind, model = load_model_file(_require_file(args.model[0] if args.model else None, "--model"))
    if kind != "hmm":
        raise UsageError("synth needs an hmm model file")
    traces = generate_synthetic(model, args.sessions, args.length, args.seed, args.epoch_seconds)
    outputs = {"traces.csv": traces_to_text(traces)}
    config = {"sessions": args.sessions, "length": args.length, "epoch_seconds": args.epoch_seconds}
    return publish(args.out_dir, "synth", config, {"model": args.model[0]}, args.seed, outputs)


COMMANDS = {
    "analyze": cmd_analyze,
    "train": cmd_train,
    "predict": cmd_predict,
    "eval": cmd_eval,
    "simulate": cmd_simulate,
    "report": cmd_report,
    "synth": cmd_synth,
}


# --------------------------------------------------------------------------
# Argument parsing


def _positive_int(text: str) -> int:
    v = int(text)
    if v < 1:
        raise argparse.ArgumentTypeError("must be a positive integer")
    return v


def _int_list(text: str) -> list[int]:
    try:
        vals = [int(t) for t in text.split(",") if t.strip()]
    except ValueError:
        raise argparse.ArgumentTypeError("expected comma-separated integers") from None
    if not vals or min(vals) < 1:
        raise argparse.ArgumentTypeError("expected positive integers")
    return vals


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="tputpred", description=__doc__.splitlines()[0])
    sub = parser.add_subparsers(dest="command", required=True)

    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--trace", help="trace CSV (session_id,epoch_index,throughput_kbps)")
    common.add_argument("--model", action="append", help="model file (repeatable)")
    common.add_argument("--config", help="simulation config JSON")
    common.add_argument("--seed", type=int, default=0)
    common.add_argument("--out-dir", required=True)
    common.add_argument("--split", choices=("train", "test", "all"), default="all")
    common.add_argument("--epoch-seconds", type=_positive_int, default=60)
    common.add_argument("--min-epochs", type=_positive_int, default=None, help="keep sessions longer than this")

    fitting = argparse.ArgumentParser(add_help=False)
    fitting.add_argument("--states", type=_positive_int, default=6)
    fitting.add_argument("--max-iters", type=_positive_int, default=200)
    fitting.add_argument("--tol", type=float, default=1e-3)
    fitting.add_argument("--restarts", type=_positive_int, default=1)
    fitting.add_argument("--order", type=_positive_int, default=5, help="AR order p")
    fitting.add_argument("--ma-order", type=_positive_int, default=1, help="ARMA MA order q")

    scoring = argparse.ArgumentParser(add_help=False)
    scoring.add_argument("--warmup", type=int, default=1)
    scoring.add_argument("--horizon", type=_positive_int, default=5)

    p = sub.add_parser("analyze", parents=[common], help="stability statistics")
    p.add_argument("--max-lag", type=_positive_int, default=5)
    p.add_argument("--bin-width", type=float, default=800.0)

    p = sub.add_parser("train", parents=[common, fitting], help="fit a predictor model")
    p.add_argument("--model-type", choices=MODEL_TYPES, required=True)

    p = sub.add_parser("predict", parents=[common, scoring], help="one-step prediction records")
    p.add_argument("--predictor", action="append", help=f"one of {', '.join(ALL_PREDICTORS)} (repeatable)")

    p = sub.add_parser("eval", parents=[common, fitting, scoring], help="aggregated errors and model-size sweep")
    p.add_argument("--sweep-states", type=_int_list, default=[2, 4, 6, 8])

    p = sub.add_parser("simulate", parents=[common], help="ABR playback and normalized QoE")
    p.add_argument("--policy", action="append", help="bb | optimal | fixed:<kbps> | mpc:<predictor> (repeatable)")

    p = sub.add_parser("report", parents=[common], help="CDF point tables from result CSVs")
    p.add_argument("--input", action="append", help="qoe.csv or predictions_*.csv (repeatable)")

    p = sub.add_parser("synth", parents=[common], help="sample traces from an HMM model file")
    p.add_argument("--sessions", type=_positive_int, default=100)
    p.add_argument("--length", type=_positive_int, default=30)
    for subparser in sub.choices.values():
        subparser.set_defaults(usage=subparser.format_usage())
    return parser


def main(argv: Sequence[str] | None = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        COMMANDS[args.command](args)
    except UsageError as exc:
        sys.stderr.write(args.usage)
        print(f"tputpred {args.command}: error: {exc}", file=sys.stderr)
        return 2
    except (ValueError, OSError, ArithmeticError) as exc:
        # Parse/validation, fit and simulation errors all derive from these.
        kind = type(exc).__name__
        print(f"tputpred {args.command}: {kind}: {exc}", file=sys.stderr)
        return 1
    return 0


if __name__ == "__main__":
    sys.exit(main())
