"""Session throughput analysis, prediction and ABR simulation."""

from .errors import (
    DegenerateFitError,
    InfeasibleTraceError,
    NumericalError,
    TraceParseError,
    TraceValidationError,
)
from .hmm import HmmModel, HmmPredictor, StatePosterior, fit_hmm, forward_filter, predict_hmm
from .predictors import (
    ArithmeticMean,
    ArModel,
    ArmaModel,
    HarmonicMean,
    LastSample,
    ModelPredictor,
    PredictionRecord,
    aggregate_errors,
    compute_error,
    fit_ar,
    fit_arma,
)
from .simulator import (
    BufferBasedPolicy,
    MpcPolicy,
    OptimalPolicy,
    PlaybackOutcome,
    SimulationConfig,
    evaluate_qoe,
    offline_optimal,
    simulate,
)
from .trace import SessionTrace, StabilityReport, compute_stability, generate_synthetic, load_traces

__all__ = [
    "ArModel",
    "ArithmeticMean",
    "ArmaModel",
    "BufferBasedPolicy",
    "DegenerateFitError",
    "HarmonicMean",
    "HmmModel",
    "HmmPredictor",
    "InfeasibleTraceError",
    "LastSample",
    "ModelPredictor",
    "MpcPolicy",
    "NumericalError",
    "OptimalPolicy",
    "PlaybackOutcome",
    "PredictionRecord",
    "SessionTrace",
    "SimulationConfig",
    "StabilityReport",
    "StatePosterior",
    "TraceParseError",
    "TraceValidationError",
    "aggregate_errors",
    "compute_error",
    "compute_stability",
    "evaluate_qoe",
    "fit_ar",
    "fit_arma",
    "fit_hmm",
    "forward_filter",
    "generate_synthetic",
    "load_traces",
    "offline_optimal",
    "predict_hmm",
    "simulate",
]
