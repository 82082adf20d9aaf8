"""churnkit: session-level return-time and churn modeling.

User activity logs are segmented into sessions; a recurrent network with a
logit-normal latent loyalty variable defines the conditional intensity of a
temporal point process over absence gaps and a Poisson model over session
durations.  Training maximizes a per-step variational lower bound by
backpropagation through time on a small built-in autodiff tape.
"""

from ._kernels import NUMBA_ENABLED
from .errors import (
    CheckpointShapeError,
    CheckpointVersionError,
    ChurnkitError,
    CorruptCheckpointError,
    DataError,
    NumericalError,
)
from .eventlog import (
    Event,
    Session,
    SessionSequence,
    derive_seed,
    ingest_events,
    read_sessions,
    sessionize,
    sessionize_log,
    split_users,
    write_sessions,
)
from .evalharness import BaselinePredictor, MetricSummary, compare, compute_metrics, fit_baseline
from .inference import (
    AlarmPolicy,
    PredictionRecord,
    churn_alarm,
    predict_next,
    rolling_evaluate,
    rolling_evaluate_many,
    user_history_stats,
)
from .model import HiddenState, ModelParams, StepOutput, heads, init_params, initial_step, step
from .simulate import GeneratorSpec, generate
from .tppmath import (
    GaussianParams,
    IntensitySpec,
    cumulative_intensity,
    expected_gap,
    gaussian_kl,
    log_gap_density,
    poisson_log_pmf,
    sample_gap,
    sample_logit_normal,
)
from .train import (
    TrainConfig,
    TrainReport,
    gradcheck_elbo,
    load_checkpoint,
    save_checkpoint,
    sequence_elbo,
    train,
)

__version__ = "0.1.0"

__all__ = [
    "AlarmPolicy",
    "BaselinePredictor",
    "CheckpointShapeError",
    "CheckpointVersionError",
    "ChurnkitError",
    "CorruptCheckpointError",
    "DataError",
    "Event",
    "GaussianParams",
    "GeneratorSpec",
    "HiddenState",
    "IntensitySpec",
    "MetricSummary",
    "ModelParams",
    "NUMBA_ENABLED",
    "NumericalError",
    "PredictionRecord",
    "Session",
    "SessionSequence",
    "StepOutput",
    "TrainConfig",
    "TrainReport",
    "churn_alarm",
    "compare",
    "compute_metrics",
    "cumulative_intensity",
    "derive_seed",
    "expected_gap",
    "fit_baseline",
    "gaussian_kl",
    "generate",
    "gradcheck_elbo",
    "heads",
    "ingest_events",
    "init_params",
    "initial_step",
    "load_checkpoint",
    "log_gap_density",
    "poisson_log_pmf",
    "predict_next",
    "read_sessions",
    "rolling_evaluate",
    "rolling_evaluate_many",
    "sample_gap",
    "sample_logit_normal",
    "save_checkpoint",
    "sequence_elbo",
    "sessionize",
    "sessionize_log",
    "split_users",
    "step",
    "train",
    "user_history_stats",
    "write_sessions",
]
