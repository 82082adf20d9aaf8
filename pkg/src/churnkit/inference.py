"""Filtered prediction of next absence gap / session duration, churn alarms.

Filtering consumes observed sessions with deterministic posterior-mean
latents, which makes evaluation reproducible and causal.  At the prediction
frontier the latent is drawn S times from the prior at the current hidden
state and the point prediction is the sample mean of the model-implied next
gap and duration.  With the intensity slope frozen at zero the mean next gap
has closed form exp(-a), so no quadrature is involved.
"""

from __future__ import annotations

import math
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass
from typing import Optional

import numpy as np

from .errors import DataError, NumericalError
from .eventlog import derive_seed
from .model import initial_step, prior_params, step
from .tppmath import WT_ZERO_EPS, IntensitySpec, expected_gap


@dataclass
class PredictionRecord:
    user_id: str
    step: int  # prefix length the prediction was made from (1-based)
    pred_gap: float
    pred_dur: float
    obs_gap: Optional[float] = None
    obs_dur: Optional[int] = None
    a: float = 0.0  # filtered intensity base at the frontier
    gamma: float = 0.0  # filtered duration rate at the frontier


@dataclass
class AlarmPolicy:
    """fixed: alarm iff pred_gap > theta_g and pred_dur < theta_d.
    expected: alarm iff pred_gap > mean gap and pred_dur compares (default
    'less') against the user's mean duration."""

    mode: str = "fixed"
    theta_g: float = 0.0
    theta_d: float = 0.0
    expected_dur_cmp: str = "less"

    def __post_init__(self):
        if self.mode not in ("fixed", "expected"):
            raise ValueError(f"AlarmPolicy: unknown mode {self.mode!r}")
        if self.mode == "fixed" and (self.theta_g <= 0.0 or self.theta_d <= 0.0):
            raise ValueError("AlarmPolicy: fixed mode needs positive theta_g and theta_d")
        if self.expected_dur_cmp not in ("less", "greater"):
            raise ValueError(f"AlarmPolicy: unknown comparator {self.expected_dur_cmp!r}")


def filter_sequence(params, seq):
    """Deterministic filter pass; entry i is the state after consuming
    session i (entry 0 is the pre-data step)."""
    outs = [initial_step(params, "filter")]
    for s in seq.sessions:
        outs.append(step(params, outs[-1].state, s.g, s.d, "filter"))
    return outs


def _predict_at(params, h, rng, n_samples):
    """Posterior-predictive mean of (next gap, next duration) by averaging
    the heads over prior draws of z at hidden state h."""
    wz = float(params.head_wz)
    base_a = float(params.head_wh @ h) + float(params.head_bt)
    dur_wz = float(params.dur_wz)
    base_lg = float(params.dur_wh @ h) + float(params.dur_b)
    wt = float(params.head_wt)

    if params.latent_mode == "fixed":
        z = np.full(n_samples, 0.5)
    else:
        prior = prior_params(params, h)
        eps = rng.standard_normal(n_samples)
        u = prior.mu + prior.sigma * eps
        e = np.exp(-np.abs(u))
        z = np.where(u >= 0.0, 1.0 / (1.0 + e), e / (1.0 + e))

    a = wz * z + base_a
    lg = dur_wz * z + base_lg
    if np.any(np.abs(a) > 700.0) or np.any(np.abs(lg) > 700.0):
        raise NumericalError("predict: head values diverged")
    if abs(wt) < WT_ZERO_EPS:
        pred_gap = float(np.mean(np.exp(-a)))
    else:
        pred_gap = float(np.mean([expected_gap(IntensitySpec(float(ai), wt)) for ai in a]))
    pred_dur = float(np.mean(np.exp(lg)))
    return pred_gap, pred_dur


def predict_next(params, prefix, n_samples=32, seed=0):
    """Prediction record for the session after the observed prefix."""
    if len(prefix) < 1:
        raise DataError("predict_next: empty prefix")
    if n_samples < 1:
        raise ValueError(f"predict_next: n_samples must be >= 1, got {n_samples}")
    outs = filter_sequence(params, prefix)
    frontier = outs[len(prefix)]
    rng = np.random.default_rng(derive_seed(seed, "pred", prefix.user_id, len(prefix)))
    pred_gap, pred_dur = _predict_at(params, frontier.state.h, rng, n_samples)
    return PredictionRecord(
        user_id=prefix.user_id,
        step=len(prefix),
        pred_gap=pred_gap,
        pred_dur=pred_dur,
        a=frontier.a,
        gamma=frontier.gamma,
    )


def rolling_evaluate(params, seq, n_samples=32, seed=0):
    """One prediction per prefix length i = 1..n-1, paired with what the user
    actually did next.  Exactly n-1 records; identical to calling
    predict_next on each prefix because filtering is causal and deterministic."""
    n = len(seq)
    if n < 2:
        raise DataError(f"rolling_evaluate: need >= 2 sessions, got {n} for {seq.user_id!r}")
    outs = filter_sequence(params, seq)
    records = []
    for i in range(1, n):
        rng = np.random.default_rng(derive_seed(seed, "pred", seq.user_id, i))
        pred_gap, pred_dur = _predict_at(params, outs[i].state.h, rng, n_samples)
        nxt = seq.sessions[i]
        records.append(
            PredictionRecord(
                user_id=seq.user_id,
                step=i,
                pred_gap=pred_gap,
                pred_dur=pred_dur,
                obs_gap=nxt.g,
                obs_dur=nxt.d,
                a=outs[i].a,
                gamma=outs[i].gamma,
            )
        )
    return records


def _rolling_job(args):
    params, seq, n_samples, seed = args
    return rolling_evaluate(params, seq, n_samples, seed)


def rolling_evaluate_many(params, sequences, n_samples=32, seed=0, workers=1):
    """rolling_evaluate across users (skipping length-1 sequences), flattened
    in user-sorted order; workers > 1 fans out per user with identical
    results to the serial path."""
    ordered = sorted((s for s in sequences if len(s) >= 2), key=lambda s: s.user_id)
    if not ordered:
        raise DataError("rolling_evaluate_many: no sequence has >= 2 sessions")
    if workers <= 1:
        per_user = [rolling_evaluate(params, s, n_samples, seed) for s in ordered]
    else:
        with ProcessPoolExecutor(max_workers=workers) as pool:
            per_user = list(pool.map(_rolling_job, [(params, s, n_samples, seed) for s in ordered]))
    return [rec for recs in per_user for rec in recs]


def user_history_stats(seq):
    """(mean observed gap, mean duration); mean gap is None for 1-session users."""
    gaps = seq.gaps()
    mean_gap = float(np.mean(gaps)) if gaps else None
    mean_dur = float(np.mean(seq.durations()))
    return mean_gap, mean_dur


def churn_alarm(record, policy, history_stats=None):
    """Boolean alarm decision for one prediction record."""
    if policy.mode == "fixed":
        return record.pred_gap > policy.theta_g and record.pred_dur < policy.theta_d
    if history_stats is None or history_stats[0] is None:
        raise DataError("churn_alarm: expected mode needs user history stats")
    mean_gap, mean_dur = history_stats
    if policy.expected_dur_cmp == "less":
        dur_flag = record.pred_dur < mean_dur
    else:
        dur_flag = record.pred_dur > mean_dur
    return record.pred_gap > mean_gap and dur_flag
