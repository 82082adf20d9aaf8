"""Metrics, baseline predictors, and model-vs-baseline comparison.

All methods are scored on one shared set of rolling records (same users, same
prefix lengths), so summaries are directly comparable.  MRE divides the
absolute error by the observed value; sessionization guarantees observed gaps
are positive and durations at least 1, so the ratio is always defined.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Optional

import numpy as np

from .errors import DataError
from .inference import PredictionRecord, rolling_evaluate_many
from .model import ModelParams

BASELINE_KINDS = ("per_user_mean", "global_mean", "last_value", "hom_poisson", "ablation_rnn")


@dataclass
class MetricSummary:
    mae_gap: float
    mre_gap: float
    mae_duration: float
    mre_duration: float
    count: int


def compute_metrics(records):
    """MAE / MRE over gap and duration; records must carry observations."""
    if not records:
        raise DataError("compute_metrics: no records")
    gaps_err = []
    gaps_rel = []
    dur_err = []
    dur_rel = []
    for r in records:
        if r.obs_gap is None or r.obs_dur is None:
            raise DataError(f"compute_metrics: record without observation (user {r.user_id}, step {r.step})")
        eg = abs(r.pred_gap - r.obs_gap)
        ed = abs(r.pred_dur - r.obs_dur)
        gaps_err.append(eg)
        gaps_rel.append(eg / r.obs_gap)
        dur_err.append(ed)
        dur_rel.append(ed / r.obs_dur)
    n = len(records)
    # fsum is exactly rounded, so summaries are invariant under record order
    return MetricSummary(
        mae_gap=math.fsum(gaps_err) / n,
        mre_gap=math.fsum(gaps_rel) / n,
        mae_duration=math.fsum(dur_err) / n,
        mre_duration=math.fsum(dur_rel) / n,
        count=n,
    )


@dataclass
class BaselinePredictor:
    """Fitted reference predictor; ``params`` is set only for ablation_rnn."""

    kind: str
    global_gap: float = 0.0
    global_dur: float = 0.0
    user_gap: dict = None
    user_dur: dict = None
    params: Optional[ModelParams] = None

    def predict(self, seq, i):
        """(pred gap, pred duration) for the session after prefix 1..i."""
        if self.kind in ("per_user_mean", "hom_poisson"):
            gap = self.user_gap.get(seq.user_id, self.global_gap)
            dur = self.user_dur.get(seq.user_id, self.global_dur)
            return gap, dur
        if self.kind == "global_mean":
            return self.global_gap, self.global_dur
        if self.kind == "last_value":
            # the first session's gap is a sentinel, so a step-1 prediction
            # has no previous real gap and falls back to the global mean
            gap = seq.sessions[i - 1].g if i >= 2 else self.global_gap
            return gap, float(seq.sessions[i - 1].d)
        raise ValueError(f"BaselinePredictor: cannot predict with kind {self.kind!r}")


def fit_baseline(kind, train_sequences, config=None):
    """Fit one baseline on training sequences.

    per_user_mean stores each user's mean gap / duration; hom_poisson stores
    the per-user constant-intensity MLE (whose predicted gap is the same
    sample mean, (n-1)/sum g inverted); last_value only needs the global
    fallback; ablation_rnn trains the full pipeline with the latent clamped
    to 0.5 and the KL dropped (config: a TrainConfig).
    """
    if kind not in BASELINE_KINDS:
        raise ValueError(f"fit_baseline: unknown kind {kind!r}")
    if not train_sequences:
        raise DataError("fit_baseline: no training sequences")

    if kind == "ablation_rnn":
        if config is None:
            raise ValueError("fit_baseline: ablation_rnn needs a TrainConfig")
        from dataclasses import replace

        from .train import train

        params, _ = train(train_sequences, replace(config, latent_mode="fixed"))
        return BaselinePredictor(kind=kind, params=params)

    all_gaps = [g for s in train_sequences for g in s.gaps()]
    all_durs = [d for s in train_sequences for d in s.durations()]
    if not all_gaps:
        raise DataError("fit_baseline: training data has no observed gaps")
    global_gap = float(np.mean(all_gaps))
    global_dur = float(np.mean(all_durs))
    user_gap = {}
    user_dur = {}
    for s in train_sequences:
        gaps = s.gaps()
        user_gap[s.user_id] = float(np.mean(gaps)) if gaps else global_gap
        user_dur[s.user_id] = float(np.mean(s.durations()))
    return BaselinePredictor(
        kind=kind,
        global_gap=global_gap,
        global_dur=global_dur,
        user_gap=user_gap,
        user_dur=user_dur,
    )


def _baseline_records(predictor, sequences):
    records = []
    for seq in sequences:
        for i in range(1, len(seq)):
            gap, dur = predictor.predict(seq, i)
            nxt = seq.sessions[i]
            records.append(
                PredictionRecord(
                    user_id=seq.user_id,
                    step=i,
                    pred_gap=gap,
                    pred_dur=dur,
                    obs_gap=nxt.g,
                    obs_dur=nxt.d,
                )
            )
    return records


def compare(methods, test_sequences, n_samples=32, seed=0, workers=1):
    """Score every method on identical rolling records.

    ``methods`` maps name -> ModelParams or fitted BaselinePredictor.
    Returns {name: MetricSummary} in the given order; raises if any method
    produced a different record index set (protocol violation).
    """
    usable = sorted((s for s in test_sequences if len(s) >= 2), key=lambda s: s.user_id)
    if not usable:
        raise DataError("compare: no test sequence has >= 2 sessions")

    summaries = {}
    index = None
    for name, method in methods.items():
        if isinstance(method, ModelParams):
            records = rolling_evaluate_many(method, usable, n_samples, seed, workers)
        elif isinstance(method, BaselinePredictor):
            if method.kind == "ablation_rnn":
                records = rolling_evaluate_many(method.params, usable, n_samples, seed, workers)
            else:
                records = _baseline_records(method, usable)
        else:
            raise ValueError(f"compare: method {name!r} has unsupported type {type(method)!r}")
        this_index = [(r.user_id, r.step) for r in records]
        if index is None:
            index = this_index
        elif this_index != index:
            raise DataError(f"compare: method {name!r} produced a mismatched record set")
        summaries[name] = compute_metrics(records)
    return summaries
