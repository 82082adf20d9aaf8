"""Command-line pipeline: sessionize -> train -> predict -> evaluate, plus
simulate and gradcheck.

Exit codes: 0 success, 1 usage error, 2 data error, 3 numerical failure.
Every run writes a ``<output>.manifest.json`` next to its primary output with
the fully resolved configuration, so a run can be reproduced exactly.
"""

from __future__ import annotations

import argparse
import difflib
import json
import logging
import sys
from dataclasses import asdict

import numpy as np

from . import __version__
from .errors import ChurnkitError, DataError, NumericalError
from .eventlog import (
    GAP_MODES,
    ingest_events,
    read_sessions,
    sessionize_log,
    split_users,
    write_sessions,
)
from .evalharness import BASELINE_KINDS, compare, fit_baseline
from .inference import AlarmPolicy, churn_alarm, rolling_evaluate_many, user_history_stats
from .simulate import GeneratorSpec, generate
from .train import (
    CHECKPOINT_VERSION,
    TrainConfig,
    gradcheck_elbo,
    load_checkpoint,
    save_checkpoint,
    train,
)

log = logging.getLogger("churnkit")


class _Parser(argparse.ArgumentParser):
    """argparse parser that exits 1 on usage errors and suggests close flags."""

    def _all_option_strings(self):
        options = set()
        for action in self._actions:
            options.update(action.option_strings)
            if isinstance(action, argparse._SubParsersAction):
                for sub in action.choices.values():
                    for sub_action in sub._actions:
                        options.update(sub_action.option_strings)
        return sorted(options)

    def error(self, message):
        if "unrecognized arguments:" in message:
            unknown = [t for t in message.split(":", 1)[1].split() if t.startswith("--")]
            options = self._all_option_strings()
            hints = []
            for u in unknown:
                close = difflib.get_close_matches(u, options, n=1)
                if close:
                    hints.append(f"did you mean {close[0]}?")
            if hints:
                message += "  (" + " ".join(hints) + ")"
        self.print_usage(sys.stderr)
        print(f"{self.prog}: error: {message}", file=sys.stderr)
        raise SystemExit(1)


def _fmt(value):
    if isinstance(value, float):
        return repr(value)
    return str(value)


def write_manifest(out_path, subcommand, config, inputs, outputs, seed):
    manifest = {
        "subcommand": subcommand,
        "config": config,
        "inputs": inputs,
        "outputs": outputs,
        "seed": seed,
        "version": __version__,
        "checkpoint_format": CHECKPOINT_VERSION,
    }
    path = str(out_path) + ".manifest.json"
    with open(path, "w", encoding="utf-8") as fh:
        json.dump(manifest, fh, sort_keys=True, indent=1)
        fh.write("\n")
    return path


def _split_sequences(sequences, train_frac, seed):
    if train_frac >= 1.0:
        return sequences, []
    return split_users(sequences, train_frac, seed)


# ------------------------------------------------------------- subcommands


def _cmd_sessionize(args):
    per_user = ingest_events(args.infile, fmt=args.format, time_unit=args.time_unit)
    sequences = sessionize_log(per_user, args.session_threshold_hours, args.gap_mode)
    write_sessions(sequences, args.out)
    config = {
        "format": args.format,
        "time_unit": args.time_unit,
        "session_threshold_hours": args.session_threshold_hours,
        "gap_mode": args.gap_mode,
    }
    write_manifest(args.out, "sessionize", config, {"events": args.infile}, {"sessions": args.out}, None)
    print(f"sessionize: {len(sequences)} users -> {args.out}")
    return 0


def _cmd_train(args):
    sequences = read_sessions(args.sessions)
    train_seqs, test_seqs = _split_sequences(sequences, args.train_frac, args.seed)
    config = TrainConfig(
        epochs=args.epochs,
        lr=args.lr,
        hidden=args.hidden,
        mlp_hidden=args.mlp_hidden,
        mc_samples=args.mc_samples,
        batch_size=args.batch_size,
        bptt_k=args.bptt_k,
        seed=args.seed,
        wt_mode=args.wt_mode,
        latent_mode=args.latent_mode,
        clip_norm=args.clip_norm,
        workers=args.workers,
        gap_mode=args.gap_mode,
        session_threshold_hours=args.session_threshold_hours,
    )
    params, report = train(train_seqs, config)
    save_checkpoint(params, args.out, config.gap_mode, config.session_threshold_hours)
    report_path = args.report or (args.out + ".report.csv")
    report.to_csv(report_path)
    write_manifest(
        args.out,
        "train",
        asdict(config) | {"train_frac": args.train_frac},
        {"sessions": args.sessions},
        {"model": args.out, "report": report_path},
        args.seed,
    )
    final = report.epochs[-1]
    print(
        f"train: {len(train_seqs)} users ({len(test_seqs)} held out), "
        f"final neg elbo/event {final.neg_elbo_per_event:.5f} -> {args.out}"
    )
    return 0


def _select_split(sequences, which, train_frac, seed):
    if which == "all":
        return sequences
    if train_frac >= 1.0:
        if which == "test":
            raise DataError("no held-out users when --train-frac >= 1")
        return sequences
    train_seqs, test_seqs = split_users(sequences, train_frac, seed)
    return train_seqs if which == "train" else test_seqs


def _cmd_predict(args):
    sequences = read_sessions(args.sessions)
    params, _ = load_checkpoint(args.model)
    selected = _select_split(sequences, args.split, args.train_frac, args.seed)
    if not selected:
        raise DataError("predict: selected split is empty")
    records = rolling_evaluate_many(params, selected, args.pred_samples, args.seed, args.workers)
    policy = AlarmPolicy(
        mode=args.alarm_mode,
        theta_g=args.theta_g,
        theta_d=args.theta_d,
        expected_dur_cmp=args.expected_dur_cmp,
    )
    stats = {s.user_id: user_history_stats(s) for s in selected}
    with open(args.out, "w", encoding="utf-8") as fh:
        fh.write("user_id,step,pred_gap,obs_gap,pred_dur,obs_dur,alarm\n")
        for r in records:
            alarm = churn_alarm(r, policy, stats[r.user_id])
            fh.write(
                f"{r.user_id},{r.step},{_fmt(r.pred_gap)},{_fmt(r.obs_gap)},"
                f"{_fmt(r.pred_dur)},{r.obs_dur},{int(alarm)}\n"
            )
    config = {
        "split": args.split,
        "train_frac": args.train_frac,
        "pred_samples": args.pred_samples,
        "alarm_mode": args.alarm_mode,
        "theta_g": args.theta_g,
        "theta_d": args.theta_d,
        "expected_dur_cmp": args.expected_dur_cmp,
        "workers": args.workers,
    }
    write_manifest(
        args.out,
        "predict",
        config,
        {"sessions": args.sessions, "model": args.model},
        {"predictions": args.out},
        args.seed,
    )
    print(f"predict: {len(records)} records for {len(selected)} users -> {args.out}")
    return 0


def _cmd_evaluate(args):
    sequences = read_sessions(args.sessions)
    params, _ = load_checkpoint(args.model)
    train_seqs, test_seqs = _split_sequences(sequences, args.train_frac, args.seed)
    eval_seqs = _select_split(sequences, args.split, args.train_frac, args.seed)
    if not eval_seqs:
        raise DataError("evaluate: selected split is empty")
    fit_seqs = train_seqs if train_seqs else sequences

    method_names = [m.strip() for m in args.methods.split(",") if m.strip()]
    seeds = [int(s) for s in args.seeds.split(",") if s.strip()]
    if not method_names or not seeds:
        raise ValueError("evaluate: need at least one method and one seed")

    per_seed = {}
    for seed in seeds:
        methods = {}
        for name in method_names:
            if name == "model":
                methods[name] = params
            elif name in BASELINE_KINDS:
                if name == "ablation_rnn":
                    cfg = TrainConfig(
                        epochs=args.ablation_epochs,
                        lr=args.ablation_lr,
                        hidden=params.hidden,
                        mlp_hidden=params.mlp_hidden,
                        seed=seed,
                        workers=args.workers,
                    )
                    methods[name] = fit_baseline(name, fit_seqs, cfg)
                else:
                    methods[name] = fit_baseline(name, fit_seqs)
            else:
                raise ValueError(f"evaluate: unknown method {name!r}")
        per_seed[seed] = compare(methods, eval_seqs, args.pred_samples, seed, args.workers)

    metric_fields = ("mae_gap", "mre_gap", "mae_duration", "mre_duration")
    with open(args.out, "w", encoding="utf-8") as fh:
        fh.write("method,mae_gap,mre_gap,mae_duration,mre_duration,count\n")
        for name in method_names:
            rows = [per_seed[s][name] for s in seeds]
            means = [float(np.mean([getattr(r, f) for r in rows])) for f in metric_fields]
            fh.write(f"{name}," + ",".join(_fmt(v) for v in means) + f",{rows[0].count}\n")
    long_path = args.out + ".long.csv"
    with open(long_path, "w", encoding="utf-8") as fh:
        fh.write("method,seed,metric,value\n")
        for name in method_names:
            for seed in seeds:
                summary = per_seed[seed][name]
                for f in metric_fields:
                    fh.write(f"{name},{seed},{f},{_fmt(getattr(summary, f))}\n")
    config = {
        "methods": method_names,
        "seeds": seeds,
        "split": args.split,
        "train_frac": args.train_frac,
        "pred_samples": args.pred_samples,
        "ablation_epochs": args.ablation_epochs,
        "ablation_lr": args.ablation_lr,
        "workers": args.workers,
    }
    write_manifest(
        args.out,
        "evaluate",
        config,
        {"sessions": args.sessions, "model": args.model},
        {"summary": args.out, "long": long_path},
        args.seed,
    )
    print(f"evaluate: {len(method_names)} method(s) x {len(seeds)} seed(s) -> {args.out}")
    return 0


def _parse_pair(text, name, cast=float):
    parts = [p.strip() for p in text.split(",")]
    if len(parts) != 2:
        raise ValueError(f"simulate: {name} needs two comma-separated values, got {text!r}")
    return (cast(parts[0]), cast(parts[1]))


def _cmd_simulate(args):
    stay = _parse_pair(args.regime_stay, "--regime-stay")
    spec = GeneratorSpec(
        kind=args.kind,
        users=args.users,
        horizon=args.horizon,
        mean_gap=args.mean_gap,
        mean_duration=args.mean_duration,
        regime_gaps=_parse_pair(args.regime_gaps, "--regime-gaps"),
        regime_durations=_parse_pair(args.regime_durations, "--regime-durations"),
        switch=((stay[0], 1.0 - stay[0]), (1.0 - stay[1], stay[1])),
        model_path=args.from_model,
        max_sessions=args.max_sessions,
    )
    sequences, truth = generate(spec, args.seed)
    write_sessions(sequences, args.out)
    truth_path = args.out + ".truth.json"
    with open(truth_path, "w", encoding="utf-8") as fh:
        json.dump(truth, fh, sort_keys=True)
        fh.write("\n")
    total = sum(len(s) for s in sequences)
    config = dict(truth["spec"], kind=args.kind)
    write_manifest(
        args.out,
        "simulate",
        config,
        {} if args.from_model is None else {"model": args.from_model},
        {"sessions": args.out, "truth": truth_path},
        args.seed,
    )
    print(f"simulate: {len(sequences)} users, {total} sessions -> {args.out}")
    return 0


def _cmd_gradcheck(args):
    report = gradcheck_elbo(
        hidden=args.hidden,
        mlp_hidden=args.mlp_hidden,
        steps=args.steps,
        seed=args.seed,
        wt_mode=args.wt_mode,
        h=args.step_size,
        tol=args.tol,
    )
    for name in sorted(report.per_param):
        print(f"  {name:12s} rel err {report.per_param[name]:.3e}")
    print(f"gradcheck: {report.summary()}")
    if args.out:
        with open(args.out, "w", encoding="utf-8") as fh:
            fh.write("param,rel_err\n")
            for name in sorted(report.per_param):
                fh.write(f"{name},{_fmt(report.per_param[name])}\n")
        write_manifest(
            args.out,
            "gradcheck",
            {
                "hidden": args.hidden,
                "mlp_hidden": args.mlp_hidden,
                "steps": args.steps,
                "wt_mode": args.wt_mode,
                "step_size": args.step_size,
                "tol": args.tol,
            },
            {},
            {"report": args.out},
            args.seed,
        )
    if not report.passed:
        raise NumericalError(f"gradient check failed: {report.summary()}")
    return 0


# ------------------------------------------------------------------ parser


def build_parser():
    parser = _Parser(prog="churnkit", description=__doc__)
    parser.add_argument(
        "--version",
        action="version",
        version=f"churnkit {__version__} (checkpoint format {CHECKPOINT_VERSION})",
    )
    parser.add_argument("--verbose", action="store_true", help="log progress to stderr")
    sub = parser.add_subparsers(dest="subcommand", required=True)

    p = sub.add_parser("sessionize", help="segment raw event logs into sessions")
    p.add_argument("--in", dest="infile", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--format", choices=("csv", "jsonl"), default="csv")
    p.add_argument("--time-unit", choices=("hours", "seconds"), default="hours")
    p.add_argument("--session-threshold-hours", type=float, default=1.0)
    p.add_argument("--gap-mode", choices=GAP_MODES, default="start-to-start")
    p.set_defaults(func=_cmd_sessionize)

    p = sub.add_parser("train", help="fit the model on sessionized data")
    p.add_argument("--sessions", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--report", default=None)
    p.add_argument("--epochs", type=int, default=70)
    p.add_argument("--lr", type=float, default=0.001)
    p.add_argument("--hidden", type=int, default=64)
    p.add_argument("--mlp-hidden", type=int, default=32)
    p.add_argument("--mc-samples", type=int, default=1)
    p.add_argument("--batch-size", type=int, default=16)
    p.add_argument("--bptt-k", type=int, default=200)
    p.add_argument("--clip-norm", type=float, default=5.0)
    p.add_argument("--wt-mode", choices=("frozen_zero", "learned"), default="frozen_zero")
    p.add_argument("--latent-mode", choices=("full", "fixed"), default="full")
    p.add_argument("--train-frac", type=float, default=0.8)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--workers", type=int, default=1)
    p.add_argument("--gap-mode", choices=GAP_MODES, default="start-to-start")
    p.add_argument("--session-threshold-hours", type=float, default=1.0)
    p.set_defaults(func=_cmd_train)

    p = sub.add_parser("predict", help="rolling next-gap/duration predictions and alarms")
    p.add_argument("--sessions", required=True)
    p.add_argument("--model", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--split", choices=("test", "train", "all"), default="test")
    p.add_argument("--train-frac", type=float, default=0.8)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--pred-samples", type=int, default=32)
    p.add_argument("--alarm-mode", choices=("fixed", "expected"), default="fixed")
    p.add_argument("--theta-g", type=float, default=168.0, help="absence threshold, hours")
    p.add_argument("--theta-d", type=float, default=2.0, help="duration threshold, events")
    p.add_argument("--expected-dur-cmp", choices=("less", "greater"), default="less")
    p.add_argument("--workers", type=int, default=1)
    p.set_defaults(func=_cmd_predict)

    p = sub.add_parser("evaluate", help="compare the model against baselines")
    p.add_argument("--sessions", required=True)
    p.add_argument("--model", required=True)
    p.add_argument("--out", required=True)
    p.add_argument(
        "--methods",
        default="model,per_user_mean,global_mean,last_value,hom_poisson",
        help="comma list from: model," + ",".join(BASELINE_KINDS),
    )
    p.add_argument("--seeds", default="0", help="comma list of evaluation seeds")
    p.add_argument("--split", choices=("test", "train", "all"), default="test")
    p.add_argument("--train-frac", type=float, default=0.8)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--pred-samples", type=int, default=32)
    p.add_argument("--ablation-epochs", type=int, default=20)
    p.add_argument("--ablation-lr", type=float, default=0.01)
    p.add_argument("--workers", type=int, default=1)
    p.set_defaults(func=_cmd_evaluate)

    p = sub.add_parser("simulate", help="generate synthetic session data")
    p.add_argument("--kind", choices=("stationary", "regime_switching", "from_model"), required=True)
    p.add_argument("--users", type=int, default=100)
    p.add_argument("--horizon", type=float, default=500.0)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", required=True)
    p.add_argument("--mean-gap", type=float, default=2.0)
    p.add_argument("--mean-duration", type=float, default=5.0)
    p.add_argument("--regime-gaps", default="1,10")
    p.add_argument("--regime-durations", default="3,8")
    p.add_argument("--regime-stay", default="0.95,0.95")
    p.add_argument("--from-model", default=None)
    p.add_argument("--max-sessions", type=int, default=100_000)
    p.set_defaults(func=_cmd_simulate)

    p = sub.add_parser("gradcheck", help="finite-difference check of the full objective")
    p.add_argument("--hidden", type=int, default=4)
    p.add_argument("--mlp-hidden", type=int, default=4)
    p.add_argument("--steps", type=int, default=5)
    p.add_argument("--seed", type=int, default=1)
    p.add_argument("--wt-mode", choices=("frozen_zero", "learned"), default="learned")
    p.add_argument("--step-size", type=float, default=1e-5)
    p.add_argument("--tol", type=float, default=1e-4)
    p.add_argument("--out", default=None)
    p.set_defaults(func=_cmd_gradcheck)

    return parser


def main(argv=None):
    if argv is None:
        argv = sys.argv[1:]
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return 0 if exc.code in (0, None) else 1
    logging.basicConfig(
        level=logging.INFO if args.verbose else logging.WARNING,
        format="%(levelname)s %(name)s: %(message)s",
    )
    try:
        return args.func(args)
    except ValueError as exc:
        print(f"churnkit {args.subcommand}: usage error: {exc}", file=sys.stderr)
        return 1
    except NumericalError as exc:
        print(f"churnkit {args.subcommand}: numerical failure: {exc}", file=sys.stderr)
        return 3
    except DataError as exc:
        print(f"churnkit {args.subcommand}: data error: {exc}", file=sys.stderr)
        return 2
    except ChurnkitError as exc:
        print(f"churnkit {args.subcommand}: error: {exc}", file=sys.stderr)
        return 2


def entrypoint():
    sys.exit(main())


if __name__ == "__main__":
    entrypoint()
