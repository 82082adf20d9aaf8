#!/usr/bin/env python3
"""Benchmark the jitted kernels against the pure-numpy fallback.

Run without arguments to get a comparison table; the script re-invokes
itself twice in subprocesses (once normally, once with CHURNKIT_NO_NUMBA=1)
because the path is chosen at import time.

    python benchmarks/bench_kernels.py
    python benchmarks/bench_kernels.py --hidden 64 --steps 20000
"""

import argparse
import json
import os
import subprocess
import sys
import time


def measure(hidden, mlp_hidden, steps, users):
    import numpy as np

    from churnkit import NUMBA_ENABLED, _kernels
    from churnkit.model import init_params
    from churnkit.simulate import GeneratorSpec, generate
    from churnkit.train import _user_eps, elbo_and_grads

    t0 = time.perf_counter()
    _kernels.warmup()
    warmup_s = time.perf_counter() - t0

    params = init_params(hidden, mlp_hidden, seed=1)
    rng = np.random.default_rng(0)

    # microbenchmark: fused step forward + backward
    state = rng.normal(size=(2, hidden)) * 0.1
    reps = max(1, steps)
    args = (
        state, params.lstm_W, params.lstm_b,
        params.post_W1, params.post_b1, params.post_W2, params.post_b2,
        params.prior_W1, params.prior_b1, params.prior_W2, params.prior_b2,
        float(params.head_wz), params.head_wh, 0.0, float(params.head_bt),
        float(params.dur_wz), params.dur_wh, float(params.dur_b),
        0.9, 1.4, 0.3, 2.0, 4.0, True,
    )
    t0 = time.perf_counter()
    for _ in range(reps):
        out = _kernels.step_fwd(*args)
    fwd_us = (time.perf_counter() - t0) / reps * 1e6

    term, st2, gates, xh, y1, p1, sc = out
    bufs = [
        np.zeros_like(params.lstm_W), np.zeros_like(params.lstm_b),
        np.zeros_like(params.post_W1), np.zeros_like(params.post_b1),
        np.zeros_like(params.post_W2), np.zeros_like(params.post_b2),
        np.zeros_like(params.prior_W1), np.zeros_like(params.prior_b1),
        np.zeros_like(params.prior_W2), np.zeros_like(params.prior_b2),
        np.zeros_like(params.head_wh), np.zeros_like(params.dur_wh),
    ]
    dout = np.zeros((2, hidden))
    t0 = time.perf_counter()
    for _ in range(reps):
        _kernels.step_bwd(
            state, params.lstm_W, params.post_W1, params.post_W2,
            params.prior_W1, params.prior_W2,
            float(params.head_wz), params.head_wh, float(params.dur_wz), params.dur_wh,
            0.9, 1.4, 0.3, 4.0, True,
            st2, gates, xh, y1, p1, sc, 1.0, dout, *bufs,
        )
    bwd_us = (time.perf_counter() - t0) / reps * 1e6

    # end to end: full gradient of the sequence objective
    seqs, _ = generate(
        GeneratorSpec(kind="stationary", users=users, horizon=200.0, mean_gap=2.0, mean_duration=5.0),
        seed=3,
    )
    eps = {s.user_id: _user_eps(0, s.user_id, 1, len(s)) for s in seqs}
    n_steps = sum(len(s) for s in seqs)
    t0 = time.perf_counter()
    for s in seqs:
        elbo_and_grads(params, s, eps[s.user_id], 200)
    elbo_s = time.perf_counter() - t0

    return {
        "numba": NUMBA_ENABLED,
        "warmup_s": warmup_s,
        "step_fwd_us": fwd_us,
        "step_bwd_us": bwd_us,
        "elbo_steps_per_s": n_steps / elbo_s,
    }


def run_child(disable, args):
    env = dict(os.environ)
    env["CHURNKIT_NO_NUMBA"] = "1" if disable else "0"
    cmd = [
        sys.executable, os.path.abspath(__file__), "--measure",
        "--hidden", str(args.hidden), "--mlp-hidden", str(args.mlp_hidden),
        "--steps", str(args.steps), "--users", str(args.users),
    ]
    out = subprocess.run(cmd, env=env, capture_output=True, text=True, check=True)
    return json.loads(out.stdout.strip().splitlines()[-1])


def main():
    ap = argparse.ArgumentParser(description=__doc__)
    ap.add_argument("--hidden", type=int, default=16)
    ap.add_argument("--mlp-hidden", type=int, default=8)
    ap.add_argument("--steps", type=int, default=20000)
    ap.add_argument("--users", type=int, default=8)
    ap.add_argument("--measure", action="store_true", help="internal: emit one JSON line")
    args = ap.parse_args()

    if args.measure:
        print(json.dumps(measure(args.hidden, args.mlp_hidden, args.steps, args.users)))
        return

    jit = run_child(disable=False, args=args)
    plain = run_child(disable=True, args=args)
    rows = [
        ("step forward (us/call)", jit["step_fwd_us"], plain["step_fwd_us"]),
        ("step backward (us/call)", jit["step_bwd_us"], plain["step_bwd_us"]),
        ("elbo+grad (steps/s)", jit["elbo_steps_per_s"], plain["elbo_steps_per_s"]),
    ]
    print(f"hidden={args.hidden} mlp_hidden={args.mlp_hidden}")
    print(f"{'kernel':28s} {'numba':>12s} {'numpy':>12s} {'speedup':>8s}")
    for name, a, b in rows:
        speedup = b / a if name.endswith("(us/call)") else a / b
        print(f"{name:28s} {a:12.2f} {b:12.2f} {speedup:7.2f}x")
    print(f"(jit warmup {jit['warmup_s']:.2f}s on first use; cached afterwards)")


if __name__ == "__main__":
    main()
