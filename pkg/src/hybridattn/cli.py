"""Command-line surface: score, equiv, bench, transfer, retrieval.

Exit codes: 0 pass, 1 assertion/acceptance failure, 2 usage error.
"""

from __future__ import annotations

import argparse
import json
import sys
from pathlib import Path

import numpy as np

from . import tensorio
from .config import AttentionConfig
from .engine import decode_sequence, prefill_chunk_parallel, reference_hybrid
from .featuremap import FeatureMaps
from .harness import bench, routing_recall, write_bench_csv
from .numerics import make_rng, top_k_indices
from .saliency import ScoreReport, self_saliency_scores
from .transfer import run_transfer, write_loss_curve


def _load_config(path: str | None, precision: str | None = None) -> AttentionConfig:
    config = AttentionConfig.load(path) if path else AttentionConfig()
    if precision:
        config = config.with_(precision=precision)
    return config


def _cmd_score(args) -> int:
    """Emit per-token self-saliency scores as CSV.

    Expects q and k tensor files (q.bin/q.json, k.bin/k.json) under --tensors,
    shaped (N, d) or (H, N, d). The `selected` column marks the per-head top
    ceil(N/10) tokens by score.
    """
    q = tensorio.load_tensor(args.tensors, "q")
    k = tensorio.load_tensor(args.tensors, "k")
    report = self_saliency_scores(q, k, w=args.window, epsilon=args.epsilon)
    top = max(1, -(-report.length // 10))
    selected = np.zeros_like(report.scores, dtype=bool)
    for h in range(report.heads):
        selected[h, top_k_indices(report.scores[h], top)] = True
    report.selected = selected
    report.write_csv(args.out)
    print(f"wrote {report.heads * report.length} scores to {args.out}")
    return 0


def _cmd_equiv(args) -> int:
    """Cross-form agreement suite; writes a JSON report and fails on tolerance breach."""
    config = _load_config(args.config, args.precision)
    tol = 1e-10 if config.precision == "f64" else 1e-4
    rng = make_rng(config.seed)
    c = config.chunk_size
    n = args.len if args.len else 8 * c
    lam_grid = sorted({0, c // 4, c // 2, c})
    maps = FeatureMaps.random(config.heads, config.head_dim, config.seed + 1, dtype=config.dtype)
    shape = (config.heads, n, config.head_dim)
    q, k, v = (rng.standard_normal(shape).astype(config.dtype) for _ in range(3))
    g = (1.0 / (1.0 + np.exp(-rng.standard_normal(shape)))).astype(config.dtype)

    cases = []
    ok = True
    for lam in lam_grid:
        cfg = config.with_(lam=int(lam))
        ref = reference_hybrid(q, k, v, g, cfg, maps=maps)
        dec = decode_sequence(q, k, v, g, cfg, maps=maps)
        par = prefill_chunk_parallel(q, k, v, g, cfg, maps=maps)
        diffs = {
            "decode_vs_reference": float(np.abs(dec.y - ref.y).max()),
            "parallel_vs_reference": float(np.abs(par.y - ref.y).max()),
            "parallel_vs_decode": float(np.abs(par.y - dec.y).max()),
        }
        passed = all(d <= tol for d in diffs.values())
        ok = ok and passed
        cases.append({"lambda": int(lam), "max_abs_diff": diffs, "pass": passed})

    report = {"n": n, "tolerance": tol, "config": config.to_json(), "cases": cases, "pass": ok}
    with open(args.out, "w") as fh:
        json.dump(report, fh, indent=2)
    print(f"equiv {'PASS' if ok else 'FAIL'} (tol {tol:g}), report at {args.out}")
    return 0 if ok else 1


def _cmd_bench(args) -> int:
    config = _load_config(args.config)
    lens = [int(x) for x in args.lens.split(",") if x]
    if not lens:
        raise ValueError("empty --lens")
    records = bench(args.mode, lens, config, reps=args.reps, seed=config.seed)
    write_bench_csv(records, args.out)
    for r in records:
        step = "" if r.per_step_median is None else f"  step {r.per_step_median * 1e6:.1f}us"
        print(f"{r.mode} n={r.n}: {r.wall_time:.4f}s{step}  peak_state={r.peak_state}")
    return 0


def _cmd_transfer(args) -> int:
    config = _load_config(args.config)
    state, teacher, batch = run_transfer(args.steps, args.seed, args.lr, config)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    write_loss_curve(out / "loss_curve.csv", state.loss_history)
    state.save(out / "params")
    first, last = state.loss_history[0], state.loss_history[-1]
    print(f"transfer: {args.steps} steps, loss {first:.6g} -> {last:.6g}")
    return 0


def _cmd_retrieval(args) -> int:
    from .harness import generate_planted  # local import keeps startup light
    config = _load_config(args.config)
    results = []
    for i in range(args.seeds):
        task = generate_planted(config.seed + i, n=args.len, d=config.head_dim,
                                needles=args.needles, heads=1,
                                exclude_last=2 * config.chunk_size)
        res = routing_recall(task, args.router, args.budget, config, budget_mode=args.budget_mode)
        results.append(res)
    recalls = [r.recall for r in results]
    report = {
        "router": args.router,
        "budget": args.budget,
        "budget_mode": args.budget_mode,
        "seeds": args.seeds,
        "n": args.len,
        "needles": args.needles,
        "mean_recall": float(np.mean(recalls)),
        "recalls": recalls,
        "audit": [{"cache_entries": r.cache_entries, "window_tokens": r.window_tokens,
                   "retained_total": r.retained_total} for r in results],
    }
    with open(args.out, "w") as fh:
        json.dump(report, fh, indent=2)
    print(f"{args.router} recall over {args.seeds} seeds: {report['mean_recall']:.4f}")
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="hybridattn",
                                     description="saliency-routed hybrid linear attention toolkit")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("score", help="self-saliency scores to CSV")
    p.add_argument("--tensors", required=True, help="directory holding q/k tensor files")
    p.add_argument("--window", type=int, required=True)
    p.add_argument("--epsilon", type=float, required=True)
    p.add_argument("--out", required=True)
    p.set_defaults(func=_cmd_score)

    p = sub.add_parser("equiv", help="cross-form equivalence suite")
    p.add_argument("--config", help="config JSON path")
    p.add_argument("--precision", choices=["f32", "f64"], default=None)
    p.add_argument("--len", type=int, default=0, help="sequence length (default 8 chunks)")
    p.add_argument("--out", required=True)
    p.set_defaults(func=_cmd_equiv)

    p = sub.add_parser("bench", help="wall-time scaling benchmark")
    p.add_argument("--mode", choices=["prefill", "decode"], required=True)
    p.add_argument("--lens", required=True, help="comma-separated sequence lengths")
    p.add_argument("--reps", type=int, default=3)
    p.add_argument("--config", help="config JSON path")
    p.add_argument("--out", required=True)
    p.set_defaults(func=_cmd_bench)

    p = sub.add_parser("transfer", help="stage-1 attention transfer")
    p.add_argument("--steps", type=int, required=True)
    p.add_argument("--seed", type=int, default=7)
    p.add_argument("--lr", type=float, default=1e-2)
    p.add_argument("--config", help="config JSON path")
    p.add_argument("--out", required=True, help="output directory")
    p.set_defaults(func=_cmd_transfer)

    p = sub.add_parser("retrieval", help="budget-matched router comparison")
    p.add_argument("--router", choices=["saliency", "position", "random"], required=True)
    p.add_argument("--budget", type=int, required=True)
    p.add_argument("--seeds", type=int, required=True)
    p.add_argument("--config", help="config JSON path")
    p.add_argument("--len", type=int, default=2048)
    p.add_argument("--needles", type=int, default=16)
    p.add_argument("--budget-mode", choices=["joint", "cache-only"], default="joint")
    p.add_argument("--out", required=True)
    p.set_defaults(func=_cmd_retrieval)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except (ValueError, FileNotFoundError, KeyError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    except AssertionError as exc:
        print(f"failure: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
