"""Command-line front end for runs, comparisons, and diagnostics."""

from __future__ import annotations

import argparse
import json
import sys

from . import harness
from .config import ExperimentConfig


def _load_config(args: argparse.Namespace) -> ExperimentConfig:
    cfg = ExperimentConfig.from_json(args.config) if args.config else ExperimentConfig()
    if args.seed is not None:
        cfg = harness.with_overrides(cfg, seed=args.seed)
    return cfg


def _add_common(parser: argparse.ArgumentParser) -> None:
    parser.add_argument("--config", help="experiment config JSON (see README for the schema)")
    parser.add_argument("--seed", type=int, default=None, help="override the master seed")
    parser.add_argument("--out-dir", default="out", help="directory for reports and figures")


def _finish(problems: list[str], check: bool) -> int:
    for p in problems:
        print(f"CHECK FAILED: {p}", file=sys.stderr)
    return 1 if (check and problems) else 0


def cmd_run(args: argparse.Namespace) -> int:
    cfg = _load_config(args)
    rep = harness.run_experiment(cfg, out_dir=args.out_dir)
    print(json.dumps(rep.final, indent=2, sort_keys=True))
    print(f"realized global ratio: {rep.realized_gamma:.2f}")
    if rep.detection_round is not None:
        print(f"imbalance acknowledged at round {rep.detection_round}")
    print(f"outputs written to {args.out_dir}/")
    return _finish(harness.validate_report(rep), args.check)


def cmd_compare(args: argparse.Namespace) -> int:
    cfg = _load_config(args)
    losses = [s.strip() for s in args.losses.split(",") if s.strip()]
    gammas = [float(g) for g in args.gammas.split(",") if g.strip()]
    rows = harness.compare_losses(cfg, losses, gammas, n_seeds=args.seeds, out_dir=args.out_dir)
    for r in rows:
        if r["seed"] == "mean":
            acm = r.get("ac_minority")
            acm_text = f"{acm:6.2f}" if acm is not None else "   n/a"
            print(
                f"loss={r['loss']:<6} gamma={r['gamma']:<6} Ac.M={acm_text} AUC={r['auc']:.4f}"
            )
    print(f"outputs written to {args.out_dir}/")
    return 0


def cmd_mismatch(args: argparse.Namespace) -> int:
    cfg = _load_config(args)
    c_ranges = []
    for part in args.c_ranges.split(","):
        lo, _, hi = part.partition(":")
        c_ranges.append((int(lo), int(hi or lo)))
    losses = [s.strip() for s in args.losses.split(",") if s.strip()]
    rows = harness.mismatch_study(cfg, c_ranges, losses, n_seeds=args.seeds, out_dir=args.out_dir)
    for r in rows:
        if r["seed"] == "mean":
            acm = r.get("ac_minority")
            acm_text = f"{acm:6.2f}" if acm is not None else "   n/a"
            print(
                f"classes/client=[{r['c_min']},{r['c_max']}] loss={r['loss']:<6} "
                f"client-CS={r['mean_client_cs']:.4f} Ac.M={acm_text}"
            )
    print(f"outputs written to {args.out_dir}/")
    return 0


def cmd_monitor_eval(args: argparse.Namespace) -> int:
    cfg = _load_config(args)
    rep = harness.monitor_eval(cfg, out_dir=args.out_dir)
    mean_cs = rep.final.get("monitor_mean_cs")
    min_cs = rep.final.get("monitor_min_cs_after_round_2")
    if mean_cs is None:
        print("monitor produced no estimates", file=sys.stderr)
        return 1
    print(f"mean composition similarity over {len(rep.rounds)} rounds: {mean_cs:.4f}")
    print(f"minimum after round 2: {min_cs:.4f}")
    print(f"outputs written to {args.out_dir}/")
    problems = harness.validate_report(rep)
    if args.check and mean_cs < 0.97:
        problems.append(f"monitor mean similarity {mean_cs:.4f} below 0.97")
    return _finish(problems, args.check)


def cmd_diag_hl(args: argparse.Namespace) -> int:
    cfg = _load_config(args)
    rows = harness.diag_hl(cfg, out_dir=args.out_dir)
    for r in rows:
        print(
            f"class {r['class']}: mean pairwise CS={r['mean_pairwise_cs']:.4f} "
            f"dot CoV={r['dot_cov']:.4f} ({r['pairs']} pairs)"
        )
    print(f"outputs written to {args.out_dir}/")
    return 0


def cmd_sweep(args: argparse.Namespace) -> int:
    cfg = _load_config(args)
    runner = {
        "t_ra": harness.sweep_t_ra,
        "alpha": harness.sweep_alpha,
        "beta": harness.sweep_beta,
    }[args.preset]
    rows = runner(cfg, out_dir=args.out_dir)
    for r in rows:
        print(" ".join(f"{k}={v}" for k, v in r.items()))
    print(f"outputs written to {args.out_dir}/")
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="fedbalance",
        description=(
            "Federated-learning simulator that infers each round's class "
            "composition from aggregated weight deltas and counters global "
            "imbalance with a ratio-scaled loss."
        ),
    )
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("run", help="single experiment run")
    _add_common(p)
    p.add_argument("--check", action="store_true", help="exit nonzero on invariant violations")
    p.set_defaults(func=cmd_run)

    p = sub.add_parser("compare", help="loss comparison grid")
    _add_common(p)
    p.add_argument("--losses", default="ce,ratio,focal,ghmc", help="comma-separated loss kinds")
    p.add_argument("--gammas", default="1,10,20,50,100", help="comma-separated imbalance ratios")
    p.add_argument("--seeds", type=int, default=5, help="seeds per cell")
    p.set_defaults(func=cmd_compare)

    p = sub.add_parser("mismatch", help="local/global mismatch study")
    _add_common(p)
    p.add_argument("--c-ranges", default="2:2,3:3,4:4,5:5", help="classes-per-client ranges lo:hi")
    p.add_argument("--losses", default="ce,ratio,mse,mfe")
    p.add_argument("--seeds", type=int, default=5)
    p.set_defaults(func=cmd_mismatch)

    p = sub.add_parser("monitor-eval", help="composition-tracking accuracy run")
    _add_common(p)
    p.add_argument("--check", action="store_true", help="exit nonzero if tracking is poor")
    p.set_defaults(func=cmd_monitor_eval)

    p = sub.add_parser("diag-hl", help="hidden-output similarity diagnostic")
    _add_common(p)
    p.set_defaults(func=cmd_diag_hl)

    p = sub.add_parser("sweep", help="calibration grid presets")
    _add_common(p)
    p.add_argument("--preset", choices=("t_ra", "alpha", "beta"), required=True)
    p.set_defaults(func=cmd_sweep)

    return parser


def main(argv: list[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    return args.func(args)


if __name__ == "__main__":
    sys.exit(main())
