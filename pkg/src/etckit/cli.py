"""Command line front end.

    etckit train     --config cfg.toml [--out DIR] [--seed N] [--override k=v]
    etckit simulate  --config cfg.toml [--checkpoint FILE] ...
    etckit evaluate  --config cfg.toml ...
    etckit bound     --config cfg.toml [--checkpoint FILE] [--report FILE] ...
    etckit sweep     --config cfg.toml ...
    etckit table     --reports r1.json r2.json ... [--out table.csv]

Exit codes: 0 success, 2 configuration problems, 3 a simulation diverged
(partial trace already exported), 1 anything else that was anticipated.
"""

from __future__ import annotations

import argparse
import json
import pathlib
import sys

from .config import ConfigError, TOOL_VERSION, load_config
from .etcsim import SimulationDiverged
from .experiment import (compute_bound, emit_table, resolve_system,
                         run_experiment, run_sweep, simulate_only,
                         train_and_save)
from .tensor import ContractViolation, NumericError
from .training import TrainingError

__all__ = ["main", "build_parser"]


def _load(args):
    return load_config(args.config, overrides=args.override, seed=args.seed)


def _out_dir(cfg, args) -> pathlib.Path:
    out = pathlib.Path(args.out if args.out is not None else cfg.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    return out


def cmd_train(args) -> int:
    cfg = _load(args)
    out = _out_dir(cfg, args)
    params, summary = train_and_save(cfg, resolve_system(cfg), out)
    if params is None:
        print(f"method '{cfg.method}' has nothing to train")
        return 0
    print(f"trained {cfg.method} on {cfg.system} "
          f"in {summary['wall_seconds']:.1f}s")
    print(f"wrote {out / summary['checkpoint_path']}")
    print(f"wrote {out / summary['report_path']}")
    return 0


def cmd_simulate(args) -> int:
    cfg = _load(args)
    out = _out_dir(cfg, args)
    payload = simulate_only(cfg, checkpoint_path=args.checkpoint, out_dir=out)
    agg = payload["aggregate"]["num_triggers"]
    print(f"{cfg.method} on {cfg.system}: "
          f"{agg['mean']:.1f} +- {agg['std']:.1f} triggers "
          f"over {len(payload['per_seed'])} seeds")
    print(f"wrote {out / 'metrics.json'}")
    return 0


def cmd_evaluate(args) -> int:
    cfg = _load(args)
    out = _out_dir(cfg, args)
    report = run_experiment(cfg, out_dir=out)
    agg = report["aggregate"]
    trig = agg["num_triggers"]
    print(f"{cfg.method} on {cfg.system}: "
          f"{trig['mean']:.1f} +- {trig['std']:.1f} triggers, "
          f"min gap {agg['min_inter_event']['mean']:.4f}")
    print(f"wrote {out / 'report.json'}")
    return 0


def cmd_bound(args) -> int:
    cfg = _load(args)
    out = _out_dir(cfg, args)
    rep = compute_bound(cfg, checkpoint_path=args.checkpoint,
                        report_path=args.report, out_dir=out)
    print(f"tau_h = {rep['tau_h']:.6g}, tau_h_tilde = {rep['tau_h_tilde']:.6g}")
    if rep["empirical_min_inter_event"] is not None:
        print(f"empirical min inter-event = "
              f"{rep['empirical_min_inter_event']:.6g}")
    print(f"wrote {out / 'bound.json'}")
    return 0


def cmd_sweep(args) -> int:
    reports = run_sweep(args.config, overrides=args.override, seed=args.seed)
    base = load_config(args.config, overrides=args.override, seed=args.seed)
    print(f"swept {base.sweep.key} over {len(reports)} values")
    print(f"wrote {pathlib.Path(base.out_dir) / 'sweep_index.json'}")
    return 0


def cmd_table(args) -> int:
    text = emit_table(list(args.reports), path=args.out)
    if args.out is None:
        sys.stdout.write(text)
    else:
        print(f"wrote {args.out}")
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="etckit",
        description="Train and evaluate event-triggered controllers with "
                    "learned stability certificates.")
    parser.add_argument("--version", action="version",
                        version=f"%(prog)s {TOOL_VERSION}")
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p, needs_config=True):
        if needs_config:
            p.add_argument("--config", required=True,
                           help="TOML experiment config")
        p.add_argument("--out", default=None,
                       help="output directory (default: out_dir from config)")
        p.add_argument("--seed", type=int, default=None,
                       help="override the training seed")
        p.add_argument("--override", action="append", default=[],
                       metavar="KEY=VALUE",
                       help="dotted config override, may repeat")

    p = sub.add_parser("train", help="train a controller and certificate")
    common(p)
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("simulate",
                       help="closed-loop runs from an existing checkpoint")
    common(p)
    p.add_argument("--checkpoint", default=None,
                   help="checkpoint JSON (default: <out>/checkpoint.json)")
    p.set_defaults(func=cmd_simulate)

    p = sub.add_parser("evaluate",
                       help="full pipeline: train, simulate, report")
    common(p)
    p.set_defaults(func=cmd_evaluate)

    p = sub.add_parser("bound",
                       help="analytic inter-event floor from a checkpoint")
    common(p)
    p.add_argument("--checkpoint", default=None,
                   help="checkpoint JSON (default: <out>/checkpoint.json)")
    p.add_argument("--report", default=None,
                   help="report JSON supplying the empirical minimum gap")
    p.set_defaults(func=cmd_bound)

    p = sub.add_parser("sweep",
                       help="run the [sweep] axis of a config")
    common(p)
    p.set_defaults(func=cmd_sweep)

    p = sub.add_parser("table", help="aggregate reports into one CSV table")
    p.add_argument("--reports", nargs="+", required=True,
                   help="report JSON files")
    p.add_argument("--out", default=None, help="CSV path (default: stdout)")
    p.set_defaults(func=cmd_table)

    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return args.func(args)
    except ConfigError as err:
        print(f"error: {err}", file=sys.stderr)
        return 2
    except SimulationDiverged as err:
        print(f"error: {err} (partial trace exported)", file=sys.stderr)
        return 3
    except (ContractViolation, NumericError, TrainingError,
            OSError, json.JSONDecodeError) as err:
        print(f"error: {err}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
