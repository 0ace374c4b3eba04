"""Command line entry point.

Exit codes: 0 ok, 2 config error, 3 numeric failure, 4 invariant violation.
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path

from . import experiments, verify
from .config import ConfigError, ExperimentConfig
from .training import InvariantViolation, NumericFailure, train

EXIT_OK, EXIT_CONFIG, EXIT_NUMERIC, EXIT_INVARIANT = 0, 2, 3, 4

log = logging.getLogger("jacmatch")


def _floats(text: str) -> list:
    return [float(v) for v in text.split(",") if v.strip()]


def _sizes(text: str) -> list:
    return [v.strip() if v.strip() == "full" else int(v) for v in text.split(",") if v.strip()]


def _taps(text: str) -> list:
    pairs = []
    for item in text.split(","):
        t, s = item.split("-")
        pairs.append((int(t), int(s)))
    return pairs


def _windows(text: str) -> list:
    return [int(v) if v.strip().isdigit() else v.strip() for v in text.split(",") if v.strip()]


def _common(p: argparse.ArgumentParser) -> None:
    p.add_argument("--seed", type=int, default=None, help="run a single seed (overrides config seeds)")
    p.add_argument("--seeds", type=str, default=None, help="comma-separated seeds (overrides config)")
    p.add_argument("--out-dir", type=Path, default=None, help="output directory (overrides config)")
    p.add_argument("--jobs", type=int, default=1, help="concurrent grid cells")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="jacmatch", description="Jacobian-matching knowledge transfer experiments")
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("train", help="train one student per seed")
    p.add_argument("config", type=Path)
    p.add_argument("--resume", action="store_true", help="continue from the run's checkpoint")
    p.add_argument("--stop-after", type=int, default=None, help="halt after this many epochs (resumable)")
    _common(p)

    p = sub.add_parser("distill-grid", help="accuracy per (method, examples per class)")
    p.add_argument("config", type=Path)
    p.add_argument("--n-per-class", type=_sizes, default=[1, 5, 10, "full"])
    p.add_argument("--methods", type=lambda s: [m.strip() for m in s.split(";")], default=None,
                   help="semicolon-separated method labels")
    _common(p)

    p = sub.add_parser("robustness-grid", help="accuracy under test noise per penalty weight")
    p.add_argument("config", type=Path)
    p.add_argument("--lambdas", type=_floats, default=[0.0, 0.1, 1.0, 10.0])
    p.add_argument("--sigmas", type=_floats, default=[0.0, 0.1, 0.2, 0.3, 0.4])
    _common(p)

    p = sub.add_parser("transfer", help="two-headed transfer table")
    p.add_argument("config", type=Path)
    p.add_argument("--methods", type=lambda s: [m.strip() for m in s.split(";")], default=None)
    _common(p)

    p = sub.add_parser("ablate", help="tap depth or pool window ablation")
    p.add_argument("config", type=Path)
    p.add_argument("--axis", choices=["tap-depth", "pool-window"], required=True)
    p.add_argument("--values", type=str, required=True,
                   help="tap pairs like 1-1,4-2 or windows like full,s/3,s/5,s/7,none")
    _common(p)

    p = sub.add_parser("verify", help="noise-equivalence, exactness and bound labs")
    p.add_argument("lab", choices=["noise-equiv", "exactness", "bound", "superset"])
    p.add_argument("--family", default="squared", choices=sorted(verify.KIND_FOR_FAMILY))
    p.add_argument("--sigmas", type=_floats, default=list(verify.SIGMAS))
    p.add_argument("--pairs", type=int, default=20, help="smooth pairs for noise-equiv")
    p.add_argument("--dim", type=int, default=2)
    p.add_argument("--curvature", action="store_true", help="include the curvature term in the expansion")
    p.add_argument("--samples", type=int, default=100_000, help="Monte Carlo samples for exactness")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--seeds", type=int, default=100, help="number of seeded instances (bound, superset)")
    p.add_argument("--out-dir", type=Path, default=Path("verify"))
    p.add_argument("--jobs", type=int, default=1)

    p = sub.add_parser("report", help="aggregate result.json files; refuses mixed config hashes")
    p.add_argument("results", nargs="+", type=Path)
    p.add_argument("--out", type=Path, default=None, help="CSV output path")
    return parser


def _load(args) -> tuple:
    cfg = ExperimentConfig.load(args.config)
    if args.out_dir is not None:
        cfg = cfg.with_overrides(out_dir=str(args.out_dir))
    if args.seed is not None:
        seeds = [args.seed]
    elif args.seeds:
        seeds = [int(s) for s in args.seeds.split(",")]
    else:
        seeds = list(cfg["seeds"])
    return cfg, seeds, Path(cfg["out_dir"])


def _print_table(table: dict) -> None:
    print(json.dumps(table, indent=2, sort_keys=True, default=str))


def run(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    cmd = args.command
    if cmd == "verify":
        return _verify(args)
    if cmd == "report":
        table = experiments.report(args.results, args.out)
        _print_table(table)
        return EXIT_OK
    cfg, seeds, out_dir = _load(args)
    if cmd == "train":
        for s in seeds:
            result = train(cfg, s, out_dir, resume=args.resume, stop_after=args.stop_after)
            if result is None:
                print(f"seed {s}: halted after --stop-after; resume with --resume")
            else:
                print(f"seed {s}: test accuracy {result.test_accuracy:.2f}% "
                      f"(config {result.config_hash})")
    elif cmd == "distill-grid":
        _print_table(experiments.distill_grid(cfg, args.n_per_class, args.methods, seeds, out_dir, args.jobs))
    elif cmd == "robustness-grid":
        _print_table(experiments.robustness_grid(cfg, args.lambdas, args.sigmas, seeds, out_dir, args.jobs))
    elif cmd == "transfer":
        _print_table(experiments.transfer_run(cfg, args.methods, seeds, out_dir, args.jobs))
    elif cmd == "ablate":
        values = _taps(args.values) if args.axis == "tap-depth" else _windows(args.values)
        _print_table(experiments.ablate(cfg, args.axis, values, seeds, out_dir, args.jobs))
    return EXIT_OK


def _verify(args) -> int:
    if args.lab == "noise-equiv":
        report = verify.noise_equivalence(args.family, args.sigmas, args.pairs, args.dim, args.seed,
                                          args.curvature)
    elif args.lab == "exactness":
        report = verify.exactness(args.samples, args.seed)
    elif args.lab == "bound":
        report = verify.dataset_bound(args.seeds, args.seed, args.jobs)
    else:
        report = verify.superset_trials(args.seeds, args.seed)
    path = verify.write(report, args.out_dir)
    print("\n".join(verify.summary_lines(report)))
    print(f"report: {path}")
    return EXIT_INVARIANT if report["passed"] is False else EXIT_OK


def main(argv=None) -> int:
    try:
        return run(argv)
    except (ConfigError, FileNotFoundError, KeyError) as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except NumericFailure as exc:
        print(f"numeric failure: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    except FloatingPointError as exc:
        print(f"numeric failure: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    except InvariantViolation as exc:
        print(f"invariant violation: {exc}", file=sys.stderr)
        return EXIT_INVARIANT
    except ValueError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG


if __name__ == "__main__":
    sys.exit(main())
