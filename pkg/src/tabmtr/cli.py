"""Command line: ``tabmtr prepare|run|report|selfcheck``.

Exit codes: 0 success, 2 bad config, 3 data problem, 4 failed runs.
"""

from __future__ import annotations

import argparse
import logging
import sys

from . import harness
from .config import load_config
from .data import DataError
from .training import ConfigError

EXIT_OK, EXIT_CONFIG, EXIT_DATA, EXIT_RUN = 0, 2, 3, 4

log = logging.getLogger("tabmtr")


def _load(args):
    config = load_config(args.config)
    if getattr(args, "seed_offset", 0):
        config = config.with_seed_offset(args.seed_offset)
    if getattr(args, "output_dir", None):
        d = config.to_dict()
        d["output_dir"] = args.output_dir
        config = type(config).from_dict(d)
    return config


def cmd_prepare(args) -> int:
    config = _load(args)
    for seed, (path, hit) in harness.prepare(config).items():
        print(f"seed {seed}: {'cached' if hit else 'prepared'} {path}")
    return EXIT_OK


def cmd_run(args) -> int:
    config = _load(args)
    summary = harness.run_sweep(config, resume=args.resume, max_runs=args.max_runs, workers=args.workers)
    print(f"runs planned {summary.planned}, already done {summary.skipped}, "
          f"completed {summary.completed}, failed {len(summary.failed)}, remaining {summary.remaining}")
    for run_id, err in summary.failed:
        print(f"FAILED {run_id}: {err}", file=sys.stderr)
    print(f"results: {config.output_dir}/results.jsonl")
    return EXIT_OK if summary.ok else EXIT_RUN


def cmd_report(args) -> int:
    paths = harness.report(args.inputs, args.out, figures=not args.no_figures)
    for key in ("report", "markdown", "summary", "missing"):
        print(f"{key}: {paths[key]}")
    print(f"curves: {len(paths['curves'])} csv files in {args.out}/curves")
    if "figures" in paths:
        print(f"figures: {len(paths['figures'])} files in {args.out}/figures")
    if paths["n_missing"]:
        print(f"warning: {paths['n_missing']} missing results, listed in missing.csv", file=sys.stderr)
    return EXIT_OK


def cmd_selfcheck(args) -> int:
    from .selfcheck import main
    return main()


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="tabmtr", description=__doc__.splitlines()[0])
    p.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")
    sub = p.add_subparsers(dest="command", required=True)

    sp = sub.add_parser("prepare", help="split and preprocess every seed into the cache")
    sp.add_argument("--config", required=True)
    sp.add_argument("--seed-offset", type=int, default=0, help="add this to every configured seed")
    sp.add_argument("--output-dir", help="override the config's output_dir")
    sp.set_defaults(func=cmd_prepare)

    sp = sub.add_parser("run", help="run the method x hyperparameter x seed sweep")
    sp.add_argument("--config", required=True)
    sp.add_argument("--resume", action="store_true", help="continue a sweep in an existing output_dir")
    sp.add_argument("--seed-offset", type=int, default=0, help="add this to every configured seed")
    sp.add_argument("--output-dir", help="override the config's output_dir")
    sp.add_argument("--workers", type=int, help="worker processes (default: config, then CPU count)")
    sp.add_argument("--max-runs", type=int, help="stop after this many runs (resume later)")
    sp.set_defaults(func=cmd_run)

    sp = sub.add_parser("report", help="aggregate results into tables, curves and figures")
    sp.add_argument("--in", dest="inputs", nargs="+", required=True, help="results directories")
    sp.add_argument("--out", required=True)
    sp.add_argument("--no-figures", action="store_true")
    sp.set_defaults(func=cmd_report)

    sp = sub.add_parser("selfcheck", help="fast gradient / augmentation / metric invariants")
    sp.set_defaults(func=cmd_selfcheck)
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(asctime)s %(name)s %(levelname)s %(message)s")
    try:
        return args.func(args)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except DataError as exc:
        print(f"data error: {exc}", file=sys.stderr)
        return EXIT_DATA
    except harness.RunError as exc:
        print(f"run error: {exc}", file=sys.stderr)
        return EXIT_RUN


if __name__ == "__main__":
    sys.exit(main())
