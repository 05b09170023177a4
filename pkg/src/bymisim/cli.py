"""Command-line entry point.

    bymisim run --config cfg.yaml [--seed S] [--out DIR] [--paper-scale]
    bymisim sweep --config cfg.yaml --axis s_r --values 0.1,0.3,0.5 --reps 5 [--out DIR]
    bymisim connectivity --m 50 --p 0.5 --rho 0.2 --model exact --trials 200

Exit codes: 0 success, 2 configuration error, 3 failure inside a phase.
"""

from __future__ import annotations

import argparse
import dataclasses
import json
import logging
import sys

from .config import ConfigError, RunConfig, full_scale, load
from .pipeline import REMOVAL_MODELS, SWEEP_AXES, PhaseError, SweepSpec, connectivity_study, run_pipeline, sweep

EXIT_OK, EXIT_CONFIG, EXIT_PHASE = 0, 2, 3


def _config(args) -> RunConfig:
    cfg = load(args.config) if args.config else RunConfig()
    if args.paper_scale:
        cfg = full_scale(cfg)
    if getattr(args, "seed", None) is not None:
        cfg = dataclasses.replace(cfg, seed=args.seed)
    return cfg.validate()


def _parse_values(text: str, axis: str) -> tuple:
    cast = int if axis == "K" else float
    try:
        return tuple(cast(v) for v in text.split(",") if v.strip())
    except ValueError as exc:
        raise ConfigError(f"bad --values {text!r}: {exc}") from exc


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="bymisim", description=__doc__.split("\n")[0])
    parser.add_argument("-v", "--verbose", action="count", default=0)
    sub = parser.add_subparsers(dest="command", required=True)

    run = sub.add_parser("run", help="one end-to-end run")
    run.add_argument("--config")
    run.add_argument("--seed", type=int)
    run.add_argument("--out")
    run.add_argument("--paper-scale", action="store_true", help="full-size preset: m=150, K=3000")

    sw = sub.add_parser("sweep", help="replicated runs over one parameter axis")
    sw.add_argument("--config")
    sw.add_argument("--axis", required=True, choices=SWEEP_AXES)
    sw.add_argument("--values", required=True)
    sw.add_argument("--reps", type=int, default=5)
    sw.add_argument("--workers", type=int, default=1)
    sw.add_argument("--seed", type=int)
    sw.add_argument("--out")
    sw.add_argument("--paper-scale", action="store_true")

    cn = sub.add_parser("connectivity", help="Monte Carlo estimate of pruned-graph connectivity")
    cn.add_argument("--m", type=int, default=50)
    cn.add_argument("--p", type=float, default=0.5)
    cn.add_argument("--rho", type=float, default=0.2)
    cn.add_argument("--model", choices=REMOVAL_MODELS, default="exact")
    cn.add_argument("--trials", type=int, default=200)
    cn.add_argument("--seed", type=int, default=0)
    cn.add_argument("--config", help="run configuration used by the 'pipeline' model")
    cn.add_argument("--paper-scale", action="store_true")
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.WARNING - 10 * args.verbose, format="%(levelname)s %(name)s: %(message)s")
    try:
        if args.command == "run":
            cfg = _config(args)
            res = run_pipeline(cfg, out_dir=args.out)
            print(json.dumps(res.summary(), sort_keys=True))
        elif args.command == "sweep":
            cfg = _config(args)
            spec = SweepSpec(args.axis, _parse_values(args.values, args.axis), args.reps)
            rows = sweep(cfg, spec, workers=args.workers, out_dir=args.out or cfg.output.dir)
            failed = [r for r in rows if r["error"]]
            print(f"{len(rows)} runs, {len(failed)} failed")
            if failed:
                for r in failed:
                    print(f"  value={r['value']} seed={r['seed']}: {r['error']}", file=sys.stderr)
                return EXIT_PHASE
        else:
            cfg = load(args.config) if args.config else RunConfig()
            if args.paper_scale:
                cfg = full_scale(cfg)
            res = connectivity_study(args.m, args.p, args.rho, args.model, args.trials, args.seed, cfg)
            print(json.dumps({**dataclasses.asdict(res), "probability": res.probability}, sort_keys=True))
    except (ConfigError, ValueError) as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except PhaseError as exc:
        if exc.partial is not None:
            print(json.dumps(exc.partial.summary(), sort_keys=True))
        print(f"phase failure: {exc}", file=sys.stderr)
        return EXIT_PHASE
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
