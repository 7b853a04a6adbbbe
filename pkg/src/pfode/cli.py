"""Command line entry point: ``pfode {run,convergence,score-error,validate}``."""
from __future__ import annotations

import argparse
import logging
import sys
from pathlib import Path

from .exceptions import ConfigurationError
from .harness import (
    StudyResult,
    load_config,
    manifest_path,
    run_convergence_study,
    run_score_error_study,
    run_single,
    write_csv,
    write_manifest,
)

EXIT_OK = 0
EXIT_CONFIG = 2
EXIT_RUN = 3

log = logging.getLogger("pfode")


def _parser():
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", required=True, help="JSON experiment config")
    common.add_argument("--seed", type=int, default=None, help="override the config seed")
    common.add_argument("--out", default=None, help="CSV output path (default: config 'output')")
    common.add_argument("--threads", type=int, default=1,
                        help="worker threads; affects speed only, never output")
    common.add_argument("--no-strict-alignment", action="store_true",
                        help="allow stage times off the score grid")
    common.add_argument("--no-timing", action="store_true",
                        help="leave runtime_s blank so the CSV is byte-reproducible")
    common.add_argument("-v", "--verbose", action="store_true")

    p = argparse.ArgumentParser(prog="pfode", description=__doc__)
    sub = p.add_subparsers(dest="command", required=True)
    run = sub.add_parser("run", parents=[common], help="one solver run")
    run.add_argument("--scheme", default=None, help="scheme (default: first in config)")
    run.add_argument("--n-steps", type=int, default=None,
                     help="step count (default: first in config)")
    run.add_argument("--eps", type=float, default=None,
                     help="score error (default: from config)")
    sub.add_parser("convergence", parents=[common], help="step-size sweep with fitted orders")
    sub.add_parser("score-error", parents=[common], help="eps sweep with fitted slope")
    sub.add_parser("validate", parents=[common], help="check config and alignment only")
    return p


def _overrides(args):
    out = {}
    if args.seed is not None:
        out["seed"] = args.seed
    if args.out is not None:
        out["output"] = args.out
    if args.no_strict_alignment:
        out["grid.strict_alignment"] = False
    return out


def _single(config, args):
    scheme = args.scheme or config.schemes[0]
    n = args.n_steps or config.grid.n_steps[0]
    overrides = {"schemes": [scheme], "grid.n_steps": [n]}
    if args.scheme or args.n_steps:
        # re-validate so the chosen combination passes the alignment check
        config = load_config(config.model_dump(mode="json"), overrides)
    if args.eps is not None:
        eps = args.eps
    elif isinstance(config.eps_score, list):
        eps = float(config.eps_score[0])
    else:
        eps = config.eps_for(scheme, n)
    report = run_single(config, scheme, n, eps, n_jobs=args.threads)
    return StudyResult("run", [report], {}, config)


def main(argv=None):
    args = _parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s", stream=sys.stderr)
    if args.threads < 1:
        print("error: --threads must be >= 1", file=sys.stderr)
        return EXIT_CONFIG
    try:
        config = load_config(Path(args.config), _overrides(args))
        if args.command == "validate":
            print(f"config ok: {len(config.schemes)} scheme(s), n_steps={config.grid.n_steps}")
            return EXIT_OK
        if args.command == "run":
            result = _single(config, args)
        elif args.command == "convergence":
            result = run_convergence_study(config, n_jobs=args.threads)
        else:
            result = run_score_error_study(config, n_jobs=args.threads)
    except ConfigurationError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except (ArithmeticError, FloatingPointError, ValueError) as exc:
        print(f"run failed: {exc}", file=sys.stderr)
        return EXIT_RUN

    text = write_csv(result.rows(timing=not args.no_timing), config.output)
    if config.output:
        command = "pfode " + " ".join(sys.argv[1:] if argv is None else argv)
        write_manifest(manifest_path(config.output), config, command,
                       extra={"threads": args.threads, "slopes": result.slopes})
    else:
        sys.stdout.write(text)
    for name, slope in result.slopes.items():
        print(f"{name}: fitted order {slope:.3f}", file=sys.stderr)
    if result.failed:
        for r in result.reports:
            if r.failed:
                print(f"run failed: {r.scheme} n_steps={r.n_steps}: {r.message}", file=sys.stderr)
        return EXIT_RUN
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
