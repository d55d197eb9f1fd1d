"""Command-line entry point: ``iqclearn {generate,learn,eval,verify,run-all} CONFIG``.

On failure a single JSON error record is written to stderr and the exit
status is nonzero (2 for bad input, 1 for a failed stage).
"""

from __future__ import annotations

import argparse
import json
import logging
import sys

from . import __version__
from .pipeline import PipelineConfig, PipelineError, evaluate, generate, learn, run_all, verify

log = logging.getLogger("iqclearn")

EXIT_STAGE = 1
EXIT_INPUT = 2


def _parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(
        prog="iqclearn",
        description="Learn an integral quadratic constraint for plant-model mismatch from "
                    "simulated trajectories.",
    )
    p.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    sub = p.add_subparsers(dest="command", required=True)

    def add(name, help_):
        sp = sub.add_parser(name, help=help_)
        sp.add_argument("config", help="experiment config (JSON)")
        sp.add_argument("--out-dir", help="output directory (overrides config out_dir)")
        sp.add_argument("--seed", type=int, help="master seed (overrides config seed)")
        sp.add_argument("-v", "--verbose", action="count", default=0)
        return sp

    add("generate", "simulate trajectories and write the Gram archive")
    add("learn", "solve the OC-SVM on the archive and write the solution")
    add("eval", "tabulate the learned l(jw) curve and compare with references")
    vp = add("verify", "plant vs nominal responses to cosine inputs")
    vp.add_argument("--omega", type=float, action="append",
                    help="verification frequency in rad/time (repeatable)")
    add("run-all", "generate, learn, eval and (if configured) verify")
    return p


def _error(record: dict, code: int) -> int:
    sys.stderr.write(json.dumps(record, sort_keys=True, default=str) + "\n")
    return code


def main(argv=None) -> int:
    args = _parser().parse_args(argv)
    logging.basicConfig(
        level=logging.WARNING - 10 * min(args.verbose, 2),
        format="%(levelname)s %(name)s: %(message)s",
    )
    try:
        cfg = PipelineConfig.load(args.config)
        if args.seed is not None:
            cfg = cfg.replace(seed=args.seed)
    except (OSError, ValueError, KeyError, TypeError) as exc:
        return _error({"stage": "config", "error": str(exc), "type": type(exc).__name__},
                      EXIT_INPUT)
    out = args.out_dir
    try:
        if args.command == "generate":
            grams = generate(cfg, out)
            result = {"records": len(grams)}
        elif args.command == "learn":
            sol = learn(cfg, out)
            result = {"rho": sol.rho, "mean_violation": float(sol.xi.mean()),
                      "objective": sol.objective,
                      "iterations": sol.diagnostics.get("iterations")}
        elif args.command == "eval":
            result = evaluate(cfg, out)
        elif args.command == "verify":
            result = verify(cfg, args.omega, out)
        else:
            result = run_all(cfg, out)
    except PipelineError as exc:
        return _error(exc.record, EXIT_STAGE)
    except (OSError, ValueError) as exc:
        return _error({"stage": args.command, "error": str(exc),
                       "type": type(exc).__name__}, EXIT_INPUT)
    result = {"command": args.command, "config_hash": cfg.config_hash, **result}
    sys.stdout.write(json.dumps(result, sort_keys=True, default=str) + "\n")
    return 0


if __name__ == "__main__":  # pragma: no cover
    sys.exit(main())
