"""Command-line entry point: one subcommand per pipeline stage plus ``run-all``.

Exit codes: 0 success, 2 invalid config or missing/stale inputs,
3 unsatisfiable security threshold, 4 numeric failure.
"""

from __future__ import annotations

import argparse
import sys
from typing import List, Optional

from . import __version__
from .engine import NonFiniteError, ShapeError, TrainingDiverged
from .errors import Unsatisfiable
from .formats import FormatError
from .pipeline import STAGES, ConfigError, Run, load_config, run_all, run_stage

EXIT_OK, EXIT_VALIDATION, EXIT_UNSATISFIABLE, EXIT_NUMERIC = 0, 2, 3, 4

HELP = {
    "gen-data": "generate the synthetic dataset (members / non-members / test / query splits)",
    "train": "pre-train the public model and fine-tune the victim, recording the update replay",
    "criticality": "score every linear tensor (gradient importance x attention transition)",
    "select-tensors": "choose the shield set against the model-stealing threshold",
    "feature-privacy": "score features by member/non-member divergence and choose the masked set",
    "plan": "solve the placement (exact and relaxed solvers) for the hardware profile",
    "simulate": "run the plan in the two-world simulator and write the priced trace",
    "attack": "evaluate model stealing and membership inference for no/all/selective shielding",
    "report": "render text tables and CSV files from the stage artifacts",
    "run-all": "run every stage in order, skipping stages whose inputs are unchanged",
}


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("-c", "--config", help="JSON config document (defaults apply to missing keys)")
    common.add_argument("-o", "--output", help="output directory (overrides config 'output')")
    common.add_argument("--seed", type=int, help="global seed (overrides config 'seed')")
    common.add_argument("--solver", choices=("exact", "relaxed"), help="placement solver (overrides config)")
    common.add_argument("--set", action="append", default=[], metavar="KEY=VALUE",
                        help="override any config key, e.g. --set selection.tau=0.1 (repeatable)")
    common.add_argument("--force", action="store_true", help="re-run even if the stage is up to date")
    common.add_argument("-q", "--quiet", action="store_true", help="suppress progress lines")

    parser = argparse.ArgumentParser(prog="shieldkit", description=__doc__.splitlines()[0])
    parser.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    sub = parser.add_subparsers(dest="command", required=True)
    for name in (*STAGES, "run-all"):
        sub.add_parser(name, parents=[common], help=HELP[name], description=HELP[name])
    return parser


def main(argv: Optional[List[str]] = None) -> int:
    args = build_parser().parse_args(argv)
    overrides = list(args.set)
    if args.seed is not None:
        overrides.append(f"seed={args.seed}")
    if args.solver:
        overrides.append(f'placement.solver="{args.solver}"')
    log = (lambda _msg: None) if args.quiet else (lambda msg: print(msg, file=sys.stderr))
    try:
        cfg = load_config(args.config, overrides)
        run = Run(cfg, args.output, log)
        if args.command == "run-all":
            run_all(run, args.force)
        else:
            run_stage(run, args.command, args.force)
    except (ConfigError, FormatError, ShapeError, FileNotFoundError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_VALIDATION
    except Unsatisfiable as exc:
        print(f"unsatisfiable: {exc}", file=sys.stderr)
        return EXIT_UNSATISFIABLE
    except (NonFiniteError, TrainingDiverged, FloatingPointError) as exc:
        print(f"numeric failure: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    if args.command in ("report", "run-all") and not args.quiet:
        print(run.path("report.txt").read_text())
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
