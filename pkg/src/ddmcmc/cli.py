"""Command-line entry point: ``ddmcmc <subcommand> --config cfg.toml [--seed N] [--out DIR]``."""
from __future__ import annotations

import argparse
import json
import logging
import sys

from . import config as config_mod
from .errors import DDMCMCError, MissingArtifact, ValidationError
from .experiment import RunDir, Setup, kl_info, run_all

EXIT_OK, EXIT_VALIDATION, EXIT_RUNTIME = 0, 1, 2

STAGE_COMMANDS = {
    "gen-data": ("gen-data",),
    "gp-fit": ("gp-fit",),
    "run-gmcmc": ("run-gmcmc",),
    "run-ddmcmc": ("run-ddmcmc",),
    "report": ("report",),
    "all": ("gen-data", "kl-info", "gp-fit", "run-gmcmc", "run-ddmcmc", "report"),
}


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_help(sys.stderr)
        sys.stderr.write(f"{self.prog}: error: {message}\n")
        raise UsageError(message)


def build_parser() -> argparse.ArgumentParser:
    common = _Parser(add_help=False)
    common.add_argument("--config", required=True, help="TOML config file or preset name (tp1, tp2, tp3)")
    common.add_argument("--seed", type=int, help="master seed (overrides run.seed)")
    common.add_argument("--out", help="output directory (overrides run.out)")
    common.add_argument("--data-grid-refine", type=int, help="generate data on a grid refined by this factor")
    common.add_argument("--truth-file", help="load truth coefficients instead of drawing them")
    common.add_argument("-v", "--verbose", action="store_true")

    parser = _Parser(prog="ddmcmc", description="Domain-decomposed MCMC for permeability inversion.")
    sub = parser.add_subparsers(dest="command", metavar="command", parser_class=_Parser)
    sub.required = True
    helps = {
        "gen-data": "draw a truth field and write synthetic sensor data",
        "kl-info": "print global and local KL truncation sizes",
        "gp-fit": "fit interface Gaussian processes by active learning",
        "run-gmcmc": "run the global MCMC baseline",
        "run-ddmcmc": "run local chains and assemble global samples",
        "report": "compute error metrics from the run directory",
        "all": "run every stage in order",
    }
    for name, text in helps.items():
        sub.add_parser(name, parents=[common], help=text, description=text)
    return parser


def load_config(args) -> config_mod.ExperimentConfig:
    path = args.config
    if path in ("tp1", "tp2", "tp3"):
        path = config_mod.preset_path(path)
    cfg = config_mod.load(path)
    run = {}
    if args.seed is not None:
        run["seed"] = args.seed
    if args.out is not None:
        run["out"] = args.out
    if args.data_grid_refine is not None:
        run["data_grid_refine"] = args.data_grid_refine
    if args.truth_file is not None:
        run["truth_file"] = args.truth_file
    return cfg.replace("run", **run) if run else cfg


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except UsageError:
        return EXIT_VALIDATION
    except SystemExit as exc:
        return EXIT_OK if exc.code in (0, None) else EXIT_VALIDATION
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        cfg = load_config(args)
        if args.command == "kl-info":
            info = kl_info(Setup(cfg))
            print(f"global d = {info['global']['d']}")
            for i, loc in enumerate(info["local"]):
                print(f"local d^({i + 1}) = {loc['d']}")
            if args.out is not None:
                run = RunDir(cfg.run.out, cfg)
                run.add_json("kl_info.json", info, "kl")
                run.save()
            return EXIT_OK
        state = run_all(cfg, stages=STAGE_COMMANDS[args.command])
        if "errors" in state:
            e = state["errors"]
            print(json.dumps({k: e[k] for k in ("epsilon", "epsilon_stitched", "epsilon_assembled")}, indent=2))
        print(f"outputs in {cfg.run.out}")
        return EXIT_OK
    except MissingArtifact as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_RUNTIME
    except ValidationError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_VALIDATION
    except (DDMCMCError, OSError, ArithmeticError, RuntimeError, ValueError) as exc:
        print(f"error: {type(exc).__name__}: {exc}", file=sys.stderr)
        return EXIT_RUNTIME


if __name__ == "__main__":
    sys.exit(main())
