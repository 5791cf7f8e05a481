"""Command-line interface.

Subcommands: ``maneuver`` (one solve, files to the output directory),
``compare`` (MPSP / iLQR / TPBVP on the same problem), ``monte-carlo``
(perturbation sweep), ``certify`` (rank certificate and invariant suite).

Exit codes: 0 success, 2 solver non-convergence or failed certification,
3 configuration error.
"""

from __future__ import annotations

import argparse
import json
import sys

from .harness import (
    ConfigError,
    ExperimentConfig,
    comparison_table,
    run_certification,
    run_comparison,
    run_maneuver,
    run_monte_carlo,
)

EXIT_OK = 0
EXIT_SOLVER = 2
EXIT_CONFIG = 3


def _add_common(parser):
    parser.add_argument("--config", help="experiment config JSON", default=None)
    parser.add_argument("--seed", type=int, default=None, help="override config.seed")
    parser.add_argument("--out", default=None, help="override config.out_dir")
    parser.add_argument(
        "--solver", default=None, help="override config.solver (e.g. mpsp_increment)"
    )
    parser.add_argument(
        "--compat-paper-matrices",
        action="store_true",
        help="use the printed-formula linearization/costate variants throughout",
    )
    parser.add_argument(
        "--set",
        action="append",
        default=[],
        metavar="PATH=VALUE",
        help="override any config leaf by dotted path (JSON-parsed value)",
    )


def load_config(args):
    if args.config:
        config = ExperimentConfig.from_json(args.config)
    else:
        config = ExperimentConfig.from_dict({})
    if args.seed is not None:
        config.seed = args.seed
    if args.out is not None:
        config.out_dir = args.out
    if args.solver is not None:
        config.solver = args.solver
    if args.compat_paper_matrices:
        config.compat_paper_matrices = True
    for item in args.set:
        if "=" not in item:
            raise ConfigError(f"--set expects PATH=VALUE, got '{item}'")
        path, raw = item.split("=", 1)
        try:
            value = json.loads(raw)
        except json.JSONDecodeError:
            value = raw
        config.override(path, value)
    config.validate()
    return config


def main(argv=None):
    parser = argparse.ArgumentParser(
        prog="liempsp",
        description="MPSP attitude-maneuver toolkit with iLQR and TPBVP benchmarks",
    )
    sub = parser.add_subparsers(dest="command", required=True)
    for name in ("maneuver", "compare", "monte-carlo"):
        _add_common(sub.add_parser(name))
    sub.add_parser("certify", help="run the rank certificate and invariant suite")

    args = parser.parse_args(argv)

    if args.command == "certify":
        checks = run_certification()
        failed = 0
        for name, ok, detail in checks:
            print(f"{'PASS' if ok else 'FAIL'}  {name}  ({detail})")
            failed += 0 if ok else 1
        print(f"{len(checks) - failed}/{len(checks)} checks passed")
        return EXIT_OK if failed == 0 else EXIT_SOLVER

    try:
        config = load_config(args)
    except ConfigError as err:
        print(f"config error: {err}", file=sys.stderr)
        return EXIT_CONFIG
    except FileNotFoundError as err:
        print(f"config error: {err}", file=sys.stderr)
        return EXIT_CONFIG

    if args.command == "maneuver":
        report = run_maneuver(config)
        print(f"{config.solver}: {report.status}")
        for kind, path in report.files.items():
            print(f"  {kind}: {path}")
        return report.exit_code

    if args.command == "compare":
        payload = run_comparison(config)
        print(comparison_table(payload))
        all_ok = all(entry["converged"] for entry in payload["solvers"].values())
        return EXIT_OK if all_ok else EXIT_SOLVER

    aggregate, _ = run_monte_carlo(config)
    print(
        f"{config.monte_carlo.mode}: {aggregate['n_converged']}/{aggregate['trials']} "
        f"trials converged (max iterations "
        f"{aggregate['iterations_max']})"
    )
    return EXIT_OK if aggregate["n_converged"] == aggregate["trials"] else EXIT_SOLVER


if __name__ == "__main__":
    sys.exit(main())
