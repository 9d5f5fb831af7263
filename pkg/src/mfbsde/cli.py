"""Command-line front end: one config file, one command, one output directory.

Exit codes: 0 on success, 1 when the pipeline ran but a convergence or
validation flag failed (the manifest is still written), 2 for usage and
config errors (nothing is computed or written).
"""

from __future__ import annotations

import argparse
import dataclasses
import os
import sys

from .errors import InvalidArgumentError
from .harness import COMMANDS, available_series, emit_plot_data, load_config, run, write_manifest
from .plots import render_plots

_COMMAND_HELP = {
    "solve": "solve the coupled system and report cost and diagnostics",
    "gradient-check": "adjoint control gradient with finite-difference columns",
    "duality-check": "bilinear identity between sensitivities and adjoints",
    "picard-diagnose": "coupling-iteration contraction history",
    "optimize": "projected gradient descent over the admissible box",
    "validate-coeffs": "finite-difference audit of declared partial derivatives",
    "diff-quotient": "difference-quotient convergence toward the sensitivities",
}


def build_parser():
    parser = argparse.ArgumentParser(
        prog="mfbsde",
        description="Particle solver, adjoint sensitivities and control "
                    "optimizer for path-law-coupled forward-backward systems.")
    sub = parser.add_subparsers(dest="command", required=True, metavar="command")
    for command in COMMANDS:
        cp = sub.add_parser(command, help=_COMMAND_HELP[command])
        cp.add_argument("--config", required=True,
                        help="path to the experiment config file")
        cp.add_argument("--out", default=".",
                        help="output directory (default: current directory)")
        cp.add_argument("--reference-mode", action="store_true",
                        help="zero wall times and force one worker so reruns "
                             "are byte-identical")
        cp.add_argument("--workers", type=int, default=None,
                        help="override the config's worker count")
    return parser


def main(argv=None):
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code) if exc.code is not None else 2

    try:
        config = load_config(args.config)
        if args.workers is not None:
            config = dataclasses.replace(config, workers=args.workers)
        manifest = run(config, args.command, reference_mode=args.reference_mode)
    except (InvalidArgumentError, OSError) as exc:
        print(f"mfbsde: error: {exc}", file=sys.stderr)
        return 2

    os.makedirs(args.out, exist_ok=True)
    written = [write_manifest(manifest, os.path.join(args.out, "manifest.json"))]
    for which in available_series(manifest):
        written.append(emit_plot_data(manifest, which,
                                      os.path.join(args.out, f"{which}.csv")))
    written.extend(render_plots(manifest, args.out))

    print(f"{args.command}: {manifest.status}"
          + (f" ({manifest.failure})" if manifest.failure else ""))
    for warning in manifest.warnings:
        print(f"warning: {warning}")
    for path in written:
        print(f"wrote {path}")
    return 0 if manifest.status == "ok" else 1


if __name__ == "__main__":
    raise SystemExit(main())
