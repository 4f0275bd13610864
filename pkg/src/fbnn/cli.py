"""Command line entry point: ``fbnn <subcommand> --config FILE [--seed N] [--out DIR]``.

Exit codes: 0 success, 1 configuration error, 2 numerical failure.
"""

from __future__ import annotations

import argparse
import sys

from .dynamics import SingularityError
from .experiments import ExperimentSpec, SpecError, run_experiment

SUBCOMMANDS = {
    "train-node": ("spiral-train", "quad-train", "ballistic-predict"),
    "train-feedback": ("feedback-train",),
    "predict": ("spiral-transfer", "step-disturbance", "ballistic-predict"),
    "mpc-sim": ("quad-mpc-compare",),
    "ablate": ("gain-heatmap", "decay-ablation"),
    "verify-bounds": ("bound-check",),
}

EXIT_OK, EXIT_SPEC, EXIT_NUMERIC = 0, 1, 2


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="fbnn", description="Feedback neural network experiments.")
    sub = parser.add_subparsers(dest="command", required=True)
    for name, kinds in SUBCOMMANDS.items():
        p = sub.add_parser(name, help=f"run a {' / '.join(kinds)} experiment")
        p.add_argument("--config", required=True, help="JSON experiment spec")
        p.add_argument("--seed", type=int, default=None, help="override the config seed")
        p.add_argument("--out", default=None, help="output directory (overrides out_dir)")
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        spec = ExperimentSpec.load(args.config)
        if spec.kind not in SUBCOMMANDS[args.command]:
            raise SpecError(f"{args.command} cannot run a {spec.kind} experiment "
                            f"(expected {' or '.join(SUBCOMMANDS[args.command])})")
        if args.seed is not None:
            spec.seed = args.seed
        if args.out is not None:
            spec.out_dir = args.out
        report = run_experiment(spec)
    except (FloatingPointError, SingularityError) as e:
        print(f"numerical failure: {e}", file=sys.stderr)
        return EXIT_NUMERIC
    except (ValueError, TypeError) as e:
        # SpecError, UnstableGainError and parameter validation errors
        print(f"error: {e}", file=sys.stderr)
        return EXIT_SPEC
    for key, value in report.metrics.items():
        if isinstance(value, (int, float)):
            print(f"{key}: {value:.6g}")
    print(f"wrote {spec.out_dir}")
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
