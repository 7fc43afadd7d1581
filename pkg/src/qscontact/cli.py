"""Command-line entry point: ``qscontact <subcommand> --config PATH``.

Exit status: 0 success / all checks pass, 1 failed validation or run
error, 2 configuration error.
"""
from __future__ import annotations

import argparse
import sys

from .harness import EXIT_CONFIG, SUBCOMMANDS, ConfigError, dispatch, parse_config


def _u64(text):
    value = int(text)
    if not 0 <= value < 2 ** 64:
        raise argparse.ArgumentTypeError("seed must fit in an unsigned 64-bit integer")
    return value


def build_parser():
    parser = argparse.ArgumentParser(
        prog="qscontact",
        description="Critical marked contact model: spectra, pair correlations, "
                    "hierarchy evolution, simulation and closure checks.")
    parser.add_argument("subcommand", choices=SUBCOMMANDS)
    parser.add_argument("--config", required=True, help="YAML run configuration")
    parser.add_argument("--out", default=None,
                        help="output base directory (default: output.directory or ./runs)")
    parser.add_argument("--seed", type=_u64, default=None, help="override task.seed")
    parser.add_argument("--replicas", type=int, default=None, help="override task.replicas")
    return parser


def main(argv=None):
    args = build_parser().parse_args(argv)
    try:
        cfg = parse_config(args.config)
        if args.replicas is not None and args.replicas < 1:
            raise ConfigError([f"task.replicas: must be a positive integer "
                               f"(got {args.replicas} from --replicas)"])
        status, out = dispatch(cfg, args.subcommand, out_dir=args.out, seed=args.seed,
                               replicas=args.replicas)
    except ConfigError as exc:
        print(exc, file=sys.stderr)
        return EXIT_CONFIG
    print(out)
    return status


if __name__ == "__main__":
    sys.exit(main())
