"""Command-line surface: ``lab <kind> --config <path> [--seed N]
[--replicas N] [--out DIR]`` plus ``lab verify --manifest <path>``.

Exit codes: 0 ok, 1 acceptance-relevant failure, 2 usage error.
"""

from __future__ import annotations

import argparse
import sys

from .config import KINDS, parse_config
from .errors import CalibrationError, ConfigurationError
from .runner import failure_rate, run, verify

MAX_FAILURE_FRACTION = 0.05


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="lab",
        description="Lattice laboratory for the multiplicative stochastic heat "
                    "equation and KPZ growth with long-range correlated noise.")
    sub = parser.add_subparsers(dest="command", required=True)
    for kind in KINDS:
        p = sub.add_parser(kind, help=f"run a {kind} experiment")
        p.add_argument("--config", required=True, help="key=value config file")
        p.add_argument("--seed", type=int, default=None, help="override master seed")
        p.add_argument("--replicas", type=int, default=None, help="override replica count")
        p.add_argument("--out", default=None, help="override output directory")
    v = sub.add_parser("verify", help="re-check checksums recorded in a manifest")
    v.add_argument("--manifest", required=True)
    return parser


def main(argv: list[str] | None = None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return 2 if exc.code not in (0, None) else 0

    if args.command == "verify":
        ok, problems = verify(args.manifest)
        for p in problems:
            print(p, file=sys.stderr)
        print("ok" if ok else "verification failed")
        return 0 if ok else 1

    overrides = {}
    if args.seed is not None:
        overrides["master_seed"] = args.seed
    if args.replicas is not None:
        overrides["replicas"] = args.replicas
    if args.out is not None:
        overrides["out_dir"] = args.out
    try:
        config = parse_config(args.config, overrides)
    except ConfigurationError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return 2
    if config.kind != args.command:
        print(f"config kind {config.kind!r} does not match subcommand {args.command!r}",
              file=sys.stderr)
        return 2
    try:
        manifest = run(config)
    except (ConfigurationError, CalibrationError) as exc:
        print(f"setup error: {exc}", file=sys.stderr)
        return 2
    if manifest.failures:
        print(f"{len(manifest.failures)} replica(s) failed", file=sys.stderr)
    if failure_rate(manifest) > MAX_FAILURE_FRACTION:
        return 1
    print(f"wrote {len(manifest.files)} file(s); digest {manifest.digest[:12]}")
    return 0


if __name__ == "__main__":
    sys.exit(main())
