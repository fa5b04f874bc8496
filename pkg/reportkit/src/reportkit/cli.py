"""``report <plot-kind> --in <files> --out <dir>`` batch figure tool."""

from __future__ import annotations

import argparse
import sys

from .plots import KINDS, PlotSpec, ReportError, render


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="report",
                                     description="Render figures from laboratory outputs.")
    sub = parser.add_subparsers(dest="kind", required=True)
    for kind in KINDS:
        p = sub.add_parser(kind)
        p.add_argument("--in", dest="inputs", nargs="+", required=True)
        p.add_argument("--out", dest="out_dir", required=True)
        p.add_argument("--target-exponent", type=float, default=None)
        p.add_argument("--target-label", default=None)
        p.add_argument("--epsilon", type=float, default=None)
        p.add_argument("--transform", default=None)
        p.add_argument("--column", default=None)
        p.add_argument("--x-col", default="x")
        p.add_argument("--y-col", default="y")
        p.add_argument("--stem", default=None)
    return parser


def main(argv: list[str] | None = None) -> int:
    try:
        args = build_parser().parse_args(argv)
    except SystemExit as exc:
        return 2 if exc.code not in (0, None) else 0
    spec = PlotSpec(kind=args.kind, inputs=tuple(args.inputs), out_dir=args.out_dir,
                    target_exponent=args.target_exponent, target_label=args.target_label,
                    epsilon=args.epsilon, transform=args.transform, column=args.column,
                    x_col=args.x_col, y_col=args.y_col, stem=args.stem)
    try:
        img, cap = render(spec)
    except ReportError as exc:
        print(f"report error: {exc}", file=sys.stderr)
        return 2
    print(img)
    print(cap)
    return 0


if __name__ == "__main__":
    sys.exit(main())
