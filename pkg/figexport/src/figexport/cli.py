"""Command-line entry: render figures from exported smoothing artifacts."""

import argparse
import sys

from .bundle import SchemaError, load_bundle
from .render import render_results_table, render_trajectory_3d, render_uncertainty_band


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="figexport",
                                     description=__doc__.strip())
    sub = parser.add_subparsers(dest="command", required=True)

    t3 = sub.add_parser("trajectory3d", help="true vs smoothed 3-D state curves")
    t3.add_argument("--bundle", required=True, help="directory of trajectory CSVs")
    t3.add_argument("--sequence", type=int, default=0)
    t3.add_argument("--out", required=True, help="output image file")

    band = sub.add_parser("band", help="one coordinate with mean ± 2·std band")
    band.add_argument("--bundle", required=True, help="directory of trajectory CSVs")
    band.add_argument("--coordinate", type=int, required=True,
                      help="0-based state coordinate")
    band.add_argument("--sequence", type=int, default=0)
    band.add_argument("--out", required=True, help="output image file")

    table = sub.add_parser("table", help="grouped NMSE bars per method per SMNR")
    table.add_argument("--results", required=True, help="results CSV file")
    table.add_argument("--out", required=True, help="output image file")
    return parser


def main(argv=None) -> int:
    try:
        args = build_parser().parse_args(argv)
    except SystemExit as exc:
        return exc.code or 0
    try:
        if args.command == "trajectory3d":
            path = render_trajectory_3d(load_bundle(args.bundle), args.out,
                                        sequence=args.sequence)
        elif args.command == "band":
            path = render_uncertainty_band(load_bundle(args.bundle),
                                           args.coordinate, args.out,
                                           sequence=args.sequence)
        else:
            path = render_results_table(args.results, args.out)
    except (SchemaError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    print(f"wrote {path}")
    return 0


if __name__ == "__main__":
    sys.exit(main())
