"""Figure rendering CLI: isacplots --kind <kind> --in <csv...> --out <image>."""

from __future__ import annotations

import argparse
import sys

from .render import KINDS, FigureSpec, SchemaError, render


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="isacplots",
                                description="Render figures from simulator "
                                            "CSV bundles")
    p.add_argument("--kind", required=True, choices=KINDS)
    p.add_argument("--in", dest="inputs", nargs="+", required=True,
                   help="input CSV file(s)")
    p.add_argument("--out", required=True, help="output image path")
    p.add_argument("--title", default=None)
    p.add_argument("--series", default=None,
                   help="comma list of expected series names (warn if absent)")
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    series = args.series.split(",") if args.series else None
    try:
        out = render(FigureSpec(kind=args.kind, inputs=args.inputs,
                                output=args.out, title=args.title,
                                series=series))
    except (SchemaError, FileNotFoundError, ValueError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    print(f"wrote {out}")
    return 0


if __name__ == "__main__":
    sys.exit(main())
