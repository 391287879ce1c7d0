"""Standalone figure tool: plots <kind> <in.csv> <out.png>."""

from __future__ import annotations

import argparse
import sys

from actplots.render import FIGURE_KINDS, PlotSpec, SchemaError, render


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="plots", description="Render an analysis figure from a metrics CSV"
    )
    parser.add_argument("kind", choices=FIGURE_KINDS)
    parser.add_argument("input_csv")
    parser.add_argument("output_image")
    return parser


def main(argv: list[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    try:
        out = render(PlotSpec(args.kind, args.input_csv, args.output_image))
    except SchemaError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    print(out)
    return 0


if __name__ == "__main__":
    sys.exit(main())
