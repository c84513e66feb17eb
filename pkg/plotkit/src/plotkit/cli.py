"""Command-line rendering of synthesis artifacts."""

from __future__ import annotations

import argparse
import sys

from .heatmap import PlotSpec, SchemaError, SelectorError, render_heatmap


def _parse_region(text: str):
    parts = [float(v) for v in text.split(",")]
    if len(parts) != 4:
        raise argparse.ArgumentTypeError(
            "region must be x1lo,x1hi,x2lo,x2hi"
        )
    return tuple(parts)


def main(argv=None) -> int:
    parser = argparse.ArgumentParser(
        prog="plotkit", description="Render layersynth value fields"
    )
    parser.add_argument("--values", required=True, help="value field CSV")
    parser.add_argument("--out", required=True, help="output image (png/svg)")
    parser.add_argument("--q", default=None, help="DFA state selector")
    parser.add_argument("--layer", default=None, help="layer selector")
    parser.add_argument("--waypoints", default=None, help="waypoint model file")
    parser.add_argument(
        "--region",
        action="append",
        default=[],
        type=_parse_region,
        metavar="X1LO,X1HI,X2LO,X2HI",
        help="rectangle outline (repeatable; use --region=-1,2,... for "
        "negative bounds)",
    )
    parser.add_argument("--title", default="")
    args = parser.parse_args(argv)
    spec = PlotSpec(
        values_csv=args.values,
        output_path=args.out,
        q=args.q if args.q is None else int(args.q),
        layer=args.layer,
        waypoint_file=args.waypoints,
        regions=tuple(args.region),
        title=args.title,
    )
    try:
        render_heatmap(spec)
    except (SchemaError, SelectorError, OSError) as exc:
        print(f"plotkit failed: {exc}", file=sys.stderr)
        return 1
    return 0


if __name__ == "__main__":
    sys.exit(main())
