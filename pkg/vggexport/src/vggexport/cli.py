"""vggexport command line: one-shot archive conversion."""

from __future__ import annotations

import argparse
import sys

from .exporter import ExportError, export


def main(argv=None) -> int:
    parser = argparse.ArgumentParser(
        prog="vggexport",
        description="Write VGG-19 blocks 1-3 as a forgecaps weight archive")
    parser.add_argument("--out", required=True, help="output archive path")
    parser.add_argument("--source",
                        help="local VGG-19 model file; omit to fetch the "
                             "torchvision pretrained distribution (needs network)")
    args = parser.parse_args(argv)
    try:
        path = export(args.out, source=args.source)
    except ExportError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    print(f"archive written to {path}")
    return 0


if __name__ == "__main__":
    sys.exit(main())
