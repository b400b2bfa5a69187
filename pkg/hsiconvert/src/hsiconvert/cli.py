"""Command line dataset converter.

Three subcommands: mat (container cube, optional ground truth), envi
(image + header pair), prior (spectral library text). Exit codes:
0 success, 1 conversion failure, 2 usage error.
"""

from __future__ import annotations

import argparse
import sys

from specdetect.hsio import CubeFormatError, ValidationError

from .convert import (ConvertError, SourceDescriptor, convert_container,
                      convert_envi, convert_prior)

__all__ = ["main"]


def _parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(
        prog="hsiconvert",
        description="Convert public hyperspectral data (container files, "
                    "image+header pairs, spectral library text) into the "
                    "detection pipeline's native formats.")
    sub = p.add_subparsers(dest="command", required=True)

    def add_io(sp):
        sp.add_argument("--in", dest="in_path", required=True, metavar="FILE")
        sp.add_argument("--out", dest="out_path", required=True,
                        metavar="FILE")

    sp = sub.add_parser("mat", help="container cube to native scene file")
    add_io(sp)
    sp.add_argument("--cube-var", default="data", metavar="NAME",
                    help="container variable holding the cube")
    sp.add_argument("--gt-var", default=None, metavar="NAME",
                    help="container variable holding ground-truth labels")
    sp.add_argument("--band-order", default="bip",
                    choices=("bip", "bil", "bsq"),
                    help="axis layout of the stored cube array")
    sp.add_argument("--class-cap", type=int, default=None, metavar="N",
                    help="relabel classes holding more than N pixels to 0")

    sp = sub.add_parser("envi", help="image + header pair to native "
                                     "scene file")
    add_io(sp)

    sp = sub.add_parser("prior", help="spectral library text to canonical "
                                      "prior file")
    add_io(sp)
    return p


def main(argv=None) -> int:
    try:
        args = _parser().parse_args(argv)
        if args.command == "mat":
            convert_container(SourceDescriptor(
                path=args.in_path, cube_var=args.cube_var,
                gt_var=args.gt_var, band_order=args.band_order,
                class_cap=args.class_cap), args.out_path)
        elif args.command == "envi":
            convert_envi(args.in_path, args.out_path)
        else:
            convert_prior(args.in_path, args.out_path)
        return 0
    except (ConvertError, ValidationError, CubeFormatError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
