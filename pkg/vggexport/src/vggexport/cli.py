"""Command line entry point for the weight exporter."""

from __future__ import annotations

import argparse
import sys

from .dpnw import DpnwError
from .export import run_export
from .vgg import ExportError


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="vgg-export",
        description="Extract VGG-19 convolution weights into a DPNW "
                    "checkpoint and emit a golden-activation fixture.",
    )
    sub = parser.add_subparsers(dest="command", required=True)
    exp = sub.add_parser("export", help="convert weights and emit fixtures")
    exp.add_argument("--source", required=True,
                     help="path to a torch-saved state dict, or synthetic:<seed> "
                          "for a deterministic stand-in")
    exp.add_argument("--out", required=True, help="output weights .dpnw path")
    exp.add_argument("--golden", default=None,
                     help="also emit a golden-activation fixture here")
    exp.add_argument("--manifest", default=None,
                     help="JSON provenance record; an existing file with a "
                          "different checksum aborts the export")
    exp.add_argument("--source-channel-order", choices=("rgb", "bgr"),
                     default="rgb",
                     help="input channel order of the SOURCE weights; bgr "
                          "flips conv1_1 so the output is always R,G,B")
    exp.add_argument("--width-scale", type=int, default=1,
                     help="divide stage widths (synthetic sources only)")
    exp.add_argument("--golden-seed", type=int, default=0,
                     help="seed for the fixture's deterministic input")
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        info = run_export(
            args.source, args.out,
            golden_path=args.golden,
            manifest_path=args.manifest,
            channel_order=args.source_channel_order,
            width_scale=args.width_scale,
            golden_seed=args.golden_seed,
        )
    except (ExportError, DpnwError) as e:
        print(f"error: {e}", file=sys.stderr)
        return 1
    except OSError as e:
        print(f"error: {e}", file=sys.stderr)
        return 1
    print(f"source {info['source']}")
    print(f"sha256 {info['sha256']}")
    print(f"weights {args.out}")
    if args.golden:
        print(f"golden {args.golden}")
    return 0


if __name__ == "__main__":
    sys.exit(main())
