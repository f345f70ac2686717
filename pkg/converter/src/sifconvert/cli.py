"""Command-line entry point: sif-convert --source ckpt.pt --layers GLOB --out FILE."""

from __future__ import annotations

import argparse
import sys

from .convert import ConvertError, convert


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="sif-convert",
        description="Export 2-D weight matrices from a checkpoint into an "
                    "SIF1 tensor file plus a text manifest.")
    parser.add_argument("--source", required=True,
                        help="checkpoint path (torch state dict)")
    parser.add_argument("--layers", default="*",
                        help="glob over tensor names (default: all)")
    parser.add_argument("--out", required=True, help="output SIF1 path")
    parser.add_argument("--include-embeddings", action="store_true",
                        help="also export embedding/LM-head tensors "
                             "(emits a warning)")
    parser.add_argument("--split-qkv", metavar="GLOB",
                        help="split tensors matching GLOB into equal "
                             "Q/K/V row blocks")
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        entries = convert(args.source, args.layers, args.out,
                          include_embeddings=args.include_embeddings,
                          split_qkv=args.split_qkv)
    except ConvertError as e:
        print(f"error: {e}", file=sys.stderr)
        return 1
    print(f"wrote {args.out} ({len(entries)} tensors) and manifest")
    return 0


if __name__ == "__main__":
    sys.exit(main())
