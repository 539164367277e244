"""``sgfr-extract``: image dataset -> SGT tensors + manifest."""

from __future__ import annotations

import argparse
import logging
import os
import sys
from pathlib import Path

from .extract import BACKBONES, ExtractionSpec, ExtractorError, extract


def main(argv: list[str] | None = None) -> int:
    logging.basicConfig(
        level=getattr(logging, os.environ.get("SGFR_LOG", "warning").upper(), logging.WARNING),
        format="%(name)s %(levelname)s %(message)s",
    )
    parser = argparse.ArgumentParser(prog="sgfr-extract", description=__doc__)
    parser.add_argument("--dataset", required=True, help="image dataset root (scanned recursively)")
    parser.add_argument("--out", required=True, help="output directory for SGT files")
    parser.add_argument("--backbone", default="wideresnet50", choices=sorted(BACKBONES))
    parser.add_argument("--levels", default="2,3,4", help="levels CSV; 1..4 blocks, 5 = pooled")
    parser.add_argument("--resize", type=int, default=256, help="square input resolution")
    parser.add_argument("--lref", type=int, default=None, help="reference level for the manifest")
    parser.add_argument("--no-pretrained", action="store_true",
                        help="seeded random weights instead of ImageNet weights (offline use)")
    parser.add_argument("--init-seed", type=int, default=0)
    args = parser.parse_args(argv)

    try:
        levels = tuple(int(x) for x in args.levels.split(",") if x.strip())
        spec = ExtractionSpec(
            dataset_root=Path(args.dataset),
            output_dir=Path(args.out),
            backbone=args.backbone,
            levels=levels,
            resize=(args.resize, args.resize),
            pretrained=not args.no_pretrained,
            init_seed=args.init_seed,
            ref_level=args.lref,
        )
        result = extract(spec)
    except ExtractorError as exc:
        print(f"sgfr-extract: error: {exc}", file=sys.stderr)
        return 2
    except ValueError as exc:
        print(f"sgfr-extract: error: {exc}", file=sys.stderr)
        return 1
    print(result.manifest_path)
    if result.skipped:
        print(f"skipped {len(result.skipped)} undecodable image(s)", file=sys.stderr)
    return 0


if __name__ == "__main__":
    raise SystemExit(main())
