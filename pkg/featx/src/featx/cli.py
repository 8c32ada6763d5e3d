"""Command line for the exporter; flags mirror the export job fields."""

from __future__ import annotations

import argparse
import logging
import sys

from featx.errors import FeatxError
from featx.export import ExportJob, export


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="featx", description=__doc__)
    parser.add_argument("--images", required=True, help="folder of input images")
    parser.add_argument("--taxonomy", required=True,
                        help="taxonomy or annotation JSON fixing the vocabulary")
    parser.add_argument("--annotations", required=True, help="output annotation JSON")
    parser.add_argument("--features", required=True, help="output feature store (.acfb)")
    parser.add_argument("--encoder", default="hashed/clip-stand-in@32",
                        help="encoder id; hashed/<name>[@dim] runs offline")
    parser.add_argument("--detector", default="hashed/detr-stand-in",
                        help="detector id; hashed/<name> runs offline")
    parser.add_argument("--prompts", help="prompt file, one line per verb")
    parser.add_argument("--batch-size", type=int, default=8)
    parser.add_argument("--device", default="cpu")
    parser.add_argument("--min-score", type=float, default=0.2)
    return parser


def main(argv: list[str] | None = None) -> int:
    logging.basicConfig(stream=sys.stderr, level=logging.INFO,
                        format="%(name)s: %(message)s")
    args = build_parser().parse_args(argv)
    job = ExportJob(
        image_dir=args.images,
        taxonomy=args.taxonomy,
        out_annotations=args.annotations,
        out_features=args.features,
        encoder=args.encoder,
        detector=args.detector,
        prompts=args.prompts,
        batch_size=args.batch_size,
        device=args.device,
        min_score=args.min_score,
    )
    try:
        summary = export(job)
    except FeatxError as exc:
        print(f"featx: {exc}", file=sys.stderr)
        return 1
    for key, value in summary.items():
        print(f"{key}: {value}")
    return 0


if __name__ == "__main__":
    sys.exit(main())
