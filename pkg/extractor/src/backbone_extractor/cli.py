"""CLI wrapper: ``backbone-extract extract --in DIR --out DIR ...``.

Exit codes: 0 success, 2 bad arguments (unknown backbone, bad levels,
crop larger than resize), 3 data problems (missing input directory,
unreadable image, unavailable pretrained weights).
"""

import argparse
import sys
import warnings

from .errors import BadLevels, UnknownBackbone, UnreadableImage, \
    WeightsUnavailable
from .extractor import BACKBONES, ExtractorConfig, extract


def _parser():
    parser = argparse.ArgumentParser(
        prog="backbone-extract",
        description="Dump per-level CNN feature maps plus a manifest")
    sub = parser.add_subparsers(dest="command", required=True)
    p = sub.add_parser("extract", help="extract features for a folder")
    p.add_argument("--backbone", default="wide_resnet50_2",
                   choices=sorted(BACKBONES))
    p.add_argument("--levels", default="2,3",
                   help="comma-separated hierarchy levels, e.g. 2,3")
    p.add_argument("--resize", type=int, default=256)
    p.add_argument("--crop", type=int, default=224)
    p.add_argument("--batch-size", type=int, default=4)
    p.add_argument("--in", dest="input_dir", required=True,
                   help="image folder (train/... and test/... subdirs)")
    p.add_argument("--out", dest="output_dir", required=True,
                   help="output folder for NPY files and manifest.json")
    p.add_argument("--allow-random-weights", action="store_true",
                   help="fall back to a seeded random backbone when "
                        "pretrained weights cannot be fetched")
    return parser


def main(argv=None) -> int:
    args = _parser().parse_args(argv)
    cfg = ExtractorConfig(
        input_dir=args.input_dir, output_dir=args.output_dir,
        backbone=args.backbone,
        levels=[l.strip() for l in args.levels.split(",") if l.strip()],
        resize=args.resize, crop=args.crop, batch_size=args.batch_size,
        allow_random_weights=args.allow_random_weights)
    try:
        with warnings.catch_warnings(record=True) as caught:
            warnings.simplefilter("always")
            manifest = extract(cfg)
        for w in caught:
            print(f"warning: {w.message}", file=sys.stderr)
        print(manifest)
        return 0
    except (UnknownBackbone, BadLevels) as exc:
        print(f"argument error: {exc}", file=sys.stderr)
        return 2
    except (UnreadableImage, WeightsUnavailable) as exc:
        print(f"data error: {exc}", file=sys.stderr)
        return 3


if __name__ == "__main__":
    sys.exit(main())
