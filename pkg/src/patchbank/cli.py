"""Command-line interface.

Subcommands: train, build-bank, score, eval, fuse. Every command takes
--config pointing at the pipeline JSON; any config value can be
overridden with a dotted flag, e.g. ``--train.lr 1e-4`` or
``--patch.levels '["1","2","3"]'``. ``--seed N`` is shorthand for
overriding both train.seed and bank.seed. Exit codes: 0 success,
2 configuration error, 3 data error, 4 internal error.
"""

import argparse
import os
import re
import sys
import traceback
import warnings

from .config import load_config
from .errors import ConfigError, DataError, DomainError, PatchbankError
from . import pipeline

_OVERRIDE_RE = re.compile(r"^--([A-Za-z_][A-Za-z0-9_]*(?:\.[A-Za-z0-9_]+)+)$")


def _parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="patchbank",
        description="Patch-feature anomaly detection pipeline")
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p, needs_config=True):
        p.add_argument("--config", required=needs_config,
                       help="pipeline JSON config")
        p.add_argument("--workers", type=int, default=1,
                       help="parallel workers (1 = fully deterministic)")
        p.add_argument("--seed", type=int, default=None,
                       help="override train.seed and bank.seed")

    common(sub.add_parser("train", help="train the representation"))

    p = sub.add_parser("build-bank", help="select the coreset memory bank")
    common(p)
    p.add_argument("--checkpoint", default=None,
                   help="model checkpoint (default: workdir/model.rcpm)")
    p.add_argument("--out", default=None,
                   help="bank output path (default: workdir/bank.rcpb)")

    p = sub.add_parser("score", help="score a split against the bank")
    common(p)
    p.add_argument("--checkpoint", default=None)
    p.add_argument("--bank", default=None,
                   help="bank file (default: workdir/bank.rcpb)")
    p.add_argument("--split", default="test", choices=("train", "test"))
    p.add_argument("--out", default=None,
                   help="scores JSONL (default: workdir/scores_<split>.jsonl)")

    p = sub.add_parser("eval", help="evaluate scores against labels")
    common(p)
    p.add_argument("--scores", default=None,
                   help="scores JSONL (default: workdir/scores_test.jsonl)")
    p.add_argument("--out", default=None,
                   help="report JSON (default: workdir/report.json)")

    p = sub.add_parser("fuse", help="average normalized scores across files")
    p.add_argument("inputs", nargs="+", help="scores JSONL files")
    p.add_argument("--out", required=True, help="fused JSONL output")
    return parser


def _split_overrides(argv):
    """Pull ``--section.key value`` pairs out of the raw argument list."""
    plain = []
    overrides = []
    i = 0
    while i < len(argv):
        match = _OVERRIDE_RE.match(argv[i])
        if match:
            if i + 1 >= len(argv):
                raise ConfigError(f"override {argv[i]} needs a value")
            overrides.append((match.group(1), argv[i + 1]))
            i += 2
        else:
            plain.append(argv[i])
            i += 1
    return plain, overrides


def _load(args, overrides):
    if args.seed is not None:
        overrides = list(overrides) + [("train.seed", str(args.seed)),
                                       ("bank.seed", str(args.seed))]
    return load_config(args.config, overrides)


def main(argv=None) -> int:
    argv = list(sys.argv[1:] if argv is None else argv)
    try:
        plain, overrides = _split_overrides(argv)
        args = _parser().parse_args(plain)

        with warnings.catch_warnings(record=True) as caught:
            warnings.simplefilter("always")
            if args.command == "train":
                out = pipeline.run_train(_load(args, overrides),
                                         workers=args.workers)
            elif args.command == "build-bank":
                out = pipeline.run_build_bank(
                    _load(args, overrides), checkpoint=args.checkpoint,
                    out=args.out, workers=args.workers)
            elif args.command == "score":
                out = pipeline.run_score(
                    _load(args, overrides), bank=args.bank,
                    checkpoint=args.checkpoint, split=args.split,
                    out=args.out, workers=args.workers)
            elif args.command == "eval":
                out = pipeline.run_eval(_load(args, overrides),
                                        scores=args.scores, out=args.out)
            else:
                out = pipeline.run_fuse(args.inputs, args.out)
        for w in caught:
            print(f"warning: {w.message}", file=sys.stderr)
        print(out)
        return 0
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return 2
    except (DataError, DomainError, FileNotFoundError) as exc:
        print(f"data error: {exc}", file=sys.stderr)
        return 3
    except PatchbankError as exc:
        print(f"internal error: {exc}", file=sys.stderr)
        return 4
    except Exception as exc:  # pragma: no cover - defensive
        if os.environ.get("PATCHBANK_DEBUG"):
            traceback.print_exc()
        print(f"internal error: {type(exc).__name__}: {exc}", file=sys.stderr)
        return 4


if __name__ == "__main__":
    sys.exit(main())
