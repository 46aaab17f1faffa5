"""Command line entry point.

    unsparse prune     --config cfg.json [--seed N] [--out DIR] [--resume CKPT]
    unsparse quantize  --checkpoint DIR --mode 16b/16b|4b/16b|passthrough
    unsparse bench     --config cfg.json [--workers N]
    unsparse configure --report out/bench.csv
    unsparse verify

UNSPARSE_SEED / UNSPARSE_WORKERS / UNSPARSE_OUT override the common flags;
UNSPARSE_<SECTION>__<KEY> overrides individual config entries.
"""

from __future__ import annotations

import argparse
import json
import os
import sys

from . import pipeline
from .quantization import MODES


def _common(p):
    p.add_argument("--config", help="path to the JSON config")
    p.add_argument("--seed", type=int,
                   default=int(os.environ.get("UNSPARSE_SEED", 0)))
    p.add_argument("--workers", type=int,
                   default=int(os.environ.get("UNSPARSE_WORKERS", 1)))
    p.add_argument("--out", default=os.environ.get("UNSPARSE_OUT", "out"))


def build_parser():
    parser = argparse.ArgumentParser(prog="unsparse")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("prune", help="run the pruning loop")
    _common(p)
    p.add_argument("--resume", help="checkpoint directory to continue from")

    p = sub.add_parser("quantize", help="quantise a pruned checkpoint")
    _common(p)
    p.add_argument("--checkpoint", help="pruned checkpoint (default <out>/checkpoint)")
    p.add_argument("--mode", default="16b/16b", choices=MODES)

    p = sub.add_parser("bench", help="time sparse vs dense per layer")
    _common(p)

    p = sub.add_parser("configure", help="derive backend choices from a bench CSV")
    _common(p)
    p.add_argument("--report", help="bench CSV (default <out>/bench.csv)")

    p = sub.add_parser("verify", help="run the oracle suite")
    _common(p)
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    if args.command == "prune":
        if not args.config and not args.resume:
            print("prune needs --config or --resume", file=sys.stderr)
            return 2
        config = pipeline.load_config(args.config) if args.config else None
        result = pipeline.cmd_prune(config, args.seed, args.out, resume=args.resume)
        print(json.dumps(result, indent=2, sort_keys=True))
        return 0
    if args.command == "quantize":
        ckpt = args.checkpoint or os.path.join(args.out, "checkpoint")
        report = pipeline.cmd_quantize(ckpt, args.mode, args.out, args.seed)
        print(json.dumps(report, indent=2, sort_keys=True))
        return 0
    if args.command == "bench":
        if not args.config:
            print("bench needs --config", file=sys.stderr)
            return 2
        config = pipeline.load_config(args.config)
        report = pipeline.cmd_bench(config, args.seed, args.workers, args.out)
        print(f"wrote {len(report.rows)} rows to {args.out}/bench.csv")
        return 0
    if args.command == "configure":
        report = args.report or os.path.join(args.out, "bench.csv")
        cfg = pipeline.cmd_configure(report, args.out)
        print(json.dumps(cfg, indent=2, sort_keys=True))
        return 0
    if args.command == "verify":
        return pipeline.cmd_verify(args.seed)
    return 2


if __name__ == "__main__":
    sys.exit(main())
