"""Command-line front end: `mitosis <command> --config <path> [--set k=v]...`"""

from __future__ import annotations

import argparse
import logging
import sys
from typing import List, Optional

from . import pipeline
from .config import load_config

COMMANDS = {
    "prepare": pipeline.cmd_prepare,
    "train-seg": pipeline.cmd_train_seg,
    "segment": pipeline.cmd_segment,
    "train-det": pipeline.cmd_train_det,
    "detect": pipeline.cmd_detect,
    "evaluate": pipeline.cmd_evaluate,
    "visualize": pipeline.cmd_visualize,
}


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="mitosis",
        description="Two-stream mitosis detection pipeline.")
    sub = parser.add_subparsers(dest="command", required=True)
    for name, fn in COMMANDS.items():
        p = sub.add_parser(name, help=fn.__doc__)
        p.add_argument("--config", required=True,
                       help="path to the YAML run configuration")
        p.add_argument("--set", dest="overrides", action="append",
                       default=[], metavar="KEY=VALUE",
                       help="override one config key (repeatable), "
                            "e.g. --set detector.steps=500")
        p.add_argument("--verbose", action="store_true",
                       help="debug-level logging")
    return parser


def main(argv: Optional[List[str]] = None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(
        level=logging.DEBUG if args.verbose else logging.INFO,
        format="%(levelname)s %(name)s: %(message)s")
    try:
        config = load_config(args.config, args.overrides)
        COMMANDS[args.command](config)
    except (FileNotFoundError, ValueError, RuntimeError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    return 0


if __name__ == "__main__":
    sys.exit(main())
