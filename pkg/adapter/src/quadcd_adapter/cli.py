"""Command line front end for the adapter.

Exit codes: 0 served and shut down cleanly, 2 configuration problems,
3 model or segmenter load failures and transport errors.
"""

from __future__ import annotations

import argparse
import sys

from quadcd_adapter.adapter import serve
from quadcd_adapter.config import AdapterError, load_config
from quadcd_adapter.models import ModelLoadError


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="quadcd-adapter",
        description="serve a vision-language model over the backend wire protocol",
    )
    sub = parser.add_subparsers(dest="command", required=True)
    p = sub.add_parser("serve", help="load the configured model and serve sessions")
    p.add_argument("--config", required=True, help="path to the adapter JSON config")
    p.add_argument(
        "--listen",
        help="override the config's listen spec (stdio or tcp:HOST:PORT)",
    )
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        config = load_config(args.config)
        if args.listen is not None:
            from dataclasses import replace

            config = replace(config, listen=args.listen)
    except AdapterError as exc:
        print(f"adapter: {exc}", file=sys.stderr)
        return 2
    try:
        return serve(config)
    except AdapterError as exc:
        print(f"adapter: {exc}", file=sys.stderr)
        return 2
    except (ModelLoadError, OSError) as exc:
        print(f"adapter: {exc}", file=sys.stderr)
        return 3


if __name__ == "__main__":
    raise SystemExit(main())
