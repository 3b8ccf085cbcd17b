"""Command-line launcher: ``python3 -m bridge_adapter`` or ``bridge-adapter``."""

from __future__ import annotations

import argparse
import sys

from .server import DEFAULT_BATCH_SIZE, AdapterConfig, ScorerError, serve


def main(argv: list[str] | None = None) -> int:
    parser = argparse.ArgumentParser(
        prog="bridge-adapter",
        description="Serve the line-delimited JSON scoring protocol over stdio or TCP.",
    )
    parser.add_argument(
        "--scorer",
        default="mock",
        help="scorer registry name or module:callable path (default: mock)",
    )
    parser.add_argument(
        "--batch-size",
        type=int,
        default=DEFAULT_BATCH_SIZE,
        help=f"largest accepted batch per request (default {DEFAULT_BATCH_SIZE})",
    )
    parser.add_argument(
        "--tcp",
        metavar="HOST:PORT",
        default=None,
        help="listen on TCP instead of stdio; port 0 picks a free port",
    )
    parser.add_argument(
        "--fail-on",
        metavar="TOKEN",
        default=None,
        help="make the scorer raise when TOKEN appears in an input (testing hook)",
    )
    args = parser.parse_args(argv)

    listen, host, port = "stdio", "127.0.0.1", 0
    if args.tcp is not None:
        listen = "tcp"
        host, _, port_text = args.tcp.rpartition(":")
        if not host or not port_text.isdigit():
            parser.error(f"--tcp expects HOST:PORT, got {args.tcp!r}")
        port = int(port_text)

    try:
        config = AdapterConfig(
            scorer=args.scorer,
            batch_size=args.batch_size,
            listen=listen,
            host=host,
            port=port,
            fail_on=args.fail_on,
        )
        serve(config)
    except (ScorerError, ValueError) as exc:
        print(f"bridge-adapter: {exc}", file=sys.stderr)
        return 1
    except KeyboardInterrupt:
        pass
    return 0


if __name__ == "__main__":
    raise SystemExit(main())
