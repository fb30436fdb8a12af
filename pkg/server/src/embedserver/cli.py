"""Command line: run the embedding server."""

from __future__ import annotations

import argparse
import sys
from typing import List, Optional

import uvicorn

from .app import ServerConfig, build_app


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="embedserver")
    parser.add_argument("--host", default="127.0.0.1")
    parser.add_argument("--port", type=int, default=8331)
    parser.add_argument("--model", default="openai/clip-vit-base-patch32")
    parser.add_argument("--device", default="cpu")
    parser.add_argument("--image-root", default=".")
    parser.add_argument("--blur-radius", type=float, default=10.0)
    parser.add_argument(
        "--mock", action="store_true",
        help="serve hash-based vectors (protocol conformance, no weights)",
    )
    parser.add_argument("--seed", type=int, default=0, help="mock seed")
    parser.add_argument("--dim", type=int, default=32, help="mock dimension")
    return parser


def main(argv: Optional[List[str]] = None) -> int:
    args = build_parser().parse_args(argv)
    config = ServerConfig(
        model=args.model,
        device=args.device,
        image_root=args.image_root,
        blur_radius=args.blur_radius,
        host=args.host,
        port=args.port,
        mock=args.mock,
        mock_seed=args.seed,
        mock_dimension=args.dim,
    )
    app = build_app(config)
    mode = f"mock (seed={args.seed}, dim={args.dim})" if args.mock else args.model
    print(f"embedserver: {mode} on http://{args.host}:{args.port}")
    uvicorn.run(app, host=args.host, port=args.port, log_level="warning")
    return 0


if __name__ == "__main__":
    sys.exit(main())
