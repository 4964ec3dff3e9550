"""Command-line front end; flags mirror the export spec one to one.

Exit codes: 0 success, 1 export failure, 2 usage error.
"""

from __future__ import annotations

import argparse
import json
import logging
import sys

from .errors import ExportError
from .export import ExportSpec, export_embeddings


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="embed-exporter",
        description="Encode a corpus with transformer models and write the "
                    "case-based engine's binary embedding file.")
    parser.add_argument("--corpus", required=True,
                        help="normalized .jsonl corpus file")
    parser.add_argument("--output", required=True,
                        help="embedding file to write")
    parser.add_argument("--token-model", dest="token_model", required=True,
                        help="checkpoint for last-layer token states")
    parser.add_argument("--sentence-model", dest="sentence_model",
                        default=None,
                        help="checkpoint for sentence vectors "
                             "(default: the token model)")
    parser.add_argument("--kinds", default="text",
                        help="comma-separated representation kinds")
    parser.add_argument("--batch-size", dest="batch_size", type=int, default=8)
    parser.add_argument("--max-length", dest="max_length", type=int,
                        default=128)
    parser.add_argument("--log-level", default="warning",
                        choices=("debug", "info", "warning", "error"))
    return parser


def run_command(argv: list[str] | None = None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code or 0)
    logging.basicConfig(level=getattr(logging, args.log_level.upper(),
                                      logging.WARNING))
    try:
        spec = ExportSpec(
            token_model=args.token_model,
            sentence_model=args.sentence_model or args.token_model,
            corpus=args.corpus, output=args.output,
            kinds=tuple(k.strip() for k in args.kinds.split(",") if k.strip()),
            batch_size=args.batch_size, max_length=args.max_length)
    except ExportError as exc:
        print(f"usage error: {exc}", file=sys.stderr)
        return 2
    try:
        report = export_embeddings(spec)
    except ExportError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    print(json.dumps({"output": report.output, "dim": report.dim,
                      "count": report.count, "truncated": report.truncated,
                      "skipped": report.skipped}))
    return 0


def main() -> None:
    sys.exit(run_command(sys.argv[1:]))


if __name__ == "__main__":
    main()
