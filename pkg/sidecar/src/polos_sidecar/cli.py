"""Sidecar command line: encode a caption/image manifest into a bundle.

    polos-sidecar encode --manifest samples.jsonl --out data.peb \
        --clip hash64:512 --text hash64:1024

Exit codes: 0 success, 1 usage error, 2 data/encoder error.
"""

from __future__ import annotations

import argparse
import json
import sys

from polos_sidecar.encode import EncodeError, EncodePolicy, encode_manifest, read_manifest
from polos_sidecar.encoders import EncoderError
from polos_sidecar.peb import PebError


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(message)


def _build_parser() -> _Parser:
    parser = _Parser(prog="polos-sidecar", description=__doc__)
    sub = parser.add_subparsers(dest="verb", required=True)
    p = sub.add_parser("encode", help="encode a manifest into an embedding bundle")
    p.add_argument("--manifest", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--clip", default="hash64:512",
                   help="image/text tower id (hash64:<dim> | clip:<model>)")
    p.add_argument("--text", default="hash64:1024",
                   help="sentence tower id (hash64:<dim> | simcse:<model>)")
    p.add_argument("--max-tokens", type=int, default=77)
    p.add_argument("--batch-size", type=int, default=32)
    p.add_argument("--device", default="cpu")
    p.add_argument("--normalize-clip", dest="normalize_clip", action="store_true", default=True)
    p.add_argument("--no-normalize-clip", dest="normalize_clip", action="store_false")
    p.add_argument("--normalize-text", dest="normalize_text", action="store_true", default=False)
    p.add_argument("--extend", action="store_true",
                   help="append to an existing bundle with matching encoders")
    p.add_argument("--json", action="store_true")
    return parser


def main(argv=None) -> int:
    parser = _build_parser()
    try:
        args = parser.parse_args(argv)
    except UsageError as exc:
        print(f"usage error: {exc}", file=sys.stderr)
        return 1
    try:
        entries = read_manifest(args.manifest)
        policy = EncodePolicy(
            clip_encoder=args.clip,
            text_encoder=args.text,
            max_tokens=args.max_tokens,
            normalize_clip=args.normalize_clip,
            normalize_text=args.normalize_text,
            device=args.device,
            batch_size=args.batch_size,
        )
        meta = encode_manifest(entries, policy, args.out, extend=args.extend)
    except (EncodeError, EncoderError, PebError, OSError, KeyError, ValueError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    if args.json:
        print(json.dumps({"schema_version": 1, **meta}, sort_keys=True))
    else:
        print(f"wrote {meta['sample_count']} samples "
              f"(d_clip={meta['d_clip']}, d_rb={meta['d_rb']}) to {args.out}")
    return 0


if __name__ == "__main__":
    sys.exit(main())
