#!/usr/bin/env python3
"""Minimal scorer-protocol fixture for the client tests.

Speaks the newline-delimited JSON protocol on stdin/stdout. Kept tiny and
dependency-free on purpose; the real sidecar lives in its own package.

Flags:
  --echo VALUE        score every triple as VALUE (default 0.5)
  --no-comet          advertise only embed-sim (capability-miss tests)
  --break-after N     emit garbage instead of the Nth response
  --wrong-id          answer with a mismatched response id
  --die-after N       exit(3) before answering the Nth request
"""

import argparse
import json
import sys


def token_identity_matrix(reference: str, hypothesis: str):
    ref_tokens = reference.split() or [""]
    hyp_tokens = hypothesis.split() or [""]
    return [
        [1.0 if r.casefold() == h.casefold() else 0.0 for h in hyp_tokens]
        for r in ref_tokens
    ]


def main() -> int:
    parser = argparse.ArgumentParser()
    parser.add_argument("--echo", type=float, default=0.5)
    parser.add_argument("--no-comet", action="store_true")
    parser.add_argument("--break-after", type=int, default=0)
    parser.add_argument("--wrong-id", action="store_true")
    parser.add_argument("--die-after", type=int, default=0)
    args = parser.parse_args()

    capabilities = ["bert-embed"] if args.no_comet else ["comet", "bert-embed"]
    out = sys.stdout
    out.write(json.dumps({"hello": {"protocol": 1, "capabilities": capabilities}}) + "\n")
    out.flush()

    handled = 0
    for line in sys.stdin:
        if not line.strip():
            continue
        handled += 1
        if args.die_after and handled >= args.die_after:
            sys.stderr.write("echo scorer: dying on purpose\n")
            return 3
        request = json.loads(line)
        rid = request.get("id")
        op = request.get("op")
        if args.break_after and handled >= args.break_after:
            out.write("this is not json\n")
            out.flush()
            continue
        if args.wrong_id:
            rid = (rid or 0) + 1000
        if op == "score":
            response = {"id": rid, "value": [args.echo] * len(request.get("triples", []))}
        elif op == "embed-sim":
            response = {
                "id": rid,
                "value": token_identity_matrix(
                    request.get("reference", ""), request.get("hypothesis", "")
                ),
            }
        elif op == "shutdown":
            out.write(json.dumps({"id": rid, "value": "ok"}) + "\n")
            out.flush()
            return 0
        else:
            response = {"id": rid, "error": "unknown op"}
        out.write(json.dumps(response) + "\n")
        out.flush()
    return 0


if __name__ == "__main__":
    raise SystemExit(main())
