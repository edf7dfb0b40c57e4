"""Serve scoring requests over the stdio protocol.

Protocol (version 1), one JSON object per line, stdout carries data only:

  handshake  {"hello": {"protocol": 1, "capabilities": [...], ...}}
  request    {"id": n, "op": "score", "triples": [[src, hyp, ref], ...]}
             {"id": n, "op": "embed-sim", "reference": "...", "hypothesis": "..."}
             {"id": n, "op": "shutdown"}
  response   {"id": n, "value": ...} | {"id": n, "error": "..."}

Request ids must increase strictly within a session; exactly one request is
in flight at a time. Diagnostics go to stderr. Echo mode needs no model
assets and is byte-deterministic; model mode loads assets before the
handshake and exits nonzero if they are unavailable.
"""

from __future__ import annotations

import argparse
import json
import sys


def _dumps(payload: dict) -> str:
    return json.dumps(payload, ensure_ascii=False, sort_keys=True, separators=(", ", ": "))


def _tokens(text: str) -> list[str]:
    return text.split() or [""]


class EchoBackend:
    """Deterministic stand-in: fixed scores, token-identity similarities."""

    def __init__(self, value: float):
        self.value = value
        self.scorer_id = f"echo:{value}"
        self.embedder_id = f"echo:{value}"

    def score(self, triples):
        return [self.value] * len(triples)

    def embed_sim(self, reference: str, hypothesis: str):
        ref_tokens = _tokens(reference)
        hyp_tokens = _tokens(hypothesis)
        return [
            [1.0 if r.casefold() == h.casefold() else 0.0 for h in hyp_tokens]
            for r in ref_tokens
        ]


class ModelBackend:
    """Embedding-based scoring; loads sentence-transformers assets eagerly."""

    def __init__(self, score_model: str | None, embed_model: str | None):
        from sentence_transformers import SentenceTransformer  # may raise

        self.scorer_id = score_model
        self.embedder_id = embed_model or score_model
        self._scorer = SentenceTransformer(score_model) if score_model else None
        if embed_model and embed_model != score_model:
            self._embedder = SentenceTransformer(embed_model)
        else:
            self._embedder = self._scorer

    def score(self, triples):
        import numpy as np

        hyps = [h for _, h, _ in triples]
        refs = [r for _, _, r in triples]
        hyp_vecs = self._scorer.encode(hyps, normalize_embeddings=True)
        ref_vecs = self._scorer.encode(refs, normalize_embeddings=True)
        return [float(np.dot(h, r)) for h, r in zip(hyp_vecs, ref_vecs)]

    def embed_sim(self, reference: str, hypothesis: str):
        import numpy as np

        ref_tokens = _tokens(reference)
        hyp_tokens = _tokens(hypothesis)
        ref_vecs = self._embedder.encode(ref_tokens, normalize_embeddings=True)
        hyp_vecs = self._embedder.encode(hyp_tokens, normalize_embeddings=True)
        sim = np.clip(ref_vecs @ hyp_vecs.T, -1.0, 1.0)
        return [[float(x) for x in row] for row in sim]


def serve(backend, capabilities, stdin=None, stdout=None) -> int:
    """Handshake, then answer requests until shutdown or EOF."""
    stdin = stdin if stdin is not None else sys.stdin
    stdout = stdout if stdout is not None else sys.stdout

    hello = {
        "hello": {
            "protocol": 1,
            "capabilities": list(capabilities),
            "scorer": backend.scorer_id,
            "embedder": backend.embedder_id,
        }
    }
    stdout.write(_dumps(hello) + "\n")
    stdout.flush()

    last_id = 0

    def respond(payload: dict) -> None:
        stdout.write(_dumps(payload) + "\n")
        stdout.flush()

    for line in stdin:
        if not line.strip():
            continue
        try:
            request = json.loads(line)
            if not isinstance(request, dict):
                raise ValueError("request is not an object")
        except ValueError as exc:
            respond({"id": None, "error": f"malformed request: {exc}"})
            continue
        rid = request.get("id")
        if not isinstance(rid, int):
            respond({"id": None, "error": "malformed request: missing integer id"})
            continue
        if rid <= last_id:
            respond({"id": rid, "error": f"non-increasing id (last was {last_id})"})
            continue
        last_id = rid

        op = request.get("op")
        if op == "shutdown":
            respond({"id": rid, "value": "ok"})
            return 0
        if op == "score":
            if "comet" not in capabilities:
                respond({"id": rid, "error": "capability comet not loaded"})
                continue
            triples = request.get("triples")
            if not isinstance(triples, list) or not all(
                isinstance(t, list) and len(t) == 3 for t in triples
            ):
                respond({"id": rid, "error": "malformed request: triples must be [src, hyp, ref] lists"})
                continue
            try:
                values = backend.score([tuple(map(str, t)) for t in triples])
            except Exception as exc:  # inference failure surfaces per request
                print(f"score failed: {exc}", file=sys.stderr)
                respond({"id": rid, "error": f"score failed: {exc}"})
                continue
            respond({"id": rid, "value": values})
        elif op == "embed-sim":
            if "bert-embed" not in capabilities:
                respond({"id": rid, "error": "capability bert-embed not loaded"})
                continue
            try:
                matrix = backend.embed_sim(
                    str(request.get("reference", "")), str(request.get("hypothesis", ""))
                )
            except Exception as exc:
                print(f"embed-sim failed: {exc}", file=sys.stderr)
                respond({"id": rid, "error": f"embed-sim failed: {exc}"})
                continue
            respond({"id": rid, "value": matrix})
        else:
            respond({"id": rid, "error": "unknown op"})
    return 0


def main(argv=None) -> int:
    parser = argparse.ArgumentParser(
        prog="medcod-scorer", description="scorer sidecar (stdio protocol v1)"
    )
    parser.add_argument(
        "--echo", type=float, default=None,
        help="echo mode: score every triple as this value; no model assets",
    )
    parser.add_argument("--model", default=None, help="embedding model for `score`")
    parser.add_argument(
        "--embed-model", dest="embed_model", default=None,
        help="embedding model for `embed-sim` (defaults to --model)",
    )
    args = parser.parse_args(argv)

    if args.echo is not None:
        backend = EchoBackend(args.echo)
        capabilities = ["comet", "bert-embed"]
    elif args.model or args.embed_model:
        try:
            backend = ModelBackend(args.model, args.embed_model)
        except Exception as exc:
            print(f"failed to load model assets: {exc}", file=sys.stderr)
            return 1
        capabilities = []
        if args.model:
            capabilities.append("comet")
        if args.embed_model or args.model:
            capabilities.append("bert-embed")
    else:
        print("one of --echo or --model/--embed-model is required", file=sys.stderr)
        return 2

    return serve(backend, capabilities)


if __name__ == "__main__":
    raise SystemExit(main())
