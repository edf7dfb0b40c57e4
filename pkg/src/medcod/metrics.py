"""Native MT/summarization metrics plus the external-scorer protocol client.

Implemented here, with no metric library behind them:

  corpus BLEU   exp(sum_n w_n log p_n) * BP with clipped n-gram counts,
                uniform weights w_n = 1/N, BP = 1 if c > r else exp(1 - r/c)
  chrF++        macro-averaged precision/recall over character n-gram
                orders 1..6 and word n-gram orders 1..2,
                F = (1 + beta^2) P R / (beta^2 P + R) with beta = 2
  ROUGE-L-Sum   R = LCS/|ref|, P = LCS/|hyp|, harmonic F; LCS is taken per
                newline-delimited block and summed
  BERTScore     R = mean of row maxima, P = mean of column maxima of an
                externally produced similarity matrix, F harmonic

Neural scoring (COMET-style) is consumed through a sidecar subprocess
speaking newline-delimited JSON; see ScorerHandle.
"""

from __future__ import annotations

import json
import math
import subprocess
import tempfile
import unicodedata
from collections import Counter
from dataclasses import dataclass, field
from typing import Sequence

from .corpus import AlignedCorpus
from .errors import CapabilityError, ScorerCrash, ScorerProtocolError

_TRAILING_PUNCT = ".,!?;:…"


# ---------------------------------------------------------------------------
# tokenization


@dataclass
class TokenizedSegment:
    raw: str
    tokens: list[str]
    chars: list[str]

    @property
    def normalized(self) -> str:
        return " ".join(self.tokens)


def tokenize(raw: str, mode: str = "word", lowercase: bool = False) -> TokenizedSegment:
    """NFC-normalize and tokenize.

    word mode splits on Unicode whitespace and peels trailing terminal
    punctuation into its own tokens; char mode yields the characters with
    all whitespace removed. Lowercasing is off by default.
    """
    text = unicodedata.normalize("NFC", raw)
    if lowercase:
        text = text.lower()
    chars = [ch for ch in text if not ch.isspace()]
    if mode == "char":
        return TokenizedSegment(raw=raw, tokens=list(chars), chars=chars)
    if mode != "word":
        raise ValueError(f"unknown tokenize mode {mode!r}")
    tokens: list[str] = []
    for chunk in text.split():
        tail: list[str] = []
        while chunk and chunk[-1] in _TRAILING_PUNCT:
            tail.append(chunk[-1])
            chunk = chunk[:-1]
        if chunk:
            tokens.append(chunk)
        tokens.extend(reversed(tail))
    return TokenizedSegment(raw=raw, tokens=tokens, chars=chars)


@dataclass
class NGramCounts:
    """Multiset of the order-n n-grams of a token sequence."""

    order: int
    counts: Counter

    @classmethod
    def of(cls, tokens: Sequence[str], order: int) -> "NGramCounts":
        if order < 1:
            raise ValueError("order must be >= 1")
        grams = Counter(
            tuple(tokens[i : i + order]) for i in range(len(tokens) - order + 1)
        )
        return cls(order=order, counts=grams)

    def total(self) -> int:
        return sum(self.counts.values())


@dataclass
class MetricScore:
    metric: str
    value: float
    components: dict[str, float] = field(default_factory=dict)
    flags: tuple[str, ...] = ()


# ---------------------------------------------------------------------------
# BLEU


def bleu_corpus(
    hyps: list[TokenizedSegment],
    refs: list[TokenizedSegment],
    max_order: int = 4,
    smooth_eps: float | None = None,
) -> MetricScore:
    """Corpus-level BLEU in [0, 100], smoothing off unless `smooth_eps` set.

    With smoothing, a zero clipped-match count is replaced by `smooth_eps`
    in the numerator (segment-level diagnostics only).
    """
    if len(hyps) != len(refs):
        raise ValueError("hypothesis/reference count mismatch")
    if not hyps:
        raise ValueError("empty corpus")
    c = sum(len(h.tokens) for h in hyps)
    r = sum(len(t.tokens) for t in refs)
    components: dict[str, float] = {"c": float(c), "r": float(r)}
    flags: list[str] = []
    if c == 0:
        for n in range(1, max_order + 1):
            components[f"p_{n}"] = 0.0
        components["bp"] = 0.0
        return MetricScore("bleu", 0.0, components, ("empty-hypothesis",))

    precisions: list[float] = []
    for n in range(1, max_order + 1):
        matched = 0
        total = 0
        ref_total = 0
        for hyp, ref in zip(hyps, refs):
            hyp_counts = NGramCounts.of(hyp.tokens, n).counts
            ref_counts = NGramCounts.of(ref.tokens, n).counts
            matched += sum((hyp_counts & ref_counts).values())
            total += sum(hyp_counts.values())
            ref_total += sum(ref_counts.values())
        if total == 0 and ref_total == 0:
            # order unreachable on both sides (corpus shorter than n);
            # drop it from the geometric mean instead of zeroing the score
            components[f"p_{n}"] = 0.0
            flags.append(f"skipped-p_{n}")
            continue
        if smooth_eps is not None and matched == 0:
            # epsilon numerator; a zero denominator degrades to epsilon itself
            flags.append(f"smoothed-p_{n}")
            precision = smooth_eps / max(total, 1)
        else:
            precision = matched / total if total else 0.0
        components[f"p_{n}"] = precision
        precisions.append(precision)

    bp = 1.0 if c > r else math.exp(1.0 - r / c)
    components["bp"] = bp
    if not precisions or any(p == 0.0 for p in precisions):
        return MetricScore("bleu", 0.0, components, tuple(flags) + ("zero-precision",))
    log_mean = sum(math.log(p) for p in precisions) / len(precisions)
    value = 100.0 * bp * math.exp(log_mean)
    return MetricScore("bleu", value, components, tuple(flags))


# ---------------------------------------------------------------------------
# chrF++


def _chrf_order_stats(
    hyp_units: Sequence[str], ref_units: Sequence[str], order: int
) -> tuple[int, int, int]:
    hyp_counts = NGramCounts.of(hyp_units, order).counts
    ref_counts = NGramCounts.of(ref_units, order).counts
    matched = sum((hyp_counts & ref_counts).values())
    return matched, sum(hyp_counts.values()), sum(ref_counts.values())


def chrf_pp_corpus(
    hyps: list[str],
    refs: list[str],
    char_order: int = 6,
    word_order: int = 2,
    beta: float = 2.0,
    lowercase: bool = False,
) -> MetricScore:
    """Corpus chrF++ in [0, 100]; per-order counts are pooled over segments.

    Orders with no n-grams on either side are skipped from the macro
    average. Entirely empty input on both sides scores 100 by convention.
    """
    if len(hyps) != len(refs):
        raise ValueError("hypothesis/reference count mismatch")
    orders: list[tuple[str, int]] = [("char", n) for n in range(1, char_order + 1)]
    orders += [("word", n) for n in range(1, word_order + 1)]
    pooled = {key: [0, 0, 0] for key in orders}
    for hyp_text, ref_text in zip(hyps, refs):
        hyp_chars = tokenize(hyp_text, "char", lowercase).chars
        ref_chars = tokenize(ref_text, "char", lowercase).chars
        hyp_words = tokenize(hyp_text, "word", lowercase).tokens
        ref_words = tokenize(ref_text, "word", lowercase).tokens
        for kind, n in orders:
            if kind == "char":
                stats = _chrf_order_stats(hyp_chars, ref_chars, n)
            else:
                stats = _chrf_order_stats(hyp_words, ref_words, n)
            bucket = pooled[(kind, n)]
            bucket[0] += stats[0]
            bucket[1] += stats[1]
            bucket[2] += stats[2]

    precisions: list[float] = []
    recalls: list[float] = []
    for key in orders:
        matched, hyp_total, ref_total = pooled[key]
        if hyp_total == 0 and ref_total == 0:
            continue
        precisions.append(matched / hyp_total if hyp_total else 0.0)
        recalls.append(matched / ref_total if ref_total else 0.0)

    if not precisions:
        return MetricScore(
            "chrfpp", 100.0, {"P": 1.0, "R": 1.0, "beta": beta}, ("both-empty",)
        )
    p = sum(precisions) / len(precisions)
    rec = sum(recalls) / len(recalls)
    components = {"P": p, "R": rec, "beta": beta}
    if p + rec == 0.0:
        return MetricScore("chrfpp", 0.0, components)
    f = (1.0 + beta * beta) * p * rec / (beta * beta * p + rec)
    return MetricScore("chrfpp", 100.0 * f, components)


def chrf_pp(
    hyp: str,
    ref: str,
    char_order: int = 6,
    word_order: int = 2,
    beta: float = 2.0,
    lowercase: bool = False,
) -> MetricScore:
    return chrf_pp_corpus([hyp], [ref], char_order, word_order, beta, lowercase)


# ---------------------------------------------------------------------------
# ROUGE-L-Sum


def lcs_length(a: Sequence[str], b: Sequence[str]) -> int:
    """Longest common subsequence length, iterative two-row DP."""
    if not a or not b:
        return 0
    if len(b) > len(a):
        a, b = b, a
    prev = [0] * (len(b) + 1)
    for item in a:
        row = [0]
        for j, other in enumerate(b, start=1):
            if item == other:
                row.append(prev[j - 1] + 1)
            else:
                row.append(max(prev[j], row[j - 1]))
        prev = row
    return prev[-1]


def rouge_l_sum(hyp: TokenizedSegment, ref: TokenizedSegment, lowercase: bool = False) -> MetricScore:
    """Summary-variant ROUGE-L: LCS per newline-delimited block, summed.

    Blocks pair up by index; an unpaired block contributes length to its
    side's denominator but no matches. Single-block inputs reduce to the
    plain sentence-level LCS.
    """
    hyp_blocks = [tokenize(block, "word", lowercase).tokens for block in hyp.raw.split("\n")]
    ref_blocks = [tokenize(block, "word", lowercase).tokens for block in ref.raw.split("\n")]
    lcs_total = 0
    for i in range(max(len(hyp_blocks), len(ref_blocks))):
        hyp_tokens = hyp_blocks[i] if i < len(hyp_blocks) else []
        ref_tokens = ref_blocks[i] if i < len(ref_blocks) else []
        lcs_total += lcs_length(ref_tokens, hyp_tokens)
    hyp_len = sum(len(tokens) for tokens in hyp_blocks)
    ref_len = sum(len(tokens) for tokens in ref_blocks)

    flags: tuple[str, ...] = ()
    if hyp_len == 0 or ref_len == 0:
        flags = ("degenerate",)
    r = lcs_total / ref_len if ref_len else 0.0
    p = lcs_total / hyp_len if hyp_len else 0.0
    f = 2.0 * r * p / (r + p) if (r + p) > 0 else 0.0
    return MetricScore(
        "rouge_l_sum", f, {"R_lcs": r, "P_lcs": p, "F_lcs": f}, flags
    )


# ---------------------------------------------------------------------------
# BERTScore aggregation


def bertscore_from_similarity(sim: Sequence[Sequence[float]]) -> MetricScore:
    """Greedy-matching aggregation over a reference x hypothesis matrix.

    Rows are reference tokens, columns hypothesis tokens; recall averages
    row maxima, precision averages column maxima. The matrix itself comes
    from a sidecar or a test fixture.
    """
    if not sim or not sim[0]:
        raise ValueError("similarity matrix is empty")
    width = len(sim[0])
    for row in sim:
        if len(row) != width:
            raise ValueError("similarity matrix is ragged")
        for value in row:
            if not math.isfinite(value) or value < -1.0 - 1e-9 or value > 1.0 + 1e-9:
                raise ValueError(f"similarity {value!r} outside [-1, 1]")
    recall = sum(max(row) for row in sim) / len(sim)
    precision = sum(max(row[j] for row in sim) for j in range(width)) / width
    f = 2.0 * precision * recall / (precision + recall) if (precision + recall) > 0 else 0.0
    return MetricScore(
        "bertscore", f, {"P_BERT": precision, "R_BERT": recall, "F_BERT": f}
    )


# ---------------------------------------------------------------------------
# external scorer protocol client


class ScorerHandle:
    """Client side of the newline-delimited JSON scorer protocol.

    Exact shapes (one JSON object per line, UTF-8, data on stdout only):
      handshake  {"hello": {"protocol": 1, "capabilities": [...]}}
      request    {"id": n, "op": "score", "triples": [[src, hyp, ref], ...]}
                 {"id": n, "op": "embed-sim", "reference": "...", "hypothesis": "..."}
                 {"id": n, "op": "shutdown"}
      response   {"id": n, "value": ...} or {"id": n, "error": "..."}

    One request is in flight at a time; ids increase per session.
    """

    PROTOCOL = 1

    def __init__(self, command: Sequence[str]):
        self.command = list(command)
        self.protocol_version: int | None = None
        self.capabilities: tuple[str, ...] = ()
        self._proc: subprocess.Popen | None = None
        self._stderr_file = None
        self._next_id = 1
        self._lines_read = 0

    # -- lifecycle

    def start(self) -> None:
        self._stderr_file = tempfile.TemporaryFile()
        self._proc = subprocess.Popen(
            self.command,
            stdin=subprocess.PIPE,
            stdout=subprocess.PIPE,
            stderr=self._stderr_file,
            text=True,
            encoding="utf-8",
        )
        hello = self._read_line()
        payload = hello.get("hello")
        if not isinstance(payload, dict):
            raise ScorerProtocolError(f"line {self._lines_read}: expected a hello message")
        if payload.get("protocol") != self.PROTOCOL:
            raise ScorerProtocolError(
                f"protocol mismatch: wanted {self.PROTOCOL}, got {payload.get('protocol')!r}"
            )
        self.protocol_version = payload["protocol"]
        self.capabilities = tuple(payload.get("capabilities", ()))

    def close(self) -> None:
        if self._proc is None:
            return
        try:
            if self._proc.poll() is None:
                self._send({"id": self._take_id(), "op": "shutdown"})
                try:
                    self._proc.stdout.readline()
                except (OSError, ValueError):
                    pass
                self._proc.wait(timeout=10)
        except (OSError, subprocess.TimeoutExpired, ScorerCrash):
            self._proc.kill()
        finally:
            if self._stderr_file is not None:
                self._stderr_file.close()
            self._proc = None

    def __enter__(self) -> "ScorerHandle":
        self.start()
        return self

    def __exit__(self, *exc_info) -> None:
        self.close()

    # -- wire helpers

    def _stderr_tail(self, limit: int = 2000) -> str:
        if self._stderr_file is None:
            return ""
        try:
            self._stderr_file.seek(0)
            return self._stderr_file.read().decode("utf-8", "replace")[-limit:]
        except OSError:
            return ""

    def _take_id(self) -> int:
        rid = self._next_id
        self._next_id += 1
        return rid

    def _send(self, message: dict) -> None:
        assert self._proc is not None, "scorer not started"
        try:
            self._proc.stdin.write(json.dumps(message, ensure_ascii=False) + "\n")
            self._proc.stdin.flush()
        except (OSError, ValueError) as exc:
            raise ScorerCrash(
                f"scorer exited (status {self._proc.poll()}); stderr tail: {self._stderr_tail()}"
            ) from exc

    def _read_line(self) -> dict:
        assert self._proc is not None, "scorer not started"
        line = self._proc.stdout.readline()
        self._lines_read += 1
        if not line:
            status = self._proc.poll()
            raise ScorerCrash(
                f"scorer exited with status {status}; stderr tail: {self._stderr_tail()}"
            )
        try:
            payload = json.loads(line)
        except ValueError as exc:
            raise ScorerProtocolError(
                f"line {self._lines_read}: malformed response: {line[:200]!r}"
            ) from exc
        if not isinstance(payload, dict):
            raise ScorerProtocolError(f"line {self._lines_read}: expected a JSON object")
        return payload

    def _request(self, op: str, payload: dict):
        rid = self._take_id()
        self._send({"id": rid, "op": op, **payload})
        response = self._read_line()
        if response.get("id") != rid:
            raise ScorerProtocolError(
                f"line {self._lines_read}: response id {response.get('id')!r} != request id {rid}"
            )
        if "error" in response:
            raise ScorerProtocolError(f"line {self._lines_read}: {response['error']}")
        if "value" not in response:
            raise ScorerProtocolError(f"line {self._lines_read}: response carries no value")
        return response["value"]

    # -- operations

    def require(self, capability: str) -> None:
        if capability not in self.capabilities:
            raise CapabilityError(
                f"scorer lacks capability {capability!r} (has {list(self.capabilities)})"
            )

    def score(self, triples: list[tuple[str, str, str]]) -> list[float]:
        value = self._request("score", {"triples": [list(t) for t in triples]})
        if not isinstance(value, list) or len(value) != len(triples):
            raise ScorerProtocolError(
                f"line {self._lines_read}: expected {len(triples)} scores, got {value!r}"
            )
        return [float(v) for v in value]

    def embed_sim(self, reference: str, hypothesis: str) -> list[list[float]]:
        value = self._request(
            "embed-sim", {"reference": reference, "hypothesis": hypothesis}
        )
        if not isinstance(value, list):
            raise ScorerProtocolError(f"line {self._lines_read}: expected a matrix")
        return [[float(x) for x in row] for row in value]


def score_external(
    handle: ScorerHandle, triples: list[tuple[str, str, str]]
) -> list[MetricScore]:
    """One pass-through score per (source, hypothesis, reference) triple."""
    handle.require("comet")
    values = handle.score(triples)
    return [MetricScore("external", value, {"q": value}) for value in values]


# ---------------------------------------------------------------------------
# run-level scoring


@dataclass
class ReportRow:
    kind: str  # "corpus" | "segment"
    model: str
    strategy: str
    temperature: float
    metric: str
    value: float
    pair_id: str | None = None


@dataclass
class MetricReport:
    corpus_rows: list[ReportRow]
    segment_rows: list[ReportRow]


def score_run(
    results,
    corpus: AlignedCorpus,
    native_metrics: Sequence[str] = ("bleu", "chrfpp"),
    handle: ScorerHandle | None = None,
    lowercase: bool = False,
) -> MetricReport:
    """Score per (model, strategy, temperature) cell against references.

    Corpus-level BLEU/chrF++ per cell; segment-level rows are retained for
    statistics. External scores attach per segment (cell value is their
    mean) when a scorer handle is supplied.
    """
    references = {p.pair_id: p for p in corpus.pairs}
    cells: dict[tuple[str, str, float], list] = {}
    for result in results:
        if result.error is not None:
            continue
        if result.pair_id not in references:
            raise ValueError(f"unresolved pair_id {result.pair_id!r}")
        key = (result.model_name, result.strategy.value, result.temperature)
        cells.setdefault(key, []).append(result)

    corpus_rows: list[ReportRow] = []
    segment_rows: list[ReportRow] = []
    for (model, strategy, temperature), cell in sorted(cells.items()):
        cell = sorted(cell, key=lambda r: r.pair_id)
        hyps = [r.hypothesis for r in cell]
        refs = [references[r.pair_id].reference for r in cell]
        sources = [references[r.pair_id].source for r in cell]

        if "bleu" in native_metrics:
            hyp_segments = [tokenize(h, "word", lowercase) for h in hyps]
            ref_segments = [tokenize(t, "word", lowercase) for t in refs]
            score = bleu_corpus(hyp_segments, ref_segments)
            corpus_rows.append(
                ReportRow("corpus", model, strategy, temperature, "bleu", score.value)
            )
        if "chrfpp" in native_metrics:
            score = chrf_pp_corpus(hyps, refs, lowercase=lowercase)
            corpus_rows.append(
                ReportRow("corpus", model, strategy, temperature, "chrfpp", score.value)
            )
        if "rouge" in native_metrics:
            values = []
            for result, hyp, ref in zip(cell, hyps, refs):
                score = rouge_l_sum(
                    tokenize(hyp, "word", lowercase), tokenize(ref, "word", lowercase)
                )
                values.append(score.value)
                segment_rows.append(
                    ReportRow(
                        "segment", model, strategy, temperature, "rouge_l_sum",
                        score.value, pair_id=result.pair_id,
                    )
                )
            corpus_rows.append(
                ReportRow(
                    "corpus", model, strategy, temperature, "rouge_l_sum",
                    sum(values) / len(values),
                )
            )
        if handle is not None:
            scores = score_external(handle, list(zip(sources, hyps, refs)))
            for result, score in zip(cell, scores):
                segment_rows.append(
                    ReportRow(
                        "segment", model, strategy, temperature, "external",
                        score.value, pair_id=result.pair_id,
                    )
                )
            corpus_rows.append(
                ReportRow(
                    "corpus", model, strategy, temperature, "external",
                    sum(s.value for s in scores) / len(scores),
                )
            )
    return MetricReport(corpus_rows=corpus_rows, segment_rows=segment_rows)
