"""Bilingual article ingestion, cleaning, sentence alignment, and splits.

The pipeline is: ingest paired articles from local files, clean each side,
segment into sentences, align with a length-based dynamic program keeping
only 1-1 beads, then tag a stratified test split. Corpora round-trip through
a JSON Lines file, one sentence pair per line.
"""

from __future__ import annotations

import hashlib
import json
import logging
import math
import re
import unicodedata
import zipfile
from dataclasses import dataclass, field, replace
from datetime import datetime, timezone
from importlib import resources
from pathlib import Path

from .errors import AlignmentError, IngestError, SchemaError

logger = logging.getLogger(__name__)

SCHEMA_VERSION = 1

_TAG_RE = re.compile(r"<[^>]*>")
_WS_RE = re.compile(r"\s+")

_TERMINALS = ".!?…"
_CLOSERS = "\"')»”’]"
_OPENERS = "¿¡«“\"'(["


# ---------------------------------------------------------------------------
# domain types


@dataclass
class ArticlePair:
    """One paired article: source-language and target-language full texts."""

    article_id: str
    source_text: str
    target_text: str
    source_url: str | None = None
    fetched_at: str = ""


@dataclass(frozen=True)
class SentencePair:
    pair_id: str
    article_id: str
    source: str
    reference: str
    source_token_count: int
    split: str = "train"  # "train" | "test"


@dataclass
class AlignedCorpus:
    pairs: list[SentencePair] = field(default_factory=list)
    provenance: str = ""


@dataclass
class IngestionConfig:
    """How paired records are laid out on disk.

    format "json": one record per *.json file, or one per line in *.jsonl.
    format "paired": two sibling text files per article, matched by suffix.
    """

    format: str = "json"
    id_key: str = "article_id"
    source_key: str = "source_text"
    target_key: str = "target_text"
    url_key: str = "source_url"
    source_suffix: str = ".en.txt"
    target_suffix: str = ".es.txt"

    def digest(self) -> str:
        blob = json.dumps(vars(self), sort_keys=True).encode("utf-8")
        return hashlib.sha256(blob).hexdigest()[:16]


@dataclass
class IngestResult:
    articles: list[ArticlePair]
    skipped: int = 0


# ---------------------------------------------------------------------------
# cleaning and segmentation


def clean_text(raw: str) -> str:
    """Strip markup, normalize to NFC, collapse whitespace, trim.

    Total and idempotent; HTML entities are left as-is so a second pass can
    never produce new markup to strip.
    """
    text = _TAG_RE.sub(" ", raw)
    text = unicodedata.normalize("NFC", text)
    text = _WS_RE.sub(" ", text)
    return text.strip()


def _default_abbreviations() -> frozenset[str]:
    data = resources.files("medcod").joinpath("data/abbreviations.txt").read_text("utf-8")
    entries = set()
    for line in data.splitlines():
        line = line.strip()
        if line and not line.startswith("#"):
            entries.add(line.casefold())
    return frozenset(entries)


_ABBREV_CACHE: frozenset[str] | None = None


def _abbreviations() -> frozenset[str]:
    global _ABBREV_CACHE
    if _ABBREV_CACHE is None:
        _ABBREV_CACHE = _default_abbreviations()
    return _ABBREV_CACHE


def _token_before_period(text: str, period_idx: int) -> str:
    start = period_idx
    while start > 0 and (text[start - 1].isalnum() or text[start - 1] in ".-"):
        start -= 1
    return text[start : period_idx + 1]


def _is_abbreviation(text: str, idx: int, abbreviations: frozenset[str]) -> bool:
    if text[idx] != ".":
        return False
    token = _token_before_period(text, idx)
    if len(token) == 2 and token[0].isupper():  # initials such as "J."
        return True
    return token.casefold() in abbreviations


def _opens_sentence(ch: str) -> bool:
    return ch.isupper() or ch.isdigit() or ch in _OPENERS


def segment_sentences(text: str, abbreviations: frozenset[str] | None = None) -> list[str]:
    """Rule-based splitter on terminal punctuation with an exception list."""
    abbrev = _abbreviations() if abbreviations is None else abbreviations
    sentences: list[str] = []
    start = 0
    i = 0
    n = len(text)
    while i < n:
        if text[i] in _TERMINALS:
            j = i + 1
            while j < n and text[j] in _CLOSERS:
                j += 1
            k = j
            while k < n and text[k].isspace():
                k += 1
            boundary = (
                k > j
                and k < n
                and _opens_sentence(text[k])
                and not _is_abbreviation(text, i, abbrev)
            )
            if boundary:
                piece = text[start:j].strip()
                if piece:
                    sentences.append(piece)
                start = k
                i = k
                continue
        i += 1
    tail = text[start:].strip()
    if tail:
        sentences.append(tail)
    return sentences


# ---------------------------------------------------------------------------
# length-based alignment (character-length cost model, standard bead priors)

_LOG2 = math.log(2.0)
_LENGTH_VARIANCE = 6.8
# -100 * log prior of each bead type
_BEAD_COSTS = {
    (1, 1): 0.0,
    (2, 1): 230.0,
    (1, 2): 230.0,
    (0, 1): 450.0,
    (1, 0): 450.0,
    (2, 2): 440.0,
}


def _norm_logsf(z: float) -> float:
    """log of the standard normal upper tail, stable for large z."""
    sf = 0.5 * math.erfc(z / math.sqrt(2.0))
    if sf > 0.0:
        return math.log(sf)
    return -0.5 * z * z - math.log(max(z, 1.0) * math.sqrt(2.0 * math.pi))


def _length_cost(src_lengths: list[int], tgt_lengths: list[int]) -> float:
    lx = sum(src_lengths)
    ly = sum(tgt_lengths)
    if lx == 0 and ly == 0:
        return 0.0
    mean = (lx + ly) / 2.0
    z = abs(lx - ly) / math.sqrt(mean * _LENGTH_VARIANCE)
    return -100.0 * (_LOG2 + _norm_logsf(z))


def align_beads(
    src_lengths: list[int], tgt_lengths: list[int]
) -> list[tuple[tuple[int, int], tuple[int, int]]]:
    """Dynamic program over bead types on character lengths.

    Returns beads as ((src_lo, src_hi), (tgt_lo, tgt_hi)) index ranges in
    source order, covering both sides completely.
    """
    nx = len(src_lengths)
    ny = len(tgt_lengths)
    best: dict[tuple[int, int], tuple[float, int, int]] = {(0, 0): (0.0, 0, 0)}
    for i in range(nx + 1):
        for j in range(ny + 1):
            if i == 0 and j == 0:
                continue
            candidates = []
            for (di, dj), bead_cost in _BEAD_COSTS.items():
                pi, pj = i - di, j - dj
                if pi < 0 or pj < 0:
                    continue
                prev = best.get((pi, pj))
                if prev is None:
                    continue
                cost = prev[0] + bead_cost + _length_cost(
                    src_lengths[pi:i], tgt_lengths[pj:j]
                )
                candidates.append((cost, di, dj))
            best[(i, j)] = min(candidates)
    beads = []
    i, j = nx, ny
    while i > 0 or j > 0:
        _, di, dj = best[(i, j)]
        beads.append(((i - di, i), (j - dj, j)))
        i -= di
        j -= dj
    beads.reverse()
    return beads


def _word_count(sentence: str) -> int:
    return len(sentence.split())


def align_sentences(
    pair: ArticlePair, abbreviations: frozenset[str] | None = None
) -> list[SentencePair]:
    """Clean, segment, and align one article pair, keeping 1-1 beads only."""
    src_sentences = segment_sentences(clean_text(pair.source_text), abbreviations)
    tgt_sentences = segment_sentences(clean_text(pair.target_text), abbreviations)
    if not src_sentences:
        raise AlignmentError(f"article {pair.article_id}: source segments to zero sentences")
    if not tgt_sentences:
        raise AlignmentError(f"article {pair.article_id}: target segments to zero sentences")
    beads = align_beads(
        [len(s) for s in src_sentences], [len(t) for t in tgt_sentences]
    )
    out: list[SentencePair] = []
    dropped = 0
    for (a0, a1), (b0, b1) in beads:
        if a1 - a0 == 1 and b1 - b0 == 1:
            source = src_sentences[a0]
            out.append(
                SentencePair(
                    pair_id=f"{pair.article_id}:{a0:04d}",
                    article_id=pair.article_id,
                    source=source,
                    reference=tgt_sentences[b0],
                    source_token_count=_word_count(source),
                )
            )
        else:
            dropped += 1
    if dropped:
        logger.info("article %s: dropped %d non-1-1 beads", pair.article_id, dropped)
    return out


# ---------------------------------------------------------------------------
# ingestion


def _iter_records(root: Path, config: IngestionConfig):
    """Yield (origin, record) for every candidate record under root."""
    if config.format == "json":
        for path in sorted(root.rglob("*.json")):
            try:
                payload = json.loads(path.read_text("utf-8"))
            except (OSError, ValueError) as exc:
                raise IngestError(f"{path}: malformed record: {exc}") from exc
            yield str(path), payload, path.stem
        for path in sorted(root.rglob("*.jsonl")):
            with open(path, encoding="utf-8") as fh:
                for lineno, line in enumerate(fh, start=1):
                    if not line.strip():
                        continue
                    try:
                        payload = json.loads(line)
                    except ValueError as exc:
                        raise IngestError(
                            f"{path}:{lineno}: malformed record: {exc}"
                        ) from exc
                    yield f"{path}:{lineno}", payload, f"{path.stem}:{lineno}"
    elif config.format == "paired":
        for src_path in sorted(root.rglob(f"*{config.source_suffix}")):
            stem = src_path.name[: -len(config.source_suffix)]
            tgt_path = src_path.parent / f"{stem}{config.target_suffix}"
            record = {config.id_key: stem, config.source_key: src_path.read_text("utf-8")}
            if tgt_path.exists():
                record[config.target_key] = tgt_path.read_text("utf-8")
            yield str(src_path), record, stem
    else:
        raise IngestError(f"unknown ingestion format {config.format!r}")


def ingest_articles(path: str | Path, config: IngestionConfig | None = None) -> IngestResult:
    """Read paired articles from a directory or .zip archive.

    Records missing either language side (or empty after cleaning) are
    skipped and counted; malformed records abort with file context.
    """
    config = config or IngestionConfig()
    path = Path(path)
    if not path.exists():
        raise IngestError(f"unreadable path: {path}")

    if path.suffix == ".zip":
        import tempfile

        with tempfile.TemporaryDirectory() as tmp:
            with zipfile.ZipFile(path) as zf:
                zf.extractall(tmp)
            return _ingest_dir(Path(tmp), config)
    if not path.is_dir():
        raise IngestError(f"not a directory or archive: {path}")
    return _ingest_dir(path, config)


def _ingest_dir(root: Path, config: IngestionConfig) -> IngestResult:
    articles: list[ArticlePair] = []
    seen: set[str] = set()
    skipped = 0
    fetched_at = datetime.now(timezone.utc).isoformat(timespec="seconds")
    for origin, record, fallback_id in _iter_records(root, config):
        if not isinstance(record, dict):
            raise IngestError(f"{origin}: malformed record: expected an object")
        source = clean_text(str(record.get(config.source_key) or ""))
        target = clean_text(str(record.get(config.target_key) or ""))
        if not source or not target:
            skipped += 1
            continue
        article_id = str(record.get(config.id_key) or fallback_id)
        if article_id in seen:
            raise IngestError(f"{origin}: duplicate article_id {article_id!r}")
        seen.add(article_id)
        articles.append(
            ArticlePair(
                article_id=article_id,
                source_text=source,
                target_text=target,
                source_url=record.get(config.url_key),
                fetched_at=fetched_at,
            )
        )
    if not articles:
        raise IngestError(f"zero pairs found under {root}")
    if skipped:
        logger.info("skipped %d records missing a language side", skipped)
    return IngestResult(articles=articles, skipped=skipped)


def build_corpus(
    articles: list[ArticlePair],
    provenance: str = "",
    abbreviations: frozenset[str] | None = None,
) -> AlignedCorpus:
    """Align every article and assemble a corpus in deterministic order."""
    pairs: list[SentencePair] = []
    for article in sorted(articles, key=lambda a: a.article_id):
        pairs.extend(align_sentences(article, abbreviations))
    return AlignedCorpus(pairs=pairs, provenance=provenance)


# ---------------------------------------------------------------------------
# splits


def _selection_rank(seed: int, pair_id: str) -> str:
    return hashlib.sha256(f"{seed}:{pair_id}".encode("utf-8")).hexdigest()


def split_corpus(corpus: AlignedCorpus, test_size: int, seed: int) -> AlignedCorpus:
    """Tag a test split stratified by source token-length terciles.

    Selection within each tercile ranks pairs by a seeded digest, so the
    result is identical across platforms and Python versions.
    """
    n = len(corpus.pairs)
    if test_size < 0:
        raise ValueError("test_size must be non-negative")
    if test_size > n:
        raise ValueError(f"test_size {test_size} exceeds corpus size {n}")

    by_length = sorted(corpus.pairs, key=lambda p: (p.source_token_count, p.pair_id))
    tercile_sizes = [n // 3 + (1 if i < n % 3 else 0) for i in range(3)]
    terciles: list[list[SentencePair]] = []
    offset = 0
    for size in tercile_sizes:
        terciles.append(by_length[offset : offset + size])
        offset += size

    quotas = [test_size // 3 + (1 if i < test_size % 3 else 0) for i in range(3)]
    # Spill quota a tiny tercile cannot absorb onto the others.
    for i in range(3):
        overflow = quotas[i] - len(terciles[i])
        if overflow > 0:
            quotas[i] = len(terciles[i])
            for j in range(3):
                if j == i:
                    continue
                room = len(terciles[j]) - quotas[j]
                take = min(room, overflow)
                quotas[j] += take
                overflow -= take

    selected: set[str] = set()
    for tercile, quota in zip(terciles, quotas):
        ranked = sorted(tercile, key=lambda p: _selection_rank(seed, p.pair_id))
        selected.update(p.pair_id for p in ranked[:quota])

    pairs = [
        replace(p, split="test" if p.pair_id in selected else "train")
        for p in corpus.pairs
    ]
    return AlignedCorpus(pairs=pairs, provenance=corpus.provenance)


# ---------------------------------------------------------------------------
# serialization

_REQUIRED_FIELDS = ("pair_id", "article_id", "source", "reference", "source_token_count", "split")


def export_corpus(corpus: AlignedCorpus, path: str | Path) -> None:
    path = Path(path)
    with open(path, "w", encoding="utf-8") as fh:
        meta = {"v": SCHEMA_VERSION, "kind": "meta", "provenance": corpus.provenance}
        fh.write(json.dumps(meta, ensure_ascii=False, sort_keys=True) + "\n")
        for pair in corpus.pairs:
            row = {
                "v": SCHEMA_VERSION,
                "pair_id": pair.pair_id,
                "article_id": pair.article_id,
                "source": pair.source,
                "reference": pair.reference,
                "source_token_count": pair.source_token_count,
                "split": pair.split,
            }
            fh.write(json.dumps(row, ensure_ascii=False, sort_keys=True) + "\n")


def load_corpus(path: str | Path) -> AlignedCorpus:
    path = Path(path)
    pairs: list[SentencePair] = []
    provenance = ""
    seen: set[str] = set()
    with open(path, encoding="utf-8") as fh:
        lines = [line for line in fh if line.strip()]
    if not lines:
        logger.warning("loaded empty corpus from %s", path)
        return AlignedCorpus()
    for index, line in enumerate(lines):
        try:
            row = json.loads(line)
        except ValueError as exc:
            raise SchemaError(f"record {index}: invalid JSON: {exc}") from exc
        if row.get("kind") == "meta":
            provenance = row.get("provenance", "")
            continue
        for fieldname in _REQUIRED_FIELDS:
            if fieldname not in row:
                raise SchemaError(f"record {index}: missing field {fieldname!r}")
        if row["split"] not in ("train", "test"):
            raise SchemaError(f"record {index}: invalid split {row['split']!r}")
        if row["pair_id"] in seen:
            raise SchemaError(f"record {index}: duplicate pair_id {row['pair_id']!r}")
        seen.add(row["pair_id"])
        pairs.append(
            SentencePair(
                pair_id=row["pair_id"],
                article_id=row["article_id"],
                source=row["source"],
                reference=row["reference"],
                source_token_count=int(row["source_token_count"]),
                split=row["split"],
            )
        )
    return AlignedCorpus(pairs=pairs, provenance=provenance)
