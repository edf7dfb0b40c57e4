"""Concept extraction and enrichment from an LLM knowledge base plus UMLS.

A sentence is enriched in four steps: extract medical keywords through the
KB, fetch multilingual translations and synonyms per concept, look each
concept up in an offline UMLS term-pair snapshot, and quality-check the
translated terms. Every KB call goes through a persistent append-only cache
so reruns are free.
"""

from __future__ import annotations

import hashlib
import json
import logging
import re
import threading
import time
import unicodedata
from dataclasses import dataclass, field
from datetime import datetime, timezone
from importlib import resources
from pathlib import Path
from typing import Callable, Protocol

from .errors import MalformedKbOutput
from .corpus import SentencePair

logger = logging.getLogger(__name__)

KB_TEMPLATE_VERSION = "v1"

_WS_RE = re.compile(r"\s+")
_FENCE_RE = re.compile(r"^```[a-zA-Z]*\n(.*?)\n?```$", re.DOTALL)


# ---------------------------------------------------------------------------
# domain types


@dataclass(frozen=True)
class MedicalConcept:
    surface: str
    canonical: str
    span: tuple[int, int] | None = None


@dataclass
class MultilingualTranslations:
    concept: str
    per_language: dict[str, str]


@dataclass
class SynonymSet:
    concept: str
    per_language: dict[str, list[str]]


@dataclass
class UmlsDictEntry:
    concept: str
    cui: str | None
    source_term: str
    target_term: str
    source_lang: str
    target_lang: str


@dataclass
class TermPair:
    source_term: str
    target_term: str
    source_lang: str
    target_lang: str


@dataclass
class QualityVerdict:
    concept: str
    source_term: str
    target_term: str
    target_lang: str
    verdict: str  # "accept" | "reject" | "unknown"


@dataclass
class ConceptEnrichment:
    pair_id: str
    concepts: list[MedicalConcept]
    multilingual: list[MultilingualTranslations]
    synonyms: list[SynonymSet]
    umls: list[UmlsDictEntry]
    quality: list[QualityVerdict]
    kb_model: str
    created_at: str
    keyword_extraction_s: float = 0.0
    keyword_translation_s: float = 0.0
    quality_check_s: float = 0.0

    def content_dict(self) -> dict:
        """Everything except the creation timestamp and timings."""
        return {
            "pair_id": self.pair_id,
            "concepts": [vars(c) | {"span": list(c.span) if c.span else None} for c in self.concepts],
            "multilingual": [vars(m) for m in self.multilingual],
            "synonyms": [vars(s) for s in self.synonyms],
            "umls": [vars(u) for u in self.umls],
            "quality": [vars(q) for q in self.quality],
            "kb_model": self.kb_model,
        }

    def rejected_terms(self) -> set[tuple[str, str, str]]:
        """(concept, target_term, target_lang) keys that failed the check."""
        return {
            (q.concept, q.target_term, q.target_lang)
            for q in self.quality
            if q.verdict == "reject"
        }


def canonicalize(term: str) -> str:
    """Lowercase NFC form with collapsed whitespace; used for cache keys."""
    return _WS_RE.sub(" ", unicodedata.normalize("NFC", term)).strip().lower()


# ---------------------------------------------------------------------------
# KB clients


class KbClient(Protocol):
    """Answers one rendered request; `params` carries the template fields."""

    name: str

    def ask(self, template_id: str, prompt: str, params: dict) -> str: ...


class DeterministicStubKb:
    """Offline KB producing deterministic answers; used for stub runs."""

    name = "stub"

    def __init__(self, min_keyword_len: int = 5, max_keywords: int = 3):
        self.min_keyword_len = min_keyword_len
        self.max_keywords = max_keywords
        self.calls = 0

    def ask(self, template_id: str, prompt: str, params: dict) -> str:
        self.calls += 1
        if template_id == "extract_keywords":
            words = []
            for raw in params["sentence"].split():
                word = raw.strip(".,;:!?()[]\"'").lower()
                if len(word) >= self.min_keyword_len and word.isalpha() and word not in words:
                    words.append(word)
            return json.dumps(words[: self.max_keywords])
        if template_id == "multilingual":
            concept = params["concept"]
            return json.dumps({lang: f"{concept}-{lang}" for lang in params["languages"]})
        if template_id == "synonyms":
            concept = params["concept"]
            return json.dumps(
                {lang: [f"{concept}-{lang}-syn"] for lang in params["languages"]}
            )
        if template_id == "quality_check":
            return "yes"
        raise ValueError(f"unknown template {template_id!r}")


class ChatKb:
    """KB backed by a chat-completion endpoint; transport failures retry."""

    def __init__(
        self,
        model: str,
        base_url: str,
        api_key_env: str = "MEDCOD_KB_API_KEY",
        timeout_s: float = 120.0,
        retry=None,
    ):
        from .chat import RetryPolicy, make_backend

        self.name = model
        self.timeout_s = timeout_s
        self.retry = retry or RetryPolicy()
        self._backend = make_backend(base_url, api_key_env)

    def ask(self, template_id: str, prompt: str, params: dict) -> str:
        from .chat import call_with_retries

        reply, _ = call_with_retries(
            lambda: self._backend.complete(self.name, prompt, 0.0, self.timeout_s),
            self.retry,
        )
        return reply.text


def render_kb_request(template_id: str, version: str = KB_TEMPLATE_VERSION, **params) -> str:
    template = (
        resources.files("medcod")
        .joinpath(f"data/kb/{version}/{template_id}.txt")
        .read_text("utf-8")
        .rstrip("\n")
    )
    filled = dict(params)
    if "languages" in filled and not isinstance(filled["languages"], str):
        filled["languages"] = ", ".join(filled["languages"])
    return re.sub(r"\{([a-z_]+)\}", lambda m: str(filled[m.group(1)]), template)


# ---------------------------------------------------------------------------
# cache


class KbCache:
    """Append-only JSONL store keyed by a content digest of the request.

    Lookups never alter stored values; appends are serialized so multiple
    enrichment workers can share one cache.
    """

    def __init__(self, path: str | Path | None = None):
        self.path = Path(path) if path else None
        self._store: dict[str, str] = {}
        self._lock = threading.Lock()
        self.hits = 0
        self.misses = 0
        if self.path and self.path.exists():
            with open(self.path, encoding="utf-8") as fh:
                for line in fh:
                    if not line.strip():
                        continue
                    row = json.loads(line)
                    self._store[row["key"]] = row["value"]

    @staticmethod
    def key(kb_model: str, template_id: str, rendered: str) -> str:
        blob = json.dumps([kb_model, template_id, rendered], ensure_ascii=False)
        return hashlib.sha256(blob.encode("utf-8")).hexdigest()

    def get(self, key: str) -> str | None:
        value = self._store.get(key)
        if value is None:
            self.misses += 1
        else:
            self.hits += 1
        return value

    def put(self, key: str, value: str) -> None:
        with self._lock:
            if key in self._store:
                return
            self._store[key] = value
            if self.path:
                with open(self.path, "a", encoding="utf-8") as fh:
                    fh.write(json.dumps({"key": key, "value": value}, ensure_ascii=False) + "\n")


class CachingKb:
    """Cache-through wrapper around any KB client."""

    def __init__(self, inner: KbClient, cache: KbCache):
        self.inner = inner
        self.cache = cache
        self.name = inner.name

    def ask(self, template_id: str, prompt: str, params: dict) -> str:
        key = KbCache.key(self.name, template_id, prompt)
        cached = self.cache.get(key)
        if cached is not None:
            return cached
        answer = self.inner.ask(template_id, prompt, params)
        self.cache.put(key, answer)
        return answer


# ---------------------------------------------------------------------------
# parsing helpers


def _strip_fences(text: str) -> str:
    text = text.strip()
    m = _FENCE_RE.match(text)
    return m.group(1).strip() if m else text


def _parse_json_payload(text: str):
    text = _strip_fences(text)
    try:
        return json.loads(text)
    except ValueError:
        pass
    # repair attempt: take the outermost bracketed span
    for open_ch, close_ch in ("[]", "{}"):
        lo = text.find(open_ch)
        hi = text.rfind(close_ch)
        if 0 <= lo < hi:
            try:
                return json.loads(text[lo : hi + 1])
            except ValueError:
                continue
    raise ValueError("no JSON payload found")


def _ask_json(kb: KbClient, template_id: str, prompt: str, params: dict):
    """One request plus a single 'valid JSON only' reprompt, then hard error."""
    raw = kb.ask(template_id, prompt, params)
    try:
        return _parse_json_payload(raw)
    except ValueError:
        reprompt = prompt + "\n\nAnswer in valid JSON only."
        raw = kb.ask(template_id, reprompt, params)
        try:
            return _parse_json_payload(raw)
        except ValueError as exc:
            raise MalformedKbOutput(
                f"{template_id}: unparseable KB response after reprompt: {raw[:200]!r}"
            ) from exc


# ---------------------------------------------------------------------------
# operations


def extract_keywords(sentence: str, kb: KbClient) -> list[MedicalConcept]:
    """Ask the KB for medical keywords and resolve their spans.

    Concepts not literally present in the sentence are retained with no
    span. Duplicates (same canonical form) collapse to the first mention.
    """
    if not sentence.strip():
        raise ValueError("sentence is empty")
    prompt = render_kb_request("extract_keywords", sentence=sentence)
    payload = _ask_json(kb, "extract_keywords", prompt, {"sentence": sentence})
    if not isinstance(payload, list) or not all(isinstance(x, str) for x in payload):
        raise MalformedKbOutput(f"extract_keywords: expected a JSON array of strings, got {payload!r}")
    lowered = sentence.lower()
    concepts: list[MedicalConcept] = []
    seen: set[str] = set()
    for term in payload:
        canonical = canonicalize(term)
        if not canonical or canonical in seen:
            continue
        seen.add(canonical)
        idx = lowered.find(canonical)
        if idx >= 0:
            span = (idx, idx + len(canonical))
            surface = sentence[span[0] : span[1]]
        else:
            span = None
            surface = term
        concepts.append(MedicalConcept(surface=surface, canonical=canonical, span=span))
    return concepts


def get_multilingual_translations(
    concept: MedicalConcept, aux_langs: list[str], kb: KbClient
) -> MultilingualTranslations:
    """One term per requested language; languages the KB omits stay absent."""
    if not aux_langs:
        raise ValueError("aux_langs is empty")
    prompt = render_kb_request("multilingual", concept=concept.canonical, languages=aux_langs)
    payload = _ask_json(
        kb, "multilingual", prompt, {"concept": concept.canonical, "languages": aux_langs}
    )
    if not isinstance(payload, dict):
        raise MalformedKbOutput(f"multilingual: expected a JSON object, got {payload!r}")
    per_language = {}
    for lang in aux_langs:
        term = payload.get(lang)
        if isinstance(term, str) and term.strip():
            per_language[lang] = term.strip()
    return MultilingualTranslations(concept=concept.canonical, per_language=per_language)


def get_synonyms(concept: MedicalConcept, langs: list[str], kb: KbClient) -> SynonymSet:
    """Synonym lists per requested language, deduplicated, order-preserving."""
    if not langs:
        raise ValueError("langs is empty")
    prompt = render_kb_request("synonyms", concept=concept.canonical, languages=langs)
    payload = _ask_json(
        kb, "synonyms", prompt, {"concept": concept.canonical, "languages": langs}
    )
    if not isinstance(payload, dict):
        raise MalformedKbOutput(f"synonyms: expected a JSON object, got {payload!r}")
    per_language: dict[str, list[str]] = {}
    for lang in langs:
        raw = payload.get(lang)
        if not isinstance(raw, list):
            continue
        deduped: list[str] = []
        for item in raw:
            if isinstance(item, str) and item.strip() and item.strip() not in deduped:
                deduped.append(item.strip())
        if deduped:
            per_language[lang] = deduped
    return SynonymSet(concept=concept.canonical, per_language=per_language)


# ---------------------------------------------------------------------------
# UMLS snapshot


@dataclass
class _SnapshotRow:
    index: int
    cui: str
    lang: str
    term: str
    preferred: bool


def _fold(term: str) -> str:
    """Diacritic-insensitive casefolded form for the fallback match."""
    decomposed = unicodedata.normalize("NFKD", term)
    stripped = "".join(ch for ch in decomposed if not unicodedata.combining(ch))
    return _WS_RE.sub(" ", stripped).strip().casefold()


class UmlsSnapshot:
    """In-memory index over an offline term-pair TSV (cui, lang, term, preferred)."""

    def __init__(self, rows: list[tuple[str, str, str, bool]]):
        self.rows = [
            _SnapshotRow(index=i, cui=cui, lang=lang, term=term, preferred=pref)
            for i, (cui, lang, term, pref) in enumerate(rows)
        ]
        self._exact: dict[tuple[str, str], list[_SnapshotRow]] = {}
        self._folded: dict[tuple[str, str], list[_SnapshotRow]] = {}
        self._by_cui_lang: dict[tuple[str, str], list[_SnapshotRow]] = {}
        for row in self.rows:
            self._exact.setdefault((row.lang, row.term.lower()), []).append(row)
            self._folded.setdefault((row.lang, _fold(row.term)), []).append(row)
            self._by_cui_lang.setdefault((row.cui, row.lang), []).append(row)

    @classmethod
    def load(cls, path: str | Path) -> "UmlsSnapshot":
        rows = []
        with open(path, encoding="utf-8") as fh:
            for lineno, line in enumerate(fh, start=1):
                line = line.rstrip("\n")
                if not line.strip():
                    continue
                parts = line.split("\t")
                if lineno == 1 and parts[0].strip().lower() == "cui":
                    continue
                if len(parts) < 4:
                    raise ValueError(f"{path}:{lineno}: expected 4 tab-separated columns")
                cui, lang, term, preferred = parts[0], parts[1], parts[2], parts[3]
                rows.append((cui.strip(), lang.strip(), term.strip(), preferred.strip() == "1"))
        return cls(rows)

    @classmethod
    def bundled_sample(cls) -> "UmlsSnapshot":
        with resources.as_file(
            resources.files("medcod").joinpath("data/umls_sample.tsv")
        ) as path:
            return cls.load(path)

    def source_rows(self, term: str, lang: str) -> list[_SnapshotRow]:
        exact = self._exact.get((lang, term.lower()), [])
        if exact:
            return exact
        return self._folded.get((lang, _fold(term)), [])

    def target_rows(self, cui: str, lang: str) -> list[_SnapshotRow]:
        return self._by_cui_lang.get((cui, lang), [])


def umls_lookup(
    concept: MedicalConcept,
    snapshot: UmlsSnapshot,
    source_lang: str,
    target_lang: str,
) -> list[UmlsDictEntry]:
    """All snapshot translations of the concept into the target language.

    Exact (case-insensitive) source-term matches win; a diacritic-folded
    match is the fallback. A miss is an empty list, not an error. Snapshot
    row order is preserved and exact duplicate entries collapse.
    """
    if snapshot is None:
        raise ValueError("snapshot not loaded")
    entries: list[UmlsDictEntry] = []
    seen: set[tuple] = set()
    matches = snapshot.source_rows(concept.canonical, source_lang)
    targets: list[tuple[int, UmlsDictEntry]] = []
    for row in matches:
        for target in snapshot.target_rows(row.cui, target_lang):
            entry = UmlsDictEntry(
                concept=concept.canonical,
                cui=row.cui,
                source_term=row.term,
                target_term=target.term,
                source_lang=source_lang,
                target_lang=target_lang,
            )
            key = (entry.cui, entry.source_term, entry.target_term, entry.target_lang)
            if key in seen:
                continue
            seen.add(key)
            targets.append((target.index, entry))
    targets.sort(key=lambda pair: pair[0])
    entries = [entry for _, entry in targets]
    return entries


# ---------------------------------------------------------------------------
# quality check


def quality_check_translation(entry: TermPair, checker: KbClient) -> str:
    """Ask the checker whether a term pair is a correct translation.

    Returns "accept", "reject", or "unknown" when the answer is
    unparseable. Unknown never blocks rendering; only rejects do.
    """
    if not entry.source_term or not entry.target_term:
        raise ValueError("term pair has an empty side")
    params = {
        "source_term": entry.source_term,
        "target_term": entry.target_term,
        "source_lang": entry.source_lang,
        "target_lang": entry.target_lang,
    }
    prompt = render_kb_request("quality_check", **params)
    raw = checker.ask("quality_check", prompt, params).strip()
    try:
        payload = _parse_json_payload(raw)
        if isinstance(payload, dict):
            raw = str(payload.get("verdict", ""))
    except ValueError:
        pass
    folded = raw.strip().strip(".!").casefold()
    if folded in ("yes", "accept", "correct", "true", "si", "sí"):
        return "accept"
    if folded in ("no", "reject", "incorrect", "false"):
        return "reject"
    return "unknown"


# ---------------------------------------------------------------------------
# composition


@dataclass
class EnrichmentConfig:
    kb_model: str = "stub"
    source_lang: str = "en"
    target_lang: str = "es"
    aux_langs: list[str] = field(default_factory=lambda: ["fr", "pt"])
    synonym_langs: list[str] | None = None  # default: [target] + aux
    quality_check: bool = True

    def resolved_synonym_langs(self) -> list[str]:
        if self.synonym_langs is not None:
            return self.synonym_langs
        return [self.target_lang] + [l for l in self.aux_langs if l != self.target_lang]


def enrich_sentence(
    pair: SentencePair,
    config: EnrichmentConfig,
    kb: KbClient,
    snapshot: UmlsSnapshot | None = None,
    cache: KbCache | None = None,
    timer: Callable[[], float] = time.perf_counter,
) -> ConceptEnrichment:
    """Run the full per-sentence enrichment, cache-through.

    Stage wall-times are captured so downstream translation results can
    report the whole pipeline cost per sentence.
    """
    client: KbClient = CachingKb(kb, cache) if cache is not None else kb

    t0 = timer()
    try:
        concepts = extract_keywords(pair.source, client)
    except Exception as exc:
        raise type(exc)(f"pair {pair.pair_id}: {exc}") from exc
    extraction_s = max(0.0, timer() - t0)

    multilingual: list[MultilingualTranslations] = []
    synonyms: list[SynonymSet] = []
    umls: list[UmlsDictEntry] = []
    quality: list[QualityVerdict] = []
    translation_s = 0.0
    quality_s = 0.0

    for concept in concepts:
        t1 = timer()
        try:
            multi = get_multilingual_translations(concept, config.aux_langs, client)
            syns = get_synonyms(concept, config.resolved_synonym_langs(), client)
        except Exception as exc:
            raise type(exc)(f"concept {concept.canonical!r}: {exc}") from exc
        translation_s += max(0.0, timer() - t1)
        multilingual.append(multi)
        synonyms.append(syns)

        entries = (
            umls_lookup(concept, snapshot, config.source_lang, config.target_lang)
            if snapshot is not None
            else []
        )
        umls.extend(entries)

        if config.quality_check:
            t2 = timer()
            try:
                for entry in entries:
                    verdict = quality_check_translation(
                        TermPair(
                            source_term=entry.source_term,
                            target_term=entry.target_term,
                            source_lang=entry.source_lang,
                            target_lang=entry.target_lang,
                        ),
                        client,
                    )
                    quality.append(
                        QualityVerdict(
                            concept=concept.canonical,
                            source_term=entry.source_term,
                            target_term=entry.target_term,
                            target_lang=entry.target_lang,
                            verdict=verdict,
                        )
                    )
                for lang, term in multi.per_language.items():
                    verdict = quality_check_translation(
                        TermPair(
                            source_term=concept.canonical,
                            target_term=term,
                            source_lang=config.source_lang,
                            target_lang=lang,
                        ),
                        client,
                    )
                    quality.append(
                        QualityVerdict(
                            concept=concept.canonical,
                            source_term=concept.canonical,
                            target_term=term,
                            target_lang=lang,
                            verdict=verdict,
                        )
                    )
            except Exception as exc:
                raise type(exc)(f"concept {concept.canonical!r}: {exc}") from exc
            quality_s += max(0.0, timer() - t2)

    return ConceptEnrichment(
        pair_id=pair.pair_id,
        concepts=concepts,
        multilingual=multilingual,
        synonyms=synonyms,
        umls=umls,
        quality=quality,
        kb_model=client.name,
        created_at=datetime.now(timezone.utc).isoformat(timespec="seconds"),
        keyword_extraction_s=extraction_s,
        keyword_translation_s=translation_s,
        quality_check_s=quality_s,
    )


# ---------------------------------------------------------------------------
# serialization


def enrichment_to_dict(enr: ConceptEnrichment) -> dict:
    row = enr.content_dict()
    row["v"] = 1
    row["created_at"] = enr.created_at
    row["timing"] = {
        "keyword_extraction_s": enr.keyword_extraction_s,
        "keyword_translation_s": enr.keyword_translation_s,
        "quality_check_s": enr.quality_check_s,
    }
    return row


def enrichment_from_dict(row: dict) -> ConceptEnrichment:
    timing = row.get("timing", {})
    return ConceptEnrichment(
        pair_id=row["pair_id"],
        concepts=[
            MedicalConcept(
                surface=c["surface"],
                canonical=c["canonical"],
                span=tuple(c["span"]) if c.get("span") else None,
            )
            for c in row.get("concepts", [])
        ],
        multilingual=[
            MultilingualTranslations(concept=m["concept"], per_language=m["per_language"])
            for m in row.get("multilingual", [])
        ],
        synonyms=[
            SynonymSet(concept=s["concept"], per_language=s["per_language"])
            for s in row.get("synonyms", [])
        ],
        umls=[
            UmlsDictEntry(
                concept=u["concept"],
                cui=u.get("cui"),
                source_term=u["source_term"],
                target_term=u["target_term"],
                source_lang=u["source_lang"],
                target_lang=u["target_lang"],
            )
            for u in row.get("umls", [])
        ],
        quality=[
            QualityVerdict(
                concept=q["concept"],
                source_term=q["source_term"],
                target_term=q["target_term"],
                target_lang=q["target_lang"],
                verdict=q["verdict"],
            )
            for q in row.get("quality", [])
        ],
        kb_model=row.get("kb_model", ""),
        created_at=row.get("created_at", ""),
        keyword_extraction_s=timing.get("keyword_extraction_s", 0.0),
        keyword_translation_s=timing.get("keyword_translation_s", 0.0),
        quality_check_s=timing.get("quality_check_s", 0.0),
    )


def write_enrichments(enrichments: list[ConceptEnrichment], path: str | Path) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        for enr in enrichments:
            fh.write(json.dumps(enrichment_to_dict(enr), ensure_ascii=False, sort_keys=True) + "\n")


def load_enrichments(path: str | Path) -> dict[str, ConceptEnrichment]:
    out: dict[str, ConceptEnrichment] = {}
    with open(path, encoding="utf-8") as fh:
        for line in fh:
            if not line.strip():
                continue
            enr = enrichment_from_dict(json.loads(line))
            out[enr.pair_id] = enr
    return out
