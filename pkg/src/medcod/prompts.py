"""Render the four prompt strategies from a sentence and its enrichment.

Templates are versioned plain-text data files; rendering is a pure function
of its inputs so golden-file tests can pin the output byte-for-byte. The
three structured strategies share one instruction scaffold with the direct
form and differ only in the context block.
"""

from __future__ import annotations

import json
import re
from dataclasses import dataclass
from enum import Enum
from functools import lru_cache
from importlib import resources

from .corpus import SentencePair
from .knowledge import ConceptEnrichment

TEMPLATE_VERSION = "v1"

_PLACEHOLDER_RE = re.compile(r"\{([a-z_]+)\}")


class PromptStrategy(Enum):
    DirectTranslation = "direct-translation"
    LlmKbMultilingual = "llm-kb-multilingual"
    LlmKbSynonyms = "llm-kb-synonyms"
    UmlsDict = "umls-dict"

    @classmethod
    def from_id(cls, value: str) -> "PromptStrategy":
        for member in cls:
            if member.value == value:
                return member
        raise ValueError(f"unknown strategy {value!r}")


STRUCTURED_STRATEGIES = (
    PromptStrategy.LlmKbMultilingual,
    PromptStrategy.LlmKbSynonyms,
    PromptStrategy.UmlsDict,
)


@dataclass
class RenderedPrompt:
    strategy: PromptStrategy
    pair_id: str
    text: str
    context_block: str
    template_version: str
    degraded: bool = False  # structured strategy fell back to the direct form


@lru_cache(maxsize=None)
def _template(name: str, version: str) -> str:
    return (
        resources.files("medcod")
        .joinpath(f"data/templates/{version}/{name}.txt")
        .read_text("utf-8")
        .rstrip("\n")
    )


@lru_cache(maxsize=1)
def language_names() -> dict[str, str]:
    data = resources.files("medcod").joinpath("data/languages.json").read_text("utf-8")
    return json.loads(data)


def _fill(template: str, mapping: dict[str, str]) -> str:
    """Single-pass placeholder substitution; inserted text is never rescanned."""
    return _PLACEHOLDER_RE.sub(lambda m: mapping[m.group(1)], template)


def _ordered_concepts(enrichment: ConceptEnrichment) -> list[str]:
    """Canonical concept names in first-occurrence sentence order."""
    with_span = [c for c in enrichment.concepts if c.span is not None]
    without = [c for c in enrichment.concepts if c.span is None]
    ordered = sorted(with_span, key=lambda c: c.span[0]) + without
    return [c.canonical for c in ordered]


def _multilingual_lines(
    enrichment: ConceptEnrichment, aux_langs: tuple[str, ...], version: str
) -> list[str]:
    template = _template("context_multilingual", version)
    by_concept = {m.concept: m for m in enrichment.multilingual}
    rejected = enrichment.rejected_terms()
    lines = []
    for concept in _ordered_concepts(enrichment):
        multi = by_concept.get(concept)
        if multi is None:
            continue
        parts = []
        for lang in aux_langs:
            term = multi.per_language.get(lang)
            if not term or (concept, term, lang) in rejected:
                continue
            parts.append(f"{lang}: {term}")
        if parts:
            lines.append(_fill(template, {"concept": concept, "terms": ", ".join(parts)}))
    return lines


def _synonym_lines(enrichment: ConceptEnrichment, version: str) -> list[str]:
    template = _template("context_synonyms", version)
    by_concept = {s.concept: s for s in enrichment.synonyms}
    lines = []
    for concept in _ordered_concepts(enrichment):
        syns = by_concept.get(concept)
        if syns is None:
            continue
        sections = [
            f"{lang}: [{', '.join(items)}]"
            for lang, items in syns.per_language.items()
            if items
        ]
        if sections:
            lines.append(
                _fill(template, {"concept": concept, "sections": "; ".join(sections)})
            )
    return lines


def _umls_lines(enrichment: ConceptEnrichment, version: str) -> list[str]:
    template = _template("context_umls", version)
    rejected = enrichment.rejected_terms()
    by_concept: dict[str, list] = {}
    for entry in enrichment.umls:
        by_concept.setdefault(entry.concept, []).append(entry)
    lines = []
    for concept in _ordered_concepts(enrichment):
        for entry in by_concept.get(concept, []):
            if (entry.concept, entry.target_term, entry.target_lang) in rejected:
                continue
            lines.append(
                _fill(
                    template,
                    {"source_term": entry.source_term, "target_term": entry.target_term},
                )
            )
    return lines


def render_prompt(
    strategy: PromptStrategy,
    pair: SentencePair,
    enrichment: ConceptEnrichment | None = None,
    source_lang: str = "en",
    target_lang: str = "es",
    aux_langs: tuple[str, ...] = ("fr", "pt"),
    template_version: str = TEMPLATE_VERSION,
) -> RenderedPrompt:
    """Render one prompt; deterministic for fixed inputs and template version.

    Structured strategies with nothing to show (no enrichment data, or all
    entries rejected) degrade to the direct form with `degraded` set.
    """
    if strategy is not PromptStrategy.DirectTranslation:
        if enrichment is None:
            raise ValueError(f"strategy {strategy.value} requires an enrichment")
        if enrichment.pair_id != pair.pair_id:
            raise ValueError(
                f"enrichment pair_id {enrichment.pair_id!r} does not match pair {pair.pair_id!r}"
            )

    if strategy is PromptStrategy.DirectTranslation:
        lines: list[str] = []
    elif strategy is PromptStrategy.LlmKbMultilingual:
        lines = _multilingual_lines(enrichment, tuple(aux_langs), template_version)
    elif strategy is PromptStrategy.LlmKbSynonyms:
        lines = _synonym_lines(enrichment, template_version)
    else:
        lines = _umls_lines(enrichment, template_version)

    if lines:
        # blank line between context and sentence; empty block collapses away
        context_block = (
            _fill(_template("context_block", template_version), {"lines": "\n".join(lines)})
            + "\n\n"
        )
    else:
        context_block = ""

    names = language_names()
    text = _fill(
        _template("scaffold", template_version),
        {
            "source_language": names.get(source_lang, source_lang),
            "target_language": names.get(target_lang, target_lang),
            "context_block": context_block,
            "sentence": pair.source,
        },
    )
    return RenderedPrompt(
        strategy=strategy,
        pair_id=pair.pair_id,
        text=text,
        context_block=context_block,
        template_version=template_version,
        degraded=strategy is not PromptStrategy.DirectTranslation and not lines,
    )
