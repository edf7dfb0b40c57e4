from __future__ import annotations

import random
import sys
from pathlib import Path

import pytest

TESTS_DIR = Path(__file__).parent
sys.path.insert(0, str(TESTS_DIR))

from medcod.corpus import SentencePair
from medcod.knowledge import (
    ConceptEnrichment,
    MedicalConcept,
    MultilingualTranslations,
    SynonymSet,
    UmlsDictEntry,
)


def pytest_runtest_logreport(report):
    """One visible pass/fail line per acceptance criterion."""
    if "test_acceptance" not in report.nodeid or report.when != "call":
        return
    name = report.nodeid.split("::")[-1]
    outcome = "PASS" if report.passed else "FAIL"
    sys.stderr.write(f"[{outcome}] acceptance: {name}\n")


@pytest.fixture
def fever_pair() -> SentencePair:
    return SentencePair(
        pair_id="a1:0000",
        article_id="a1",
        source="Fever is the classic symptom.",
        reference="La fiebre es el síntoma clásico.",
        source_token_count=5,
        split="test",
    )


@pytest.fixture
def fever_enrichment(fever_pair) -> ConceptEnrichment:
    return ConceptEnrichment(
        pair_id=fever_pair.pair_id,
        concepts=[
            MedicalConcept(surface="Fever", canonical="fever", span=(0, 5)),
            MedicalConcept(surface="symptom", canonical="symptom", span=(20, 27)),
        ],
        multilingual=[
            MultilingualTranslations("fever", {"fr": "fièvre", "pt": "febre"}),
            MultilingualTranslations("symptom", {"fr": "symptôme"}),
        ],
        synonyms=[SynonymSet("fever", {"es": ["fiebre", "pirexia"]})],
        umls=[UmlsDictEntry("fever", "C0015967", "fever", "fiebre", "en", "es")],
        quality=[],
        kb_model="stub",
        created_at="2026-01-01T00:00:00+00:00",
    )


# -- synthetic article generator shared by corpus and acceptance tests

_SOURCE_WORDS = [
    "fever", "cough", "nausea", "patient", "doctor", "symptom", "treatment",
    "blood", "pressure", "chronic", "infection", "vaccine", "dose", "heart",
    "lungs", "kidney", "muscle", "joint", "pain", "relief", "daily", "water",
]
_TARGET_WORDS = [
    "fiebre", "tos", "nauseas", "paciente", "medico", "sintoma", "tratamiento",
    "sangre", "presion", "cronica", "infeccion", "vacuna", "dosis", "corazon",
    "pulmones", "rinon", "musculo", "articulacion", "dolor", "alivio", "diario",
    "agua",
]


def make_sentence(rng: random.Random, words: list[str], target_chars: int) -> str:
    picked = [rng.choice(words)]
    while len(" ".join(picked)) + 1 < target_chars:
        picked.append(rng.choice(words))
    text = " ".join(picked)
    return text[0].upper() + text[1:] + "."


def make_synthetic_article(
    rng: random.Random,
    n_sentences: int,
    insertion_rate: float = 0.0,
) -> tuple[list[str], list[str], dict[int, int]]:
    """Build a 1:1 translated article plus short source-only insertions.

    Returns (source_sentences, target_sentences, truth) where truth maps a
    source sentence index to its true target index; inserted editorial
    sentences have no entry.
    """
    beads: list[tuple[str, str]] = []
    for _ in range(n_sentences):
        src_len = rng.randint(25, 110)
        tgt_len = max(12, round(src_len * rng.gauss(1.08, 0.03)))
        beads.append(
            (
                make_sentence(rng, _SOURCE_WORDS, src_len),
                make_sentence(rng, _TARGET_WORDS, tgt_len),
            )
        )
    source_sentences = [s for s, _ in beads]
    # editorial boilerplate present only on the source side
    n_insertions = sum(1 for _ in range(n_sentences) if rng.random() < insertion_rate)
    inserted: set[int] = set()
    for _ in range(n_insertions):
        pos = rng.randint(0, len(source_sentences))
        source_sentences.insert(
            pos, make_sentence(rng, _SOURCE_WORDS, rng.randint(15, 60))
        )
        inserted = {i + 1 if i >= pos else i for i in inserted}
        inserted.add(pos)
    truth: dict[int, int] = {}
    tgt_index = 0
    for i in range(len(source_sentences)):
        if i not in inserted:
            truth[i] = tgt_index
            tgt_index += 1
    return source_sentences, [t for _, t in beads], truth
