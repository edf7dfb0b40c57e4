from __future__ import annotations

import json
import random
import unicodedata
from pathlib import Path

import pytest

from medcod.corpus import (
    AlignedCorpus,
    ArticlePair,
    IngestionConfig,
    SentencePair,
    align_beads,
    align_sentences,
    build_corpus,
    clean_text,
    export_corpus,
    ingest_articles,
    load_corpus,
    segment_sentences,
    split_corpus,
)
from medcod.errors import AlignmentError, IngestError, SchemaError

from conftest import make_synthetic_article


def _write_article(directory: Path, article_id: str, source: str, target: str | None):
    record = {"article_id": article_id, "source_text": source}
    if target is not None:
        record["target_text"] = target
    (directory / f"{article_id}.json").write_text(json.dumps(record), encoding="utf-8")


class TestIngest:
    def test_well_formed_pairs(self, tmp_path):
        for i in range(3):
            _write_article(tmp_path, f"a{i}", f"Source {i}.", f"Objetivo {i}.")
        result = ingest_articles(tmp_path)
        assert len(result.articles) == 3
        assert result.skipped == 0

    def test_missing_target_skipped(self, tmp_path):
        _write_article(tmp_path, "a0", "One.", "Uno.")
        _write_article(tmp_path, "a1", "Two.", "Dos.")
        _write_article(tmp_path, "a2", "Three.", None)
        result = ingest_articles(tmp_path)
        assert len(result.articles) == 2
        assert result.skipped == 1

    def test_empty_directory_errors(self, tmp_path):
        with pytest.raises(IngestError, match="zero pairs"):
            ingest_articles(tmp_path)

    def test_malformed_record_names_file(self, tmp_path):
        (tmp_path / "bad.json").write_text("{not json", encoding="utf-8")
        with pytest.raises(IngestError, match="bad.json"):
            ingest_articles(tmp_path)

    def test_missing_path(self, tmp_path):
        with pytest.raises(IngestError, match="unreadable"):
            ingest_articles(tmp_path / "nope")

    def test_paired_text_files(self, tmp_path):
        (tmp_path / "a1.en.txt").write_text("Hello there.", encoding="utf-8")
        (tmp_path / "a1.es.txt").write_text("Hola amigo.", encoding="utf-8")
        (tmp_path / "a2.en.txt").write_text("Orphan.", encoding="utf-8")
        result = ingest_articles(tmp_path, IngestionConfig(format="paired"))
        assert [a.article_id for a in result.articles] == ["a1"]
        assert result.skipped == 1

    def test_zip_archive(self, tmp_path):
        import zipfile

        archive = tmp_path / "corpus.zip"
        with zipfile.ZipFile(archive, "w") as zf:
            zf.writestr(
                "a1.json",
                json.dumps(
                    {"article_id": "a1", "source_text": "Hi.", "target_text": "Hola."}
                ),
            )
        result = ingest_articles(archive)
        assert len(result.articles) == 1


class TestCleanText:
    def test_whitespace_collapse(self):
        assert clean_text("  Fever.\n\n") == "Fever."

    def test_tag_strip(self):
        assert clean_text("<p>Call your doctor.</p>") == "Call your doctor."

    def test_nfc_composition(self):
        # independent check: the stdlib normalizer agrees and the composed
        # literal is produced
        raw = "café"
        cleaned = clean_text(raw)
        assert cleaned == "café"
        assert cleaned == unicodedata.normalize("NFC", raw)

    def test_idempotent_on_random_text(self):
        rng = random.Random(4)
        alphabet = "ab <>&/;.é́{}\n\t\"'"
        for _ in range(500):
            raw = "".join(rng.choice(alphabet) for _ in range(rng.randint(0, 40)))
            once = clean_text(raw)
            assert clean_text(once) == once


class TestSegmentation:
    def test_basic_split(self):
        text = "Fever is common. Call your doctor today. Rest well."
        assert segment_sentences(text) == [
            "Fever is common.",
            "Call your doctor today.",
            "Rest well.",
        ]

    def test_abbreviations_do_not_split(self):
        text = "Talk to Dr. Smith about e.g. your dose. Then rest."
        assert segment_sentences(text) == [
            "Talk to Dr. Smith about e.g. your dose.",
            "Then rest.",
        ]

    def test_initials_do_not_split(self):
        text = "Reviewed by J. Smith. Updated today."
        assert segment_sentences(text) == ["Reviewed by J. Smith.", "Updated today."]

    def test_spanish_openers(self):
        text = "La fiebre es común. ¿Debo llamar al médico? Sí."
        assert segment_sentences(text) == [
            "La fiebre es común.",
            "¿Debo llamar al médico?",
            "Sí.",
        ]

    def test_decimal_numbers_survive(self):
        text = "Take 2.5 mg daily. Stop after a week."
        assert segment_sentences(text) == ["Take 2.5 mg daily.", "Stop after a week."]


class TestAlignment:
    def test_identity_shape(self):
        rng = random.Random(11)
        src_sents, tgt_sents, truth = make_synthetic_article(rng, 5)
        article = ArticlePair("a1", " ".join(src_sents), " ".join(tgt_sents))
        pairs = align_sentences(article)
        assert len(pairs) == 5
        for pair in pairs:
            index = int(pair.pair_id.split(":")[1])
            assert pair.reference == tgt_sents[truth[index]]

    def test_insertion_dropped(self):
        # known 1:1 mapping with one extra source sentence; the oracle is
        # the generator's ground-truth bead list
        rng = random.Random(23)
        src_sents, tgt_sents, truth = make_synthetic_article(rng, 8)
        pos = 4
        src_sents.insert(pos, "Editorial note here.")
        truth = {(i + 1 if i >= pos else i): t for i, t in truth.items()}
        article = ArticlePair("a1", " ".join(src_sents), " ".join(tgt_sents))
        pairs = align_sentences(article)
        kept_indices = {int(p.pair_id.split(":")[1]) for p in pairs}
        assert pos not in kept_indices
        for pair in pairs:
            index = int(pair.pair_id.split(":")[1])
            assert pair.reference == tgt_sents[truth[index]]

    def test_empty_target_errors(self):
        article = ArticlePair("a1", "Some text here.", "   ")
        with pytest.raises(AlignmentError, match="target"):
            align_sentences(article)

    def test_conservation(self):
        rng = random.Random(5)
        for _ in range(20):
            src_sents, tgt_sents, _ = make_synthetic_article(rng, rng.randint(2, 9), 0.2)
            article = ArticlePair("a1", " ".join(src_sents), " ".join(tgt_sents))
            pairs = align_sentences(article)
            assert len(pairs) <= min(len(src_sents), len(tgt_sents))

    def test_beads_cover_both_sides(self):
        beads = align_beads([30, 40, 50], [33, 42, 55, 20])
        src_covered = [i for (a0, a1), _ in beads for i in range(a0, a1)]
        tgt_covered = [j for _, (b0, b1) in beads for j in range(b0, b1)]
        assert src_covered == [0, 1, 2]
        assert tgt_covered == [0, 1, 2, 3]


def _corpus_of(n: int) -> AlignedCorpus:
    rng = random.Random(99)
    pairs = [
        SentencePair(
            pair_id=f"a{i:03d}:0000",
            article_id=f"a{i:03d}",
            source=f"Sentence number {i}.",
            reference=f"Oración número {i}.",
            source_token_count=rng.randint(3, 30),
        )
        for i in range(n)
    ]
    return AlignedCorpus(pairs=pairs, provenance="test")


class TestSplit:
    def test_stratified_terciles(self):
        corpus = _corpus_of(300)
        tagged = split_corpus(corpus, test_size=100, seed=7)
        test_pairs = [p for p in tagged.pairs if p.split == "test"]
        assert len(test_pairs) == 100
        # independently recompute terciles with a plain sort
        ordered = sorted(corpus.pairs, key=lambda p: (p.source_token_count, p.pair_id))
        tercile_ids = [
            {p.pair_id for p in ordered[:100]},
            {p.pair_id for p in ordered[100:200]},
            {p.pair_id for p in ordered[200:]},
        ]
        counts = [
            sum(1 for p in test_pairs if p.pair_id in ids) for ids in tercile_ids
        ]
        assert sorted(counts) == [33, 33, 34]

    def test_zero_test_size(self):
        tagged = split_corpus(_corpus_of(10), test_size=0, seed=1)
        assert all(p.split == "train" for p in tagged.pairs)

    def test_oversized_test_errors(self):
        with pytest.raises(ValueError, match="exceeds"):
            split_corpus(_corpus_of(300), test_size=301, seed=1)

    def test_partition(self):
        corpus = _corpus_of(50)
        tagged = split_corpus(corpus, test_size=20, seed=3)
        test_ids = {p.pair_id for p in tagged.pairs if p.split == "test"}
        train_ids = {p.pair_id for p in tagged.pairs if p.split == "train"}
        assert len(test_ids) == 20
        assert test_ids | train_ids == {p.pair_id for p in corpus.pairs}
        assert not (test_ids & train_ids)

    def test_deterministic(self):
        corpus = _corpus_of(60)
        first = split_corpus(corpus, test_size=15, seed=42)
        second = split_corpus(corpus, test_size=15, seed=42)
        assert first == second
        different = split_corpus(corpus, test_size=15, seed=43)
        assert different != first


class TestSerialization:
    def test_round_trip(self, tmp_path):
        corpus = split_corpus(_corpus_of(10), test_size=3, seed=1)
        path = tmp_path / "corpus.jsonl"
        export_corpus(corpus, path)
        assert load_corpus(path) == corpus

    def test_byte_identical_exports(self, tmp_path):
        corpus = split_corpus(_corpus_of(25), test_size=5, seed=9)
        path_a = tmp_path / "a.jsonl"
        path_b = tmp_path / "b.jsonl"
        export_corpus(corpus, path_a)
        export_corpus(split_corpus(_corpus_of(25), test_size=5, seed=9), path_b)
        assert path_a.read_bytes() == path_b.read_bytes()

    def test_missing_reference_field(self, tmp_path):
        path = tmp_path / "broken.jsonl"
        row = {
            "v": 1,
            "pair_id": "x:0000",
            "article_id": "x",
            "source": "Hello.",
            "source_token_count": 1,
            "split": "train",
        }
        path.write_text(json.dumps(row) + "\n", encoding="utf-8")
        with pytest.raises(SchemaError, match="reference"):
            load_corpus(path)

    def test_empty_file_warns(self, tmp_path, caplog):
        path = tmp_path / "empty.jsonl"
        path.write_text("", encoding="utf-8")
        with caplog.at_level("WARNING"):
            corpus = load_corpus(path)
        assert corpus.pairs == []
        assert any("empty" in record.message for record in caplog.records)

    def test_duplicate_pair_id(self, tmp_path):
        corpus = _corpus_of(1)
        path = tmp_path / "dup.jsonl"
        export_corpus(corpus, path)
        line = path.read_text().splitlines()[1]
        path.write_text(line + "\n" + line + "\n", encoding="utf-8")
        with pytest.raises(SchemaError, match="duplicate"):
            load_corpus(path)


def test_build_corpus_orders_by_article_and_position():
    rng = random.Random(8)
    articles = []
    for name in ("b", "a"):
        src_sents, tgt_sents, _ = make_synthetic_article(rng, 3)
        articles.append(ArticlePair(name, " ".join(src_sents), " ".join(tgt_sents)))
    corpus = build_corpus(articles, provenance="p")
    ids = [p.pair_id for p in corpus.pairs]
    assert ids == sorted(ids)
    assert corpus.provenance == "p"
