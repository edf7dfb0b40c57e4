from __future__ import annotations

import csv
import json
from pathlib import Path

from medcod.cli import main


def write_articles(directory: Path, n: int = 3) -> None:
    directory.mkdir(parents=True, exist_ok=True)
    for i in range(n):
        record = {
            "article_id": f"art{i:02d}",
            "source_text": (
                f"Fever is a common symptom {i}. Drink water and rest well. "
                "Call your doctor if the cough persists."
            ),
            "target_text": (
                f"La fiebre es un síntoma común {i}. Beba agua y descanse bien. "
                "Llame a su médico si la tos persiste."
            ),
        }
        (directory / f"art{i:02d}.json").write_text(json.dumps(record), encoding="utf-8")


def test_full_cli_pipeline(tmp_path, capsys):
    articles = tmp_path / "articles"
    write_articles(articles)
    corpus = tmp_path / "corpus.jsonl"
    assert main(["corpus", "ingest", "--in", str(articles), "--out", str(corpus)]) == 0
    assert corpus.exists()

    tagged = tmp_path / "tagged.jsonl"
    assert main(
        ["corpus", "split", "--in", str(corpus), "--out", str(tagged),
         "--test-size", "3", "--seed", "7"]
    ) == 0

    enriched = tmp_path / "enriched.jsonl"
    assert main(
        ["enrich", "--corpus", str(tagged), "--split", "test", "--kb-model", "stub",
         "--cache", str(tmp_path / "cache.jsonl"), "--out", str(enriched)]
    ) == 0
    assert enriched.exists()

    pair_id = json.loads(enriched.read_text().splitlines()[0])["pair_id"]
    assert main(
        ["prompts", "render", "--strategy", "umls-dict", "--pair", pair_id,
         "--corpus", str(tagged), "--enriched", str(enriched)]
    ) == 0
    rendered = capsys.readouterr().out
    assert "Translate the following English medical sentence into Spanish." in rendered

    model_config = tmp_path / "model.json"
    model_config.write_text(
        json.dumps({"name": "stub-model", "base_url": "stub:digest"}), encoding="utf-8"
    )
    results = tmp_path / "results.jsonl"
    assert main(
        ["translate", "sweep", "--corpus", str(tagged), "--enriched", str(enriched),
         "--model-config", str(model_config), "--strategies", "all",
         "--temps", "0.2,0.3", "--split", "test", "--out", str(results)]
    ) == 0
    rows = [json.loads(l) for l in results.read_text().splitlines()]
    assert len(rows) == 3 * 4 * 2

    assert main(
        ["evaluate", "--results", str(results), "--corpus", str(tagged),
         "--metrics", "bleu,chrfpp", "--out-prefix", str(tmp_path / "report")]
    ) == 0
    assert (tmp_path / "report.jsonl").exists()
    assert (tmp_path / "report.csv").exists()

    blocks = tmp_path / "blocks.json"
    blocks.write_text(
        json.dumps(
            {
                "blocks": {
                    "B1": {"model": "stub-model", "strategies": ["direct-translation"]},
                    "B2": {
                        "model": "stub-model",
                        "strategies": [
                            "llm-kb-multilingual", "llm-kb-synonyms", "umls-dict",
                        ],
                    },
                },
                "baselines": {"B2": "B1"},
            }
        ),
        encoding="utf-8",
    )
    summary = tmp_path / "summary.csv"
    assert main(
        ["stats", "summarize", "--report", str(tmp_path / "report.jsonl"),
         "--baseline-map", str(blocks), "--out", str(summary)]
    ) == 0
    with open(summary, newline="", encoding="utf-8") as fh:
        reader = list(csv.reader(fh))
    assert reader[0] == ["model", "block", "strategy", "metric", "mean", "ci_lo", "ci_hi", "starred"]
    assert len(reader) > 1


def test_ablate_and_report_cli(tmp_path):
    articles = tmp_path / "articles"
    write_articles(articles, n=2)
    corpus = tmp_path / "corpus.jsonl"
    main(["corpus", "ingest", "--in", str(articles), "--out", str(corpus)])
    main(["corpus", "split", "--in", str(corpus), "--out", str(corpus), "--test-size", "2", "--seed", "1"])

    run_dir = tmp_path / "run"
    spec = {
        "corpus": str(corpus),
        "out_dir": str(run_dir),
        "endpoints": [{"name": "stub-a", "base_url": "stub:digest"}],
        "models": [{"label": "stub", "base_endpoint": "stub-a", "ft_endpoint": "stub-a"}],
        "blocks": ["B1", "B2"],
        "temperatures": [0.2, 0.3],
        "metrics": ["bleu"],
    }
    spec_path = tmp_path / "experiment.json"
    spec_path.write_text(json.dumps(spec), encoding="utf-8")
    assert main(["ablate", "--spec", str(spec_path)]) == 0
    for name in ("summary.csv", "summary.md", "plotdata.json", "timing.md", "report.jsonl"):
        assert (run_dir / name).exists(), name

    # regenerate reports from the persisted run directory
    (run_dir / "experiment.json").write_text(json.dumps(spec), encoding="utf-8")
    before = (run_dir / "summary.csv").read_bytes()
    assert main(["report", "--in", str(run_dir)]) == 0
    assert (run_dir / "summary.csv").read_bytes() == before
