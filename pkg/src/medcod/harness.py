"""Four-block ablation orchestration and report emission.

A block grid row pairs one model label with a base endpoint and (optionally)
a fine-tuned endpoint; "fine-tuned" is nothing more than a different
endpoint name attached to blocks 3 and 4. Sweep cells are keyed by digest,
so reruns resume and blocks that share an endpoint share results.
"""

from __future__ import annotations

import csv
import io
import json
import logging
from dataclasses import dataclass, field
from pathlib import Path

from . import knowledge, stats, translate
from .corpus import AlignedCorpus, load_corpus
from .errors import SpecError
from .knowledge import EnrichmentConfig, KbCache, UmlsSnapshot
from .metrics import MetricReport, ScorerHandle, score_run
from .prompts import STRUCTURED_STRATEGIES, PromptStrategy
from .translate import ModelEndpoint, RunConfig, TranslationResult

logger = logging.getLogger(__name__)

FORMAT_VERSION = "1"
SUMMARY_HEADER = ["model", "block", "strategy", "metric", "mean", "ci_lo", "ci_hi", "starred"]


@dataclass(frozen=True)
class AblationBlock:
    id: str
    medcod: bool
    finetuned_model: bool


BLOCKS = {
    "B1": AblationBlock("B1", medcod=False, finetuned_model=False),
    "B2": AblationBlock("B2", medcod=True, finetuned_model=False),
    "B3": AblationBlock("B3", medcod=False, finetuned_model=True),
    "B4": AblationBlock("B4", medcod=True, finetuned_model=True),
}


@dataclass
class ModelRow:
    """One grid row: a label plus the endpoints playing base and FT."""

    label: str
    base_endpoint: str | None = None
    ft_endpoint: str | None = None


@dataclass
class ExperimentSpec:
    corpus_path: str
    out_dir: str
    endpoints: dict[str, ModelEndpoint]
    models: list[ModelRow]
    blocks: list[str] = field(default_factory=lambda: ["B1", "B2", "B3", "B4"])
    structured_strategies: list[PromptStrategy] = field(
        default_factory=lambda: list(STRUCTURED_STRATEGIES)
    )
    temperatures: list[float] = field(
        default_factory=lambda: list(translate.DEFAULT_TEMPERATURES)
    )
    metrics: list[str] = field(default_factory=lambda: ["bleu", "chrfpp"])
    split: str = "test"  # "test" | "train" | "all"
    kb_model: str = "stub"
    kb_base_url: str | None = None
    kb_api_key_env: str = "MEDCOD_KB_API_KEY"
    umls_path: str | None = None  # None selects the bundled sample snapshot
    aux_langs: list[str] = field(default_factory=lambda: ["fr", "pt"])
    source_lang: str = "en"
    target_lang: str = "es"
    template_version: str = "v1"
    scorer_command: list[str] | None = None
    seed_note: str = ""

    @classmethod
    def from_json(cls, path: str | Path) -> "ExperimentSpec":
        with open(path, encoding="utf-8") as fh:
            raw = json.load(fh)
        endpoints = {
            row["name"]: ModelEndpoint.from_dict(row) for row in raw.get("endpoints", [])
        }
        models = [
            ModelRow(
                label=row["label"],
                base_endpoint=row.get("base_endpoint"),
                ft_endpoint=row.get("ft_endpoint"),
            )
            for row in raw.get("models", [])
        ]
        kb = raw.get("kb", {})
        spec = cls(
            corpus_path=raw["corpus"],
            out_dir=raw["out_dir"],
            endpoints=endpoints,
            models=models,
            blocks=raw.get("blocks", ["B1", "B2", "B3", "B4"]),
            structured_strategies=[
                PromptStrategy.from_id(s)
                for s in raw.get(
                    "structured_strategies", [s.value for s in STRUCTURED_STRATEGIES]
                )
            ],
            temperatures=raw.get("temperatures", list(translate.DEFAULT_TEMPERATURES)),
            metrics=raw.get("metrics", ["bleu", "chrfpp"]),
            split=raw.get("split", "test"),
            kb_model=kb.get("model", "stub"),
            kb_base_url=kb.get("base_url"),
            kb_api_key_env=kb.get("api_key_env", "MEDCOD_KB_API_KEY"),
            umls_path=raw.get("umls"),
            aux_langs=raw.get("aux_langs", ["fr", "pt"]),
            source_lang=raw.get("source_lang", "en"),
            target_lang=raw.get("target_lang", "es"),
            template_version=raw.get("template_version", "v1"),
            scorer_command=raw.get("scorer"),
            seed_note=raw.get("seed_note", ""),
        )
        spec.validate()
        return spec

    def validate(self) -> None:
        if not self.models:
            raise SpecError("no model rows configured")
        for block_id in self.blocks:
            if block_id not in BLOCKS:
                raise SpecError(f"unknown block {block_id!r}")
        if not self.temperatures:
            raise SpecError("temperatures must be non-empty")
        needs_structured = any(BLOCKS[b].medcod for b in self.blocks)
        if needs_structured and not self.structured_strategies:
            raise SpecError("blocks with structured prompting need structured_strategies")
        if needs_structured and not self.kb_model:
            raise SpecError("blocks with structured prompting need an enrichment source (kb)")
        for row in self.models:
            for block_id in self.blocks:
                endpoint = self.block_endpoint(row, block_id)
                if endpoint is None:
                    raise SpecError(
                        f"model row {row.label!r} has no endpoint for block {block_id}"
                    )
                if endpoint not in self.endpoints:
                    raise SpecError(
                        f"model row {row.label!r} references unknown endpoint {endpoint!r}"
                    )

    def block_endpoint(self, row: ModelRow, block_id: str) -> str | None:
        return row.ft_endpoint if BLOCKS[block_id].finetuned_model else row.base_endpoint

    def block_strategies(self, block_id: str) -> list[PromptStrategy]:
        if BLOCKS[block_id].medcod:
            return list(self.structured_strategies)
        return [PromptStrategy.DirectTranslation]


@dataclass
class TableRow:
    model: str
    block: str
    strategy: str
    metric: str
    mean: float
    ci_lo: float
    ci_hi: float
    starred: bool


@dataclass
class ResultTable:
    rows: list[TableRow]
    format_version: str = FORMAT_VERSION


@dataclass
class BestMark:
    model: str
    metric: str
    strategy: str
    block: str
    mean: float
    tie: bool


# ---------------------------------------------------------------------------
# experiment driver


def _select_pairs(corpus: AlignedCorpus, split: str):
    if split == "all":
        return list(corpus.pairs)
    return [p for p in corpus.pairs if p.split == split]


def _make_kb(spec: ExperimentSpec):
    if spec.kb_model == "stub" and not spec.kb_base_url:
        return knowledge.DeterministicStubKb()
    if not spec.kb_base_url:
        raise SpecError(f"kb model {spec.kb_model!r} needs a base_url")
    return knowledge.ChatKb(spec.kb_model, spec.kb_base_url, spec.kb_api_key_env)


def _ensure_enrichments(spec: ExperimentSpec, pairs, out_dir: Path):
    """Enrich once; later runs load the persisted file."""
    enriched_path = out_dir / "enriched.jsonl"
    if enriched_path.exists():
        return knowledge.load_enrichments(enriched_path)
    kb = _make_kb(spec)
    snapshot = (
        UmlsSnapshot.load(spec.umls_path) if spec.umls_path else UmlsSnapshot.bundled_sample()
    )
    cache = KbCache(out_dir / "cache.jsonl")
    config = EnrichmentConfig(
        kb_model=spec.kb_model,
        source_lang=spec.source_lang,
        target_lang=spec.target_lang,
        aux_langs=list(spec.aux_langs),
    )
    enrichments = [
        knowledge.enrich_sentence(pair, config, kb, snapshot, cache) for pair in pairs
    ]
    knowledge.write_enrichments(enrichments, enriched_path)
    return {enr.pair_id: enr for enr in enrichments}


def _load_existing_results(path: Path) -> dict[str, TranslationResult]:
    if not path.exists():
        return {}
    timing_path = path.with_name(path.name + ".timing.jsonl")
    timings: dict[str, dict] = {}
    if timing_path.exists():
        with open(timing_path, encoding="utf-8") as fh:
            for line in fh:
                if line.strip():
                    row = json.loads(line)
                    timings[row["digest"]] = row
    by_digest: dict[str, TranslationResult] = {}
    with open(path, encoding="utf-8") as fh:
        for line in fh:
            if not line.strip():
                continue
            row = json.loads(line)
            by_digest[row["digest"]] = translate.result_from_dict(
                row, timings.get(row["digest"])
            )
    return by_digest


def run_experiment(spec: ExperimentSpec) -> ResultTable:
    """Enrich (cached) -> render -> sweep -> score -> stats for every block."""
    spec.validate()
    out_dir = Path(spec.out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)

    corpus = load_corpus(spec.corpus_path)
    pairs = _select_pairs(corpus, spec.split)
    if not pairs:
        raise SpecError(f"split {spec.split!r} selects no pairs")

    needs_enrichment = any(BLOCKS[b].medcod for b in spec.blocks)
    enrichments = _ensure_enrichments(spec, pairs, out_dir) if needs_enrichment else {}

    results_path = out_dir / "results.jsonl"
    existing = _load_existing_results(results_path)
    appended: dict[str, TranslationResult] = {}

    with open(results_path, "a", encoding="utf-8") as sink:

        def persist(result: TranslationResult, digest: str) -> None:
            appended[digest] = result
            sink.write(
                json.dumps(
                    translate.result_to_dict(result, digest), ensure_ascii=False, sort_keys=True
                )
                + "\n"
            )
            sink.flush()

        for row in spec.models:
            for block_id in spec.blocks:
                endpoint_name = spec.block_endpoint(row, block_id)
                endpoint = spec.endpoints[endpoint_name]
                config = RunConfig(
                    temperatures=list(spec.temperatures),
                    strategies=spec.block_strategies(block_id),
                    model=endpoint,
                    seed_note=spec.seed_note,
                )
                skip = set(existing) | set(appended)
                translate.sweep(
                    pairs,
                    enrichments,
                    config,
                    source_lang=spec.source_lang,
                    target_lang=spec.target_lang,
                    aux_langs=tuple(spec.aux_langs),
                    template_version=spec.template_version,
                    skip_digests=skip,
                    on_result=persist,
                )

    all_results = existing | appended
    # Compact: rewrite sorted and deduplicated so repeated runs emit
    # byte-identical files.
    translate.write_results(
        list(all_results.values()), results_path, template_version=spec.template_version
    )

    handle = None
    if spec.scorer_command:
        handle = ScorerHandle(spec.scorer_command)
        handle.start()
    try:
        report = score_run(
            list(all_results.values()),
            corpus,
            native_metrics=[m for m in spec.metrics if m != "external"],
            handle=handle,
        )
    finally:
        if handle is not None:
            handle.close()

    table = build_table(spec, report)
    write_report_rows(report, out_dir)
    return table


def build_table(spec: ExperimentSpec, report: MetricReport) -> ResultTable:
    """Assemble per-block sample sets from cell scores and mark significance."""
    by_cell: dict[tuple[str, str, str], dict[float, float]] = {}
    for row in report.corpus_rows:
        by_cell.setdefault((row.model, row.strategy, row.metric), {})[row.temperature] = row.value

    samples: list[stats.SampleSet] = []
    for model_row in spec.models:
        for block_id in spec.blocks:
            endpoint_name = spec.block_endpoint(model_row, block_id)
            for strategy in spec.block_strategies(block_id):
                for metric in [m for m in spec.metrics if m != "external"]:
                    cell = by_cell.get((endpoint_name, strategy.value, metric))
                    if not cell:
                        continue
                    values = [cell[t] for t in sorted(cell)]
                    if len(values) < 2:
                        logger.warning(
                            "cell (%s, %s, %s, %s) has %d run(s); skipping stats",
                            model_row.label, block_id, strategy.value, metric, len(values),
                        )
                        continue
                    samples.append(
                        stats.SampleSet(
                            metric=metric,
                            condition=(model_row.label, strategy.value, block_id),
                            values=values,
                        )
                    )

    summary = stats.summarize(samples)
    rows = [
        TableRow(
            model=s.model,
            block=s.block,
            strategy=s.strategy,
            metric=s.metric,
            mean=s.mean,
            ci_lo=s.ci_lo,
            ci_hi=s.ci_hi,
            starred=s.starred,
        )
        for s in summary
    ]
    rows.sort(key=_row_key)
    return ResultTable(rows=rows)


_STRATEGY_ORDER = {s.value: i for i, s in enumerate(PromptStrategy)}


def _row_key(row: TableRow):
    return (row.model, row.block, _STRATEGY_ORDER.get(row.strategy, 99), row.metric)


def best_per_model(table: ResultTable) -> list[BestMark]:
    """Best strategy per (model, metric); ties go to strategy enum order."""
    if not table.rows:
        raise ValueError("table is empty")
    groups: dict[tuple[str, str], list[TableRow]] = {}
    for row in table.rows:
        groups.setdefault((row.model, row.metric), []).append(row)
    marks: list[BestMark] = []
    for (model, metric), rows in sorted(groups.items()):
        best = max(
            rows, key=lambda r: (r.mean, -_STRATEGY_ORDER.get(r.strategy, 99))
        )
        tie = sum(1 for r in rows if r.mean == best.mean) > 1
        marks.append(
            BestMark(
                model=model, metric=metric, strategy=best.strategy,
                block=best.block, mean=best.mean, tie=tie,
            )
        )
    return marks


# ---------------------------------------------------------------------------
# report emission


def _fmt(value: float) -> str:
    return f"{value:.4f}"


def emit_report(table: ResultTable, out_dir: str | Path) -> list[Path]:
    """Write summary.csv, summary.md, and plotdata.json; deterministic bytes."""
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    rows = sorted(table.rows, key=_row_key)
    marks = {(m.model, m.metric): m for m in best_per_model(table)} if rows else {}

    csv_path = out_dir / "summary.csv"
    buffer = io.StringIO()
    writer = csv.writer(buffer, lineterminator="\n")
    writer.writerow(SUMMARY_HEADER)
    for row in rows:
        writer.writerow(
            [
                row.model, row.block, row.strategy, row.metric,
                _fmt(row.mean), _fmt(row.ci_lo), _fmt(row.ci_hi),
                "true" if row.starred else "false",
            ]
        )
    csv_path.write_text(buffer.getvalue(), encoding="utf-8")

    md_path = out_dir / "summary.md"
    lines = ["| model | block | strategy | metric | mean (95% CI) |", "|---|---|---|---|---|"]
    for row in rows:
        mark = marks.get((row.model, row.metric))
        is_best = mark is not None and mark.strategy == row.strategy and mark.block == row.block
        mean_text = f"{_fmt(row.mean)} ({_fmt(row.ci_lo)}, {_fmt(row.ci_hi)})"
        if row.starred:
            mean_text += "*"
        if is_best:
            mean_text = f"**{mean_text}**"
        lines.append(
            f"| {row.model} | {row.block} | {row.strategy} | {row.metric} | {mean_text} |"
        )
    lines.append("")
    lines.append("`*` marks p < 0.05 against the block's declared baseline "
                 "(B2 and B3 vs B1, B4 vs B3); bold marks the best strategy per model and metric.")
    md_path.write_text("\n".join(lines) + "\n", encoding="utf-8")

    plot_path = out_dir / "plotdata.json"
    models: dict[str, list[dict]] = {}
    for row in rows:
        models.setdefault(row.model, []).append(
            {
                "block": row.block,
                "strategy": row.strategy,
                "metric": row.metric,
                "mean": row.mean,
                "ci_lo": row.ci_lo,
                "ci_hi": row.ci_hi,
                "starred": row.starred,
            }
        )
    payload = {
        "format_version": table.format_version,
        "models": [{"model": name, "bars": bars} for name, bars in sorted(models.items())],
    }
    plot_path.write_text(
        json.dumps(payload, indent=2, sort_keys=True, ensure_ascii=False) + "\n",
        encoding="utf-8",
    )
    return [csv_path, md_path, plot_path]


def write_report_rows(report: MetricReport, out_dir: str | Path) -> Path:
    out_dir = Path(out_dir)
    path = out_dir / "report.jsonl"
    with open(path, "w", encoding="utf-8") as fh:
        for row in report.corpus_rows + report.segment_rows:
            record = {
                "kind": row.kind,
                "model": row.model,
                "strategy": row.strategy,
                "temperature": row.temperature,
                "metric": row.metric,
                "value": row.value,
            }
            if row.pair_id is not None:
                record["pair_id"] = row.pair_id
            fh.write(json.dumps(record, ensure_ascii=False, sort_keys=True) + "\n")
    return path


STAGE_LABELS = [
    ("keyword_extraction_s", "Keyword extraction"),
    ("keyword_translation_s", "Keyword translation"),
    ("quality_check_s", "Quality check for translated terms"),
    ("final_translation_s", "Final sentence translation"),
]


def timing_report(results: list[TranslationResult]) -> list[tuple[str, float]]:
    """Per-stage mean rows plus the total, ready for rendering."""
    summary = translate.timing_summary(results)
    rows = [(label, summary[key]) for key, label in STAGE_LABELS]
    rows.append(("Total average time per sentence", summary["total_s"]))
    return rows
