"""Command-line entry points for the workbench."""

from __future__ import annotations

import argparse
import csv
import json
import logging
import sys
from pathlib import Path

from . import corpus as corpus_mod
from . import harness, knowledge, stats, translate
from .metrics import ScorerHandle, score_run
from .prompts import PromptStrategy, STRUCTURED_STRATEGIES, render_prompt


def _parse_strategies(raw: str) -> list[PromptStrategy]:
    if raw == "all":
        return list(PromptStrategy)
    if raw == "structured":
        return list(STRUCTURED_STRATEGIES)
    return [PromptStrategy.from_id(item.strip()) for item in raw.split(",") if item.strip()]


def _cmd_corpus_ingest(args) -> int:
    config = corpus_mod.IngestionConfig(format=args.format)
    ingest = corpus_mod.ingest_articles(args.in_path, config)
    built = corpus_mod.build_corpus(ingest.articles, provenance=config.digest())
    corpus_mod.export_corpus(built, args.out)
    print(
        f"ingested {len(ingest.articles)} articles ({ingest.skipped} skipped), "
        f"{len(built.pairs)} sentence pairs -> {args.out}"
    )
    return 0


def _cmd_corpus_split(args) -> int:
    built = corpus_mod.load_corpus(args.in_path)
    tagged = corpus_mod.split_corpus(built, args.test_size, args.seed)
    corpus_mod.export_corpus(tagged, args.out)
    test_count = sum(1 for p in tagged.pairs if p.split == "test")
    print(f"tagged {test_count} test pairs of {len(tagged.pairs)} -> {args.out}")
    return 0


def _cmd_enrich(args) -> int:
    built = corpus_mod.load_corpus(args.corpus)
    pairs = [p for p in built.pairs if args.split == "all" or p.split == args.split]
    if args.kb_model == "stub" and not args.kb_url:
        kb = knowledge.DeterministicStubKb()
    else:
        if not args.kb_url:
            print("error: --kb-url required for a non-stub KB model", file=sys.stderr)
            return 2
        kb = knowledge.ChatKb(args.kb_model, args.kb_url, args.api_key_env)
    snapshot = (
        knowledge.UmlsSnapshot.load(args.umls)
        if args.umls
        else knowledge.UmlsSnapshot.bundled_sample()
    )
    cache = knowledge.KbCache(args.cache) if args.cache else None
    config = knowledge.EnrichmentConfig(
        kb_model=args.kb_model,
        aux_langs=[l for l in args.aux_langs.split(",") if l],
        source_lang=args.source_lang,
        target_lang=args.target_lang,
    )
    enrichments = [
        knowledge.enrich_sentence(pair, config, kb, snapshot, cache) for pair in pairs
    ]
    knowledge.write_enrichments(enrichments, args.out)
    print(f"enriched {len(enrichments)} sentences -> {args.out}")
    return 0


def _cmd_prompts_render(args) -> int:
    built = corpus_mod.load_corpus(args.corpus)
    pair = next((p for p in built.pairs if p.pair_id == args.pair), None)
    if pair is None:
        print(f"error: pair {args.pair!r} not found", file=sys.stderr)
        return 2
    strategy = PromptStrategy.from_id(args.strategy)
    enrichment = None
    if strategy is not PromptStrategy.DirectTranslation:
        enrichment = knowledge.load_enrichments(args.enriched).get(args.pair)
        if enrichment is None:
            print(f"error: no enrichment for pair {args.pair!r}", file=sys.stderr)
            return 2
    rendered = render_prompt(
        strategy,
        pair,
        enrichment,
        source_lang=args.source_lang,
        target_lang=args.target_lang,
        aux_langs=tuple(args.aux_langs.split(",")),
        template_version=args.template_version,
    )
    sys.stdout.write(rendered.text + "\n")
    return 0


def _cmd_translate_sweep(args) -> int:
    built = corpus_mod.load_corpus(args.corpus)
    pairs = [p for p in built.pairs if args.split == "all" or p.split == args.split]
    with open(args.model_config, encoding="utf-8") as fh:
        endpoint = translate.ModelEndpoint.from_dict(json.load(fh))
    strategies = _parse_strategies(args.strategies)
    temperatures = [float(t) for t in args.temps.split(",") if t]
    enrichments = knowledge.load_enrichments(args.enriched) if args.enriched else {}
    config = translate.RunConfig(
        temperatures=temperatures, strategies=strategies, model=endpoint
    )
    results = translate.sweep(
        pairs,
        enrichments,
        config,
        source_lang=args.source_lang,
        target_lang=args.target_lang,
        template_version=args.template_version,
    )
    translate.write_results(results, args.out, template_version=args.template_version)
    failures = sum(1 for r in results if r.error is not None)
    print(f"{len(results)} results ({failures} errors) -> {args.out}")
    return 0


def _cmd_evaluate(args) -> int:
    built = corpus_mod.load_corpus(args.corpus)
    results = translate.load_results(args.results)
    handle = None
    if args.scorer:
        handle = ScorerHandle(args.scorer.split())
        handle.start()
    try:
        report = score_run(
            results,
            built,
            native_metrics=[m for m in args.metrics.split(",") if m != "external"],
            handle=handle,
        )
    finally:
        if handle is not None:
            handle.close()
    out_prefix = Path(args.out_prefix)
    jsonl_path = out_prefix.with_suffix(".jsonl")
    with open(jsonl_path, "w", encoding="utf-8") as fh:
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
    csv_path = out_prefix.with_suffix(".csv")
    with open(csv_path, "w", encoding="utf-8", newline="") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(["model", "strategy", "temperature", "metric", "value"])
        for row in report.corpus_rows:
            writer.writerow(
                [row.model, row.strategy, row.temperature, row.metric, f"{row.value:.4f}"]
            )
    print(f"wrote {jsonl_path} and {csv_path}")
    return 0


def _cmd_stats_summarize(args) -> int:
    with open(args.baseline_map, encoding="utf-8") as fh:
        blocks_config = json.load(fh)
    assignments = blocks_config["blocks"]  # block id -> {model, strategies}
    baselines = blocks_config.get("baselines", stats.DEFAULT_BASELINE_MAP)

    cells: dict[tuple[str, str, str], dict[float, float]] = {}
    with open(args.report, encoding="utf-8") as fh:
        for line in fh:
            if not line.strip():
                continue
            row = json.loads(line)
            if row.get("kind") != "corpus":
                continue
            key = (row["model"], row["strategy"], row["metric"])
            cells.setdefault(key, {})[float(row["temperature"])] = float(row["value"])

    samples = []
    for block_id, assignment in assignments.items():
        model = assignment["model"]
        label = assignment.get("label", model)
        for strategy in assignment["strategies"]:
            for (cell_model, cell_strategy, metric), runs in cells.items():
                if cell_model != model or cell_strategy != strategy or len(runs) < 2:
                    continue
                samples.append(
                    stats.SampleSet(
                        metric=metric,
                        condition=(label, strategy, block_id),
                        values=[runs[t] for t in sorted(runs)],
                    )
                )
    rows = stats.summarize(samples, baseline_map=baselines)
    with open(args.out, "w", encoding="utf-8", newline="") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(harness.SUMMARY_HEADER)
        for row in sorted(rows, key=lambda r: (r.model, r.block, r.strategy, r.metric)):
            writer.writerow(
                [
                    row.model, row.block, row.strategy, row.metric,
                    f"{row.mean:.4f}", f"{row.ci_lo:.4f}", f"{row.ci_hi:.4f}",
                    "true" if row.starred else "false",
                ]
            )
    print(f"wrote {args.out}")
    return 0


def _cmd_ablate(args) -> int:
    spec = harness.ExperimentSpec.from_json(args.spec)
    if args.out:
        spec.out_dir = args.out
    table = harness.run_experiment(spec)
    paths = harness.emit_report(table, spec.out_dir)
    results = translate.load_results(Path(spec.out_dir) / "results.jsonl")
    timing_rows = harness.timing_report(results)
    timing_path = Path(spec.out_dir) / "timing.md"
    with open(timing_path, "w", encoding="utf-8") as fh:
        fh.write("| stage | mean seconds |\n|---|---|\n")
        for label, value in timing_rows:
            fh.write(f"| {label} | {value:.4f} |\n")
    for path in paths + [timing_path]:
        print(f"wrote {path}")
    return 0


def _cmd_report(args) -> int:
    run_dir = Path(args.in_dir)
    report_path = run_dir / "report.jsonl"
    if not report_path.exists():
        print(f"error: {report_path} not found; run `medcod ablate` first", file=sys.stderr)
        return 2
    spec_path = run_dir / "experiment.json"
    if not spec_path.exists():
        print(f"error: {spec_path} not found", file=sys.stderr)
        return 2
    spec = harness.ExperimentSpec.from_json(spec_path)
    corpus_rows = []
    from .metrics import MetricReport, ReportRow

    with open(report_path, encoding="utf-8") as fh:
        for line in fh:
            if not line.strip():
                continue
            row = json.loads(line)
            if row["kind"] != "corpus":
                continue
            corpus_rows.append(
                ReportRow(
                    kind="corpus",
                    model=row["model"],
                    strategy=row["strategy"],
                    temperature=row["temperature"],
                    metric=row["metric"],
                    value=row["value"],
                )
            )
    table = harness.build_table(spec, MetricReport(corpus_rows, []))
    for path in harness.emit_report(table, run_dir):
        print(f"wrote {path}")
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="medcod", description=__doc__)
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    corpus_cmd = sub.add_parser("corpus", help="ingest and split parallel corpora")
    corpus_sub = corpus_cmd.add_subparsers(dest="subcommand", required=True)
    ingest = corpus_sub.add_parser("ingest")
    ingest.add_argument("--in", dest="in_path", required=True)
    ingest.add_argument("--out", required=True)
    ingest.add_argument("--format", default="json", choices=["json", "paired"])
    ingest.set_defaults(func=_cmd_corpus_ingest)
    split = corpus_sub.add_parser("split")
    split.add_argument("--in", dest="in_path", required=True)
    split.add_argument("--out", required=True)
    split.add_argument("--test-size", dest="test_size", type=int, required=True)
    split.add_argument("--seed", type=int, default=13)
    split.set_defaults(func=_cmd_corpus_split)

    enrich = sub.add_parser("enrich", help="attach KB/UMLS context to sentences")
    enrich.add_argument("--corpus", required=True)
    enrich.add_argument("--split", default="test", choices=["train", "test", "all"])
    enrich.add_argument("--kb-model", dest="kb_model", default="stub")
    enrich.add_argument("--kb-url", dest="kb_url", default=None)
    enrich.add_argument("--api-key-env", dest="api_key_env", default="MEDCOD_KB_API_KEY")
    enrich.add_argument("--aux-langs", dest="aux_langs", default="fr,pt")
    enrich.add_argument("--source-lang", dest="source_lang", default="en")
    enrich.add_argument("--target-lang", dest="target_lang", default="es")
    enrich.add_argument("--umls", default=None)
    enrich.add_argument("--cache", default=None)
    enrich.add_argument("--out", required=True)
    enrich.set_defaults(func=_cmd_enrich)

    prompts_cmd = sub.add_parser("prompts", help="inspect rendered prompts")
    prompts_sub = prompts_cmd.add_subparsers(dest="subcommand", required=True)
    render = prompts_sub.add_parser("render")
    render.add_argument("--strategy", required=True)
    render.add_argument("--pair", required=True)
    render.add_argument("--corpus", required=True)
    render.add_argument("--enriched", default=None)
    render.add_argument("--source-lang", dest="source_lang", default="en")
    render.add_argument("--target-lang", dest="target_lang", default="es")
    render.add_argument("--aux-langs", dest="aux_langs", default="fr,pt")
    render.add_argument("--template-version", dest="template_version", default="v1")
    render.set_defaults(func=_cmd_prompts_render)

    translate_cmd = sub.add_parser("translate", help="run sweep cells against an endpoint")
    translate_sub = translate_cmd.add_subparsers(dest="subcommand", required=True)
    sweep_cmd = translate_sub.add_parser("sweep")
    sweep_cmd.add_argument("--corpus", required=True)
    sweep_cmd.add_argument("--enriched", default=None)
    sweep_cmd.add_argument("--model-config", dest="model_config", required=True)
    sweep_cmd.add_argument("--strategies", default="all")
    sweep_cmd.add_argument("--temps", default="0.2,0.3,0.4,0.5,0.6")
    sweep_cmd.add_argument("--split", default="test", choices=["train", "test", "all"])
    sweep_cmd.add_argument("--source-lang", dest="source_lang", default="en")
    sweep_cmd.add_argument("--target-lang", dest="target_lang", default="es")
    sweep_cmd.add_argument("--template-version", dest="template_version", default="v1")
    sweep_cmd.add_argument("--out", required=True)
    sweep_cmd.set_defaults(func=_cmd_translate_sweep)

    evaluate = sub.add_parser("evaluate", help="score results against references")
    evaluate.add_argument("--results", required=True)
    evaluate.add_argument("--corpus", required=True)
    evaluate.add_argument("--metrics", default="bleu,chrfpp")
    evaluate.add_argument("--scorer", default=None, help="scorer sidecar command line")
    evaluate.add_argument("--out-prefix", dest="out_prefix", default="report")
    evaluate.set_defaults(func=_cmd_evaluate)

    stats_cmd = sub.add_parser("stats", help="confidence intervals and significance")
    stats_sub = stats_cmd.add_subparsers(dest="subcommand", required=True)
    summarize = stats_sub.add_parser("summarize")
    summarize.add_argument("--report", required=True)
    summarize.add_argument("--baseline-map", dest="baseline_map", required=True)
    summarize.add_argument("--out", required=True)
    summarize.set_defaults(func=_cmd_stats_summarize)

    ablate = sub.add_parser("ablate", help="run the four-block ablation end to end")
    ablate.add_argument("--spec", required=True)
    ablate.add_argument("--out", default=None)
    ablate.set_defaults(func=_cmd_ablate)

    report = sub.add_parser("report", help="regenerate reports from a run directory")
    report.add_argument("--in", dest="in_dir", required=True)
    report.add_argument("--format", default="csv,md,plotdata")
    report.set_defaults(func=_cmd_report)

    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.DEBUG if args.verbose else logging.WARNING)
    return args.func(args)


if __name__ == "__main__":
    raise SystemExit(main())
