"""Drive a chat endpoint over (pair x strategy x temperature) sweep cells.

Cells run on a bounded worker pool; per-cell failures become error records
instead of aborting the sweep, and every record carries a digest so an
interrupted run can resume without repeating completed cells.
"""

from __future__ import annotations

import hashlib
import json
import logging
import re
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable

from .chat import ChatReply, RetryPolicy, call_with_retries, make_backend
from .corpus import SentencePair
from .errors import EmptyCompletionError
from .knowledge import ConceptEnrichment
from .prompts import PromptStrategy, RenderedPrompt, render_prompt

logger = logging.getLogger(__name__)

_LABEL_RE = re.compile(r"^\s*translation\s*:\s*", re.IGNORECASE)
_FENCE_RE = re.compile(r"^```[a-zA-Z]*\n(.*?)\n?```$", re.DOTALL)

DEFAULT_TEMPERATURES = (0.2, 0.3, 0.4, 0.5, 0.6)


@dataclass
class ModelEndpoint:
    name: str
    base_url: str  # "stub:digest" / "stub:echo" select offline backends
    api_key_env: str = "MEDCOD_API_KEY"
    max_concurrent: int = 4
    timeout_s: float = 60.0
    retry: RetryPolicy = field(default_factory=RetryPolicy)

    def __post_init__(self):
        if self.max_concurrent < 1:
            raise ValueError("max_concurrent must be >= 1")
        if self.timeout_s <= 0:
            raise ValueError("timeout_s must be positive")

    @classmethod
    def from_dict(cls, row: dict) -> "ModelEndpoint":
        retry = row.get("retry", {})
        return cls(
            name=row["name"],
            base_url=row["base_url"],
            api_key_env=row.get("api_key_env", "MEDCOD_API_KEY"),
            max_concurrent=int(row.get("max_concurrent", 4)),
            timeout_s=float(row.get("timeout_s", 60.0)),
            retry=RetryPolicy(
                max_attempts=int(retry.get("max_attempts", 3)),
                backoff_base=float(retry.get("backoff_base", 1.0)),
            ),
        )


@dataclass
class RunConfig:
    temperatures: list[float]
    strategies: list[PromptStrategy]
    model: ModelEndpoint
    seed_note: str = ""

    def __post_init__(self):
        if not self.temperatures:
            raise ValueError("temperatures must be non-empty")
        if any(t < 0.0 or t > 2.0 for t in self.temperatures):
            raise ValueError("temperatures must lie in [0, 2]")
        self.temperatures = sorted(set(self.temperatures))
        if not self.strategies:
            raise ValueError("strategies must be non-empty")


@dataclass
class StageTimings:
    keyword_extraction_s: float = 0.0
    keyword_translation_s: float = 0.0
    quality_check_s: float = 0.0
    final_translation_s: float = 0.0
    total_s: float = 0.0

    STAGES = (
        "keyword_extraction_s",
        "keyword_translation_s",
        "quality_check_s",
        "final_translation_s",
    )

    def __post_init__(self):
        import math

        for name in self.STAGES + ("total_s",):
            value = getattr(self, name)
            if not math.isfinite(value) or value < 0.0:
                raise ValueError(f"{name} must be finite and non-negative")
        if self.total_s < self.final_translation_s:
            raise ValueError("total_s must cover final_translation_s")


@dataclass
class TranslationResult:
    pair_id: str
    strategy: PromptStrategy
    temperature: float
    hypothesis: str
    timing: StageTimings
    model_name: str
    attempt_count: int
    raw_response_digest: str
    error: str | None = None


def cell_digest(
    pair_id: str,
    strategy: PromptStrategy,
    temperature: float,
    model_name: str,
    template_version: str,
) -> str:
    blob = json.dumps(
        [pair_id, strategy.value, repr(temperature), model_name, template_version]
    )
    return hashlib.sha256(blob.encode("utf-8")).hexdigest()[:16]


def extract_output(raw: str) -> str:
    """Endpoint text minus an echoed "Translation:" label and code fences."""
    text = raw.strip()
    fence = _FENCE_RE.match(text)
    if fence:
        text = fence.group(1).strip()
    text = _LABEL_RE.sub("", text)
    return text.strip()


def translate_one(
    prompt: RenderedPrompt,
    endpoint: ModelEndpoint,
    temperature: float,
    enrichment: ConceptEnrichment | None = None,
    backend=None,
    sleep: Callable[[float], None] = time.sleep,
) -> TranslationResult:
    """One request with retries; timing wraps the final request only."""
    backend = backend or make_backend(endpoint.base_url, endpoint.api_key_env)

    def send() -> ChatReply:
        started = time.perf_counter()
        reply = backend.complete(endpoint.name, prompt.text, temperature, endpoint.timeout_s)
        if reply.duration_s is None:
            reply.duration_s = time.perf_counter() - started
        return reply

    reply, attempts = call_with_retries(send, endpoint.retry, sleep=sleep)

    hypothesis = extract_output(reply.text)
    if not hypothesis:
        raise EmptyCompletionError(
            f"empty completion for pair {prompt.pair_id} at temperature {temperature}"
        )
    final_s = reply.duration_s
    ke = enrichment.keyword_extraction_s if enrichment else 0.0
    kt = enrichment.keyword_translation_s if enrichment else 0.0
    qc = enrichment.quality_check_s if enrichment else 0.0
    timing = StageTimings(
        keyword_extraction_s=ke,
        keyword_translation_s=kt,
        quality_check_s=qc,
        final_translation_s=final_s,
        total_s=ke + kt + qc + final_s,
    )
    return TranslationResult(
        pair_id=prompt.pair_id,
        strategy=prompt.strategy,
        temperature=temperature,
        hypothesis=hypothesis,
        timing=timing,
        model_name=endpoint.name,
        attempt_count=attempts,
        raw_response_digest=hashlib.sha256(reply.text.encode("utf-8")).hexdigest()[:16],
    )


def _result_sort_key(result: TranslationResult):
    return (result.pair_id, result.strategy.value, result.temperature)


def sweep(
    pairs: list[SentencePair],
    enrichments: dict[str, ConceptEnrichment] | None,
    config: RunConfig,
    source_lang: str = "en",
    target_lang: str = "es",
    aux_langs: tuple[str, ...] = ("fr", "pt"),
    template_version: str = "v1",
    skip_digests: set[str] | None = None,
    on_result: Callable[[TranslationResult, str], None] | None = None,
    sleep: Callable[[float], None] = time.sleep,
) -> list[TranslationResult]:
    """Run every (pair, strategy, temperature) cell on a bounded pool.

    Per-cell failures are embedded as error records; `on_result` fires as
    each cell lands (for incremental persistence) and `skip_digests` makes
    reruns resume instead of repeat.
    """
    enrichments = enrichments or {}
    skip_digests = skip_digests or set()
    structured = [s for s in config.strategies if s is not PromptStrategy.DirectTranslation]
    if structured:
        missing = [p.pair_id for p in pairs if p.pair_id not in enrichments]
        if missing:
            raise ValueError(
                f"structured strategies requested but {len(missing)} pairs lack "
                f"enrichments (first: {missing[0]})"
            )

    backend = make_backend(config.model.base_url, config.model.api_key_env)
    cells = [
        (pair, strategy, temperature)
        for pair in sorted(pairs, key=lambda p: p.pair_id)
        for strategy in config.strategies
        for temperature in config.temperatures
    ]

    def run_cell(cell) -> TranslationResult | None:
        pair, strategy, temperature = cell
        digest = cell_digest(
            pair.pair_id, strategy, temperature, config.model.name, template_version
        )
        if digest in skip_digests:
            return None
        enrichment = enrichments.get(pair.pair_id)
        try:
            prompt = render_prompt(
                strategy,
                pair,
                enrichment,
                source_lang=source_lang,
                target_lang=target_lang,
                aux_langs=aux_langs,
                template_version=template_version,
            )
            result = translate_one(
                prompt,
                config.model,
                temperature,
                enrichment=enrichment,
                backend=backend,
                sleep=sleep,
            )
        except Exception as exc:
            logger.warning("cell %s failed: %s", digest, exc)
            result = TranslationResult(
                pair_id=pair.pair_id,
                strategy=strategy,
                temperature=temperature,
                hypothesis="",
                timing=StageTimings(),
                model_name=config.model.name,
                attempt_count=config.model.retry.max_attempts,
                raw_response_digest="",
                error=str(exc),
            )
        if on_result is not None:
            on_result(result, digest)
        return result

    results: list[TranslationResult] = []
    with ThreadPoolExecutor(max_workers=config.model.max_concurrent) as pool:
        for outcome in pool.map(run_cell, cells):
            if outcome is not None:
                results.append(outcome)
    results.sort(key=_result_sort_key)
    return results


def timing_summary(results: list[TranslationResult]) -> dict[str, float]:
    """Arithmetic mean per stage; the total is the sum of the stage means."""
    scored = [r for r in results if r.error is None]
    if not scored:
        raise ValueError("no successful results to summarize")
    summary: dict[str, float] = {}
    for stage in StageTimings.STAGES:
        summary[stage] = sum(getattr(r.timing, stage) for r in scored) / len(scored)
    summary["total_s"] = sum(summary[stage] for stage in StageTimings.STAGES)
    return summary


# ---------------------------------------------------------------------------
# serialization
#
# Wall-clock timings are split into a sidecar file so the main result file
# is byte-identical across runs with deterministic backends.


def result_to_dict(result: TranslationResult, digest: str | None = None) -> dict:
    row = {
        "v": 1,
        "digest": digest
        or cell_digest(
            result.pair_id, result.strategy, result.temperature, result.model_name, "v1"
        ),
        "pair_id": result.pair_id,
        "strategy": result.strategy.value,
        "temperature": result.temperature,
        "hypothesis": result.hypothesis,
        "model_name": result.model_name,
        "attempt_count": result.attempt_count,
        "raw_response_digest": result.raw_response_digest,
        "error": result.error,
    }
    return row


def timing_to_dict(result: TranslationResult, digest: str) -> dict:
    return {
        "digest": digest,
        "keyword_extraction_s": result.timing.keyword_extraction_s,
        "keyword_translation_s": result.timing.keyword_translation_s,
        "quality_check_s": result.timing.quality_check_s,
        "final_translation_s": result.timing.final_translation_s,
        "total_s": result.timing.total_s,
    }


def result_from_dict(row: dict, timing: dict | None = None) -> TranslationResult:
    timing = timing or {}
    stage = StageTimings(
        keyword_extraction_s=timing.get("keyword_extraction_s", 0.0),
        keyword_translation_s=timing.get("keyword_translation_s", 0.0),
        quality_check_s=timing.get("quality_check_s", 0.0),
        final_translation_s=timing.get("final_translation_s", 0.0),
        total_s=timing.get("total_s", 0.0),
    )
    return TranslationResult(
        pair_id=row["pair_id"],
        strategy=PromptStrategy.from_id(row["strategy"]),
        temperature=float(row["temperature"]),
        hypothesis=row["hypothesis"],
        timing=stage,
        model_name=row["model_name"],
        attempt_count=int(row.get("attempt_count", 1)),
        raw_response_digest=row.get("raw_response_digest", ""),
        error=row.get("error"),
    )


def _timing_path(path: Path) -> Path:
    return path.with_name(path.name + ".timing.jsonl")


def write_results(
    results: list[TranslationResult], path: str | Path, template_version: str = "v1"
) -> None:
    path = Path(path)
    with open(path, "w", encoding="utf-8") as fh, open(
        _timing_path(path), "w", encoding="utf-8"
    ) as th:
        for result in sorted(results, key=_result_sort_key):
            digest = cell_digest(
                result.pair_id,
                result.strategy,
                result.temperature,
                result.model_name,
                template_version,
            )
            fh.write(
                json.dumps(result_to_dict(result, digest), ensure_ascii=False, sort_keys=True)
                + "\n"
            )
            th.write(json.dumps(timing_to_dict(result, digest), sort_keys=True) + "\n")


def load_results(path: str | Path) -> list[TranslationResult]:
    path = Path(path)
    timings: dict[str, dict] = {}
    timing_path = _timing_path(path)
    if timing_path.exists():
        with open(timing_path, encoding="utf-8") as th:
            for line in th:
                if line.strip():
                    row = json.loads(line)
                    timings[row["digest"]] = row
    results = []
    with open(path, encoding="utf-8") as fh:
        for line in fh:
            if not line.strip():
                continue
            row = json.loads(line)
            results.append(result_from_dict(row, timings.get(row.get("digest", ""))))
    return results
