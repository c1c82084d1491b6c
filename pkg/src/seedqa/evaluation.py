"""Evaluation: answer extraction, overlap metrics, records, and reports.

BLEU values are in [0, 1]; ROUGE values are conventionally scaled to
[0, 100].  Analysis-quality metrics compare the model's response against
the gold analysis using the shared script-aware tokenizer, so CJK text is
scored per character and Latin text per word.
"""

from __future__ import annotations

import json
import logging
import math
import re
import threading
from collections import Counter
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from typing import Callable, Mapping, Sequence

from .client import ChatClient, CompletionRequest, TransportError, request_digest
from .corpus import Dataset, Instance, qo_text
from .graph import KnowledgeGraph
from .prompts import (
    DEFAULT_CONTEXT_TOKENS,
    DEFAULT_RESERVED_RESPONSE_TOKENS,
    PromptSpec,
    RenderedPrompt,
    compose,
    max_response_tokens,
)
from .seeds import DEFAULT_K, SeedQuery, SeedResult, mine_seeds
from .textseg import tokenize

log = logging.getLogger(__name__)

# stand-in precision for zero n-gram overlap, so the geometric mean is
# defined instead of collapsing the whole score to exactly zero
BLEU_EPSILON = 1e-9

DEFAULT_MAX_CONSECUTIVE_TRANSPORT_FAILURES = 5


class ApiExhaustionError(RuntimeError):
    """Too many consecutive transport failures; carries partial records."""

    def __init__(self, failures: int, records: "list[EvalRecord]"):
        super().__init__(
            f"aborting run after {failures} consecutive transport failures"
        )
        self.records = records


def _ngram_counts(tokens: Sequence[str], n: int) -> Counter:
    return Counter(tuple(tokens[i : i + n]) for i in range(len(tokens) - n + 1))


def _as_tokens(text_or_tokens: "str | Sequence[str]") -> Sequence[str]:
    # metric functions accept raw text; strings are segmented the same
    # way responses are, never scored per character
    if isinstance(text_or_tokens, str):
        return tokenize(text_or_tokens)
    return text_or_tokens


def bleu_n(candidate: "str | Sequence[str]", reference: "str | Sequence[str]", n: int) -> float:
    """Cumulative BLEU-n: geometric mean of clipped precisions for orders
    1..n, times a brevity penalty when the candidate is shorter than the
    reference.  Orders with zero overlap contribute BLEU_EPSILON.  String
    arguments are tokenized first."""
    if n < 1:
        raise ValueError("n must be >= 1")
    candidate = _as_tokens(candidate)
    reference = _as_tokens(reference)
    if not candidate:
        return 0.0
    log_sum = 0.0
    for order in range(1, n + 1):
        cand = _ngram_counts(candidate, order)
        total = sum(cand.values())
        clipped = sum((cand & _ngram_counts(reference, order)).values())
        precision = clipped / total if total and clipped else BLEU_EPSILON
        log_sum += math.log(precision)
    geometric = math.exp(log_sum / n)
    brevity = (
        math.exp(1 - len(reference) / len(candidate))
        if len(candidate) < len(reference)
        else 1.0
    )
    return brevity * geometric


def rouge_n(candidate: "str | Sequence[str]", reference: "str | Sequence[str]", n: int) -> float:
    """ROUGE-n F1 over clipped n-gram overlap, scaled to [0, 100].
    String arguments are tokenized first."""
    if n < 1:
        raise ValueError("n must be >= 1")
    cand = _ngram_counts(_as_tokens(candidate), n)
    ref = _ngram_counts(_as_tokens(reference), n)
    cand_total, ref_total = sum(cand.values()), sum(ref.values())
    if not cand_total or not ref_total:
        return 0.0
    overlap = sum((cand & ref).values())
    if not overlap:
        return 0.0
    precision = overlap / cand_total
    recall = overlap / ref_total
    return 100.0 * 2 * precision * recall / (precision + recall)


def _lcs_length(a: Sequence[str], b: Sequence[str]) -> int:
    # two-row dynamic program; O(len(a) * len(b)) time, O(len(b)) space
    prev = [0] * (len(b) + 1)
    for x in a:
        cur = [0]
        for j, y in enumerate(b, 1):
            cur.append(prev[j - 1] + 1 if x == y else max(prev[j], cur[j - 1]))
        prev = cur
    return prev[len(b)]


def rouge_l(candidate: "str | Sequence[str]", reference: "str | Sequence[str]") -> float:
    """LCS-based F1 (beta = 1), scaled to [0, 100].  String arguments are
    tokenized first."""
    candidate = _as_tokens(candidate)
    reference = _as_tokens(reference)
    if not candidate or not reference:
        return 0.0
    lcs = _lcs_length(candidate, reference)
    if not lcs:
        return 0.0
    precision = lcs / len(candidate)
    recall = lcs / len(reference)
    return 100.0 * 2 * precision * recall / (precision + recall)


def seed_quality(predicted, gold) -> tuple[float, float, float]:
    """Precision, recall, F1 of predicted seeds against gold analysis
    entities.  Either side empty gives (0, 0, 0)."""
    pred_set = set(predicted.entities) if hasattr(predicted, "entities") else set(predicted)
    gold_set = set(gold)
    if not pred_set or not gold_set:
        return 0.0, 0.0, 0.0
    hit = len(pred_set & gold_set)
    precision = hit / len(pred_set)
    recall = hit / len(gold_set)
    f1 = 2 * precision * recall / (precision + recall) if hit else 0.0
    return precision, recall, f1


# --- answer extraction ---------------------------------------------------

# a label letter optionally wrapped in brackets, right after the phrase
_TIER1 = re.compile(
    r"(?:正确答案是|答案是|答案为|答案\s*[:：]|the\s+answer\s+is|answer\s*[:：])"
    r"\s*[\(（\[【]?\s*([A-Za-z])",
    re.IGNORECASE,
)
# an entire line that is one label with only punctuation around it
_TIER2 = re.compile(r"[\W_]*([A-Za-z])[\W_]*\Z")
# a Latin letter not embedded in a longer Latin/digit token
_TIER3 = re.compile(r"(?<![A-Za-z0-9])([A-Za-z])(?![A-Za-z0-9])")

_SENTENCE_SPLIT = re.compile(r"[。．.!?！?？;；\n]")


def extract_answer(text: str, labels: Sequence[str]) -> str | None:
    """Pull the chosen option label out of a model response.

    Cascade: explicit answer phrases anywhere in the text; then a lone
    label on the final non-empty line; then standalone label tokens in the
    last sentence.  Two different labels at the same tier means the
    response did not commit to an answer, and None is returned.
    """
    label_set = {str(l).upper() for l in labels}
    if not label_set:
        raise ValueError("labels must be non-empty")

    tier1 = {m.group(1).upper() for m in _TIER1.finditer(text)} & label_set
    if len(tier1) == 1:
        return next(iter(tier1))
    if len(tier1) > 1:
        return None

    lines = [ln for ln in text.splitlines() if ln.strip()]
    if lines:
        m = _TIER2.fullmatch(lines[-1].strip())
        if m and m.group(1).upper() in label_set:
            return m.group(1).upper()

    sentences = [s for s in _SENTENCE_SPLIT.split(text) if s.strip()]
    if sentences:
        tier3 = {m.group(1).upper() for m in _TIER3.finditer(sentences[-1])} & label_set
        if len(tier3) == 1:
            return next(iter(tier3))
    return None


# --- per-instance records ------------------------------------------------

@dataclass
class EvalRecord:
    """Everything observed for one instance during a run.

    Metric fields are None when they do not apply: answer-only mode skips
    the analysis metrics, non-seeded modes skip the seed metrics, and a
    failed instance records only the error.
    """

    instance_id: str
    mode: str
    shots: str
    prompt_digest: str
    response_text: str
    extracted_answer: str | None
    gold_answer: str
    correct: bool
    metadata: dict[str, str] = field(default_factory=dict)
    error: str | None = None
    response_tokens: int | None = None
    bleu_1: float | None = None
    bleu_2: float | None = None
    bleu_3: float | None = None
    bleu_4: float | None = None
    rouge_1: float | None = None
    rouge_2: float | None = None
    rouge_l: float | None = None
    seed_count: int | None = None
    seed_precision: float | None = None
    seed_recall: float | None = None
    seed_f1: float | None = None


_RECORD_FIELDS = (
    "instance_id", "mode", "shots", "prompt_digest", "response_text",
    "extracted_answer", "gold_answer", "correct", "metadata", "error",
    "response_tokens", "bleu_1", "bleu_2", "bleu_3", "bleu_4",
    "rouge_1", "rouge_2", "rouge_l",
    "seed_count", "seed_precision", "seed_recall", "seed_f1",
)


def record_to_dict(record: EvalRecord) -> dict:
    """Field-ordered dict with inapplicable (None) metric fields omitted."""
    out: dict = {}
    for name in _RECORD_FIELDS:
        value = getattr(record, name)
        if value is None and name not in ("extracted_answer", "error"):
            continue
        if name == "metadata" and not value:
            continue
        out[name] = value
    return out


def save_records(records: Sequence[EvalRecord], path: str) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        for rec in records:
            fh.write(json.dumps(record_to_dict(rec), ensure_ascii=False, separators=(",", ":")))
            fh.write("\n")


def load_records(path: str) -> list[EvalRecord]:
    out: list[EvalRecord] = []
    with open(path, encoding="utf-8") as fh:
        for line in fh:
            if not line.strip():
                continue
            data = json.loads(line)
            out.append(EvalRecord(**{k: data[k] for k in _RECORD_FIELDS if k in data}))
    return out


# --- aggregate report ----------------------------------------------------

_MEAN_METRICS = (
    "bleu_1", "bleu_2", "bleu_3", "bleu_4",
    "rouge_1", "rouge_2", "rouge_l",
    "response_tokens", "seed_count",
    "seed_precision", "seed_recall", "seed_f1",
)

# display rounding: percentages and [0,100] metrics to 2 places,
# [0,1] metrics to 4
_FINE_METRICS = ("bleu_1", "bleu_2", "bleu_3", "bleu_4",
                 "seed_precision", "seed_recall", "seed_f1")


def _round_metric(name: str, value: float) -> float:
    return round(value, 4 if name in _FINE_METRICS else 2)


def _mean_over(records: Sequence[EvalRecord]) -> dict[str, float]:
    means: dict[str, float] = {}
    for name in _MEAN_METRICS:
        values = [getattr(r, name) for r in records if getattr(r, name) is not None]
        if values:
            means[name] = _round_metric(name, sum(values) / len(values))
    return means


def _accuracy_pct(records: Sequence[EvalRecord]) -> float | None:
    if not records:
        return None
    return round(100.0 * sum(r.correct for r in records) / len(records), 2)


@dataclass
class EvalReport:
    """Corpus-level aggregation of a record list."""

    total: int
    correct: int
    unresolved: int
    errors: int
    accuracy_pct: float | None
    mean_metrics: dict[str, float]
    groups: dict[str, dict[str, dict]]
    answer_split: dict[str, dict]

    def to_dict(self) -> dict:
        return {
            "total": self.total,
            "correct": self.correct,
            "unresolved": self.unresolved,
            "errors": self.errors,
            "accuracy_pct": self.accuracy_pct,
            "mean_metrics": self.mean_metrics,
            "groups": self.groups,
            "answer_split": self.answer_split,
        }


def build_report(records: Sequence[EvalRecord], group_by: Sequence[str] = ()) -> EvalReport:
    """Aggregate records into accuracy, metric means, per-group tables
    (rows sorted by descending count, then value), and a correct-versus-
    incorrect metric split.  Records missing a grouping key fall into an
    "unknown" row, so group counts always sum to the total."""
    total = len(records)
    correct = sum(r.correct for r in records)
    unresolved = sum(1 for r in records if r.extracted_answer is None)
    errors = sum(1 for r in records if r.error is not None)

    groups: dict[str, dict[str, dict]] = {}
    for key in group_by:
        buckets: dict[str, list[EvalRecord]] = {}
        for rec in records:
            buckets.setdefault(rec.metadata.get(key, "unknown"), []).append(rec)
        rows = {}
        for value in sorted(buckets, key=lambda v: (-len(buckets[v]), v)):
            bucket = buckets[value]
            row = {"count": len(bucket), "accuracy_pct": _accuracy_pct(bucket)}
            row.update(_mean_over(bucket))
            rows[value] = row
        groups[key] = rows

    split: dict[str, dict] = {}
    for name, bucket in (
        ("correct", [r for r in records if r.correct]),
        ("incorrect", [r for r in records if not r.correct]),
    ):
        entry = {"count": len(bucket)}
        entry.update(_mean_over(bucket))
        split[name] = entry

    return EvalReport(
        total=total,
        correct=correct,
        unresolved=unresolved,
        errors=errors,
        accuracy_pct=_accuracy_pct(records),
        mean_metrics=_mean_over(records),
        groups=groups,
        answer_split=split,
    )


def save_report(report: EvalReport, path: str) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        json.dump(report.to_dict(), fh, ensure_ascii=False, indent=2)
        fh.write("\n")


# --- end-to-end run ------------------------------------------------------

def run_eval(
    test: Dataset,
    client: ChatClient,
    spec: PromptSpec,
    graph: KnowledgeGraph | None = None,
    extractor: Callable[[str], "set[str] | frozenset[str]"] | None = None,
    k: int = DEFAULT_K,
    precomputed_seeds: Mapping[str, SeedResult] | None = None,
    workers: int = 1,
    group_by: Sequence[str] = (),
    context_tokens: int = DEFAULT_CONTEXT_TOKENS,
    min_response_tokens: int = DEFAULT_RESERVED_RESPONSE_TOKENS,
    max_consecutive_transport_failures: int = DEFAULT_MAX_CONSECUTIVE_TRANSPORT_FAILURES,
) -> tuple[list[EvalRecord], EvalReport]:
    """Evaluate every instance and aggregate a report.

    Configuration problems (missing graph or extractor for seeded mode,
    bad worker count) raise immediately, before any completion call.
    Per-instance failures are recorded with their error and scored
    incorrect; the run aborts with ApiExhaustionError only after
    ``max_consecutive_transport_failures`` transport failures in a row,
    carrying the records finished so far.
    """
    if workers < 1:
        raise ValueError("workers must be >= 1")
    if spec.mode == "icp":
        if graph is None:
            raise ValueError("icp mode requires a knowledge graph")
        if extractor is None:
            raise ValueError("icp mode requires an entity extractor")

    failure_lock = threading.Lock()
    consecutive_failures = 0
    abort = threading.Event()

    def note_outcome(transport_failed: bool) -> None:
        nonlocal consecutive_failures
        with failure_lock:
            consecutive_failures = consecutive_failures + 1 if transport_failed else 0
            if consecutive_failures >= max_consecutive_transport_failures:
                abort.set()

    class _Aborted(Exception):
        pass

    def eval_one(inst: Instance) -> EvalRecord:
        if abort.is_set():
            raise _Aborted()
        seeds: SeedResult | None = None
        gold_entities: frozenset[str] = frozenset()
        if spec.mode == "icp":
            if precomputed_seeds is not None and inst.id in precomputed_seeds:
                seeds = precomputed_seeds[inst.id]
            else:
                query = SeedQuery(frozenset(extractor(qo_text(inst))))
                seeds = mine_seeds(graph, query, k)
            gold_entities = frozenset(extractor(inst.analysis))
        prompt: RenderedPrompt = compose(inst, spec, seeds)
        request = CompletionRequest(
            model=client.config.model,
            prompt=prompt.text,
            temperature=client.config.temperature,
            max_tokens=max_response_tokens(prompt, context_tokens, min_response_tokens),
            system=prompt.system,
        )
        digest = request_digest(request)
        try:
            response = client.complete(request)
        except Exception as exc:
            note_outcome(isinstance(exc, TransportError))
            log.warning("instance %s failed: %s", inst.id, exc)
            return EvalRecord(
                instance_id=inst.id,
                mode=spec.mode,
                shots=spec.shots,
                prompt_digest=digest,
                response_text="",
                extracted_answer=None,
                gold_answer=inst.answer,
                correct=False,
                metadata=dict(inst.metadata),
                error=f"{type(exc).__name__}: {exc}",
            )
        note_outcome(False)

        extracted = extract_answer(response.text, inst.labels)
        record = EvalRecord(
            instance_id=inst.id,
            mode=spec.mode,
            shots=spec.shots,
            prompt_digest=digest,
            response_text=response.text,
            extracted_answer=extracted,
            gold_answer=inst.answer,
            correct=extracted == inst.answer,
            metadata=dict(inst.metadata),
        )
        if spec.mode in ("cot", "icp"):
            cand = tokenize(response.text)
            ref = tokenize(inst.analysis)
            record.response_tokens = len(cand)
            record.bleu_1 = bleu_n(cand, ref, 1)
            record.bleu_2 = bleu_n(cand, ref, 2)
            record.bleu_3 = bleu_n(cand, ref, 3)
            record.bleu_4 = bleu_n(cand, ref, 4)
            record.rouge_1 = rouge_n(cand, ref, 1)
            record.rouge_2 = rouge_n(cand, ref, 2)
            record.rouge_l = rouge_l(cand, ref)
        if spec.mode == "icp" and seeds is not None:
            record.seed_count = len(seeds)
            p, r, f1 = seed_quality(seeds, gold_entities)
            record.seed_precision = p
            record.seed_recall = r
            record.seed_f1 = f1
        return record

    records: list[EvalRecord] = []
    skipped = 0
    if workers == 1:
        for inst in test:
            try:
                records.append(eval_one(inst))
            except _Aborted:
                skipped += 1
    else:
        with ThreadPoolExecutor(max_workers=workers) as pool:
            futures = [pool.submit(eval_one, inst) for inst in test]
            for fut in futures:
                try:
                    records.append(fut.result())
                except _Aborted:
                    skipped += 1
    if skipped:
        raise ApiExhaustionError(consecutive_failures, records)

    report = build_report(records, group_by)
    return records, report
