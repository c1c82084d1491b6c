"""Shared fixtures: tiny corpora, independent metric/graph oracles, and
replay-fixture builders used across the suite."""

from __future__ import annotations

import json
import math
import random
from functools import lru_cache

import pytest

from seedqa.client import CompletionRequest, request_digest
from seedqa.corpus import Dataset, Instance, qo_text
from seedqa.entities import AnnotatedInstance
from seedqa.graph import KnowledgeGraph, build_graph
from seedqa.prompts import PromptSpec, compose, max_response_tokens
from seedqa.seeds import SeedQuery, mine_seeds

ENTITY_POOL = (
    "高血压", "糖尿病", "头痛", "发热", "咳嗽", "肺炎", "贫血",
    "骨折", "胃炎", "哮喘", "心悸", "水肿", "黄疸", "眩晕", "腹泻",
)


def make_annotated(iid: str, qo_ents, r_ents) -> AnnotatedInstance:
    inst = Instance(
        id=iid,
        question="占位问题",
        options={"A": "甲", "B": "乙"},
        answer="A",
        analysis="占位解析",
    )
    return AnnotatedInstance(inst, frozenset(qo_ents), frozenset(r_ents))


@pytest.fixture(scope="session")
def toy_train() -> list[AnnotatedInstance]:
    """Three instances with entity sets ({a,b}->{c,d}), ({a}->{c}),
    ({b,e}->{d}); the canonical hand-checkable corpus."""
    return [
        make_annotated("i1", {"a", "b"}, {"c", "d"}),
        make_annotated("i2", {"a"}, {"c"}),
        make_annotated("i3", {"b", "e"}, {"d"}),
    ]


@pytest.fixture(scope="session")
def toy_graph(toy_train) -> KnowledgeGraph:
    return build_graph(toy_train)


# --- independent oracles ---------------------------------------------------

def naive_graph_stats(train):
    """Recompute counts, frequencies, and weights with plain loops,
    sharing no code with the graph module."""
    raw: dict[tuple[str, str], int] = {}
    freq: dict[str, int] = {}
    nodes: set[str] = set()
    for ann in train:
        for ent in ann.qo_entities:
            nodes.add(ent)
        for ent in ann.r_entities:
            nodes.add(ent)
            freq[ent] = freq.get(ent, 0) + 1
        for src in ann.qo_entities:
            for tgt in ann.r_entities:
                raw[(src, tgt)] = raw.get((src, tgt), 0) + 1
    m = len(nodes)
    weights: dict[tuple[str, str], float] = {}
    for (src, tgt), count in raw.items():
        row_total = 0
        for (s2, _), c2 in raw.items():
            if s2 == src:
                row_total += c2
        weights[(src, tgt)] = (count / row_total) * math.log10(m / (1 + freq.get(tgt, 0)))
    return m, raw, freq, weights


def oracle_seed_ranking(nodes, weights, query: set, k: int):
    """Exhaustive reference miner: score every non-query node from the
    weight table alone, keep those connected to the query, sort by the
    documented key, truncate to k."""
    neighbor_lists = {}
    for x in query:
        targets = [(tgt, w) for (src, tgt), w in weights.items() if src == x]
        targets.sort(key=lambda tw: (-tw[1], tw[0]))
        neighbor_lists[x] = [tgt for tgt, _ in targets]

    def rank(x, ent):
        lst = neighbor_lists[x]
        return lst.index(ent) + 1 if ent in lst else len(lst) + 1

    scored = []
    for ent in nodes:
        if ent in query:
            continue
        connected = any(ent in neighbor_lists[x] for x in query)
        if not connected:
            continue
        score = sum(rank(x, ent) for x in query)
        wsum = sum(weights.get((x, ent), 0.0) for x in query)
        scored.append((score, -wsum, ent))
    scored.sort()
    return [(ent, score) for score, _, ent in scored[:k]]


def brute_ngrams(tokens, n):
    out = {}
    for i in range(len(tokens) - n + 1):
        gram = tuple(tokens[i : i + n])
        out[gram] = out.get(gram, 0) + 1
    return out


def brute_bleu(candidate, reference, n, epsilon=1e-9):
    if not candidate:
        return 0.0
    product = 1.0
    for order in range(1, n + 1):
        cand = brute_ngrams(candidate, order)
        ref = brute_ngrams(reference, order)
        clipped = 0
        total = 0
        for gram, count in cand.items():
            total += count
            clipped += min(count, ref.get(gram, 0))
        product *= (clipped / total) if total and clipped else epsilon
    score = product ** (1.0 / n)
    if len(candidate) < len(reference):
        score *= math.exp(1 - len(reference) / len(candidate))
    return score


def brute_rouge_n(candidate, reference, n):
    cand = brute_ngrams(candidate, n)
    ref = brute_ngrams(reference, n)
    overlap = sum(min(c, ref.get(g, 0)) for g, c in cand.items())
    cand_total = sum(cand.values())
    ref_total = sum(ref.values())
    if not cand_total or not ref_total or not overlap:
        return 0.0
    p, r = overlap / cand_total, overlap / ref_total
    return 100.0 * 2 * p * r / (p + r)


def brute_rouge_l(candidate, reference):
    # recursive LCS with memoization, structurally unlike the library's
    # iterative table
    @lru_cache(maxsize=None)
    def lcs(i, j):
        if i == 0 or j == 0:
            return 0
        if candidate[i - 1] == reference[j - 1]:
            return lcs(i - 1, j - 1) + 1
        return max(lcs(i - 1, j), lcs(i, j - 1))

    if not candidate or not reference:
        return 0.0
    length = lcs(len(candidate), len(reference))
    lcs.cache_clear()
    if not length:
        return 0.0
    p, r = length / len(candidate), length / len(reference)
    return 100.0 * 2 * p * r / (p + r)


# --- synthetic corpus + replay fixtures ------------------------------------

def random_annotated(rng: random.Random, count: int, vocab=ENTITY_POOL):
    """Random annotated instances for fuzzing graph and miner behavior."""
    out = []
    for i in range(count):
        qo = rng.sample(vocab, rng.randint(1, 4))
        r = rng.sample(vocab, rng.randint(0, 3))
        out.append(make_annotated(f"f{i}", set(qo), set(r)))
    return out


def synth_instance(rng: random.Random, iid: str, vocab=ENTITY_POOL) -> Instance:
    """A small exam-like instance whose question and analysis mention
    vocabulary entities, so lexicon annotation finds them."""
    q_ents = rng.sample(vocab, 2)
    r_ents = rng.sample(vocab, 2)
    answer = rng.choice("ABCDE")
    options = {label: f"备选{label}{rng.choice(vocab)}" for label in "ABCDE"}
    question = f"患者出现{q_ents[0]}伴{q_ents[1]}，最可能的诊断是"
    analysis = f"{q_ents[0]}合并{q_ents[1]}时应考虑{r_ents[0]}，且与{r_ents[1]}相鉴别。"
    return Instance(
        id=iid,
        question=question,
        options=options,
        answer=answer,
        analysis=analysis,
        metadata={"discipline": rng.choice(("内科", "外科", "儿科"))},
    )


def synth_dataset(seed: int, count: int, prefix: str = "q") -> Dataset:
    rng = random.Random(seed)
    return Dataset(
        tuple(synth_instance(rng, f"{prefix}{i}") for i in range(count)), "train"
    )


def write_lexicon(path, vocab=ENTITY_POOL):
    path.write_text("".join(f"{term}\n" for term in vocab), encoding="utf-8")
    return str(path)


def pipeline_requests(test_dataset, spec: PromptSpec, model: str, graph=None,
                      extractor=None, k=10, context_tokens=4097, floor=256):
    """Compose the completion request each instance will produce, mirroring
    the evaluation pipeline so replay fixtures can be prepared up front."""
    requests = {}
    for inst in test_dataset:
        seeds = None
        if spec.mode == "icp":
            query = SeedQuery(frozenset(extractor(qo_text(inst))))
            seeds = mine_seeds(graph, query, k)
        prompt = compose(inst, spec, seeds)
        requests[inst.id] = CompletionRequest(
            model=model,
            prompt=prompt.text,
            temperature=0.0,
            max_tokens=max_response_tokens(prompt, context_tokens, floor),
            system=prompt.system,
        )
    return requests


def write_replay_fixture(path, requests_by_id, response_by_id):
    with open(path, "w", encoding="utf-8") as fh:
        for iid, request in requests_by_id.items():
            fh.write(json.dumps(
                {"digest": request_digest(request), "text": response_by_id[iid]},
                ensure_ascii=False,
            ))
            fh.write("\n")
    return str(path)
