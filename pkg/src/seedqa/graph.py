"""Directed entity co-occurrence graph with inverse-frequency weighting.

Each training instance contributes edges from every question-side entity
to every analysis-side entity.  An edge's weight is its share of the
source's outgoing raw count, discounted by how common the target is as an
analysis entity:

    weight(i, j) = (raw(i, j) / sum_k raw(i, k)) * log10(m / (1 + freq(j)))

where m is the total node count and freq(j) counts instances whose
analysis mentions j.  Ubiquitous targets therefore contribute little or
even negative weight, and rare ones are promoted.
"""

from __future__ import annotations

import hashlib
import json
import math
from collections import Counter, defaultdict
from dataclasses import dataclass
from typing import Iterable, Sequence

from .entities import AnnotatedInstance

# Value reported for an absent edge.  Pure representation: it never enters
# any weight or score arithmetic.
MISSING_EDGE = -1

_MAGIC = "seedqa-graph"
_FORMAT_VERSION = 1


class GraphFormatError(ValueError):
    """A graph file is malformed, truncated, or of an unsupported version."""


@dataclass(frozen=True)
class NeighborList:
    """Outgoing neighbors of one node, heaviest first, ties by entity."""

    source: str
    targets: tuple[tuple[str, float], ...]

    def __len__(self) -> int:
        return len(self.targets)

    def rank_of(self, entity: str) -> int | None:
        """1-based position of ``entity``, or None when absent."""
        for pos, (target, _) in enumerate(self.targets, 1):
            if target == entity:
                return pos
        return None


class KnowledgeGraph:
    """Immutable co-occurrence graph over canonical entity strings."""

    def __init__(
        self,
        nodes: Sequence[str],
        raw_counts: dict[tuple[str, str], int],
        analysis_freq: dict[str, int],
    ):
        node_set = set(nodes)
        if len(node_set) != len(nodes):
            raise ValueError("duplicate node")
        for (src, tgt), count in raw_counts.items():
            if src not in node_set or tgt not in node_set:
                raise ValueError(f"edge ({src!r}, {tgt!r}) references unknown node")
            if count < 1:
                raise ValueError(f"edge ({src!r}, {tgt!r}) has non-positive count {count}")
        for ent, freq in analysis_freq.items():
            if ent not in node_set:
                raise ValueError(f"analysis frequency references unknown node {ent!r}")
            if freq < 1:
                raise ValueError(f"analysis frequency for {ent!r} must be >= 1, got {freq}")

        self.nodes: tuple[str, ...] = tuple(nodes)
        self.raw_counts: dict[tuple[str, str], int] = dict(raw_counts)
        self.analysis_freq: dict[str, int] = dict(analysis_freq)

        row_sums: dict[str, int] = defaultdict(int)
        for (src, _), count in self.raw_counts.items():
            row_sums[src] += count
        m = len(self.nodes)
        self.weights: dict[tuple[str, str], float] = {}
        for (src, tgt), count in self.raw_counts.items():
            idf = math.log10(m / (1 + self.analysis_freq.get(tgt, 0)))
            self.weights[(src, tgt)] = (count / row_sums[src]) * idf

        adjacency: dict[str, list[tuple[str, float]]] = defaultdict(list)
        for (src, tgt), w in self.weights.items():
            adjacency[src].append((tgt, w))
        self._adjacency: dict[str, tuple[tuple[str, float], ...]] = {
            src: tuple(sorted(pairs, key=lambda tw: (-tw[1], tw[0])))
            for src, pairs in adjacency.items()
        }

    @property
    def m(self) -> int:
        return len(self.nodes)

    @property
    def edge_count(self) -> int:
        return len(self.raw_counts)

    def raw_count(self, src: str, tgt: str) -> int:
        """Raw co-occurrence count, or the -1 sentinel for an absent edge."""
        return self.raw_counts.get((src, tgt), MISSING_EDGE)

    def weight(self, src: str, tgt: str) -> float | None:
        return self.weights.get((src, tgt))

    def neighbors(self, entity: str) -> NeighborList:
        """Outgoing neighbors sorted by descending weight, then entity.

        A node with no outgoing edges (or an unknown entity) gets an empty
        list; callers treat both the same way.
        """
        return NeighborList(entity, self._adjacency.get(entity, ()))


def build_graph(train: Iterable[AnnotatedInstance]) -> KnowledgeGraph:
    """Accumulate counts over annotated training instances.

    raw(i, j) counts instances whose question side contains i and whose
    analysis side contains j; freq(j) counts instances whose analysis side
    contains j at all.  Both are per-instance (sets, not multisets), so
    repeating an entity inside one instance changes nothing.
    """
    counts: Counter[tuple[str, str]] = Counter()
    freq: Counter[str] = Counter()
    nodes: set[str] = set()
    for ann in train:
        qo = set(ann.qo_entities)
        r = set(ann.r_entities)
        nodes |= qo | r
        for tgt in r:
            freq[tgt] += 1
        for src in qo:
            for tgt in r:
                counts[(src, tgt)] += 1
    return KnowledgeGraph(tuple(sorted(nodes)), dict(counts), dict(freq))


def merge_graphs(graphs: Sequence[KnowledgeGraph]) -> KnowledgeGraph:
    """Combine shard graphs by unioning nodes and summing counts.

    Equals the graph built from the concatenated shards, so corpus
    annotation can be parallelized and merged.
    """
    nodes: set[str] = set()
    counts: Counter[tuple[str, str]] = Counter()
    freq: Counter[str] = Counter()
    for g in graphs:
        nodes.update(g.nodes)
        counts.update(g.raw_counts)
        freq.update(g.analysis_freq)
    return KnowledgeGraph(tuple(sorted(nodes)), dict(counts), dict(freq))


def save_graph(graph: KnowledgeGraph, path: str) -> None:
    """Write the graph in the versioned text format.

    Layout: a JSON header line (magic, version, table sizes), one JSON
    string per node, edge rows ``src_idx<TAB>tgt_idx<TAB>raw_count``,
    frequency rows ``node_idx<TAB>freq``, then a JSON trailer with the
    SHA-256 of everything before it.  Weights are derived, so only counts
    are stored.
    """
    index = {node: i for i, node in enumerate(graph.nodes)}
    lines = [
        json.dumps(
            {
                "magic": _MAGIC,
                "version": _FORMAT_VERSION,
                "nodes": graph.m,
                "edges": graph.edge_count,
                "freqs": len(graph.analysis_freq),
            },
            ensure_ascii=False,
        )
    ]
    lines.extend(json.dumps(node, ensure_ascii=False) for node in graph.nodes)
    for (src, tgt) in sorted(graph.raw_counts, key=lambda e: (index[e[0]], index[e[1]])):
        lines.append(f"{index[src]}\t{index[tgt]}\t{graph.raw_counts[(src, tgt)]}")
    for ent in sorted(graph.analysis_freq, key=index.__getitem__):
        lines.append(f"{index[ent]}\t{graph.analysis_freq[ent]}")
    body = "\n".join(lines) + "\n"
    digest = hashlib.sha256(body.encode("utf-8")).hexdigest()
    with open(path, "w", encoding="utf-8") as fh:
        fh.write(body)
        fh.write(json.dumps({"sha256": digest}))
        fh.write("\n")


def load_graph(path: str) -> KnowledgeGraph:
    """Read a graph file, verifying checksum, version, and table sizes.

    Any mismatch raises GraphFormatError; a partial graph is never
    returned.  Weights are recomputed from the stored counts.
    """
    with open(path, encoding="utf-8") as fh:
        text = fh.read()
    lines = text.split("\n")
    if lines and lines[-1] == "":
        lines.pop()
    if len(lines) < 2:
        raise GraphFormatError(f"{path}: too short to be a graph file")
    trailer_line = lines[-1]
    body = "\n".join(lines[:-1]) + "\n"
    try:
        trailer = json.loads(trailer_line)
        expected = trailer["sha256"]
    except (json.JSONDecodeError, TypeError, KeyError) as exc:
        raise GraphFormatError(f"{path}: missing or malformed checksum trailer") from exc
    actual = hashlib.sha256(body.encode("utf-8")).hexdigest()
    if actual != expected:
        raise GraphFormatError(f"{path}: checksum mismatch (file corrupt or truncated)")
    try:
        header = json.loads(lines[0])
    except json.JSONDecodeError as exc:
        raise GraphFormatError(f"{path}: malformed header") from exc
    if header.get("magic") != _MAGIC:
        raise GraphFormatError(f"{path}: not a graph file (bad magic)")
    if header.get("version") != _FORMAT_VERSION:
        raise GraphFormatError(
            f"{path}: unsupported format version {header.get('version')!r}"
        )
    n_nodes, n_edges, n_freqs = header["nodes"], header["edges"], header["freqs"]
    expected_lines = 1 + n_nodes + n_edges + n_freqs
    if len(lines) - 1 != expected_lines:
        raise GraphFormatError(
            f"{path}: expected {expected_lines} lines before trailer, got {len(lines) - 1}"
        )
    try:
        nodes = tuple(json.loads(lines[1 + i]) for i in range(n_nodes))
    except json.JSONDecodeError as exc:
        raise GraphFormatError(f"{path}: malformed node table") from exc
    counts: dict[tuple[str, str], int] = {}
    base = 1 + n_nodes
    for row in lines[base : base + n_edges]:
        try:
            si, ti, count = (int(x) for x in row.split("\t"))
            counts[(nodes[si], nodes[ti])] = count
        except (ValueError, IndexError) as exc:
            raise GraphFormatError(f"{path}: malformed edge row {row!r}") from exc
    freq: dict[str, int] = {}
    base += n_edges
    for row in lines[base : base + n_freqs]:
        try:
            ni, count = (int(x) for x in row.split("\t"))
            freq[nodes[ni]] = count
        except (ValueError, IndexError) as exc:
            raise GraphFormatError(f"{path}: malformed frequency row {row!r}") from exc
    try:
        return KnowledgeGraph(nodes, counts, freq)
    except ValueError as exc:
        raise GraphFormatError(f"{path}: {exc}") from exc
