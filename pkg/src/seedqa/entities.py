"""Entity annotation: normalization, lexicon matching, LLM extraction."""

from __future__ import annotations

import json
import unicodedata
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass
from typing import Callable, Iterable, Sequence

from .client import ChatClient, CompletionRequest
from .corpus import Dataset, Instance, instance_to_record, qo_text

Extractor = Callable[[str], "set[str] | frozenset[str]"]


class EntityParseError(ValueError):
    """An extraction response could not be parsed into an entity list."""

    def __init__(self, message: str, raw: str):
        super().__init__(message)
        self.raw = raw


class AnnotationError(RuntimeError):
    """Extraction failed for one instance; carries the instance id."""

    def __init__(self, instance_id: str, cause: Exception):
        super().__init__(f"annotation failed for instance {instance_id!r}: {cause}")
        self.instance_id = instance_id
        self.cause = cause


def normalize_text(raw: str) -> str:
    # NFKC can surface new cased characters (e.g. the MHz sign), so the
    # normalize/casefold pair is iterated to a fixed point.
    text = raw
    while True:
        folded = unicodedata.normalize("NFKC", text).casefold()
        if folded == text:
            return text
        text = folded


def normalize_entity(raw: str) -> str:
    """Canonical entity form: NFKC + casefold to a fixed point, then
    stripped.  Raises ValueError when nothing is left."""
    ent = normalize_text(raw).strip()
    while ent != normalize_text(ent).strip():
        ent = normalize_text(ent).strip()
    if not ent:
        raise ValueError(f"entity is empty after normalization: {raw!r}")
    return ent


class Lexicon:
    """Closed vocabulary of canonical entities with optional surface aliases.

    All surfaces are stored in normalized form; matching happens on
    normalized text, so lookups are case- and width-insensitive.
    """

    def __init__(self, entries: Iterable[str], aliases: dict[str, str] | None = None):
        canon = {normalize_entity(e) for e in entries}
        if not canon:
            raise ValueError("lexicon has no entries")
        self.entries: frozenset[str] = frozenset(canon)
        self.aliases: dict[str, str] = {}
        surface_map = {e: e for e in canon}
        for alias, target in (aliases or {}).items():
            alias_n = normalize_entity(alias)
            target_n = normalize_entity(target)
            if target_n not in canon:
                raise ValueError(f"alias {alias!r} targets unknown entity {target!r}")
            if alias_n in canon and alias_n != target_n:
                raise ValueError(f"alias {alias!r} collides with a canonical entry")
            self.aliases[alias_n] = target_n
            surface_map[alias_n] = target_n
        self._surface_map = surface_map
        self._max_len = max(len(s) for s in surface_map)

    def __len__(self) -> int:
        return len(self.entries)

    def __contains__(self, term: str) -> bool:
        return normalize_entity(term) in self._surface_map


def load_lexicon(path: str) -> Lexicon:
    """Read a lexicon file: one canonical entity per line, optionally
    followed by tab-separated aliases.  Blank lines and lines starting
    with '#' are skipped."""
    entries: list[str] = []
    aliases: dict[str, str] = {}
    with open(path, encoding="utf-8") as fh:
        for line in fh:
            line = line.rstrip("\n")
            if not line.strip() or line.lstrip().startswith("#"):
                continue
            parts = [p for p in line.split("\t") if p.strip()]
            entries.append(parts[0])
            for alias in parts[1:]:
                aliases[alias] = parts[0]
    if not entries:
        raise ValueError(f"lexicon file {path} has no entries")
    return Lexicon(entries, aliases)


def save_lexicon(lexicon: Lexicon, path: str) -> None:
    by_canonical: dict[str, list[str]] = {e: [] for e in sorted(lexicon.entries)}
    for alias, target in sorted(lexicon.aliases.items()):
        by_canonical[target].append(alias)
    with open(path, "w", encoding="utf-8") as fh:
        for canonical, alias_list in by_canonical.items():
            fh.write("\t".join([canonical, *alias_list]))
            fh.write("\n")


def extract_entities_lexicon(text: str, lexicon: Lexicon) -> set[str]:
    """Greedy longest-match scan of the normalized text.

    At each position the longest lexicon surface is taken and the scan
    resumes after it, so shorter terms nested inside a match are not
    reported separately.  Output is the set of canonical forms.
    """
    s = normalize_text(text)
    surface_map = lexicon._surface_map
    found: set[str] = set()
    i, n = 0, len(s)
    while i < n:
        matched = 0
        for length in range(min(lexicon._max_len, n - i), 0, -1):
            target = surface_map.get(s[i : i + length])
            if target is not None:
                found.add(target)
                matched = length
                break
        i += matched or 1
    return found


class LexiconExtractor:
    """Extractor callable backed by a fixed lexicon."""

    def __init__(self, lexicon: Lexicon):
        self.lexicon = lexicon

    def __call__(self, text: str) -> set[str]:
        return extract_entities_lexicon(text, self.lexicon)


ENTITY_INSTRUCTION = (
    "Extract the medical entities (diseases, symptoms, signs, drugs, tests, "
    "treatments and other medical concepts) mentioned in the text. Reply with "
    "a single line listing the entities separated by 、. If there are "
    "none, reply \"none\"."
)

_NO_ENTITY_MARKERS = {"none", "无", "没有", "no entities", "no entities found"}
_LABEL_PREFIXES = ("entities:", "entities：", "实体:", "实体：", "医学实体:", "医学实体：")
_DELIMITERS = ("、", "，", ",", "；", ";")


def build_extraction_prompt(text: str, exemplars: Sequence[tuple[str, Sequence[str]]]) -> str:
    parts = [ENTITY_INSTRUCTION, ""]
    for ex_text, ex_entities in exemplars:
        parts.append(f"text: {ex_text}")
        parts.append("entities: " + ("、".join(ex_entities) if ex_entities else "none"))
        parts.append("")
    parts.append(f"text: {text}")
    parts.append("entities:")
    return "\n".join(parts)


def _split_entities(content: str) -> list[str]:
    pieces = [content]
    for delim in _DELIMITERS:
        pieces = [q for p in pieces for q in p.split(delim)]
    out = []
    for p in pieces:
        p = p.strip().strip("。.").strip()
        if p:
            out.append(p)
    return out


def _strip_label(line: str) -> str:
    low = line.casefold()
    for prefix in _LABEL_PREFIXES:
        if low.startswith(prefix):
            return line[len(prefix):].strip()
    return line


def _is_no_entity_marker(content: str) -> bool:
    return content.casefold().strip("。.！!").strip() in _NO_ENTITY_MARKERS


def parse_entity_response(raw: str) -> set[str]:
    """Parse an extraction reply into normalized entities.

    Accepts the requested single delimited line; tolerates a label prefix,
    surrounding blank lines, and a leading remark before the list.  A
    no-entity marker ("none", "无", ...) yields the empty set.  Anything
    else unrecognizable raises EntityParseError with the raw text attached.
    """
    lines = [ln.strip() for ln in raw.splitlines() if ln.strip()]
    if not lines:
        raise EntityParseError("empty extraction response", raw)
    # a labeled line wins; then a line using the enumeration delimiter,
    # which unlike the prose comma marks a list; then any delimited line
    for line in lines:
        stripped = _strip_label(line)
        if stripped != line:
            if not stripped or _is_no_entity_marker(stripped):
                return set()
            return {normalize_entity(p) for p in _split_entities(stripped)}
    for line in lines:
        if "、" in line:
            return {normalize_entity(p) for p in _split_entities(line)}
    for line in lines:
        if any(d in line for d in _DELIMITERS) and len(_split_entities(line)) >= 2:
            return {normalize_entity(p) for p in _split_entities(line)}
    if len(lines) == 1:
        if _is_no_entity_marker(lines[0]):
            return set()
        return {normalize_entity(lines[0])}
    raise EntityParseError("no entity line found in extraction response", raw)


class LlmExtractor:
    """Extractor that prompts a chat model with few-shot examples.

    Determinism comes from temperature 0 plus the client's cache or replay
    fixtures; the same text with the same exemplars always builds the same
    prompt, hence the same request digest.
    """

    def __init__(
        self,
        client: ChatClient,
        exemplars: Sequence[tuple[str, Sequence[str]]],
        max_tokens: int = 256,
    ):
        if not exemplars:
            raise ValueError("LlmExtractor needs at least one exemplar")
        self.client = client
        self.exemplars = tuple((t, tuple(e)) for t, e in exemplars)
        self.max_tokens = max_tokens

    def __call__(self, text: str) -> set[str]:
        prompt = build_extraction_prompt(text, self.exemplars)
        request = CompletionRequest(
            model=self.client.config.model,
            prompt=prompt,
            temperature=self.client.config.temperature,
            max_tokens=self.max_tokens,
        )
        response = self.client.complete(request)
        return parse_entity_response(response.text)


def load_extraction_exemplars(path: str) -> list[tuple[str, tuple[str, ...]]]:
    out: list[tuple[str, tuple[str, ...]]] = []
    with open(path, encoding="utf-8") as fh:
        for line in fh:
            if not line.strip():
                continue
            rec = json.loads(line)
            out.append((str(rec["text"]), tuple(str(e) for e in rec["entities"])))
    return out


@dataclass(frozen=True)
class AnnotatedInstance:
    """An instance plus its question-side and analysis-side entity sets."""

    base: Instance
    qo_entities: frozenset[str]
    r_entities: frozenset[str]

    def __post_init__(self) -> None:
        for side in (self.qo_entities, self.r_entities):
            for ent in side:
                if ent != normalize_entity(ent):
                    raise ValueError(f"entity not in canonical form: {ent!r}")


def annotate_instance(
    inst: Instance, extractor: Extractor, include_analysis: bool = True
) -> AnnotatedInstance:
    qo = frozenset(extractor(qo_text(inst)))
    r = frozenset(extractor(inst.analysis)) if include_analysis else frozenset()
    return AnnotatedInstance(inst, qo, r)


def annotate_dataset(
    dataset: Dataset,
    extractor: Extractor,
    include_analysis: bool = True,
    on_error: str = "raise",
    workers: int = 1,
) -> list[AnnotatedInstance]:
    """Annotate every instance, preserving dataset order.

    ``on_error`` is "raise" (abort on the first failing instance) or "skip"
    (drop failing instances).  ``workers`` > 1 annotates concurrently,
    which only pays off with a network-backed extractor.
    """
    if on_error not in ("raise", "skip"):
        raise ValueError(f"on_error must be 'raise' or 'skip', got {on_error!r}")
    if workers < 1:
        raise ValueError("workers must be >= 1")

    def work(inst: Instance) -> AnnotatedInstance | AnnotationError:
        try:
            return annotate_instance(inst, extractor, include_analysis)
        except Exception as exc:
            return AnnotationError(inst.id, exc)

    if workers == 1:
        results = [work(inst) for inst in dataset]
    else:
        with ThreadPoolExecutor(max_workers=workers) as pool:
            results = list(pool.map(work, dataset.instances))

    out: list[AnnotatedInstance] = []
    for res in results:
        if isinstance(res, AnnotationError):
            if on_error == "raise":
                raise res
            continue
        out.append(res)
    return out


def save_annotated(annotated: Sequence[AnnotatedInstance], path: str) -> None:
    """Write annotated records: the dataset record plus sorted entity lists."""
    with open(path, "w", encoding="utf-8") as fh:
        for ann in annotated:
            rec = instance_to_record(ann.base)
            rec["qo_entities"] = sorted(ann.qo_entities)
            rec["r_entities"] = sorted(ann.r_entities)
            fh.write(json.dumps(rec, ensure_ascii=False))
            fh.write("\n")


def load_annotated(path: str) -> list[AnnotatedInstance]:
    from .corpus import DatasetFormatError, _parse_record

    out: list[AnnotatedInstance] = []
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, 1):
            if not line.strip():
                continue
            where = f"{path}:{lineno}"
            try:
                rec = json.loads(line)
            except json.JSONDecodeError as exc:
                raise DatasetFormatError(f"{where}: invalid JSON ({exc})") from exc
            for name in ("qo_entities", "r_entities"):
                if name not in rec:
                    raise DatasetFormatError(f"{where}: missing field {name!r}")
            inst = _parse_record(
                {k: v for k, v in rec.items() if k not in ("qo_entities", "r_entities")},
                where,
            )
            out.append(
                AnnotatedInstance(
                    inst,
                    frozenset(rec["qo_entities"]),
                    frozenset(rec["r_entities"]),
                )
            )
    return out
