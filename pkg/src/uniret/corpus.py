"""Documents, passages and queries: tokenization, chunking, BLEU provenance mapping, JSONL I/O."""

from __future__ import annotations

import json
import math
import re
from collections import Counter
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Optional, Sequence

TASK_CLASSES = ("fact_checking", "entity_linking", "slot_filling", "qa", "dialogue")

_TOKEN = re.compile(r"\w+|[^\w\s]")


class CorpusError(ValueError):
    pass


@dataclass(frozen=True)
class Document:
    page_id: str
    title: str
    body: str


@dataclass(frozen=True)
class Passage:
    passage_id: str
    page_id: str
    index_in_page: int
    tokens: tuple[str, ...]
    text: str


@dataclass
class QueryRecord:
    query_id: str
    dataset_id: str
    task_class: str
    text: str
    gold_pages: frozenset[str]
    gold_passages: frozenset[str]
    answers: Optional[list[str]] = None
    mapping_score: Optional[float] = None

    def __post_init__(self):
        if self.task_class not in TASK_CLASSES:
            raise CorpusError(f"query {self.query_id}: unknown task_class {self.task_class!r}")
        self.gold_pages = frozenset(self.gold_pages)
        self.gold_passages = frozenset(self.gold_passages)
        stray = [p for p in self.gold_passages if page_of_passage_id(p) not in self.gold_pages]
        if stray:
            raise CorpusError(
                f"query {self.query_id}: gold passages outside gold pages: {sorted(stray)}"
            )
        if self.mapping_score is not None and not 0.0 <= self.mapping_score <= 1.0:
            raise CorpusError(f"query {self.query_id}: mapping_score outside [0, 1]")

    def to_json(self) -> dict:
        out = {
            "query_id": self.query_id,
            "dataset_id": self.dataset_id,
            "task_class": self.task_class,
            "text": self.text,
            "gold_pages": sorted(self.gold_pages),
            "gold_passages": sorted(self.gold_passages),
        }
        if self.answers is not None:
            out["answers"] = list(self.answers)
        if self.mapping_score is not None:
            out["mapping_score"] = self.mapping_score
        return out


def tokenize(text: str) -> list[str]:
    """Lowercase, split into word runs and single punctuation characters."""
    return _TOKEN.findall(text.lower())


def detokenize(tokens: Iterable[str]) -> str:
    return " ".join(tokens)


def page_of_passage_id(passage_id: str) -> str:
    return passage_id.rsplit("::", 1)[0]


def chunk_document(doc: Document, chunk_size: int = 100) -> list[Passage]:
    if chunk_size < 1:
        raise ValueError("chunk_size must be >= 1")
    tokens = tokenize(doc.body)
    passages = []
    for i, start in enumerate(range(0, len(tokens), chunk_size)):
        chunk = tuple(tokens[start : start + chunk_size])
        passages.append(
            Passage(
                passage_id=f"{doc.page_id}::{i}",
                page_id=doc.page_id,
                index_in_page=i,
                tokens=chunk,
                text=detokenize(chunk),
            )
        )
    return passages


def chunk_corpus(docs: Iterable[Document], chunk_size: int = 100) -> list[Passage]:
    return [p for d in docs for p in chunk_document(d, chunk_size)]


def passage_from_text(passage_id: str, page_id: str, index_in_page: int, text: str) -> Passage:
    tokens = tuple(tokenize(text))
    return Passage(passage_id, page_id, index_in_page, tokens, detokenize(tokens))


def _ngrams(tokens: Sequence[str], n: int) -> Counter:
    return Counter(tuple(tokens[i : i + n]) for i in range(len(tokens) - n + 1))


def bleu(candidate: Sequence[str], reference: Sequence[str], max_n: int = 4) -> float:
    """Sentence BLEU with add-one smoothing on the n >= 2 precisions."""
    if not candidate or not reference:
        return 0.0
    log_p = 0.0
    for n in range(1, max_n + 1):
        cand = _ngrams(candidate, n)
        ref = _ngrams(reference, n)
        matched = sum(min(c, ref[g]) for g, c in cand.items())
        total = sum(cand.values())
        if n == 1:
            if matched == 0:
                return 0.0
            p = matched / total
        else:
            p = (matched + 1) / (total + 1)
        log_p += math.log(p) / max_n
    c, r = len(candidate), len(reference)
    bp = 1.0 if c > r else math.exp(1.0 - r / c)
    return min(1.0, bp * math.exp(log_p))


def map_provenance(
    gold_text: str, passages: Sequence[Passage], threshold: float = 0.5
) -> Optional[tuple[str, float]]:
    """Best-BLEU passage for a gold evidence span, or None if it scores below `threshold`."""
    if not passages:
        raise ValueError("map_provenance needs at least one passage")
    gold = tokenize(gold_text)
    best = None
    for p in passages:
        score = bleu(gold, p.tokens)
        key = (-score, p.index_in_page, p.page_id)
        if best is None or key < best[0]:
            best = (key, p.passage_id, score)
    _, pid, score = best
    if score < threshold:
        return None
    return pid, score


# --- JSONL -----------------------------------------------------------------


def _read_lines(path: Path):
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, 1):
            if not line.strip():
                continue
            try:
                yield lineno, json.loads(line)
            except json.JSONDecodeError as e:
                raise CorpusError(f"{path}:{lineno}: malformed JSON ({e.msg})") from None


def _require(obj: dict, keys: Sequence[str], path, lineno) -> None:
    if not isinstance(obj, dict):
        raise CorpusError(f"{path}:{lineno}: expected a JSON object")
    missing = [k for k in keys if k not in obj]
    if missing:
        raise CorpusError(f"{path}:{lineno}: missing keys {missing}")


def _parse_document(obj, path, lineno) -> Document:
    _require(obj, ("page_id", "title", "body"), path, lineno)
    if not " ".join(str(obj["body"]).split()):
        raise CorpusError(f"{path}:{lineno}: empty body for page {obj['page_id']}")
    return Document(str(obj["page_id"]), str(obj["title"]), str(obj["body"]))


def _parse_query(obj, path, lineno) -> QueryRecord:
    _require(
        obj,
        ("query_id", "dataset_id", "task_class", "text", "gold_pages", "gold_passages"),
        path,
        lineno,
    )
    try:
        return QueryRecord(
            query_id=str(obj["query_id"]),
            dataset_id=str(obj["dataset_id"]),
            task_class=obj["task_class"],
            text=str(obj["text"]),
            gold_pages=frozenset(obj["gold_pages"]),
            gold_passages=frozenset(obj["gold_passages"]),
            answers=list(obj["answers"]) if obj.get("answers") is not None else None,
            mapping_score=(
                float(obj["mapping_score"]) if obj.get("mapping_score") is not None else None
            ),
        )
    except CorpusError as e:
        raise CorpusError(f"{path}:{lineno}: {e}") from None


def _parse_passage(obj, path, lineno) -> Passage:
    _require(obj, ("passage_id", "page_id", "index_in_page", "text"), path, lineno)
    return passage_from_text(
        str(obj["passage_id"]), str(obj["page_id"]), int(obj["index_in_page"]), obj["text"]
    )


_PARSERS = {
    "corpus": (_parse_document, "page_id"),
    "queries": (_parse_query, "query_id"),
    "passages": (_parse_passage, "passage_id"),
}


def load_jsonl(path, kind: str = "corpus") -> list:
    """Load documents (`corpus`), `queries` or `passages` from a JSONL file."""
    if kind not in _PARSERS:
        raise ValueError(f"unknown kind {kind!r}")
    parse, id_field = _PARSERS[kind]
    path = Path(path)
    out, seen = [], set()
    for lineno, obj in _read_lines(path):
        rec = parse(obj, path, lineno)
        rid = getattr(rec, id_field)
        if rid in seen:
            raise CorpusError(f"{path}:{lineno}: duplicate {id_field} {rid!r}")
        seen.add(rid)
        out.append(rec)
    return out


def sniff_jsonl_kind(path) -> str:
    """'passages' if the first record carries a passage_id, else 'corpus'."""
    for _, obj in _read_lines(Path(path)):
        return "passages" if isinstance(obj, dict) and "passage_id" in obj else "corpus"
    return "corpus"


def load_passages(path, chunk_size: int = 100) -> list[Passage]:
    """Passages from either a passage JSONL or a document JSONL (chunked on the fly)."""
    if sniff_jsonl_kind(path) == "passages":
        return load_jsonl(path, "passages")
    return chunk_corpus(load_jsonl(path, "corpus"), chunk_size)


def _write_jsonl(path, rows: Iterable[dict]) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        for row in rows:
            fh.write(json.dumps(row, ensure_ascii=False, sort_keys=False) + "\n")


def write_documents(path, docs: Iterable[Document]) -> None:
    _write_jsonl(path, ({"page_id": d.page_id, "title": d.title, "body": d.body} for d in docs))


def write_passages(path, passages: Iterable[Passage]) -> None:
    _write_jsonl(
        path,
        (
            {
                "passage_id": p.passage_id,
                "page_id": p.page_id,
                "index_in_page": p.index_in_page,
                "text": p.text,
            }
            for p in passages
        ),
    )


def write_queries(path, queries: Iterable[QueryRecord]) -> None:
    _write_jsonl(path, (q.to_json() for q in queries))
