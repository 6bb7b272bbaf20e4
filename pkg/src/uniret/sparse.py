"""Okapi BM25 over an in-memory inverted index.

Binary layout of a saved index (all integers little-endian):

    b"UBM1"
    f64 k1, f64 b
    u64 N
    N x (u32 id_len, id bytes (UTF-8), u32 doc_length)   # sorted by passage id
    u64 T
    T x (u32 term_len, term bytes (UTF-8), u32 df, df x (u32 doc_ordinal, u32 tf))

Terms are stored in sorted order; `doc_ordinal` indexes the document table.
"""

from __future__ import annotations

import math
import struct
from collections import Counter, defaultdict
from dataclasses import dataclass, field
from typing import Iterable, Optional, Sequence

import numpy as np

from ._binio import FormatError, Reader, pack_str
from .corpus import Passage, QueryRecord, tokenize

MAGIC = b"UBM1"

IndexFormatError = FormatError


@dataclass
class Bm25Index:
    postings: dict[str, list[tuple[str, int]]]
    doc_lengths: dict[str, int]
    k1: float = 1.2
    b: float = 0.75
    avg_doc_length: float = field(init=False)
    N: int = field(init=False)

    def __post_init__(self):
        self.N = len(self.doc_lengths)
        self.avg_doc_length = sum(self.doc_lengths.values()) / self.N if self.N else 0.0
        self._doc_ids = sorted(self.doc_lengths)
        self._ordinal = {pid: i for i, pid in enumerate(self._doc_ids)}
        self._lengths = np.array([self.doc_lengths[p] for p in self._doc_ids], dtype=np.float64)
        self._arrays: dict[str, tuple[np.ndarray, np.ndarray]] = {}

    def idf(self, term: str) -> float:
        df = len(self.postings.get(term, ()))
        return math.log(1.0 + (self.N - df + 0.5) / (df + 0.5))

    def _term_arrays(self, term: str):
        arr = self._arrays.get(term)
        if arr is None:
            plist = self.postings.get(term, [])
            arr = (
                np.array([self._ordinal[p] for p, _ in plist], dtype=np.int64),
                np.array([tf for _, tf in plist], dtype=np.float64),
            )
            self._arrays[term] = arr
        return arr

    def term_frequency(self, term: str, passage_id: str) -> int:
        for pid, tf in self.postings.get(term, ()):
            if pid == passage_id:
                return tf
        return 0


def build_bm25_index(passages: Sequence[Passage], k1: float = 1.2, b: float = 0.75) -> Bm25Index:
    if not passages:
        raise ValueError("cannot build a BM25 index over zero passages")
    doc_lengths: dict[str, int] = {}
    postings: dict[str, list[tuple[str, int]]] = defaultdict(list)
    for p in passages:
        if p.passage_id in doc_lengths:
            raise ValueError(f"duplicate passage_id {p.passage_id!r}")
        doc_lengths[p.passage_id] = len(p.tokens)
        for term, tf in Counter(p.tokens).items():
            postings[term].append((p.passage_id, tf))
    for plist in postings.values():
        plist.sort()
    return Bm25Index(dict(postings), doc_lengths, k1, b)


def _query_terms(query_tokens: Iterable[str]) -> list[str]:
    # Unique terms in a fixed order so every scoring path sums identically.
    return sorted(set(query_tokens))


def _tf_part(tf, length, index: Bm25Index):
    k1, b = index.k1, index.b
    return tf * (k1 + 1.0) / (tf + k1 * (1.0 - b + b * length / index.avg_doc_length))


def bm25_score(index: Bm25Index, query_tokens: Sequence[str], passage_id: str) -> float:
    if passage_id not in index.doc_lengths:
        raise KeyError(f"passage {passage_id!r} is not indexed")
    length = index.doc_lengths[passage_id]
    score = 0.0
    for term in _query_terms(query_tokens):
        tf = index.term_frequency(term, passage_id)
        if tf:
            score += index.idf(term) * _tf_part(float(tf), float(length), index)
    return score


def bm25_scores(index: Bm25Index, query_tokens: Sequence[str]) -> np.ndarray:
    """Scores for every indexed passage, in sorted passage-id order."""
    scores = np.zeros(index.N, dtype=np.float64)
    for term in _query_terms(query_tokens):
        rows, tfs = index._term_arrays(term)
        if rows.size == 0:
            continue
        scores[rows] += index.idf(term) * _tf_part(tfs, index._lengths[rows], index)
    return scores


def bm25_search(index: Bm25Index, query_tokens: Sequence[str], k: int) -> list[tuple[str, float]]:
    """Top-k passages with positive score; ties go to the smaller passage id."""
    if k < 1:
        raise ValueError("k must be >= 1")
    scores = bm25_scores(index, query_tokens)
    hits = np.flatnonzero(scores > 0)
    if hits.size == 0:
        return []
    # Ordinals follow sorted passage ids, so a stable sort on -score keeps the id tie rule.
    order = hits[np.argsort(-scores[hits], kind="stable")][:k]
    return [(index._doc_ids[i], float(scores[i])) for i in order]


def mine_bm25_confounder(
    index: Bm25Index, query: QueryRecord, exclude: Optional[set] = None
) -> Optional[str]:
    """Highest-scoring passage not in `exclude` (defaults to the query's gold passages)."""
    exclude = query.gold_passages if exclude is None else exclude
    scores = bm25_scores(index, tokenize(query.text))
    hits = np.flatnonzero(scores > 0)
    for i in hits[np.argsort(-scores[hits], kind="stable")]:
        pid = index._doc_ids[i]
        if pid not in exclude:
            return pid
    return None


# --- persistence -------------------------------------------------------------


def dumps_bm25(index: Bm25Index) -> bytes:
    out = [MAGIC, struct.pack("<ddQ", index.k1, index.b, index.N)]
    for pid in index._doc_ids:
        out.append(pack_str(pid) + struct.pack("<I", index.doc_lengths[pid]))
    terms = sorted(index.postings)
    out.append(struct.pack("<Q", len(terms)))
    for term in terms:
        plist = index.postings[term]
        out.append(pack_str(term) + struct.pack("<I", len(plist)))
        flat = np.array([(index._ordinal[p], tf) for p, tf in plist], dtype="<u4")
        out.append(flat.tobytes())
    return b"".join(out)


def loads_bm25(data: bytes) -> Bm25Index:
    r = Reader(data, "bm25 index")
    r.magic(MAGIC)
    k1, b, n = r.unpack("<ddQ")
    doc_ids, doc_lengths = [], {}
    for _ in range(n):
        pid = r.string()
        (doc_lengths[pid],) = r.unpack("<I")
        doc_ids.append(pid)
    (n_terms,) = r.unpack("<Q")
    postings = {}
    for _ in range(n_terms):
        term = r.string()
        (df,) = r.unpack("<I")
        at = r.pos
        flat = np.frombuffer(r.take(8 * df), dtype="<u4").reshape(df, 2)
        if df and int(flat[:, 0].max()) >= n:
            r.fail("document ordinal out of range", at)
        postings[term] = [(doc_ids[int(o)], int(tf)) for o, tf in flat]
    r.done()
    return Bm25Index(postings, doc_lengths, k1, b)


def save_bm25(index: Bm25Index, path) -> None:
    with open(path, "wb") as fh:
        fh.write(dumps_bm25(index))


def load_bm25(path) -> Bm25Index:
    with open(path, "rb") as fh:
        return loads_bm25(fh.read())
