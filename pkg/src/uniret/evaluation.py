"""R-precision at page and passage level, metric reports and comparison tables."""

from __future__ import annotations

import csv
import io
import json
import logging
from dataclasses import dataclass, field
from typing import Mapping, Optional, Sequence

import numpy as np

from .corpus import QueryRecord, page_of_passage_id, tokenize
from .dense_index import FlatIndex, IvfIndex, mips_search_flat_batch, mips_search_ivf
from .encoder import EncoderParams, encode_queries
from .sparse import Bm25Index, bm25_search

log = logging.getLogger(__name__)

LEVELS = ("page", "passage")


@dataclass
class RetrievalRun:
    rankings: dict[str, list[tuple[str, float]]]
    model_id: str = "model"
    corpus_id: str = "corpus"

    def validate(self) -> None:
        for qid, ranked in self.rankings.items():
            ids = [p for p, _ in ranked]
            if len(set(ids)) != len(ids):
                raise ValueError(f"query {qid}: duplicate passage ids in ranking")
            keys = [(-s, p) for p, s in ranked]
            if keys != sorted(keys):
                raise ValueError(f"query {qid}: ranking not ordered by (score desc, id asc)")


def rank_to_pages(ranked: Sequence[str], page_of: Optional[Mapping[str, str]] = None) -> list[str]:
    """Map ranked passage ids to their pages, keeping the first occurrence of each page."""
    seen, pages = set(), []
    for pid in ranked:
        if page_of is None:
            page = page_of_passage_id(pid)
        else:
            try:
                page = page_of[pid]
            except KeyError:
                raise KeyError(f"unknown passage id {pid!r}") from None
        if page not in seen:
            seen.add(page)
            pages.append(page)
    return pages


def r_precision(ranked: Sequence[str], gold) -> float:
    """|top-R intersect gold| / R with R = |gold|."""
    gold = set(gold)
    if not gold:
        raise ValueError("R-precision is undefined for an empty gold set")
    R = len(gold)
    return sum(1 for x in ranked[:R] if x in gold) / R


@dataclass
class DatasetMetrics:
    page_rprec: float
    passage_rprec: float
    n_queries: int
    per_query: dict[str, tuple[float, float]] = field(default_factory=dict)


@dataclass
class MetricReport:
    datasets: dict[str, DatasetMetrics]
    model_id: str = "model"

    @property
    def macro_page(self) -> float:
        return float(np.mean([d.page_rprec for d in self.datasets.values()])) if self.datasets else 0.0

    @property
    def macro_passage(self) -> float:
        return float(np.mean([d.passage_rprec for d in self.datasets.values()])) if self.datasets else 0.0

    def value(self, dataset: str, level: str) -> float:
        d = self.datasets[dataset]
        return d.page_rprec if level == "page" else d.passage_rprec

    def to_json(self) -> dict:
        return {
            "model_id": self.model_id,
            "macro": {"page_rprec": self.macro_page, "passage_rprec": self.macro_passage},
            "datasets": {
                ds: {
                    "page_rprec": m.page_rprec,
                    "passage_rprec": m.passage_rprec,
                    "n_queries": m.n_queries,
                    "per_query": {q: list(v) for q, v in sorted(m.per_query.items())},
                }
                for ds, m in sorted(self.datasets.items())
            },
        }

    @classmethod
    def from_json(cls, obj: dict) -> "MetricReport":
        datasets = {
            ds: DatasetMetrics(
                m["page_rprec"],
                m["passage_rprec"],
                m["n_queries"],
                {q: tuple(v) for q, v in m.get("per_query", {}).items()},
            )
            for ds, m in obj["datasets"].items()
        }
        return cls(datasets, obj.get("model_id", "model"))

    def dump(self, path) -> None:
        with open(path, "w", encoding="utf-8") as fh:
            json.dump(self.to_json(), fh, indent=2, sort_keys=True)
            fh.write("\n")

    @classmethod
    def load(cls, path) -> "MetricReport":
        with open(path, encoding="utf-8") as fh:
            return cls.from_json(json.load(fh))


def score_run(
    run: RetrievalRun,
    queries: Sequence[QueryRecord],
    page_of: Optional[Mapping[str, str]] = None,
    known_passages: Optional[set] = None,
) -> MetricReport:
    per_ds: dict[str, dict[str, tuple[float, float]]] = {}
    for q in queries:
        ranked = [p for p, _ in run.rankings.get(q.query_id, [])]
        if known_passages is not None and not q.gold_passages <= known_passages:
            log.warning("query %s: gold passages missing from the corpus, scored as a miss", q.query_id)
        page = r_precision(rank_to_pages(ranked, page_of), q.gold_pages)
        passage = r_precision(ranked, q.gold_passages)
        per_ds.setdefault(q.dataset_id, {})[q.query_id] = (page, passage)
    datasets = {
        ds: DatasetMetrics(
            float(np.mean([v[0] for v in vals.values()])),
            float(np.mean([v[1] for v in vals.values()])),
            len(vals),
            vals,
        )
        for ds, vals in per_ds.items()
    }
    return MetricReport(datasets, run.model_id)


def dense_run(
    params: EncoderParams,
    index,
    queries: Sequence[QueryRecord],
    k: int = 100,
    model_id: str = "dense",
) -> RetrievalRun:
    Q = encode_queries(params, [q.text for q in queries], [q.task_class for q in queries])
    if isinstance(index, IvfIndex):
        ranked = [mips_search_ivf(index, v, k) for v in Q]
    else:
        ranked = mips_search_flat_batch(index, Q, k)
    return RetrievalRun({q.query_id: r for q, r in zip(queries, ranked)}, model_id)


def bm25_run(index: Bm25Index, queries: Sequence[QueryRecord], k: int = 100) -> RetrievalRun:
    return RetrievalRun({q.query_id: bm25_search(index, tokenize(q.text), k) for q in queries}, "bm25")


def evaluate_model(
    params: Optional[EncoderParams],
    index,
    queries: Sequence[QueryRecord],
    k: int = 100,
    model_id: Optional[str] = None,
) -> MetricReport:
    """Retrieve with a dense model (or BM25 when `index` is a Bm25Index) and score both levels."""
    max_r = max((max(len(q.gold_pages), len(q.gold_passages)) for q in queries), default=1)
    if k < max_r:
        raise ValueError(f"k={k} is below the largest gold set size {max_r}")
    if isinstance(index, Bm25Index):
        run = bm25_run(index, queries, k)
        known = set(index.doc_lengths)
    else:
        if params is None:
            raise ValueError("dense evaluation needs encoder params")
        run = dense_run(params, index, queries, k)
        known = set((index.base if isinstance(index, IvfIndex) else index).ids)
    if model_id:
        run.model_id = model_id
    return score_run(run, queries, known_passages=known)


# --- comparison tables ------------------------------------------------------------


@dataclass
class ComparisonTable:
    columns: list[tuple[str, str]]
    rows: list[str]
    values: np.ndarray
    marks: list[list[str]]

    def to_text(self, precision: int = 2) -> str:
        header = ["model"] + [f"{ds}/{lvl}" for ds, lvl in self.columns]
        body = []
        for i, name in enumerate(self.rows):
            cells = [name]
            for j in range(len(self.columns)):
                v = f"{100 * self.values[i, j]:.{precision}f}"
                mark = self.marks[i][j]
                cells.append(f"**{v}**" if mark == "best" else f"_{v}_" if mark == "second" else v)
            body.append(cells)
        widths = [max(len(r[c]) for r in [header] + body) for c in range(len(header))]
        lines = ["  ".join(cell.ljust(w) for cell, w in zip(r, widths)).rstrip() for r in [header] + body]
        return "\n".join(lines) + "\n"

    def to_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["model"] + [f"{ds}/{lvl}" for ds, lvl in self.columns])
        for i, name in enumerate(self.rows):
            w.writerow([name] + [repr(float(v)) for v in self.values[i]])
        return buf.getvalue()


def compare_runs(reports: Mapping[str, MetricReport], levels: Sequence[str] = LEVELS) -> ComparisonTable:
    """Align reports column-by-column; mark best and second-best per column when there are >= 2 rows."""
    if not reports:
        raise ValueError("nothing to compare")
    names = list(reports)
    ref = set(reports[names[0]].datasets)
    for n in names[1:]:
        other = set(reports[n].datasets)
        if other != ref:
            raise ValueError(
                f"dataset mismatch between {names[0]!r} and {n!r}: "
                f"only in first {sorted(ref - other)}, only in second {sorted(other - ref)}"
            )
    columns = [(ds, lvl) for ds in sorted(ref) for lvl in levels]
    values = np.array([[reports[n].value(ds, lvl) for ds, lvl in columns] for n in names]).reshape(len(names), len(columns))
    marks = [["" for _ in columns] for _ in names]
    if len(names) >= 2:
        for j in range(len(columns)):
            distinct = sorted(set(values[:, j].tolist()), reverse=True)
            for i in range(len(names)):
                if values[i, j] == distinct[0]:
                    marks[i][j] = "best"
                elif len(distinct) > 1 and values[i, j] == distinct[1]:
                    marks[i][j] = "second"
    return ComparisonTable(columns, names, values, marks)
