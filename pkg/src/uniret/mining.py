"""Adversarial confounder mining: a trained retriever picks its own hard negatives for a second round."""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from typing import Mapping, Optional, Sequence

import numpy as np

from .corpus import Passage, QueryRecord, tokenize
from .dense_index import FlatIndex, embed_corpus, inner_products
from .encoder import EncoderParams, encode_queries
from .sparse import Bm25Index
from .trainer import TrainConfig, TrainingExample, TrainResult, build_training_set, train

ANSWER_BEARING_CLASSES = ("qa",)


def _contains(tokens: Sequence[str], needle: Sequence[str]) -> bool:
    n = len(needle)
    if n == 0:
        return False
    first = needle[0]
    for i in range(len(tokens) - n + 1):
        if tokens[i] == first and tuple(tokens[i : i + n]) == tuple(needle):
            return True
    return False


def answer_present(passage: Passage, answers: Sequence[str]) -> bool:
    """True iff some answer, tokenized like the corpus, occurs as a contiguous token run."""
    if not answers:
        raise ValueError("answers must be non-empty")
    return any(_contains(passage.tokens, tokenize(a)) for a in answers)


@dataclass
class MinedConfounderSet:
    mined: dict[str, list[str]]
    round: int = 2
    model_id: str = "round1"

    def __len__(self) -> int:
        return sum(len(v) for v in self.mined.values())

    def violations(self, queries: Sequence[QueryRecord], passages: Mapping[str, Passage]) -> list[str]:
        """Re-check both exclusion predicates by brute force; returns a description per violation."""
        by_id = {q.query_id: q for q in queries}
        problems = []
        for qid, pids in sorted(self.mined.items()):
            q = by_id[qid]
            for pid in pids:
                p = passages[pid]
                if pid in q.gold_passages or p.page_id in q.gold_pages:
                    problems.append(f"{qid}: {pid} is gold")
                if q.answers and answer_present(p, q.answers):
                    problems.append(f"{qid}: {pid} contains an answer")
        return problems

    def dumps(self) -> str:
        return "".join(
            json.dumps({"query_id": qid, "mined": pids, "round": self.round, "model_id": self.model_id}, sort_keys=True)
            + "\n"
            for qid, pids in sorted(self.mined.items())
        )

    def save(self, path) -> None:
        with open(path, "w", encoding="utf-8") as fh:
            fh.write(self.dumps())

    @classmethod
    def loads(cls, text: str) -> "MinedConfounderSet":
        mined, rounds, models = {}, set(), set()
        for lineno, line in enumerate(text.splitlines(), 1):
            if not line.strip():
                continue
            try:
                obj = json.loads(line)
                mined[obj["query_id"]] = list(obj["mined"])
                rounds.add(obj["round"])
                models.add(obj["model_id"])
            except (json.JSONDecodeError, KeyError, TypeError) as exc:
                raise ValueError(f"line {lineno}: malformed mined-confounder record ({exc})") from None
        if len(rounds) > 1 or len(models) > 1:
            raise ValueError("mixed rounds or models in one mined-confounder file")
        return cls(mined, rounds.pop() if rounds else 2, models.pop() if models else "round1")

    @classmethod
    def load(cls, path) -> "MinedConfounderSet":
        with open(path, encoding="utf-8") as fh:
            return cls.loads(fh.read())


def _excluded(q: QueryRecord, p: Passage, page_granularity: bool) -> bool:
    if p.passage_id in q.gold_passages:
        return True
    if page_granularity and p.page_id in q.gold_pages:
        return True
    return bool(q.answers) and answer_present(p, q.answers)


def _mine_from_scores(
    index: FlatIndex, scores: np.ndarray, q: QueryRecord, m: int,
    passages: Mapping[str, Passage], page_granularity: bool,
) -> list[str]:
    order = np.lexsort((index._rank, -scores))
    out = []
    for i in order:
        pid = index.ids[i]
        if not _excluded(q, passages[pid], page_granularity):
            out.append(pid)
            if len(out) == m:
                break
    return out


def mine_adversarial_confounders(
    params: EncoderParams,
    index: FlatIndex,
    query: QueryRecord,
    m: int,
    passages: Mapping[str, Passage],
    page_granularity: bool = True,
) -> list[str]:
    """Up to `m` top-ranked passages that are neither gold (page or passage) nor answer-bearing."""
    if m < 1:
        return []
    q = encode_queries(params, [query.text], [query.task_class])[0]
    return _mine_from_scores(index, inner_products(index.vectors, q), query, m, passages, page_granularity)


def mine_confounder_set(
    params: EncoderParams,
    index: FlatIndex,
    queries: Sequence[QueryRecord],
    m: int,
    passages: Mapping[str, Passage],
    page_granularity: bool = True,
    model_id: str = "round1",
    round: int = 2,
) -> MinedConfounderSet:
    mined = {}
    if queries:
        Q = encode_queries(params, [q.text for q in queries], [q.task_class for q in queries])
        S = inner_products(index.vectors, Q)
        for q, s in zip(queries, S):
            mined[q.query_id] = _mine_from_scores(index, s, q, m, passages, page_granularity)
    return MinedConfounderSet(mined, round, model_id)


def augment_examples(examples: Sequence[TrainingExample], mined: MinedConfounderSet) -> list[TrainingExample]:
    """Append mined confounders to each example's list; existing confounders are kept first."""
    out = []
    for ex in examples:
        extra = [p for p in mined.mined.get(ex.query.query_id, []) if p not in ex.hard_confounders]
        out.append(TrainingExample(ex.query, ex.positive, list(ex.hard_confounders) + extra))
    return out


@dataclass
class AdversarialRound:
    result: TrainResult
    mined: MinedConfounderSet
    round1_examples: list[TrainingExample] = field(repr=False)
    round2_examples: list[TrainingExample] = field(repr=False)


def adversarial_round(
    config: TrainConfig,
    round1_params: EncoderParams,
    passages: Sequence[Passage],
    train_queries: Sequence[QueryRecord],
    val_queries: Sequence[QueryRecord],
    bm25: Bm25Index,
    mine_datasets: Optional[Sequence[str]] = None,
    m: int = 1,
    page_granularity: bool = True,
    from_scratch: bool = True,
    model_id: str = "round1",
) -> AdversarialRound:
    """Mine with the round-1 model, add the confounders to the round-1 training set, retrain.

    `mine_datasets` defaults to the answer-bearing (qa) datasets of the run.
    """
    by_id = {p.passage_id: p for p in passages}
    round1 = build_training_set(
        [q for q in train_queries if q.dataset_id in config.datasets], bm25, config.caps, config.seed,
        config.datasets, config.exclude_gold_pages,
    )
    if mine_datasets is None:
        mine_datasets = sorted({ex.query.dataset_id for ex in round1 if ex.query.task_class in ANSWER_BEARING_CLASSES})
    unknown = set(mine_datasets) - set(config.datasets)
    if unknown:
        raise ValueError(f"cannot mine for datasets outside the run: {sorted(unknown)}")
    targets = [ex.query for ex in round1 if ex.query.dataset_id in mine_datasets]
    index = embed_corpus(round1_params, passages)
    mined = mine_confounder_set(round1_params, index, targets, m, by_id, page_granularity, model_id)
    if len(mined) == 0:
        raise ValueError("mining produced no confounders for any query")
    round2 = augment_examples(round1, mined)
    start = None if from_scratch else round1_params
    result = train(config, passages, [], val_queries, params=start, examples=round2)
    return AdversarialRound(result, mined, round1, round2)
