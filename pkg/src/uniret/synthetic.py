"""A small synthetic knowledge source with three retrieval tasks.

Every page describes one entity through a handful of relation facts
("<name> <relation> is <value> .") buried in filler text. Part of the filler
comes from a small per-page topic vocabulary, so passages of one page read
alike and differ from other pages. Pages are written as
exact `chunk_size`-token blocks, so chunking recovers the blocks and each fact
lives in exactly one passage.

Tasks (dataset id, task class):

* ``kwqa`` (qa): "what is the <relation> of <name> ?" -- lexical overlap with the gold passage.
* ``paraqa`` (qa): "which <relation synonym> does the <alias> have ?" -- the entity alias and
  the relation synonym never occur in the corpus, so only a trained model can resolve them.
* ``slot`` (slot_filling): "<Name> [SEP] <relation>" -- the page title leads the query.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .corpus import Document, QueryRecord, chunk_corpus, tokenize, write_documents, write_queries

STOPWORDS = (
    "the", "of", "a", "in", "and", "to", "was", "for", "on", "with",
    "as", "by", "at", "from", "that", "it", "an", "or", "its", "this",
)
_ONSETS = ("b", "d", "f", "g", "k", "l", "m", "n", "p", "r", "s", "t", "v", "z", "br", "dr", "kl", "st", "tr", "gr")
_VOWELS = ("a", "e", "i", "o", "u", "ai", "ou", "ei")
_CODAS = ("", "", "n", "r", "s", "l", "th", "x", "m")

TASKS = {"kwqa": "qa", "paraqa": "qa", "slot": "slot_filling"}


@dataclass
class SyntheticConfig:
    n_pages: int = 200
    passages_per_page: int = 10
    chunk_size: int = 100
    n_relations: int = 8
    values_per_relation: int = 30
    n_filler: int = 600
    topic_words: int = 12
    topic_rate: float = 0.3
    train_relations: int = 6
    mention_rate: float = 0.3
    cross_mention_rate: float = 0.1
    noise_fraction: float = 0.05
    seed: int = 0


@dataclass
class SyntheticWorld:
    documents: list[Document]
    train: list[QueryRecord]
    val: list[QueryRecord]
    config: SyntheticConfig = field(default_factory=SyntheticConfig)

    @property
    def passages(self):
        return chunk_corpus(self.documents, self.config.chunk_size)

    def save(self, directory) -> None:
        d = Path(directory)
        d.mkdir(parents=True, exist_ok=True)
        write_documents(d / "corpus.jsonl", self.documents)
        write_queries(d / "train.jsonl", self.train)
        write_queries(d / "val.jsonl", self.val)


def _pseudo_words(rng: np.random.Generator, n: int, taken: set[str]) -> list[str]:
    words = []
    while len(words) < n:
        syllables = rng.integers(2, 4)
        w = "".join(
            _ONSETS[rng.integers(len(_ONSETS))] + _VOWELS[rng.integers(len(_VOWELS))]
            for _ in range(syllables)
        ) + _CODAS[rng.integers(len(_CODAS))]
        if w not in taken:
            taken.add(w)
            words.append(w)
    return words


def _filler_sentence(rng, filler, zipf, topic, name, others, cfg) -> list[str]:
    words = []
    for _ in range(rng.integers(4, 9)):
        u = rng.random()
        if u < 0.4:
            words.append(STOPWORDS[rng.integers(len(STOPWORDS))])
        elif topic and u < 0.4 + 0.6 * cfg.topic_rate:
            words.append(topic[rng.integers(len(topic))])
        else:
            words.append(filler[min(int(np.searchsorted(zipf, rng.random())), len(filler) - 1)])
    r = rng.random()
    if r < cfg.mention_rate:
        words.insert(rng.integers(len(words) + 1), name)
    elif r < cfg.mention_rate + cfg.cross_mention_rate:
        words.insert(rng.integers(len(words) + 1), others[rng.integers(len(others))])
    return words + ["."]


def _block(rng, filler, zipf, topic, name, others, fact, cfg) -> list[str]:
    budget = cfg.chunk_size - len(fact)
    sentences, used = [], 0
    while used < budget:
        s = _filler_sentence(rng, filler, zipf, topic, name, others, cfg)
        sentences.append(s)
        used += len(s)
    tokens = [t for s in sentences for t in s][:budget]
    if fact:
        bounds = [0] + [i + 1 for i, t in enumerate(tokens) if t == "."]
        at = bounds[rng.integers(len(bounds))]
        tokens = tokens[:at] + fact + tokens[at:]
    return tokens


def generate(cfg: SyntheticConfig = SyntheticConfig()) -> SyntheticWorld:
    if cfg.n_relations > cfg.passages_per_page:
        raise ValueError("each fact needs its own passage")
    rng = np.random.default_rng(cfg.seed)
    taken = set(STOPWORDS) | {"what", "is", "which", "does", "have", "sep"}
    names = _pseudo_words(rng, cfg.n_pages, taken)
    aliases = _pseudo_words(rng, cfg.n_pages, taken)
    rel_words = _pseudo_words(rng, cfg.n_relations, taken)
    rel_synonyms = _pseudo_words(rng, cfg.n_relations, taken)
    values = [_pseudo_words(rng, cfg.values_per_relation, taken) for _ in range(cfg.n_relations)]
    filler = _pseudo_words(rng, cfg.n_filler, taken)
    topics = [_pseudo_words(rng, cfg.topic_words, taken) for _ in range(cfg.n_pages)]
    zipf = np.cumsum(1.0 / np.arange(1, cfg.n_filler + 1))
    zipf /= zipf[-1]

    documents, facts = [], []
    for e, name in enumerate(names):
        page_id = f"P{e:04d}"
        others = names[:e] + names[e + 1 :]
        where = rng.choice(cfg.passages_per_page, size=cfg.n_relations, replace=False)
        block_fact = {int(b): r for r, b in enumerate(where)}
        blocks = []
        for b in range(cfg.passages_per_page):
            fact = []
            if b in block_fact:
                r = block_fact[b]
                value = values[r][rng.integers(cfg.values_per_relation)]
                fact = [name, rel_words[r], "is", value, "."]
                facts.append((e, r, value, f"{page_id}::{b}"))
            blocks.append(_block(rng, filler, zipf, topics[e], name, others, fact, cfg))
        body = " ".join(t for blk in blocks for t in blk)
        documents.append(Document(page_id, name.capitalize(), body))

    templates = {
        "kwqa": lambda e, r: f"what is the {rel_words[r]} of {names[e]} ?",
        "paraqa": lambda e, r: f"which {rel_synonyms[r]} does the {aliases[e]} have ?",
        "slot": lambda e, r: f"{names[e].capitalize()} [SEP] {rel_words[r]}",
    }
    by_entity: dict[int, list] = {}
    for fact in facts:
        by_entity.setdefault(fact[0], []).append(fact)

    train, val = [], []
    all_passages = [f[3] for f in facts]
    for ds, task_class in TASKS.items():
        for e in range(cfg.n_pages):
            own = by_entity[e]
            order = rng.permutation(len(own))
            for rank, i in enumerate(order):
                _, r, value, pid = own[i]
                split = train if rank < cfg.train_relations else val
                split.append(
                    QueryRecord(
                        query_id=f"{ds}-{e:04d}-{r}",
                        dataset_id=ds,
                        task_class=task_class,
                        text=templates[ds](e, r),
                        gold_pages=frozenset({f"P{e:04d}"}),
                        gold_passages=frozenset({pid}),
                        answers=[value],
                        mapping_score=round(float(rng.uniform(0.6, 1.0)), 4),
                    )
                )
        # Mis-mapped training records with low mapping scores; the BLEU filter should drop them.
        n_noise = int(round(cfg.noise_fraction * cfg.n_pages * cfg.train_relations))
        for j in range(n_noise):
            e = int(rng.integers(cfg.n_pages))
            r = int(rng.integers(cfg.n_relations))
            pid = all_passages[rng.integers(len(all_passages))]
            train.append(
                QueryRecord(
                    query_id=f"{ds}-noise-{j:04d}",
                    dataset_id=ds,
                    task_class=task_class,
                    text=templates[ds](e, r),
                    gold_pages=frozenset({pid.split("::")[0]}),
                    gold_passages=frozenset({pid}),
                    answers=[values[r][0]],
                    mapping_score=round(float(rng.uniform(0.05, 0.45)), 4),
                )
            )
    return SyntheticWorld(documents, train, val, cfg)


def content_overlap(query: QueryRecord, passage_tokens) -> set[str]:
    """Non-stopword, non-punctuation tokens shared by a query and a passage."""
    q = {t for t in tokenize(query.text) if t.isalnum()} - set(STOPWORDS) - {"what", "is", "which", "does", "have", "sep"}
    return q & set(passage_tokens)
