"""Contrastive bi-encoder training: data assembly, loss, Adam, checkpoint selection."""

from __future__ import annotations

import dataclasses
import json
import logging
import math
from dataclasses import dataclass, field
from typing import Mapping, Optional, Sequence, Union

import numpy as np

from .corpus import Passage, QueryRecord
from .dense_index import embed_corpus
from .encoder import EncoderParams, init_params, passage_forward, query_forward, tower_backward
from .evaluation import MetricReport, dense_run, score_run
from .sparse import Bm25Index, mine_bm25_confounder

log = logging.getLogger(__name__)

MIN_MAPPING_SCORE = 0.5
ADAM_BETA1 = 0.9
ADAM_BETA2 = 0.999
ADAM_EPS = 1e-8


class TrainingDiverged(RuntimeError):
    def __init__(self, step: int, loss: float):
        super().__init__(f"non-finite loss {loss} at step {step}")
        self.step = step


@dataclass
class TrainConfig:
    datasets: list[str]
    caps: dict[str, Union[int, str]] = field(default_factory=dict)
    batch_size: int = 16
    epochs: int = 8
    lr: float = 1e-3
    warmup_steps: Optional[int] = None
    dropout: float = 0.1
    weight_decay: float = 0.0
    lr_scales: dict[str, float] = field(default_factory=dict)
    eval_interval: Optional[int] = None
    seed: int = 0
    variant: str = "shared"
    dim: int = 64
    vocab_size: int = 8192
    few_shot_size: Optional[int] = None
    exclude_gold_pages: bool = False
    eval_k: int = 100

    def __post_init__(self):
        if self.batch_size < 2:
            raise ValueError("batch_size must be >= 2 for in-batch negatives")
        for ds, cap in self.caps.items():
            if cap != "auto" and (not isinstance(cap, int) or cap < 1):
                raise ValueError(f"cap for {ds!r} must be a positive integer or 'auto'")

    def replace(self, **changes) -> "TrainConfig":
        return dataclasses.replace(self, **changes)

    def to_json(self) -> dict:
        return dataclasses.asdict(self)

    @classmethod
    def from_json(cls, obj: dict) -> "TrainConfig":
        known = {f.name for f in dataclasses.fields(cls)}
        unknown = sorted(set(obj) - known)
        if unknown:
            raise ValueError(f"unknown TrainConfig keys: {unknown}")
        return cls(**obj)

    @classmethod
    def load(cls, path) -> "TrainConfig":
        with open(path, encoding="utf-8") as fh:
            return cls.from_json(json.load(fh))

    def dump(self, path) -> None:
        with open(path, "w", encoding="utf-8") as fh:
            json.dump(self.to_json(), fh, indent=2, sort_keys=True)
            fh.write("\n")


def desk_profile(datasets: Sequence[str], **overrides) -> TrainConfig:
    """Settings that train the small encoder in minutes on one CPU.

    Mean pooling over long passages shrinks per-token gradients, so the embedding tables and the
    output layer get a 100x learning-rate multiplier; without it the towers barely move from init.
    """
    base = dict(epochs=20, exclude_gold_pages=True, lr_scales={"embeddings": 100.0, "w2": 100.0, "b2": 100.0})
    base.update(overrides)
    return TrainConfig(datasets=list(datasets), **base)


def full_profile(datasets: Sequence[str], **overrides) -> TrainConfig:
    """Full-scale recipe: batch 128, lr 2e-5, dropout 0.1, up to 80 epochs."""
    base = dict(batch_size=128, epochs=80, lr=2e-5, dropout=0.1, eval_interval=500, dim=128, vocab_size=10_000)
    base.update(overrides)
    return TrainConfig(datasets=list(datasets), **base)


PROFILES = {"desk": desk_profile, "full": full_profile}


@dataclass
class TrainingExample:
    query: QueryRecord
    positive: str
    hard_confounders: list[str] = field(default_factory=list)

    def __post_init__(self):
        if self.positive not in self.query.gold_passages:
            raise ValueError(f"{self.query.query_id}: positive is not a gold passage")
        if set(self.hard_confounders) & self.query.gold_passages:
            raise ValueError(f"{self.query.query_id}: a hard confounder is gold")


# --- training sets ---------------------------------------------------------------


def filter_mapped(queries: Sequence[QueryRecord], threshold: float = MIN_MAPPING_SCORE) -> list[QueryRecord]:
    """Drop records whose provenance mapping is likely noise, or that have no gold passage."""
    return [
        q for q in queries
        if q.gold_passages and (q.mapping_score is None or q.mapping_score >= threshold)
    ]


def resolve_caps(sizes: Mapping[str, int], caps: Mapping[str, Union[int, str]]) -> dict[str, int]:
    """'auto' caps resolve to the size of the largest dataset without a cap."""
    uncapped = [n for ds, n in sizes.items() if ds not in caps]
    auto = max(uncapped) if uncapped else None
    out = {}
    for ds, cap in caps.items():
        if cap == "auto":
            if auto is None:
                raise ValueError("an 'auto' cap needs at least one uncapped dataset")
            cap = auto
        out[ds] = int(cap)
    return out


def downsample(
    queries: Sequence[QueryRecord], caps: Mapping[str, Union[int, str]], seed: int,
    datasets: Optional[Sequence[str]] = None,
) -> dict[str, list[QueryRecord]]:
    groups: dict[str, list[QueryRecord]] = {}
    for q in queries:
        groups.setdefault(q.dataset_id, []).append(q)
    datasets = list(datasets) if datasets is not None else list(groups)
    for ds in datasets:
        if not groups.get(ds):
            raise ValueError(f"dataset {ds!r} has no usable training queries")
    sizes = {ds: len(groups[ds]) for ds in datasets}
    caps = resolve_caps(sizes, {ds: c for ds, c in caps.items() if ds in sizes})
    out = {}
    for i, ds in enumerate(datasets):
        items = groups[ds]
        cap = caps.get(ds)
        if cap is not None and len(items) > cap:
            rng = np.random.default_rng([seed, i])
            keep = np.sort(rng.choice(len(items), size=cap, replace=False))
            items = [items[j] for j in keep]
        out[ds] = items
    return out


def build_training_set(
    queries: Sequence[QueryRecord],
    bm25: Bm25Index,
    caps: Optional[Mapping[str, Union[int, str]]] = None,
    seed: int = 0,
    datasets: Optional[Sequence[str]] = None,
    exclude_gold_pages: bool = False,
) -> list[TrainingExample]:
    """One example per retained query with its top BM25 non-gold passage as hard confounder."""
    groups = downsample(filter_mapped(queries), caps or {}, seed, datasets)
    examples = []
    for items in groups.values():
        for q in items:
            exclude = set(q.gold_passages)
            if exclude_gold_pages:
                exclude |= {pid for pid in bm25.doc_lengths if pid.rsplit("::", 1)[0] in q.gold_pages}
            hard = mine_bm25_confounder(bm25, q, exclude)
            examples.append(TrainingExample(q, min(q.gold_passages), [hard] if hard else []))
    return examples


def sample_few_shot(queries: Sequence[QueryRecord], n: int, seed: int) -> list[QueryRecord]:
    """Uniform sample of n records without replacement, original order preserved."""
    if n > len(queries):
        raise ValueError(f"asked for {n} examples but only {len(queries)} are available")
    keep = np.sort(np.random.default_rng(seed).choice(len(queries), size=n, replace=False))
    return [queries[i] for i in keep]


def make_leave_one_out_plan(config: TrainConfig, held_out: str) -> TrainConfig:
    if held_out not in config.datasets:
        raise ValueError(f"held-out dataset {held_out!r} is not in {config.datasets}")
    return config.replace(
        datasets=[d for d in config.datasets if d != held_out],
        caps={d: c for d, c in config.caps.items() if d != held_out},
    )


# --- batches -------------------------------------------------------------------------


@dataclass
class Batch:
    query_texts: list[str]
    task_classes: list[str]
    candidate_ids: list[str]
    candidate_texts: list[str]
    positive_index: np.ndarray
    queries: Optional[np.ndarray] = None
    candidates: Optional[np.ndarray] = None

    @property
    def size(self) -> int:
        return len(self.query_texts)


def _conflicts(ex: TrainingExample, golds: set, candidates: set) -> bool:
    own = {ex.positive, *ex.hard_confounders}
    return bool(ex.query.gold_passages & candidates or own & golds)


def make_batches(examples: Sequence[TrainingExample], batch_size: int, rng: np.random.Generator) -> list[list[int]]:
    """Shuffle and cut into batches where no query's gold passage appears as another's candidate.

    A colliding example is deferred to a later batch (resampled within the epoch).
    A trailing batch of one is dropped.
    """
    pending = list(rng.permutation(len(examples)))
    batches = []
    while pending:
        batch, golds, cands, deferred = [], set(), set(), []
        for i in pending:
            if len(batch) == batch_size:
                deferred.append(i)
                continue
            ex = examples[i]
            if _conflicts(ex, golds, cands):
                deferred.append(i)
                continue
            batch.append(i)
            golds |= ex.query.gold_passages
            cands |= {ex.positive, *ex.hard_confounders}
        if len(batch) < 2:
            break
        batches.append(batch)
        pending = deferred
    return batches


def assemble_batch(
    examples: Sequence[TrainingExample],
    passages: Mapping[str, Passage],
    params: Optional[EncoderParams] = None,
) -> Batch:
    """Candidates are the B positives followed by every hard confounder in the batch."""
    if len(examples) < 2:
        raise ValueError("a batch needs at least 2 examples")
    golds, cands = set(), set()
    for ex in examples:
        if _conflicts(ex, golds, cands):
            raise ValueError(f"{ex.query.query_id}: gold passage collides with another candidate")
        golds |= ex.query.gold_passages
        cands |= {ex.positive, *ex.hard_confounders}
    ids = [ex.positive for ex in examples] + [h for ex in examples for h in ex.hard_confounders]
    batch = Batch(
        query_texts=[ex.query.text for ex in examples],
        task_classes=[ex.query.task_class for ex in examples],
        candidate_ids=ids,
        candidate_texts=[passages[i].text for i in ids],
        positive_index=np.arange(len(examples)),
    )
    if params is not None:
        batch.queries = query_forward(params, batch.query_texts, batch.task_classes)[0]
        batch.candidates = passage_forward(params, batch.candidate_texts)[0]
    return batch


# --- loss ----------------------------------------------------------------------------


def softmax_nll(scores: np.ndarray, positive: int) -> tuple[float, np.ndarray]:
    """-log softmax(scores)[positive] and its gradient softmax - onehot."""
    scores = np.asarray(scores, dtype=np.float64)
    if not np.all(np.isfinite(scores)):
        raise FloatingPointError("non-finite similarity score")
    shifted = scores - scores.max()
    z = np.exp(shifted)
    total = z.sum()
    loss = math.log(total) - shifted[positive]
    grad = z / total
    grad[positive] -= 1.0
    return float(loss), grad


def batch_nll(S: np.ndarray, positive_index: np.ndarray) -> tuple[float, np.ndarray]:
    """Mean NLL over the rows of a score matrix, and d(mean)/dS."""
    if not np.all(np.isfinite(S)):
        raise FloatingPointError("non-finite similarity score")
    shifted = S - S.max(axis=1, keepdims=True)
    z = np.exp(shifted)
    total = z.sum(axis=1)
    rows = np.arange(S.shape[0])
    losses = np.log(total) - shifted[rows, positive_index]
    dS = z / total[:, None]
    dS[rows, positive_index] -= 1.0
    B = S.shape[0]
    return float(losses.mean()), dS / B


def contrastive_loss_and_grads(
    batch: Batch,
    params: EncoderParams,
    dropout: float = 0.0,
    rng: Optional[np.random.Generator] = None,
) -> tuple[float, dict[str, np.ndarray]]:
    Q, q_caches = query_forward(params, batch.query_texts, batch.task_classes, dropout, rng)
    P, p_cache = passage_forward(params, batch.candidate_texts, dropout, rng)
    S = Q @ P.T
    loss, dS = batch_nll(S, batch.positive_index)
    dQ = dS @ P
    dP = dS.T @ Q
    grads = params.zeros_like()
    for rows, cache in q_caches:
        tower_backward(params, cache, dQ[rows], grads)
    tower_backward(params, p_cache, dP, grads)
    return loss, grads


# --- optimizer -----------------------------------------------------------------------


def learning_rate(step: int, base: float, warmup: int, total: int) -> float:
    """base * min(t / warmup, (T - t) / (T - warmup)), clamped at 0."""
    up = step / warmup if warmup > 0 else math.inf
    down = (total - step) / (total - warmup) if total > warmup else math.inf
    factor = min(up, down)
    if math.isinf(factor):
        factor = 1.0
    return base * max(0.0, factor)


@dataclass
class AdamState:
    m: dict[str, np.ndarray]
    v: dict[str, np.ndarray]
    step: int = 0

    @classmethod
    def zeros(cls, params: EncoderParams) -> "AdamState":
        return cls(params.zeros_like(), params.zeros_like(), 0)


def optimizer_step(
    params: EncoderParams,
    grads: Mapping[str, np.ndarray],
    state: AdamState,
    step: int,
    lr: float,
    beta1: float = ADAM_BETA1,
    beta2: float = ADAM_BETA2,
    eps: float = ADAM_EPS,
    weight_decay: float = 0.0,
    lr_scales: Optional[Mapping[str, float]] = None,
) -> None:
    """One Adam update in place; `step` is 1-based and `lr` already scheduled.

    Weight decay is decoupled from the moment estimates (AdamW style) and scaled by `lr`.
    """
    if set(grads) != set(params.tensors):
        raise ValueError("gradient tensors do not match parameters")
    c1 = 1.0 - beta1**step
    c2 = 1.0 - beta2**step
    for name, g in grads.items():
        m, v = state.m[name], state.v[name]
        if m.shape != g.shape:
            raise ValueError(f"optimizer state shape mismatch for {name}")
        m *= beta1
        m += (1.0 - beta1) * g
        v *= beta2
        v += (1.0 - beta2) * np.square(g)
        rate = lr * (lr_scales or {}).get(name.rsplit(".", 1)[1], 1.0)
        if rate:
            p = params.tensors[name]
            if weight_decay:
                p -= rate * weight_decay * p
            # rate * (m / c1) / (sqrt(v / c2) + eps), computed in place to limit temporaries.
            denom = np.divide(v, c2)
            np.sqrt(denom, out=denom)
            denom += eps
            step_ = np.divide(m, c1)
            step_ /= denom
            step_ *= rate
            p -= step_
    state.step = step


# --- training loop -------------------------------------------------------------------


@dataclass
class TrainResult:
    params: EncoderParams
    best_step: int
    log: list[dict]
    final_params: EncoderParams
    examples: list[TrainingExample] = field(repr=False, default_factory=list)


def validation_report(
    params: EncoderParams,
    passages: Sequence[Passage],
    val_queries: Sequence[QueryRecord],
    k: int = 100,
) -> MetricReport:
    index = embed_corpus(params, passages)
    return score_run(dense_run(params, index, val_queries, k), val_queries)


def train(
    config: TrainConfig,
    passages: Sequence[Passage],
    train_queries: Sequence[QueryRecord],
    val_queries: Sequence[QueryRecord],
    bm25: Optional[Bm25Index] = None,
    params: Optional[EncoderParams] = None,
    examples: Optional[Sequence[TrainingExample]] = None,
) -> TrainResult:
    """Train and keep the checkpoint with the best macro page-level validation R-precision.

    The starting point (step 0) is evaluated too, so the selected checkpoint is never
    worse on validation than the one training started from.
    """
    by_id = {p.passage_id: p for p in passages}
    if examples is None:
        if bm25 is None:
            raise ValueError("need a BM25 index to mine hard confounders")
        examples = build_training_set(
            [q for q in train_queries if q.dataset_id in config.datasets], bm25, config.caps, config.seed,
            config.datasets, config.exclude_gold_pages,
        )
    examples = list(examples)
    val = [q for q in val_queries if q.dataset_id in config.datasets]
    if not val:
        raise ValueError("no validation queries for the configured datasets")
    params = init_params(config.variant, config.dim, config.vocab_size, config.seed) if params is None else params.copy()

    shuffle_seed, dropout_seed = np.random.SeedSequence(config.seed).spawn(2)
    shuffle_rng = np.random.default_rng(shuffle_seed)
    dropout_rng = np.random.default_rng(dropout_seed)
    plan = [make_batches(examples, config.batch_size, shuffle_rng) for _ in range(config.epochs)]
    total = sum(len(b) for b in plan)
    warmup = config.warmup_steps if config.warmup_steps is not None else int(round(0.1 * total))
    interval = config.eval_interval or max(1, len(plan[0]) if plan else 1)

    records: list[dict] = []
    best = {"score": -1.0, "step": 0, "params": params.copy()}

    def evaluate(step: int, loss: Optional[float]):
        report = validation_report(params, passages, val, config.eval_k)
        score = report.macro_page
        records.append(
            {
                "step": step,
                "loss": loss,
                "rprec": {
                    ds: {"page": m.page_rprec, "passage": m.passage_rprec}
                    for ds, m in sorted(report.datasets.items())
                },
                "macro_page": score,
                "selected": False,
            }
        )
        log.info("step %d loss %s macro page R-prec %.4f", step, loss, score)
        if score > best["score"]:
            best.update(score=score, step=step, params=params.copy())

    evaluate(0, None)
    state = AdamState.zeros(params)
    step, window = 0, []
    for epoch_batches in plan:
        for idx in epoch_batches:
            step += 1
            batch = assemble_batch([examples[i] for i in idx], by_id)
            loss, grads = contrastive_loss_and_grads(batch, params, config.dropout, dropout_rng)
            if not math.isfinite(loss):
                raise TrainingDiverged(step, loss)
            optimizer_step(
                params, grads, state, step, learning_rate(step, config.lr, warmup, total),
                weight_decay=config.weight_decay, lr_scales=config.lr_scales,
            )
            window.append(loss)
            if step % interval == 0 or step == total:
                evaluate(step, float(np.mean(window)))
                window = []
    for rec in records:
        rec["selected"] = rec["step"] == best["step"]
    return TrainResult(best["params"], best["step"], records, params, examples)


def finetune(
    params: EncoderParams,
    few_shot_queries: Sequence[QueryRecord],
    config: TrainConfig,
    passages: Sequence[Passage],
    val_queries: Sequence[QueryRecord],
    bm25: Bm25Index,
) -> TrainResult:
    """Continue training `params` on a few-shot set only, with the same loss and optimizer."""
    if not few_shot_queries:
        raise ValueError("few-shot set is empty")
    if config.few_shot_size is not None and len(few_shot_queries) != config.few_shot_size:
        raise ValueError(f"expected {config.few_shot_size} few-shot examples, got {len(few_shot_queries)}")
    datasets = sorted({q.dataset_id for q in few_shot_queries})
    config = config.replace(datasets=datasets, caps={})
    examples = build_training_set(
        few_shot_queries, bm25, seed=config.seed, datasets=datasets, exclude_gold_pages=config.exclude_gold_pages
    )
    return train(config, passages, [], val_queries, params=params, examples=examples)


def write_log(records: Sequence[dict], path) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        for rec in records:
            fh.write(json.dumps(rec, sort_keys=True) + "\n")
