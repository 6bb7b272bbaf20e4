"""Declarative experiment recipes run end to end on a corpus with train/val query splits.

Four kinds are supported:

* ``multitask``: BM25, one single-task model per dataset, one multi-task model.
* ``zero_few_shot``: a leave-one-out model scored zero-shot on the held-out dataset, then
  fine-tuned on few-shot samples; a from-scratch model fine-tuned on the same samples.
* ``variants``: one multi-task model per parameter-sharing variant.
* ``adversarial``: a round-1 model, then a round-2 model retrained with mined confounders.

Every row is scored on the same validation queries so reports line up in one table.
"""

from __future__ import annotations

import dataclasses
import json
import logging
import time
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional, Sequence

from .corpus import Passage, QueryRecord, chunk_corpus, load_jsonl
from .encoder import VARIANTS, init_params, save_params
from .evaluation import ComparisonTable, MetricReport, compare_runs, evaluate_model, score_run
from .dense_index import embed_corpus
from .mining import adversarial_round
from .sparse import Bm25Index, build_bm25_index
from .synthetic import SyntheticConfig, generate
from .trainer import (
    PROFILES,
    TrainConfig,
    TrainResult,
    filter_mapped,
    finetune,
    make_leave_one_out_plan,
    sample_few_shot,
    train,
    write_log,
)

log = logging.getLogger(__name__)

KINDS = ("multitask", "zero_few_shot", "variants", "adversarial")


@dataclass
class ExperimentSpec:
    name: str
    kind: str
    datasets: list[str]
    profile: str = "desk"
    train: dict = field(default_factory=dict)
    synthetic: dict = field(default_factory=dict)
    data_dir: Optional[str] = None
    seeds: list[int] = field(default_factory=lambda: [0])
    held_out: Optional[str] = None
    few_shot_sizes: list[int] = field(default_factory=lambda: [128, 1024])
    finetune: dict = field(default_factory=dict)
    variants: list[str] = field(default_factory=lambda: list(VARIANTS))
    mine_datasets: Optional[list[str]] = None
    mined_per_query: int = 1
    from_scratch: bool = True
    save_checkpoints: bool = True

    def __post_init__(self):
        if self.kind not in KINDS:
            raise ValueError(f"unknown experiment kind {self.kind!r}; expected one of {KINDS}")
        if self.profile not in PROFILES:
            raise ValueError(f"unknown profile {self.profile!r}")
        if self.kind == "zero_few_shot" and self.held_out not in self.datasets:
            raise ValueError("zero_few_shot needs held_out to be one of the datasets")
        bad = set(self.variants) - set(VARIANTS)
        if bad:
            raise ValueError(f"unknown variants {sorted(bad)}")

    @classmethod
    def from_json(cls, obj: dict) -> "ExperimentSpec":
        known = {f.name for f in dataclasses.fields(cls)}
        unknown = sorted(set(obj) - known)
        if unknown:
            raise ValueError(f"unknown experiment keys: {unknown}")
        return cls(**obj)

    @classmethod
    def load(cls, path) -> "ExperimentSpec":
        with open(path, encoding="utf-8") as fh:
            return cls.from_json(json.load(fh))

    def train_config(self, datasets: Sequence[str], seed: int, **extra) -> TrainConfig:
        overrides = {**self.train, **extra, "seed": seed}
        return PROFILES[self.profile](datasets, **overrides)


@dataclass
class Workspace:
    passages: list[Passage]
    train: list[QueryRecord]
    val: list[QueryRecord]
    bm25: Bm25Index

    @classmethod
    def build(cls, spec: ExperimentSpec) -> "Workspace":
        if spec.data_dir:
            d = Path(spec.data_dir)
            passages = chunk_corpus(load_jsonl(d / "corpus.jsonl", "corpus"))
            train_q = load_jsonl(d / "train.jsonl", "queries")
            val_q = load_jsonl(d / "val.jsonl", "queries")
        else:
            world = generate(SyntheticConfig(**spec.synthetic))
            passages, train_q, val_q = world.passages, world.train, world.val
        return cls(passages, train_q, val_q, build_bm25_index(passages))

    def val_for(self, datasets: Sequence[str]) -> list[QueryRecord]:
        return [q for q in self.val if q.dataset_id in datasets]

    def train_for(self, datasets: Sequence[str]) -> list[QueryRecord]:
        return [q for q in self.train if q.dataset_id in datasets]


@dataclass
class ExperimentResult:
    spec: ExperimentSpec
    seed: int
    reports: dict[str, MetricReport]
    runs: dict[str, TrainResult] = field(default_factory=dict, repr=False)
    extras: dict = field(default_factory=dict)
    seconds: float = 0.0

    def table(self) -> ComparisonTable:
        return compare_runs(self.reports)

    def write(self, out_dir) -> Path:
        root = Path(out_dir) / self.spec.name / f"seed{self.seed}"
        (root / "reports").mkdir(parents=True, exist_ok=True)
        for row, report in self.reports.items():
            report.dump(root / "reports" / f"{_slug(row)}.json")
        table = self.table()
        (root / "table.txt").write_text(table.to_text(), encoding="utf-8")
        (root / "table.csv").write_text(table.to_csv(), encoding="utf-8")
        for row, res in self.runs.items():
            write_log(res.log, root / f"{_slug(row)}.log.jsonl")
            if self.spec.save_checkpoints:
                save_params(res.params, root / f"{_slug(row)}.uenc")
        summary = {
            "experiment": self.spec.name,
            "kind": self.spec.kind,
            "seed": self.seed,
            "rows": {
                row: {"macro_page": r.macro_page, "macro_passage": r.macro_passage}
                for row, r in self.reports.items()
            },
            "extras": self.extras,
        }
        (root / "summary.json").write_text(json.dumps(summary, indent=2, sort_keys=True) + "\n", encoding="utf-8")
        return root


def _slug(row: str) -> str:
    return row.replace(":", "-").replace("/", "-")


def _dense_report(res: TrainResult, ws: Workspace, val: Sequence[QueryRecord], k: int, row: str) -> MetricReport:
    index = embed_corpus(res.params, ws.passages)
    return evaluate_model(res.params, index, val, k=k, model_id=row)


def run_multitask(spec: ExperimentSpec, ws: Workspace, seed: int) -> ExperimentResult:
    val = ws.val_for(spec.datasets)
    reports = {"bm25": evaluate_model(None, ws.bm25, val, model_id="bm25")}
    runs = {}
    for ds in spec.datasets:
        cfg = spec.train_config([ds], seed)
        res = train(cfg, ws.passages, ws.train_for([ds]), ws.val_for([ds]), ws.bm25)
        row = f"single:{ds}"
        runs[row] = res
        reports[row] = _dense_report(res, ws, val, cfg.eval_k, row)
    cfg = spec.train_config(spec.datasets, seed)
    res = train(cfg, ws.passages, ws.train_for(spec.datasets), val, ws.bm25)
    runs["multi"] = res
    reports["multi"] = _dense_report(res, ws, val, cfg.eval_k, "multi")
    return ExperimentResult(spec, seed, reports, runs)


def run_zero_few_shot(spec: ExperimentSpec, ws: Workspace, seed: int) -> ExperimentResult:
    held = spec.held_out
    val = ws.val_for([held])
    base = spec.train_config(spec.datasets, seed)
    plan = make_leave_one_out_plan(base, held)
    loo = train(plan, ws.passages, ws.train_for(plan.datasets), ws.val_for(plan.datasets), ws.bm25)
    reports = {
        "bm25": evaluate_model(None, ws.bm25, val, model_id="bm25"),
        "zero-shot": _dense_report(loo, ws, val, base.eval_k, "zero-shot"),
    }
    runs = {"leave-one-out": loo}
    pool = filter_mapped(ws.train_for([held]))
    scratch = init_params(base.variant, base.dim, base.vocab_size, seed)
    for n in spec.few_shot_sizes:
        shots = sample_few_shot(pool, n, seed)
        # `finetune` overrides apply to the pretrained start only; the scratch baseline keeps training rates.
        ft_cfg = base.replace(**{**spec.finetune, "few_shot_size": n})
        scratch_cfg = base.replace(few_shot_size=n)
        for row, start, cfg in ((f"few-shot:{n}", loo.params, ft_cfg), (f"scratch:{n}", scratch, scratch_cfg)):
            res = finetune(start, shots, cfg, ws.passages, val, ws.bm25)
            runs[row] = res
            reports[row] = _dense_report(res, ws, val, base.eval_k, row)
    return ExperimentResult(spec, seed, reports, runs)


def run_variants(spec: ExperimentSpec, ws: Workspace, seed: int) -> ExperimentResult:
    val = ws.val_for(spec.datasets)
    reports, runs = {}, {}
    for variant in spec.variants:
        cfg = spec.train_config(spec.datasets, seed, variant=variant)
        res = train(cfg, ws.passages, ws.train_for(spec.datasets), val, ws.bm25)
        runs[variant] = res
        reports[variant] = _dense_report(res, ws, val, cfg.eval_k, variant)
    return ExperimentResult(spec, seed, reports, runs)


def run_adversarial(spec: ExperimentSpec, ws: Workspace, seed: int) -> ExperimentResult:
    val = ws.val_for(spec.datasets)
    cfg = spec.train_config(spec.datasets, seed)
    round1 = train(cfg, ws.passages, ws.train_for(spec.datasets), val, ws.bm25)
    adv = adversarial_round(
        cfg, round1.params, ws.passages, ws.train, val, ws.bm25,
        mine_datasets=spec.mine_datasets, m=spec.mined_per_query, from_scratch=spec.from_scratch,
        model_id=f"{spec.name}/round1/seed{seed}",
    )
    by_id = {p.passage_id: p for p in ws.passages}
    targets = [ex.query for ex in adv.round1_examples]
    extras = {
        "mined": len(adv.mined),
        "mined_queries": sum(1 for v in adv.mined.mined.values() if v),
        "violations": adv.mined.violations(targets, by_id),
    }
    reports = {
        "round1": _dense_report(round1, ws, val, cfg.eval_k, "round1"),
        "round2": _dense_report(adv.result, ws, val, cfg.eval_k, "round2"),
    }
    result = ExperimentResult(spec, seed, reports, {"round1": round1, "round2": adv.result}, extras)
    result.extras["mined_set"] = adv.mined
    return result


RUNNERS = {
    "multitask": run_multitask,
    "zero_few_shot": run_zero_few_shot,
    "variants": run_variants,
    "adversarial": run_adversarial,
}


def run_experiment(spec: ExperimentSpec, seed: Optional[int] = None, workspace: Optional[Workspace] = None) -> list[ExperimentResult]:
    """Run the spec for one seed (if given) or every seed in the spec."""
    ws = workspace or Workspace.build(spec)
    results = []
    for s in [seed] if seed is not None else spec.seeds:
        start = time.perf_counter()
        res = RUNNERS[spec.kind](spec, ws, s)
        res.seconds = time.perf_counter() - start
        log.info("%s seed %d done in %.1fs", spec.name, s, res.seconds)
        results.append(res)
    return results


def write_results(results: Sequence[ExperimentResult], out_dir) -> list[Path]:
    paths = []
    for res in results:
        mined = res.extras.pop("mined_set", None)
        root = res.write(out_dir)
        if mined is not None:
            mined.save(root / "mined.jsonl")
            res.extras["mined_set"] = mined
        paths.append(root)
    return paths
