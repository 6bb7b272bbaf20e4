"""Command-line entry point for the retrieval pipeline and experiment configs.

Every subcommand that writes artifacts takes ``--out DIR`` and leaves a
``manifest.json`` there listing input and output hashes. Manifests carry no
timestamps, so identical invocations produce identical bytes.
"""

from __future__ import annotations

import argparse
import hashlib
import json
import sys
from contextlib import nullcontext
from pathlib import Path
from typing import Optional, Sequence

from . import corpus as corpus_mod
from .corpus import load_jsonl, load_passages, tokenize, write_passages
from .dense_index import FlatIndex, IvfIndex, build_ivf, embed_corpus, load_index, mips_search_flat, mips_search_ivf, save_index
from .encoder import encode_query, load_params, save_params
from .evaluation import MetricReport, compare_runs, evaluate_model
from .mining import mine_confounder_set
from .sparse import bm25_search, build_bm25_index, load_bm25, save_bm25
from .trainer import PROFILES, TrainConfig, filter_mapped, finetune, sample_few_shot, train, write_log

EXIT_USAGE = 2
EXIT_FAILURE = 1


class CliError(Exception):
    """A user-facing failure reported as one `error: <kind>: <message>` line."""

    def __init__(self, kind: str, message: str):
        super().__init__(message)
        self.kind = kind


# --- manifests -----------------------------------------------------------------------


def sha256_file(path) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for block in iter(lambda: fh.read(1 << 20), b""):
            h.update(block)
    return h.hexdigest()


def git_blob_hash(path) -> str:
    """Content hash as `git hash-object` computes it."""
    data = Path(path).read_bytes()
    return hashlib.sha1(b"blob %d\0" % len(data) + data).hexdigest()


def write_manifest(out: Path, command: str, args: argparse.Namespace, inputs: dict, outputs: dict,
                   checkpoint: Optional[Path] = None) -> Path:
    inputs = {k: {"path": str(p), "sha256": sha256_file(p)} for k, p in sorted(inputs.items()) if p}
    outputs = {k: {"path": str(p), "sha256": sha256_file(p)} for k, p in sorted(outputs.items())}
    settings = {
        k: v for k, v in sorted(vars(args).items())
        # The output location is not part of a run's identity.
        if k not in ("func", "threads", "out") and not isinstance(v, Path) and v is not None
    }
    identity = json.dumps({"command": command, "settings": settings, "inputs": inputs}, sort_keys=True)
    manifest = {
        "run_id": hashlib.sha256(identity.encode()).hexdigest()[:16],
        "command": command,
        "config": str(args.config) if getattr(args, "config", None) else None,
        "settings": settings,
        "inputs": inputs,
        "outputs": outputs,
        "checkpoint_hash": git_blob_hash(checkpoint) if checkpoint else None,
    }
    path = out / "manifest.json"
    path.write_text(json.dumps(manifest, indent=2, sort_keys=True) + "\n", encoding="utf-8")
    return path


def verify_manifest(path) -> list[str]:
    """Return a list of problems; empty when every listed artifact exists and matches its hash."""
    manifest = json.loads(Path(path).read_text(encoding="utf-8"))
    problems = []
    for section in ("inputs", "outputs"):
        for name, entry in manifest[section].items():
            p = Path(entry["path"])
            if not p.exists():
                problems.append(f"{section}.{name}: missing {p}")
            elif sha256_file(p) != entry["sha256"]:
                problems.append(f"{section}.{name}: hash mismatch for {p}")
    return problems


# --- helpers -------------------------------------------------------------------------


def _out_dir(args) -> Path:
    if args.out is None:
        raise CliError("usage", "--out is required for this command")
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    return out


def _require(args, *names):
    missing = [f"--{n.replace('_', '-')}" for n in names if getattr(args, n, None) is None]
    if missing:
        raise CliError("usage", f"missing required option(s): {', '.join(missing)}")


def _train_config(args, datasets: Sequence[str]) -> TrainConfig:
    if args.config:
        cfg = TrainConfig.load(args.config)
    else:
        cfg = PROFILES[args.profile](list(datasets))
    if args.seed is not None:
        cfg = cfg.replace(seed=args.seed)
    return cfg


def _load_any_index(path):
    """A dense index (.uivx layout) or a BM25 index (.ubm layout), told apart by magic bytes."""
    with open(path, "rb") as fh:
        magic = fh.read(4)
    if magic == b"UBM1":
        return load_bm25(path)
    return load_index(path)


def _threads(n: Optional[int]):
    if n is None:
        return nullcontext()
    from threadpoolctl import threadpool_limits

    return threadpool_limits(limits=n)


# --- subcommands ---------------------------------------------------------------------


def cmd_ingest(args) -> None:
    _require(args, "corpus")
    out = _out_dir(args)
    docs = load_jsonl(args.corpus, "corpus")
    passages = corpus_mod.chunk_corpus(docs, args.chunk_size)
    target = out / "passages.jsonl"
    write_passages(target, passages)
    write_manifest(out, "ingest", args, {"corpus": args.corpus}, {"passages": target})
    print(f"{len(docs)} documents -> {len(passages)} passages")


def cmd_bm25_build(args) -> None:
    _require(args, "corpus")
    out = _out_dir(args)
    index = build_bm25_index(load_passages(args.corpus))
    target = out / "bm25.ubm"
    save_bm25(index, target)
    write_manifest(out, "bm25-build", args, {"corpus": args.corpus}, {"index": target})
    print(f"indexed {index.N} passages")


def cmd_train(args) -> None:
    _require(args, "corpus", "queries", "val_queries")
    out = _out_dir(args)
    passages = load_passages(args.corpus)
    train_q = load_jsonl(args.queries, "queries")
    val_q = load_jsonl(args.val_queries, "queries")
    datasets = args.datasets.split(",") if args.datasets else sorted({q.dataset_id for q in train_q})
    cfg = _train_config(args, datasets)
    bm25 = load_bm25(args.index) if args.index else build_bm25_index(passages)
    result = train(cfg, passages, train_q, val_q, bm25)
    ckpt = out / "checkpoint.uenc"
    save_params(result.params, ckpt)
    write_log(result.log, out / "train_log.jsonl")
    cfg.dump(out / "train_config.json")
    write_manifest(
        out, "train", args,
        {"corpus": args.corpus, "queries": args.queries, "val_queries": args.val_queries, "index": args.index,
         "config": args.config},
        {"checkpoint": ckpt, "log": out / "train_log.jsonl", "config": out / "train_config.json"},
        checkpoint=ckpt,
    )
    print(f"best step {result.best_step}; checkpoint {ckpt}")


def cmd_finetune(args) -> None:
    _require(args, "checkpoint", "corpus", "queries", "val_queries")
    out = _out_dir(args)
    passages = load_passages(args.corpus)
    pool = filter_mapped(load_jsonl(args.queries, "queries"))
    val_q = load_jsonl(args.val_queries, "queries")
    datasets = sorted({q.dataset_id for q in pool})
    cfg = _train_config(args, datasets)
    n = args.few_shot or cfg.few_shot_size or len(pool)
    shots = sample_few_shot(pool, n, cfg.seed)
    cfg = cfg.replace(few_shot_size=n)
    bm25 = load_bm25(args.index) if args.index else build_bm25_index(passages)
    result = finetune(load_params(args.checkpoint), shots, cfg, passages, val_q, bm25)
    ckpt = out / "checkpoint.uenc"
    save_params(result.params, ckpt)
    write_log(result.log, out / "train_log.jsonl")
    write_manifest(
        out, "finetune", args,
        {"checkpoint": args.checkpoint, "corpus": args.corpus, "queries": args.queries,
         "val_queries": args.val_queries, "index": args.index, "config": args.config},
        {"checkpoint": ckpt, "log": out / "train_log.jsonl"},
        checkpoint=ckpt,
    )
    print(f"fine-tuned on {n} examples; best step {result.best_step}")


def cmd_embed(args) -> None:
    _require(args, "checkpoint", "corpus")
    out = _out_dir(args)
    index = embed_corpus(load_params(args.checkpoint), load_passages(args.corpus))
    target = out / "dense.uivx"
    save_index(index, target)
    write_manifest(out, "embed", args, {"checkpoint": args.checkpoint, "corpus": args.corpus}, {"index": target})
    print(f"embedded {len(index)} passages")


def cmd_index_build(args) -> None:
    _require(args, "index")
    out = _out_dir(args)
    flat = load_index(args.index)
    if isinstance(flat, IvfIndex):
        flat = flat.base
    ivf = build_ivf(flat, args.cells, seed=args.seed or 0, nprobe=args.nprobe)
    target = out / "ivf.uivx"
    save_index(ivf, target)
    write_manifest(out, "index-build", args, {"index": args.index}, {"index": target})
    print(f"{ivf.n_cells} cells over {len(flat)} vectors")


def _search_one(index, params, text: str, task_class: str, k: int, nprobe: Optional[int]):
    if isinstance(index, (FlatIndex, IvfIndex)):
        if params is None:
            raise CliError("usage", "dense search needs --checkpoint")
        q = encode_query(params, text, task_class)
        if isinstance(index, IvfIndex):
            return mips_search_ivf(index, q, k, nprobe)
        return mips_search_flat(index, q, k)
    return bm25_search(index, tokenize(text), k)


def cmd_search(args) -> None:
    _require(args, "index")
    if (args.query is None) == (args.queries is None):
        raise CliError("usage", "give exactly one of --query or --queries")
    index = _load_any_index(args.index)
    params = load_params(args.checkpoint) if args.checkpoint else None
    if args.query is not None:
        items = [("query", args.query, args.task_class)]
    else:
        items = [(q.query_id, q.text, q.task_class) for q in load_jsonl(args.queries, "queries")]
    lines = []
    for qid, text, task_class in items:
        ranked = _search_one(index, params, text, task_class, args.k, args.nprobe)
        lines.append(json.dumps({"query_id": qid, "ranked": [[p, s] for p, s in ranked]}))
    text = "\n".join(lines) + "\n"
    if args.out:
        out = _out_dir(args)
        target = out / "run.jsonl"
        target.write_text(text, encoding="utf-8")
        write_manifest(out, "search", args,
                       {"index": args.index, "checkpoint": args.checkpoint, "queries": args.queries},
                       {"run": target})
    else:
        sys.stdout.write(text)


def cmd_mine(args) -> None:
    _require(args, "checkpoint", "corpus", "queries")
    out = _out_dir(args)
    params = load_params(args.checkpoint)
    passages = load_passages(args.corpus)
    index = load_index(args.index) if args.index else embed_corpus(params, passages)
    if isinstance(index, IvfIndex):
        index = index.base
    queries = filter_mapped(load_jsonl(args.queries, "queries"))
    mined = mine_confounder_set(
        params, index, queries, args.m, {p.passage_id: p for p in passages},
        page_granularity=not args.passage_granularity, model_id=git_blob_hash(args.checkpoint)[:12],
    )
    if len(mined) == 0:
        raise CliError("mining", "no confounders mined for any query")
    target = out / "mined.jsonl"
    mined.save(target)
    write_manifest(out, "mine", args,
                   {"checkpoint": args.checkpoint, "corpus": args.corpus, "queries": args.queries, "index": args.index},
                   {"mined": target})
    print(f"mined {len(mined)} confounders for {len(queries)} queries")


def cmd_eval(args) -> None:
    _require(args, "index", "queries")
    out = _out_dir(args)
    index = _load_any_index(args.index)
    params = load_params(args.checkpoint) if args.checkpoint else None
    queries = load_jsonl(args.queries, "queries")
    report = evaluate_model(params, index, queries, k=args.k, model_id=args.model_id)
    target = out / "report.json"
    report.dump(target)
    write_manifest(out, "eval", args, {"index": args.index, "checkpoint": args.checkpoint, "queries": args.queries},
                   {"report": target})
    for ds, m in sorted(report.datasets.items()):
        print(f"{ds}\tpage {100 * m.page_rprec:.2f}\tpassage {100 * m.passage_rprec:.2f}\tn={m.n_queries}")


def cmd_compare(args) -> None:
    if not args.reports:
        raise CliError("usage", "give at least one report file")
    reports = {}
    for path in args.reports:
        r = MetricReport.load(path)
        name = r.model_id if r.model_id not in reports else f"{r.model_id}:{Path(path).stem}"
        reports[name] = r
    table = compare_runs(reports)
    text = table.to_text()
    if args.out:
        out = _out_dir(args)
        (out / "table.txt").write_text(text, encoding="utf-8")
        (out / "table.csv").write_text(table.to_csv(), encoding="utf-8")
        write_manifest(out, "compare", args, {f"report{i}": p for i, p in enumerate(args.reports)},
                       {"table": out / "table.txt", "csv": out / "table.csv"})
    sys.stdout.write(text)


def cmd_run(args) -> None:
    from .experiments import ExperimentSpec, run_experiment, write_results

    out = _out_dir(args)
    spec = ExperimentSpec.load(args.experiment)
    results = run_experiment(spec, seed=args.seed)
    roots = write_results(results, out)
    for res, root in zip(results, roots):
        sys.stdout.write(f"# {spec.name} seed {res.seed} ({res.seconds:.1f}s) -> {root}\n")
        sys.stdout.write(res.table().to_text())
        outputs = {str(p.relative_to(root)): p for p in sorted(root.rglob("*")) if p.is_file() and p.name != "manifest.json"}
        checkpoint = next((p for name, p in outputs.items() if name.endswith(".uenc")), None)
        write_manifest(root, "run", args, {"experiment": args.experiment}, outputs, checkpoint=checkpoint)


# --- parser --------------------------------------------------------------------------


def _common(p: argparse.ArgumentParser) -> None:
    p.add_argument("--seed", type=int, default=None, help="seed for every random choice in the command")
    p.add_argument("--threads", type=int, default=None, help="upper bound on BLAS worker threads")
    p.add_argument("--out", default=None, help="output directory (gets a manifest.json)")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="uniret", description="Multi-task dense and sparse passage retrieval.")
    sub = parser.add_subparsers(dest="command", metavar="COMMAND")
    sub.required = True

    def add(name, func, help_):
        p = sub.add_parser(name, help=help_, description=help_)
        p.set_defaults(func=func)
        _common(p)
        return p

    p = add("ingest", cmd_ingest, "Chunk a document JSONL into a passage JSONL.")
    p.add_argument("--corpus", required=True)
    p.add_argument("--chunk-size", type=int, default=100)

    p = add("bm25-build", cmd_bm25_build, "Build a BM25 index over passages.")
    p.add_argument("--corpus", required=True, help="passage or document JSONL")

    for name, func, help_ in (
        ("train", cmd_train, "Train a bi-encoder with BM25 hard confounders."),
        ("finetune", cmd_finetune, "Fine-tune a checkpoint on a few-shot sample."),
    ):
        p = add(name, func, help_)
        p.add_argument("--corpus", required=True)
        p.add_argument("--queries", required=True, help="training queries (the few-shot pool for finetune)")
        p.add_argument("--val-queries", required=True)
        p.add_argument("--config", default=None, help="TrainConfig JSON; overrides --profile")
        p.add_argument("--profile", choices=sorted(PROFILES), default="desk")
        p.add_argument("--index", default=None, help="prebuilt BM25 index for confounder mining")
        p.add_argument("--datasets", default=None, help="comma-separated dataset ids (default: all)")
        if name == "finetune":
            p.add_argument("--checkpoint", required=True)
            p.add_argument("--few-shot", type=int, default=None, help="sample size (default: config or whole pool)")

    p = add("embed", cmd_embed, "Encode every passage into a flat dense index.")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--corpus", required=True)

    p = add("index-build", cmd_index_build, "Build an IVF index from a flat dense index.")
    p.add_argument("--index", required=True)
    p.add_argument("--cells", type=int, required=True)
    p.add_argument("--nprobe", type=int, default=1)

    p = add("search", cmd_search, "Retrieve passages for one query or a query file.")
    p.add_argument("--index", required=True, help="dense or BM25 index")
    p.add_argument("--checkpoint", default=None)
    p.add_argument("--query", default=None)
    p.add_argument("--queries", default=None)
    p.add_argument("--task-class", default="qa", choices=corpus_mod.TASK_CLASSES)
    p.add_argument("--k", type=int, default=10)
    p.add_argument("--nprobe", type=int, default=None)

    p = add("mine", cmd_mine, "Mine adversarial confounders with a trained model.")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--corpus", required=True)
    p.add_argument("--queries", required=True)
    p.add_argument("--index", default=None, help="dense index built with the same checkpoint")
    p.add_argument("--m", type=int, default=1)
    p.add_argument("--passage-granularity", action="store_true", help="exclude gold passages only, not whole pages")

    p = add("eval", cmd_eval, "Page- and passage-level R-precision for a dense or BM25 index.")
    p.add_argument("--index", required=True)
    p.add_argument("--queries", required=True)
    p.add_argument("--checkpoint", default=None)
    p.add_argument("--k", type=int, default=100)
    p.add_argument("--model-id", default=None)

    p = add("run", cmd_run, "Run an experiment config end to end (all seeds unless --seed).")
    p.add_argument("experiment", help="experiment JSON")

    p = add("compare", cmd_compare, "Align metric reports into one table.")
    p.add_argument("reports", nargs="*")
    return parser


def dispatch(argv: Optional[Sequence[str]] = None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code) if exc.code is not None else 0
    try:
        with _threads(args.threads):
            args.func(args)
    except CliError as exc:
        print(f"error: {exc.kind}: {exc}", file=sys.stderr)
        return EXIT_USAGE if exc.kind == "usage" else EXIT_FAILURE
    except (OSError, ValueError, KeyError) as exc:
        kind = type(exc).__name__
        msg = str(exc).replace("\n", " ")
        print(f"error: {kind}: {msg}", file=sys.stderr)
        return EXIT_FAILURE
    return 0


def main() -> None:
    sys.exit(dispatch())


if __name__ == "__main__":
    main()
