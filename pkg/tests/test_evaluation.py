import numpy as np
import pytest

from conftest import make_query
from ref_metrics import ref_r_precision
from uniret.dense_index import FlatIndex, build_ivf, embed_corpus
from uniret.encoder import init_params
from uniret.evaluation import (
    MetricReport,
    RetrievalRun,
    compare_runs,
    evaluate_model,
    r_precision,
    rank_to_pages,
    score_run,
)


def random_run(rng, n_queries=5, datasets=("d1", "d2")):
    pages = [f"pg{i}" for i in range(int(rng.integers(1, 8)))]
    pids = [f"{p}::{j}" for p in pages for j in range(int(rng.integers(1, 5)))]
    queries, rankings = [], {}
    for i in range(n_queries):
        gold = set(rng.choice(pids, size=int(rng.integers(1, min(4, len(pids)) + 1)), replace=False))
        queries.append(make_query(f"q{i}", "w", gold, dataset=str(rng.choice(datasets))))
        order = rng.permutation(len(pids))[: int(rng.integers(0, len(pids) + 1))]
        scores = np.sort(rng.integers(0, 5, size=len(order)))[::-1]
        ranked = sorted(((pids[j], float(s)) for j, s in zip(order, scores)), key=lambda x: (-x[1], x[0]))
        rankings[f"q{i}"] = ranked
    return queries, RetrievalRun(rankings)


def test_r_precision_agrees_with_brute_force():
    rng = np.random.default_rng(0)
    for _ in range(1000):
        queries, run = random_run(rng)
        report = score_run(run, queries)
        by_ds = {}
        for q in queries:
            ranked = [p for p, _ in run.rankings[q.query_id]]
            page = ref_r_precision(ranked, q.gold_pages, "page")
            passage = ref_r_precision(ranked, q.gold_passages, "passage")
            assert report.datasets[q.dataset_id].per_query[q.query_id] == (float(page), float(passage))
            by_ds.setdefault(q.dataset_id, []).append((page, passage))
        for ds, vals in by_ds.items():
            m = report.datasets[ds]
            assert m.page_rprec == pytest.approx(float(sum(v[0] for v in vals) / len(vals)), abs=1e-15)
            assert m.passage_rprec == pytest.approx(float(sum(v[1] for v in vals) / len(vals)), abs=1e-15)


def test_single_gold_is_precision_at_one():
    rng = np.random.default_rng(1)
    for _ in range(200):
        ranked = [f"p{i}" for i in rng.permutation(10)]
        gold = f"p{rng.integers(10)}"
        assert r_precision(ranked, {gold}) == float(ranked[0] == gold)


def test_r_precision_edges():
    assert r_precision([], {"a"}) == 0.0
    assert r_precision(["a", "b", "c"], {"c", "a"}) == 0.5
    with pytest.raises(ValueError):
        r_precision(["a"], set())


def test_rank_to_pages_keeps_first_occurrence():
    assert rank_to_pages(["A::2", "B::0", "A::0", "C::1"]) == ["A", "B", "C"]
    assert rank_to_pages(["x", "y"], {"x": "P", "y": "P"}) == ["P"]
    with pytest.raises(KeyError):
        rank_to_pages(["z"], {"x": "P"})


def test_run_validation():
    RetrievalRun({"q": [("a", 2.0), ("b", 2.0), ("c", 1.0)]}).validate()
    with pytest.raises(ValueError):
        RetrievalRun({"q": [("b", 2.0), ("a", 2.0)]}).validate()
    with pytest.raises(ValueError):
        RetrievalRun({"q": [("a", 2.0), ("a", 1.0)]}).validate()


def test_missing_gold_is_scored_as_miss(caplog):
    q = make_query("q", "w", {"Z::0"})
    report = score_run(RetrievalRun({"q": [("A::0", 1.0)]}), [q], known_passages={"A::0"})
    assert report.datasets["ds"].per_query["q"] == (0.0, 0.0)
    assert "missing" in caplog.text


def test_report_json_round_trip(tmp_path):
    queries, run = random_run(np.random.default_rng(2), 12)
    report = score_run(run, queries)
    report.dump(tmp_path / "r.json")
    again = MetricReport.load(tmp_path / "r.json")
    assert again.to_json() == report.to_json()


def test_evaluate_model_dense_flat_and_ivf_agree(small_world, small_passages):
    params = init_params("shared", 8, 256, seed=0)
    flat = embed_corpus(params, small_passages)
    queries = small_world.val[:30]
    a = evaluate_model(params, flat, queries, k=20)
    b = evaluate_model(params, build_ivf(flat, 8, nprobe=8), queries, k=20)
    assert a.to_json()["datasets"] == b.to_json()["datasets"]
    with pytest.raises(ValueError):
        evaluate_model(params, flat, queries, k=0)
    with pytest.raises(ValueError):
        evaluate_model(None, flat, queries)


def test_evaluate_model_bm25(small_world, small_bm25):
    report = evaluate_model(None, small_bm25, small_world.val)
    assert 0.0 <= report.macro_page <= 1.0
    assert set(report.datasets) == {q.dataset_id for q in small_world.val}


def _report(values):
    from uniret.evaluation import DatasetMetrics
    return MetricReport({ds: DatasetMetrics(p, s, 1) for ds, (p, s) in values.items()})


def test_compare_runs_marks_best_and_second():
    table = compare_runs({
        "a": _report({"x": (0.5, 0.2)}),
        "b": _report({"x": (0.7, 0.2)}),
        "c": _report({"x": (0.6, 0.1)}),
    })
    assert table.columns == [("x", "page"), ("x", "passage")]
    assert [m[0] for m in table.marks] == ["", "best", "second"]
    assert [m[1] for m in table.marks] == ["best", "best", "second"]
    text = table.to_text()
    assert "**70.00**" in text and "_60.00_" in text
    assert table.to_csv().splitlines()[0] == "model,x/page,x/passage"


def test_compare_runs_single_row_has_no_marks_and_mismatch_raises():
    assert compare_runs({"a": _report({"x": (0.5, 0.2)})}).marks == [["", ""]]
    with pytest.raises(ValueError, match="only in first"):
        compare_runs({"a": _report({"x": (0.5, 0.2)}), "b": _report({"y": (0.5, 0.2)})})
    with pytest.raises(ValueError):
        compare_runs({})
