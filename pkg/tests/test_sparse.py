import math

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from conftest import make_query
from fixture_values import BM25_PASSAGES
from uniret._binio import FormatError
from uniret.corpus import passage_from_text, tokenize
from uniret.sparse import (
    bm25_score,
    bm25_scores,
    bm25_search,
    build_bm25_index,
    dumps_bm25,
    load_bm25,
    loads_bm25,
    mine_bm25_confounder,
    save_bm25,
)

# Frozen from tests/oracles/fixture_values.py (hand evaluation of the Okapi formula).
FIXTURE_SCORES = {
    "fox": {"a::0": 0.41113637548334736, "a::1": 0.0, "b::0": 0.6118390439885316},
    "dog fox": {"a::0": 0.5279431602841226, "a::1": 0.17229857112841626, "b::0": 0.7352714237254853},
    "the lazy dog": {"a::0": 1.5631288834773351, "a::1": 0.7787548669293656, "b::0": 0.12343237973695365},
    "quick quick fox": {"a::0": 1.2691182270244203, "a::1": 0.0, "b::0": 0.6118390439885316},
}


def fixture_index():
    ps = [passage_from_text(pid, pid.split("::")[0], int(pid.split("::")[1]), t) for pid, t in BM25_PASSAGES.items()]
    return build_bm25_index(ps)


def brute_force(index, query):
    return {pid: bm25_score(index, tokenize(query), pid) for pid in index.doc_lengths}


def test_single_passage_index_stats():
    idx = build_bm25_index([passage_from_text("p::0", "p", 0, " ".join("abcdefghij"))])
    assert idx.N == 1
    assert idx.avg_doc_length == 10


def test_postings_match_hand_count():
    idx = fixture_index()
    assert idx.postings["fox"] == [("a::0", 1), ("b::0", 2)]
    assert idx.postings["the"] == [("a::0", 2), ("a::1", 1)]
    assert idx.postings["a"] == [("b::0", 3)]
    assert set(idx.doc_lengths) == {pid for plist in idx.postings.values() for pid, _ in plist}
    assert idx.avg_doc_length == pytest.approx(np.mean(list(idx.doc_lengths.values())))


def test_build_errors():
    with pytest.raises(ValueError):
        build_bm25_index([])
    p = passage_from_text("x::0", "x", 0, "a b")
    with pytest.raises(ValueError, match="x::0"):
        build_bm25_index([p, p])


@pytest.mark.parametrize("query", sorted(FIXTURE_SCORES))
def test_scores_match_hand_computation(query):
    idx = fixture_index()
    for pid, expected in FIXTURE_SCORES[query].items():
        assert bm25_score(idx, tokenize(query), pid) == pytest.approx(expected, abs=1e-6)


def test_single_passage_query_equals_passage():
    text = "to be or not to be"
    idx = build_bm25_index([passage_from_text("s::0", "s", 0, text)])
    # N=1, every df=1: idf = ln(1 + 0.5/1.5); len == avg, so the tf part is tf*2.2/(tf+1.2).
    idf = math.log(1 + 0.5 / 1.5)
    expected = idf * sum(tf * 2.2 / (tf + 1.2) for tf in (2, 2, 1, 1))
    assert bm25_score(idx, tokenize(text), "s::0") == pytest.approx(expected, abs=1e-12)


def test_no_shared_terms_scores_zero_and_unknown_passage_raises():
    idx = fixture_index()
    assert bm25_score(idx, ["zebra"], "a::0") == 0.0
    with pytest.raises(KeyError):
        bm25_score(idx, ["fox"], "nope")


def test_score_monotone_in_tf():
    other = passage_from_text("o::0", "o", 0, "filler words only here")
    prev = -1.0
    for tf in range(1, 11):
        p = passage_from_text("t::0", "t", 0, " ".join(["fox"] * tf + ["pad"] * (10 - tf)))
        s = bm25_score(build_bm25_index([p, other]), ["fox"], "t::0")
        assert s >= prev
        prev = s


def test_vector_and_scalar_paths_agree_bitwise(small_bm25, small_world):
    for q in small_world.val[:40]:
        toks = tokenize(q.text)
        vec = bm25_scores(small_bm25, toks)
        for i, pid in enumerate(small_bm25._doc_ids):
            assert vec[i] == bm25_score(small_bm25, toks, pid)


def _oracle_ranking(index, toks, k):
    scored = [(-bm25_score(index, toks, pid), pid) for pid in index.doc_lengths]
    return [(pid, -s) for s, pid in sorted(scored) if -s > 0][:k]


def test_search_matches_exhaustive_scoring(small_bm25, small_world):
    for q in small_world.val[:60]:
        toks = tokenize(q.text)
        assert bm25_search(small_bm25, toks, 25) == _oracle_ranking(small_bm25, toks, 25)


corpus_st = st.lists(st.lists(st.sampled_from(list("abcdefg")), min_size=1, max_size=12), min_size=1, max_size=30)


@given(corpus_st, st.lists(st.sampled_from(list("abcdxyz")), max_size=5), st.integers(1, 40))
def test_search_matches_exhaustive_scoring_random(docs, query, k):
    ps = [passage_from_text(f"d{i:02d}::0", f"d{i:02d}", 0, " ".join(toks)) for i, toks in enumerate(docs)]
    idx = build_bm25_index(ps)
    assert bm25_search(idx, query, k) == _oracle_ranking(idx, query, k)


def test_search_edges():
    idx = fixture_index()
    assert bm25_search(idx, ["zebra"], 5) == []
    assert [p for p, _ in bm25_search(idx, ["fox"], 100)] == ["b::0", "a::0"]
    with pytest.raises(ValueError):
        bm25_search(idx, ["fox"], 0)


def test_query_duplicates_do_not_change_scores():
    idx = fixture_index()
    assert brute_force(idx, "quick fox") == brute_force(idx, "quick quick fox fox")


def test_adding_passage_keeps_tf_and_recomputes_statistics():
    ps = [passage_from_text(pid, pid.split("::")[0], 0, t) for pid, t in BM25_PASSAGES.items()]
    small = build_bm25_index(ps)
    big = build_bm25_index(ps + [passage_from_text("z::0", "z", 0, "fox fox fox fox fox fox fox fox fox fox fox")])
    for pid in small.doc_lengths:
        for term in ("fox", "dog", "the"):
            assert small.term_frequency(term, pid) == big.term_frequency(term, pid)
    assert big.avg_doc_length != small.avg_doc_length
    assert bm25_score(big, ["fox"], "a::0") != bm25_score(small, ["fox"], "a::0")


def test_confounder_skips_gold():
    idx = fixture_index()
    q = make_query("q", "fox", {"b::0"})
    ranking = _oracle_ranking(idx, ["fox"], 10)
    assert ranking[0][0] == "b::0"
    assert mine_bm25_confounder(idx, q) == ranking[1][0]
    assert mine_bm25_confounder(idx, q, exclude=set()) == bm25_search(idx, ["fox"], 1)[0][0]
    assert mine_bm25_confounder(idx, q, exclude={"a::0", "b::0"}) is None


def test_round_trip_bytes(tmp_path, small_bm25):
    save_bm25(small_bm25, tmp_path / "a.ubm")
    again = load_bm25(tmp_path / "a.ubm")
    save_bm25(again, tmp_path / "b.ubm")
    assert (tmp_path / "a.ubm").read_bytes() == (tmp_path / "b.ubm").read_bytes()
    assert again.postings == small_bm25.postings
    assert again.doc_lengths == small_bm25.doc_lengths


def test_load_rejects_bad_magic_and_truncation():
    data = dumps_bm25(fixture_index())
    with pytest.raises(FormatError, match="bad magic at byte 0"):
        loads_bm25(b"XXXX" + data[4:])
    with pytest.raises(FormatError, match=r"truncated .* at byte \d+"):
        loads_bm25(data[:-3])
    with pytest.raises(FormatError, match="trailing bytes"):
        loads_bm25(data + b"\0")
