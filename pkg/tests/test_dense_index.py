import numpy as np
import pytest

from naive_mips import naive_top_k
from uniret._binio import FormatError
from uniret.dense_index import (
    FlatIndex,
    build_ivf,
    dumps_index,
    embed_corpus,
    inner_products,
    load_index,
    loads_index,
    mips_search_flat,
    mips_search_flat_batch,
    mips_search_ivf,
    save_index,
)
from uniret.encoder import encode_passage, init_params


def random_instance(rng, n, dim, dup_fraction=0.0, integer=False):
    if integer:
        V = rng.integers(-3, 4, size=(n, dim)).astype(np.float32)
    else:
        V = rng.normal(size=(n, dim)).astype(np.float32)
    if dup_fraction and n > 1:
        src = rng.integers(0, n, size=int(n * dup_fraction))
        dst = rng.integers(0, n, size=src.size)
        V[dst] = V[src]
    ids = [f"p{j:05d}" for j in rng.permutation(n)]
    return ids, V


def test_flat_matches_naive_scan_on_random_instances():
    rng = np.random.default_rng(0)
    for trial in range(200):
        n = int(rng.integers(1, 2001)) if trial % 10 == 0 else int(rng.integers(1, 300))
        dim = int(rng.integers(1, 9))
        ids, V = random_instance(rng, n, dim, dup_fraction=0.2 if trial % 2 else 0.0, integer=trial % 3 == 0)
        index = FlatIndex(ids, V)
        q = rng.integers(-2, 3, size=dim).astype(float) if trial % 3 == 0 else rng.normal(size=dim)
        k = int(rng.integers(1, 25))
        assert mips_search_flat(index, q, k) == naive_top_k(ids, V, q, k)


def test_batch_search_equals_single_search():
    rng = np.random.default_rng(1)
    ids, V = random_instance(rng, 500, 6, dup_fraction=0.3, integer=True)
    index = FlatIndex(ids, V)
    Q = rng.integers(-2, 3, size=(20, 6)).astype(float)
    for k in (1, 7, 600):
        assert mips_search_flat_batch(index, Q, k) == [mips_search_flat(index, q, k) for q in Q]


def test_duplicate_vectors_tie_by_id():
    V = np.ones((3, 2), dtype=np.float32)
    index = FlatIndex(["c", "a", "b"], V)
    assert [p for p, _ in mips_search_flat(index, [1.0, 1.0], 3)] == ["a", "b", "c"]


def test_inner_products_are_sequential_float64():
    rng = np.random.default_rng(2)
    V = rng.normal(size=(5, 7)).astype(np.float32)
    q = rng.normal(size=7)
    S = inner_products(V, q)
    for i in range(5):
        s = 0.0
        for j in range(7):
            s += float(V[i, j]) * q[j]
        assert S[i] == s


def test_flat_errors():
    index = FlatIndex(["a"], np.zeros((1, 3)))
    with pytest.raises(ValueError):
        mips_search_flat(index, np.zeros(4), 1)
    with pytest.raises(ValueError):
        mips_search_flat(index, np.zeros(3), 0)
    with pytest.raises(ValueError):
        FlatIndex(["a", "b"], np.zeros((1, 3)))
    assert mips_search_flat(FlatIndex([], np.zeros((0, 3))), np.zeros(3), 2) == []


def test_embed_corpus_rows_match_single_encoding(tiny_passages):
    params = init_params("shared", 8, 64, seed=1)
    index = embed_corpus(params, tiny_passages)
    assert index.ids == [p.passage_id for p in tiny_passages]
    for p, row in zip(tiny_passages, index.vectors):
        assert np.array_equal(row, encode_passage(params, p.text).astype(np.float32))


def test_ivf_partitions_every_row_once():
    rng = np.random.default_rng(3)
    ids, V = random_instance(rng, 400, 8)
    ivf = build_ivf(FlatIndex(ids, V), 16, seed=0)
    rows = np.sort(np.concatenate(ivf.assignments))
    assert np.array_equal(rows, np.arange(400))


def test_ivf_rows_sit_in_their_best_cell():
    rng = np.random.default_rng(4)
    ids, V = random_instance(rng, 300, 6)
    ivf = build_ivf(FlatIndex(ids, V), 12, seed=1)
    S = inner_products(ivf.centroids, V)
    best = np.argmax(S, axis=1)
    for c, rows in enumerate(ivf.assignments):
        assert (best[rows] == c).all()


def test_ivf_full_probe_equals_flat():
    rng = np.random.default_rng(5)
    ids, V = random_instance(rng, 600, 8, dup_fraction=0.1)
    flat = FlatIndex(ids, V)
    ivf = build_ivf(flat, 20, seed=0)
    for _ in range(20):
        q = rng.normal(size=8)
        assert mips_search_ivf(ivf, q, 10, nprobe=20) == mips_search_flat(flat, q, 10)


def test_ivf_recall_on_clustered_data():
    rng = np.random.default_rng(6)
    centers = rng.normal(size=(32, 16)) * 4
    V = (centers[rng.integers(0, 32, size=3000)] + rng.normal(size=(3000, 16))).astype(np.float32)
    flat = FlatIndex([f"p{i:04d}" for i in range(3000)], V)
    ivf = build_ivf(flat, 32, seed=0)
    hits = 0
    for _ in range(50):
        q = centers[rng.integers(32)] + rng.normal(size=16)
        exact = {p for p, _ in mips_search_flat(flat, q, 10)}
        hits += len(exact & {p for p, _ in mips_search_ivf(ivf, q, 10, nprobe=4)})
    assert hits / 500 >= 0.95


def test_ivf_errors():
    flat = FlatIndex(["a", "b"], np.eye(2))
    with pytest.raises(ValueError):
        build_ivf(flat, 3)
    ivf = build_ivf(flat, 2)
    with pytest.raises(ValueError):
        mips_search_ivf(ivf, [1.0, 0.0], 1, nprobe=3)


@pytest.mark.parametrize("kind", ["flat", "ivf"])
def test_index_round_trip(tmp_path, kind):
    rng = np.random.default_rng(7)
    ids, V = random_instance(rng, 200, 5)
    index = FlatIndex(ids, V)
    if kind == "ivf":
        index = build_ivf(index, 8, nprobe=3)
    save_index(index, tmp_path / "a.uivx")
    again = load_index(tmp_path / "a.uivx")
    save_index(again, tmp_path / "b.uivx")
    assert (tmp_path / "a.uivx").read_bytes() == (tmp_path / "b.uivx").read_bytes()
    q = rng.normal(size=5)
    search = mips_search_ivf if kind == "ivf" else mips_search_flat
    assert search(again, q, 5) == search(index, q, 5)


def test_index_load_errors():
    data = dumps_index(build_ivf(FlatIndex(["a", "b", "c"], np.eye(3)), 2))
    with pytest.raises(FormatError, match="bad magic at byte 0"):
        loads_index(b"ABCD" + data[4:])
    with pytest.raises(FormatError, match="unsupported version"):
        loads_index(data[:4] + b"\x07" + data[5:])
    with pytest.raises(FormatError, match=r"at byte \d+"):
        loads_index(data[:-1])
    with pytest.raises(FormatError, match="trailing"):
        loads_index(data + b"\0\0")
