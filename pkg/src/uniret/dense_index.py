"""Maximum inner-product search over passage embeddings: exact flat scan and IVF.

Vectors are stored as float32; scores are accumulated in float64.

File layout (little-endian):

    b"UIVX", u8 version (=1), u8 flags (0 = flat, 1 = ivf), u32 dim, u64 N,
    N x (u32 id_len, id bytes (UTF-8)),
    N*dim f32 vectors (row-major),
    ivf only: u32 C, u32 nprobe, C*dim f32 centroids,
              C x (u64 count, count x u64 row index)
"""

from __future__ import annotations

import struct
from dataclasses import dataclass
from typing import Optional, Sequence

import numpy as np

from ._binio import Reader, pack_str
from .corpus import Passage
from .encoder import EncoderParams, encode_passages

MAGIC = b"UIVX"
VERSION = 1
KMEANS_ITERATIONS = 20


@dataclass
class FlatIndex:
    ids: list[str]
    vectors: np.ndarray

    def __post_init__(self):
        self.vectors = np.ascontiguousarray(self.vectors, dtype=np.float32)
        if self.vectors.ndim != 2 or self.vectors.shape[0] != len(self.ids):
            raise ValueError("vectors must be an N x dim matrix with one row per id")
        self._rank = _id_rank(self.ids)

    @property
    def dim(self) -> int:
        return self.vectors.shape[1]

    def __len__(self) -> int:
        return len(self.ids)


@dataclass
class IvfIndex:
    centroids: np.ndarray
    assignments: list[np.ndarray]
    base: FlatIndex
    nprobe: int = 1

    def __post_init__(self):
        self.centroids = np.ascontiguousarray(self.centroids, dtype=np.float32)
        self.assignments = [np.asarray(a, dtype=np.int64) for a in self.assignments]
        if not 1 <= self.nprobe <= len(self.assignments):
            raise ValueError("nprobe must lie in [1, C]")

    @property
    def n_cells(self) -> int:
        return len(self.assignments)


def _id_rank(ids: Sequence[str]) -> np.ndarray:
    """rank[i] = position of ids[i] in lexicographic order (the tie-break key)."""
    order = sorted(range(len(ids)), key=ids.__getitem__)
    rank = np.empty(len(ids), dtype=np.int64)
    rank[order] = np.arange(len(ids))
    return rank


def embed_corpus(params: EncoderParams, passages: Sequence[Passage]) -> FlatIndex:
    vectors = encode_passages(params, [p.text for p in passages])
    return FlatIndex([p.passage_id for p in passages], vectors.reshape(len(passages), params.dim))


def inner_products(V: np.ndarray, Q: np.ndarray) -> np.ndarray:
    """Q @ V.T in float64, summed left to right over dimensions.

    Sequential accumulation makes every score bit-identical to a plain loop
    ``s = 0.0; for j: s += v[j] * q[j]``, so identical rows always tie exactly.
    """
    V = np.asarray(V, dtype=np.float64)
    Q = np.asarray(Q, dtype=np.float64)
    single = Q.ndim == 1
    Q2 = Q[None, :] if single else Q
    S = np.zeros((Q2.shape[0], V.shape[0]))
    for j in range(V.shape[1]):
        S += Q2[:, j, None] * V[None, :, j]
    return S[0] if single else S


def _check_query(index: FlatIndex, q) -> np.ndarray:
    q = np.asarray(q, dtype=np.float64)
    if q.shape != (index.dim,):
        raise ValueError(f"dimension mismatch: query {q.shape}, index dim {index.dim}")
    return q


def _top_k(index: FlatIndex, rows: np.ndarray, scores: np.ndarray, k: int) -> list[tuple[str, float]]:
    order = np.lexsort((index._rank[rows], -scores))[:k]
    return [(index.ids[rows[i]], float(scores[i])) for i in order]


def mips_search_flat(index: FlatIndex, q, k: int) -> list[tuple[str, float]]:
    """Exact top-k by inner product; ties go to the lexicographically smaller id."""
    if k < 1:
        raise ValueError("k must be >= 1")
    q = _check_query(index, q)
    if len(index) == 0:
        return []
    scores = inner_products(index.vectors, q)
    return _top_k(index, np.arange(len(index)), scores, k)


def mips_search_flat_batch(index: FlatIndex, Q: np.ndarray, k: int) -> list[list[tuple[str, float]]]:
    """Row-wise `mips_search_flat` for a matrix of queries."""
    Q = np.asarray(Q, dtype=np.float64)
    if Q.ndim != 2 or Q.shape[1] != index.dim:
        raise ValueError("query matrix has the wrong dimension")
    if len(index) == 0:
        return [[] for _ in range(len(Q))]
    S = inner_products(index.vectors, Q)
    all_rows = np.arange(len(index))
    out = []
    for s in S:
        # Exact tie handling only matters near the cutoff, so prefilter with argpartition.
        if len(index) > 4 * k:
            kth = np.partition(s, len(s) - k)[len(s) - k]
            rows = np.flatnonzero(s >= kth)
        else:
            rows = all_rows
        out.append(_top_k(index, rows, s[rows], k))
    return out


def _normalize_rows(M: np.ndarray) -> np.ndarray:
    norms = np.linalg.norm(M, axis=1, keepdims=True)
    return M / np.where(norms > 0, norms, 1.0)


def build_ivf(
    index: FlatIndex,
    n_cells: int,
    seed: int = 0,
    nprobe: int = 1,
    iterations: int = KMEANS_ITERATIONS,
    normalize_centroids: bool = True,
) -> IvfIndex:
    """Coarse-quantize the index with inner-product k-means seeded from data rows."""
    N = len(index)
    if not 1 <= n_cells <= N:
        raise ValueError(f"need 1 <= C <= N, got C={n_cells}, N={N}")
    X = index.vectors.astype(np.float64)
    if n_cells == N:
        centroids = _normalize_rows(X) if normalize_centroids else X
        assignments = [np.array([i]) for i in range(N)]
        return IvfIndex(centroids, assignments, index, min(nprobe, n_cells))
    rng = np.random.default_rng(seed)
    centroids = X[rng.choice(N, size=n_cells, replace=False)].copy()
    for _ in range(iterations):
        probe = _normalize_rows(centroids) if normalize_centroids else centroids
        labels = np.argmax(X @ probe.T, axis=1)
        counts = np.bincount(labels, minlength=n_cells)
        sums = np.zeros_like(centroids)
        np.add.at(sums, labels, X)
        empty = np.flatnonzero(counts == 0)
        filled = counts > 0
        centroids[filled] = sums[filled] / counts[filled, None]
        if empty.size:
            centroids[empty] = X[rng.choice(N, size=empty.size, replace=False)]
    probe = _normalize_rows(centroids) if normalize_centroids else centroids
    probe = probe.astype(np.float32)
    # Assign with the stored (float32) centroids so the invariant holds exactly after reload.
    labels = np.argmax(inner_products(probe, X), axis=1)
    assignments = [np.flatnonzero(labels == c) for c in range(n_cells)]
    return IvfIndex(probe, assignments, index, min(nprobe, n_cells))


def mips_search_ivf(index: IvfIndex, q, k: int, nprobe: Optional[int] = None) -> list[tuple[str, float]]:
    """Top-k by inner product, scanning only the `nprobe` cells whose centroids score highest."""
    nprobe = index.nprobe if nprobe is None else nprobe
    if k < 1:
        raise ValueError("k must be >= 1")
    if not 1 <= nprobe <= index.n_cells:
        raise ValueError(f"nprobe must lie in [1, {index.n_cells}]")
    base = index.base
    q = _check_query(base, q)
    cell_scores = inner_products(index.centroids, q)
    cells = np.lexsort((np.arange(index.n_cells), -cell_scores))[:nprobe]
    rows = np.concatenate([index.assignments[c] for c in cells])
    if rows.size == 0:
        return []
    scores = inner_products(base.vectors[rows], q)
    return _top_k(base, rows, scores, k)


# --- persistence -------------------------------------------------------------------


def dumps_index(index) -> bytes:
    ivf = isinstance(index, IvfIndex)
    flat = index.base if ivf else index
    out = [MAGIC, struct.pack("<BBIQ", VERSION, int(ivf), flat.dim, len(flat))]
    out.extend(pack_str(pid) for pid in flat.ids)
    out.append(flat.vectors.astype("<f4").tobytes())
    if ivf:
        out.append(struct.pack("<II", index.n_cells, index.nprobe))
        out.append(index.centroids.astype("<f4").tobytes())
        for a in index.assignments:
            out.append(struct.pack("<Q", len(a)) + a.astype("<u8").tobytes())
    return b"".join(out)


def loads_index(data: bytes):
    r = Reader(data, "dense index")
    r.magic(MAGIC)
    at = r.pos
    version, flags, dim, n = r.unpack("<BBIQ")
    if version != VERSION:
        r.fail(f"unsupported version {version}", at)
    if flags not in (0, 1):
        r.fail(f"unknown flags {flags}", at + 1)
    ids = [r.string() for _ in range(n)]
    vectors = np.frombuffer(r.take(4 * n * dim), dtype="<f4").reshape(n, dim)
    flat = FlatIndex(ids, vectors.astype(np.float32))
    if flags == 0:
        r.done()
        return flat
    at = r.pos
    n_cells, nprobe = r.unpack("<II")
    if not 1 <= n_cells <= max(n, 1) or not 1 <= nprobe <= n_cells:
        r.fail(f"invalid cell count {n_cells} / nprobe {nprobe}", at)
    centroids = np.frombuffer(r.take(4 * n_cells * dim), dtype="<f4").reshape(n_cells, dim)
    assignments = []
    for _ in range(n_cells):
        (count,) = r.unpack("<Q")
        at = r.pos
        rows = np.frombuffer(r.take(8 * count), dtype="<u8").astype(np.int64)
        if count and int(rows.max()) >= n:
            r.fail("row index out of range", at)
        assignments.append(rows)
    r.done()
    return IvfIndex(centroids.astype(np.float32), assignments, flat, nprobe)


def save_index(index, path) -> None:
    with open(path, "wb") as fh:
        fh.write(dumps_index(index))


def load_index(path):
    with open(path, "rb") as fh:
        return loads_index(fh.read())
