"""Bi-encoder: hashed token embeddings, mean pooling, two-layer tanh projection.

Each tower maps a token sequence to a `dim`-vector:

    m   = (sum_t E[row(t)] (+ marker)) / count
    out = W2 tanh(W1 m + b1) + b2

There is always one passage tower. Query towers depend on the variant:
``shared`` has one, ``task_markers`` has one plus a 5 x dim table of task-class
marker embeddings added to the pool, ``task_specific`` has one per task class.
All towers start from the same random draw (then train independently), which
gives a fresh model a weak lexical-overlap prior. Backpropagation is written
out by hand; see `tower_backward`.

Checkpoint layout (little-endian):

    b"UENC", str variant, u32 dim, u32 vocab_size, u32 n_tensors,
    n_tensors x (str name, u32 ndim, ndim x u64 shape, f64 data row-major)

where ``str`` is a u32 byte length followed by UTF-8 bytes.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass, field
from functools import lru_cache
from typing import Optional, Sequence

import numpy as np

from ._binio import Reader, pack_str
from .corpus import TASK_CLASSES, tokenize

VARIANTS = ("shared", "task_markers", "task_specific")
PASSAGE_TOWER = "passage"
TOWER_PARTS = ("embeddings", "w1", "b1", "w2", "b2")
MAGIC = b"UENC"
INIT_SCALE = 0.05

_FNV_OFFSET = 0xCBF29CE484222325
_FNV_PRIME = 0x100000001B3
_GOLDEN = 0x9E3779B97F4A7C15
_MASK64 = (1 << 64) - 1


@lru_cache(maxsize=None)
def _token_hash(token: str) -> int:
    h = _FNV_OFFSET
    for byte in token.encode("utf-8"):
        h = ((h ^ byte) * _FNV_PRIME) & _MASK64
    return (h * _GOLDEN) & _MASK64


def token_row(token: str, vocab_size: int) -> int:
    return (_token_hash(token) >> 16) % vocab_size


@lru_cache(maxsize=200_000)
def token_rows(text: str, vocab_size: int) -> np.ndarray:
    rows = np.array([token_row(t, vocab_size) for t in tokenize(text)], dtype=np.int64)
    rows.flags.writeable = False
    return rows


def query_tower_name(variant: str, task_class: str) -> str:
    if variant == "task_specific":
        return f"query.{task_class}"
    return "query"


def tower_names(variant: str) -> list[str]:
    if variant == "task_specific":
        return [PASSAGE_TOWER] + [f"query.{c}" for c in TASK_CLASSES]
    return [PASSAGE_TOWER, "query"]


@dataclass
class EncoderParams:
    variant: str
    dim: int
    vocab_size: int
    tensors: dict[str, np.ndarray] = field(repr=False)

    def __getitem__(self, name: str) -> np.ndarray:
        return self.tensors[name]

    @property
    def towers(self) -> list[str]:
        return tower_names(self.variant)

    @property
    def query_towers(self) -> list[str]:
        return [t for t in self.towers if t != PASSAGE_TOWER]

    def n_parameters(self) -> int:
        return sum(t.size for t in self.tensors.values())

    def copy(self) -> "EncoderParams":
        return EncoderParams(
            self.variant, self.dim, self.vocab_size, {k: v.copy() for k, v in self.tensors.items()}
        )

    def zeros_like(self) -> dict[str, np.ndarray]:
        return {k: np.zeros_like(v) for k, v in self.tensors.items()}


def tensor_shapes(variant: str, dim: int, vocab_size: int) -> dict[str, tuple[int, ...]]:
    shapes: dict[str, tuple[int, ...]] = {}
    for tower in tower_names(variant):
        shapes[f"{tower}.embeddings"] = (vocab_size, dim)
        shapes[f"{tower}.w1"] = (dim, dim)
        shapes[f"{tower}.b1"] = (dim,)
        shapes[f"{tower}.w2"] = (dim, dim)
        shapes[f"{tower}.b2"] = (dim,)
    if variant == "task_markers":
        shapes["query.markers"] = (len(TASK_CLASSES), dim)
    return shapes


def init_params(variant: str = "shared", dim: int = 128, vocab_size: int = 10_000, seed: int = 0) -> EncoderParams:
    if variant not in VARIANTS:
        raise ValueError(f"unknown variant {variant!r}; expected one of {VARIANTS}")
    if dim < 2 or vocab_size < 1:
        raise ValueError("need dim >= 2 and vocab_size >= 1")
    rng = np.random.default_rng(seed)
    # One draw per tower part, copied into every tower: distinct tensors, common starting point.
    start = {
        "embeddings": rng.uniform(-INIT_SCALE, INIT_SCALE, size=(vocab_size, dim)),
        "w1": rng.uniform(-INIT_SCALE, INIT_SCALE, size=(dim, dim)),
        "w2": rng.uniform(-INIT_SCALE, INIT_SCALE, size=(dim, dim)),
    }
    tensors = {}
    for name, shape in tensor_shapes(variant, dim, vocab_size).items():
        part = name.rsplit(".", 1)[1]
        if part in ("b1", "b2"):
            tensors[name] = np.zeros(shape)
        elif part == "markers":
            tensors[name] = rng.uniform(-INIT_SCALE, INIT_SCALE, size=shape)
        else:
            tensors[name] = start[part].copy()
    return EncoderParams(variant, dim, vocab_size, tensors)


# --- forward / backward ----------------------------------------------------------


@dataclass
class TowerCache:
    tower: str
    flat_rows: np.ndarray
    segment: np.ndarray
    markers: Optional[np.ndarray]
    inv_count: np.ndarray
    keep: Optional[np.ndarray]
    pooled: np.ndarray
    hidden: np.ndarray


def tower_forward(
    params: EncoderParams,
    tower: str,
    row_lists: Sequence[np.ndarray],
    markers: Optional[np.ndarray] = None,
    dropout: float = 0.0,
    rng: Optional[np.random.Generator] = None,
) -> tuple[np.ndarray, TowerCache]:
    """Encode a batch of token-row sequences through one tower."""
    n = len(row_lists)
    emb = params[f"{tower}.embeddings"]
    lengths = np.array([len(r) for r in row_lists], dtype=np.int64)
    flat = np.concatenate(row_lists) if n else np.zeros(0, dtype=np.int64)
    segment = np.repeat(np.arange(n), lengths)
    summed = np.zeros((n, params.dim))
    np.add.at(summed, segment, emb[flat])
    count = lengths.astype(np.float64)
    if markers is not None:
        summed += params["query.markers"][markers]
        count += 1.0
    inv_count = np.where(count > 0, 1.0 / np.maximum(count, 1.0), 0.0)
    pooled = summed * inv_count[:, None]
    keep = None
    if dropout > 0.0:
        if rng is None:
            raise ValueError("dropout needs an rng")
        keep = (rng.random(pooled.shape) >= dropout) / (1.0 - dropout)
        pooled = pooled * keep
    hidden = np.tanh(pooled @ params[f"{tower}.w1"].T + params[f"{tower}.b1"])
    out = hidden @ params[f"{tower}.w2"].T + params[f"{tower}.b2"]
    return out, TowerCache(tower, flat, segment, markers, inv_count, keep, pooled, hidden)


def tower_backward(
    params: EncoderParams, cache: TowerCache, d_out: np.ndarray, grads: dict[str, np.ndarray]
) -> None:
    """Accumulate d(loss)/d(params) for one tower into `grads`, given d(loss)/d(out)."""
    t = cache.tower
    grads[f"{t}.w2"] += d_out.T @ cache.hidden
    grads[f"{t}.b2"] += d_out.sum(axis=0)
    d_z = (d_out @ params[f"{t}.w2"]) * (1.0 - cache.hidden**2)
    grads[f"{t}.w1"] += d_z.T @ cache.pooled
    grads[f"{t}.b1"] += d_z.sum(axis=0)
    d_pooled = d_z @ params[f"{t}.w1"]
    if cache.keep is not None:
        d_pooled = d_pooled * cache.keep
    d_sum = d_pooled * cache.inv_count[:, None]
    np.add.at(grads[f"{t}.embeddings"], cache.flat_rows, d_sum[cache.segment])
    if cache.markers is not None:
        np.add.at(grads["query.markers"], cache.markers, d_sum)


def _marker_ids(params: EncoderParams, task_classes: Sequence[str]) -> Optional[np.ndarray]:
    if params.variant != "task_markers":
        return None
    return np.array([TASK_CLASSES.index(c) for c in task_classes], dtype=np.int64)


def query_forward(
    params: EncoderParams,
    texts: Sequence[str],
    task_classes: Sequence[str],
    dropout: float = 0.0,
    rng: Optional[np.random.Generator] = None,
) -> tuple[np.ndarray, list[tuple[np.ndarray, TowerCache]]]:
    """Encode queries, routing each to its tower. Returns (vectors, [(row positions, cache)])."""
    for c in task_classes:
        if c not in TASK_CLASSES:
            raise ValueError(f"unknown task class {c!r}")
    out = np.zeros((len(texts), params.dim))
    caches = []
    groups: dict[str, list[int]] = {}
    for i, c in enumerate(task_classes):
        groups.setdefault(query_tower_name(params.variant, c), []).append(i)
    for tower in params.query_towers:
        idx = groups.get(tower)
        if not idx:
            continue
        rows = [token_rows(texts[i], params.vocab_size) for i in idx]
        markers = _marker_ids(params, [task_classes[i] for i in idx])
        vecs, cache = tower_forward(params, tower, rows, markers, dropout, rng)
        pos = np.array(idx, dtype=np.int64)
        out[pos] = vecs
        caches.append((pos, cache))
    return out, caches


def passage_forward(
    params: EncoderParams,
    texts: Sequence[str],
    dropout: float = 0.0,
    rng: Optional[np.random.Generator] = None,
) -> tuple[np.ndarray, TowerCache]:
    rows = [token_rows(t, params.vocab_size) for t in texts]
    return tower_forward(params, PASSAGE_TOWER, rows, None, dropout, rng)


def encode_queries(params: EncoderParams, texts: Sequence[str], task_classes: Sequence[str]) -> np.ndarray:
    return query_forward(params, texts, task_classes)[0]


def encode_passages(params: EncoderParams, texts: Sequence[str], batch_size: int = 512) -> np.ndarray:
    if not texts:
        return np.zeros((0, params.dim))
    parts = [passage_forward(params, texts[i : i + batch_size])[0] for i in range(0, len(texts), batch_size)]
    return np.concatenate(parts)


def encode_query(params: EncoderParams, text: str, task_class: str) -> np.ndarray:
    return encode_queries(params, [text], [task_class])[0]


def encode_passage(params: EncoderParams, text: str) -> np.ndarray:
    return passage_forward(params, [text])[0][0]


def similarity(q: np.ndarray, p: np.ndarray) -> float:
    q, p = np.asarray(q), np.asarray(p)
    if q.shape != p.shape:
        raise ValueError(f"dimension mismatch: {q.shape} vs {p.shape}")
    return float(np.dot(q, p))


# --- checkpoints ---------------------------------------------------------------


def dumps_params(params: EncoderParams) -> bytes:
    names = list(tensor_shapes(params.variant, params.dim, params.vocab_size))
    out = [MAGIC, pack_str(params.variant), struct.pack("<III", params.dim, params.vocab_size, len(names))]
    for name in names:
        arr = np.ascontiguousarray(params.tensors[name], dtype="<f8")
        out.append(pack_str(name) + struct.pack("<I", arr.ndim) + struct.pack(f"<{arr.ndim}Q", *arr.shape))
        out.append(arr.tobytes())
    return b"".join(out)


def loads_params(data: bytes) -> EncoderParams:
    r = Reader(data, "encoder checkpoint")
    r.magic(MAGIC)
    at = r.pos
    variant = r.string()
    if variant not in VARIANTS:
        r.fail(f"unknown variant {variant!r}", at)
    dim, vocab, n = r.unpack("<III")
    expected = tensor_shapes(variant, dim, vocab)
    tensors = {}
    for _ in range(n):
        at = r.pos
        name = r.string()
        (ndim,) = r.unpack("<I")
        shape = r.unpack(f"<{ndim}Q")
        if expected.get(name) != tuple(shape):
            r.fail(f"unexpected tensor {name!r} with shape {shape}", at)
        size = int(np.prod(shape)) if ndim else 1
        tensors[name] = np.frombuffer(r.take(8 * size), dtype="<f8").reshape(shape).astype(np.float64)
    r.done()
    if set(tensors) != set(expected):
        r.fail(f"missing tensors {sorted(set(expected) - set(tensors))}")
    return EncoderParams(variant, dim, vocab, tensors)


def save_params(params: EncoderParams, path) -> None:
    with open(path, "wb") as fh:
        fh.write(dumps_params(params))


def load_params(path) -> EncoderParams:
    with open(path, "rb") as fh:
        return loads_params(fh.read())
