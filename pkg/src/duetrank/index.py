"""Maximum inner-product search over response vectors: exact top-k, an
IVF-style coarse-quantized approximate search, and bit-exact persistence.

File layout: magic ``MIPSIDX1``, then little-endian u32 fields
{version, P, p, n_clusters (0 if no IVF)}, then ids (u32 x P), vectors
(f64 x P x p); with IVF, centroids (f64 x n_clusters x p) followed by
one posting list per cluster as u32 length + u32 member positions.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass, field
from pathlib import Path
from typing import List, Optional, Sequence

import numpy as np

MAGIC = b"MIPSIDX1"
VERSION = 1


class IndexFormatError(ValueError):
    """Index file is corrupt, truncated or has a bad header."""


@dataclass(frozen=True)
class SearchHit:
    response_id: int
    score: float


@dataclass
class MipsIndex:
    vectors: np.ndarray  # (P, p) float64
    ids: np.ndarray  # (P,) response ids
    centroids: Optional[np.ndarray] = None  # (n_clusters, p)
    posting_lists: List[np.ndarray] = field(default_factory=list)  # row positions per cluster

    def __post_init__(self):
        if self.vectors.shape[0] != self.ids.shape[0]:
            raise ValueError("one id per vector row required")
        if len(set(self.ids.tolist())) != len(self.ids):
            raise ValueError("ids must be unique")

    @property
    def size(self) -> int:
        return self.vectors.shape[0]

    @property
    def dim(self) -> int:
        return self.vectors.shape[1]

    @property
    def n_clusters(self) -> int:
        return 0 if self.centroids is None else self.centroids.shape[0]


def build_index(responses: Sequence, bi_encoder, vocab, batch_size: int = 64) -> MipsIndex:
    """Encode every pool response once; row order is pool-id order."""
    from .text import encode_response

    if len(responses) == 0:
        raise ValueError("response pool is empty")
    seqs = [encode_response(r, vocab) for r in responses]
    rows = []
    for start in range(0, len(seqs), batch_size):
        rows.append(bi_encoder.encode_response_batch(seqs[start : start + batch_size]).data)
    vectors = np.concatenate(rows, axis=0)
    return MipsIndex(vectors=vectors, ids=np.arange(len(responses), dtype=np.int64))


def _top_k(scores: np.ndarray, ids: np.ndarray, k: int, vectors: np.ndarray, v_c: np.ndarray) -> List[SearchHit]:
    """k largest scores; ties broken by ascending id.

    Returned scores are recomputed as per-row dot products so they are
    bit-identical to scoring the stored vector directly (the batched
    matrix product can differ in the last ulp).
    """
    order = np.lexsort((ids, -scores))[:k]
    return [SearchHit(int(ids[i]), float(vectors[i] @ v_c)) for i in order]


def search_exact(index: MipsIndex, v_c: np.ndarray, k: int) -> List[SearchHit]:
    if k < 1:
        raise ValueError("k must be at least 1")
    v_c = np.asarray(v_c, dtype=np.float64)
    if v_c.shape != (index.dim,):
        raise ValueError(f"query dim {v_c.shape} does not match index dim {index.dim}")
    scores = index.vectors @ v_c
    return _top_k(scores, index.ids, k, index.vectors, v_c)


def train_ivf(index: MipsIndex, n_clusters: int, n_iters: int = 20, rng: Optional[np.random.Generator] = None) -> MipsIndex:
    """L2 k-means with k-means++ seeding; assigns every vector to a cluster.

    Empty clusters are re-seeded from the farthest member of the largest
    cluster.
    """
    if rng is None:
        rng = np.random.default_rng(0)
    x = index.vectors
    n = x.shape[0]
    if n_clusters > n:
        raise ValueError(f"n_clusters {n_clusters} exceeds pool size {n}")
    centroids = _kmeans_pp_init(x, n_clusters, rng)
    assign = np.zeros(n, dtype=np.int64)
    for _ in range(n_iters):
        d2 = _sq_dists(x, centroids)
        assign = d2.argmin(axis=1)
        for c in range(n_clusters):
            members = np.flatnonzero(assign == c)
            if len(members) == 0:
                counts = np.bincount(assign, minlength=n_clusters)
                big = int(counts.argmax())
                big_members = np.flatnonzero(assign == big)
                far = big_members[_sq_dists(x[big_members], centroids[big : big + 1])[:, 0].argmax()]
                centroids[c] = x[far]
                assign[far] = c
                members = np.array([far])
            centroids[c] = x[members].mean(axis=0)
    d2 = _sq_dists(x, centroids)
    assign = d2.argmin(axis=1)
    posting = [np.flatnonzero(assign == c).astype(np.int64) for c in range(n_clusters)]
    return MipsIndex(vectors=index.vectors, ids=index.ids, centroids=centroids, posting_lists=posting)


def _sq_dists(x: np.ndarray, centroids: np.ndarray) -> np.ndarray:
    x2 = (x ** 2).sum(axis=1)[:, None]
    c2 = (centroids ** 2).sum(axis=1)[None, :]
    return np.maximum(x2 - 2.0 * (x @ centroids.T) + c2, 0.0)


def _kmeans_pp_init(x: np.ndarray, k: int, rng: np.random.Generator) -> np.ndarray:
    n = x.shape[0]
    centroids = np.empty((k, x.shape[1]))
    first = int(rng.integers(n))
    centroids[0] = x[first]
    d2 = ((x - centroids[0]) ** 2).sum(axis=1)
    for c in range(1, k):
        total = d2.sum()
        if total <= 0:
            pick = int(rng.integers(n))
        else:
            pick = int(rng.choice(n, p=d2 / total))
        centroids[c] = x[pick]
        d2 = np.minimum(d2, ((x - centroids[c]) ** 2).sum(axis=1))
    return centroids


def search_ivf(index: MipsIndex, v_c: np.ndarray, k: int, nprobe: int) -> List[SearchHit]:
    """Exact top-k over the nprobe clusters closest (by inner product) to the query."""
    if index.centroids is None:
        raise ValueError("IVF layer not trained; call train_ivf first")
    if not 1 <= nprobe <= index.n_clusters:
        raise ValueError(f"nprobe must be in [1, {index.n_clusters}], got {nprobe}")
    if k < 1:
        raise ValueError("k must be at least 1")
    v_c = np.asarray(v_c, dtype=np.float64)
    cscores = index.centroids @ v_c
    probe = np.argsort(-cscores, kind="stable")[:nprobe]
    rows = np.concatenate([index.posting_lists[c] for c in probe]) if len(probe) else np.array([], dtype=np.int64)
    if rows.size == 0:
        return []
    scores = index.vectors[rows] @ v_c
    return _top_k(scores, index.ids[rows], k, index.vectors[rows], v_c)


# ----------------------------------------------------------------------
# persistence
# ----------------------------------------------------------------------


def save_index(index: MipsIndex, path) -> None:
    with Path(path).open("wb") as fh:
        fh.write(MAGIC)
        fh.write(struct.pack("<IIII", VERSION, index.size, index.dim, index.n_clusters))
        fh.write(np.ascontiguousarray(index.ids, dtype="<u4").tobytes())
        fh.write(np.ascontiguousarray(index.vectors, dtype="<f8").tobytes())
        if index.n_clusters:
            fh.write(np.ascontiguousarray(index.centroids, dtype="<f8").tobytes())
            for members in index.posting_lists:
                fh.write(struct.pack("<I", len(members)))
                fh.write(np.ascontiguousarray(members, dtype="<u4").tobytes())


def load_index(path) -> MipsIndex:
    raw = Path(path).read_bytes()
    if len(raw) < len(MAGIC) + 16 or raw[: len(MAGIC)] != MAGIC:
        raise IndexFormatError(f"{path}: bad magic bytes")
    version, count, dim, n_clusters = struct.unpack_from("<IIII", raw, len(MAGIC))
    if version != VERSION:
        raise IndexFormatError(f"{path}: unsupported version {version}")
    pos = len(MAGIC) + 16

    def take(nbytes: int) -> bytes:
        nonlocal pos
        if pos + nbytes > len(raw):
            raise IndexFormatError(f"{path}: truncated file")
        chunk = raw[pos : pos + nbytes]
        pos += nbytes
        return chunk

    ids = np.frombuffer(take(4 * count), dtype="<u4").astype(np.int64)
    vectors = np.frombuffer(take(8 * count * dim), dtype="<f8").reshape(count, dim).copy()
    centroids = None
    posting: List[np.ndarray] = []
    if n_clusters:
        centroids = np.frombuffer(take(8 * n_clusters * dim), dtype="<f8").reshape(n_clusters, dim).copy()
        for _ in range(n_clusters):
            (length,) = struct.unpack("<I", take(4))
            posting.append(np.frombuffer(take(4 * length), dtype="<u4").astype(np.int64))
        covered = np.concatenate(posting) if posting else np.array([], dtype=np.int64)
        if sorted(covered.tolist()) != list(range(count)):
            raise IndexFormatError(f"{path}: posting lists do not partition the index")
    if pos != len(raw):
        raise IndexFormatError(f"{path}: trailing bytes after index data")
    return MipsIndex(vectors=vectors, ids=ids, centroids=centroids, posting_lists=posting)
