"""Two-stage inference (pre-retrieve, re-rank), final-scoring strategies,
ranking metrics and the compute/latency benchmark.

All rankings are total orders: score descending, response id ascending
on ties.
"""

from __future__ import annotations

import json
import time
from dataclasses import dataclass
from pathlib import Path
from typing import Dict, Iterable, List, Optional, Sequence

import numpy as np

from .data import Corpus
from .encoders import BiEncoder, CrossEncoder
from .index import MipsIndex, SearchHit, search_exact, search_ivf
from .text import DialogueExample, Vocabulary, encode_context, encode_joint, encode_response

RankedList = List[SearchHit]

STRATEGY_SELECTOR_ONLY = "selector_only"
STRATEGY_ENSEMBLE = "ensemble"


@dataclass(frozen=True)
class PipelineConfig:
    n_r: int = 100
    strategy: str = STRATEGY_SELECTOR_ONLY
    normalize_ensemble: bool = False  # min-max both scores first; off by default
    nprobe: Optional[int] = None  # None = exact search

    def __post_init__(self):
        if self.n_r < 1:
            raise ValueError("n_r must be at least 1")
        if self.strategy not in (STRATEGY_SELECTOR_ONLY, STRATEGY_ENSEMBLE):
            raise ValueError(f"unknown strategy {self.strategy!r}")


def _ranked(ids: Sequence[int], scores: Sequence[float]) -> RankedList:
    ids = np.asarray(ids, dtype=np.int64)
    scores = np.asarray(scores, dtype=np.float64)
    order = np.lexsort((ids, -scores))
    return [SearchHit(int(ids[i]), float(scores[i])) for i in order]


def retrieve_candidates(
    context: Sequence[Sequence[str]],
    bi_encoder: BiEncoder,
    index: MipsIndex,
    n_r: int,
    vocab: Vocabulary,
    nprobe: Optional[int] = None,
) -> RankedList:
    """Encode the context and pull the top n_r pool responses by inner product."""
    seq = encode_context(context, vocab)
    v_c = bi_encoder.encode_context_batch([seq]).data[0]
    if nprobe is None:
        return search_exact(index, v_c, n_r)
    return search_ivf(index, v_c, n_r, nprobe)


def _cross_scores(
    cross: CrossEncoder,
    context: Sequence[Sequence[str]],
    ids: Sequence[int],
    responses: Sequence,
    vocab: Vocabulary,
    batch_size: int = 64,
) -> np.ndarray:
    """Sigmoid selector scores aligned with the input order.

    Candidates are scored in ascending-id chunks so the result for a
    given candidate set is bitwise independent of the order it arrived
    in (batch padding would otherwise leak between orderings).
    """
    order = np.argsort(np.asarray(ids, dtype=np.int64), kind="stable")
    seqs = [encode_joint(context, responses[i], vocab) for i in order]
    chunks = [
        cross.score_batch(seqs[i : i + batch_size], with_sigmoid=True).data
        for i in range(0, len(seqs), batch_size)
    ]
    scores = np.empty(len(seqs))
    scores[order] = np.concatenate(chunks)
    return scores


def rerank(
    context: Sequence[Sequence[str]],
    candidates: RankedList,
    selector: CrossEncoder,
    strategy: str,
    vocab: Vocabulary,
    response_pool: Sequence,
    normalize: bool = False,
) -> RankedList:
    """Re-score retrieved candidates with the cross-encoder.

    selector_only orders by the selector's sigmoid score; ensemble adds
    the candidate's pre-retrieval inner product to it.
    """
    if not candidates:
        raise ValueError("candidate list is empty")
    ids = [hit.response_id for hit in candidates]
    s = _cross_scores(selector, context, ids, [response_pool[i] for i in ids], vocab)
    if strategy == STRATEGY_SELECTOR_ONLY:
        return _ranked(ids, s)
    if strategy != STRATEGY_ENSEMBLE:
        raise ValueError(f"unknown strategy {strategy!r}")
    g = np.array([hit.score for hit in candidates])
    if normalize:
        g = _min_max(g)
        s = _min_max(s)
    return _ranked(ids, g + s)


def _min_max(x: np.ndarray) -> np.ndarray:
    span = x.max() - x.min()
    if span == 0:
        return np.zeros_like(x)
    return (x - x.min()) / span


# ----------------------------------------------------------------------
# systems
# ----------------------------------------------------------------------


class BiEncoderSystem:
    """Single-stage dense ranking: fixed candidates if present, else the index."""

    name = "bi"

    def __init__(self, bi: BiEncoder, vocab: Vocabulary, index: Optional[MipsIndex] = None, nprobe: Optional[int] = None):
        self.bi = bi
        self.vocab = vocab
        self.index = index
        self.nprobe = nprobe

    def rank(self, example: DialogueExample, corpus: Corpus, k: int) -> RankedList:
        if example.candidates:
            seq = encode_context(example.context, self.vocab)
            v_c = self.bi.encode_context_batch([seq]).data[0]
            ids = [corpus.response_ids[c] for c in example.candidates]
            seqs = [encode_response(c, self.vocab) for c in example.candidates]
            v_r = self.bi.encode_response_batch(seqs).data
            return _ranked(ids, v_r @ v_c)[:k]
        if self.index is None:
            raise ValueError("example has no candidate list and no index was provided")
        return retrieve_candidates(example.context, self.bi, self.index, k, self.vocab, self.nprobe)


class CrossEncoderSystem:
    """Single-stage cross-encoder ranking over candidates or the whole pool."""

    name = "cross"

    def __init__(self, cross: CrossEncoder, vocab: Vocabulary, batch_size: int = 64):
        self.cross = cross
        self.vocab = vocab
        self.batch_size = batch_size

    def rank(self, example: DialogueExample, corpus: Corpus, k: int) -> RankedList:
        if example.candidates:
            ids = [corpus.response_ids[c] for c in example.candidates]
            responses = list(example.candidates)
        else:
            ids = list(range(corpus.pool_size))
            responses = corpus.response_pool
        scores = _cross_scores(self.cross, example.context, ids, responses, self.vocab, self.batch_size)
        return _ranked(ids, scores)[:k]


class TwoStageSystem:
    """Bi-encoder pre-retrieval of n_r candidates, cross-encoder re-ranking."""

    name = "two_stage"

    def __init__(
        self,
        bi: BiEncoder,
        cross: CrossEncoder,
        vocab: Vocabulary,
        index: Optional[MipsIndex],
        cfg: PipelineConfig,
    ):
        self.bi = bi
        self.cross = cross
        self.vocab = vocab
        self.index = index
        self.cfg = cfg

    def rank(self, example: DialogueExample, corpus: Corpus, k: int) -> RankedList:
        if example.candidates:
            ids = [corpus.response_ids[c] for c in example.candidates]
            seq = encode_context(example.context, self.vocab)
            v_c = self.bi.encode_context_batch([seq]).data[0]
            seqs = [encode_response(c, self.vocab) for c in example.candidates]
            v_r = self.bi.encode_response_batch(seqs).data
            pre = _ranked(ids, v_r @ v_c)[: self.cfg.n_r]
        else:
            if self.index is None:
                raise ValueError("example has no candidate list and no index was provided")
            pre = retrieve_candidates(
                example.context, self.bi, self.index, self.cfg.n_r, self.vocab, self.cfg.nprobe
            )
        return rerank(
            example.context,
            pre,
            self.cross,
            self.cfg.strategy,
            self.vocab,
            corpus.response_pool,
            normalize=self.cfg.normalize_ensemble,
        )[:k]


# ----------------------------------------------------------------------
# metrics
# ----------------------------------------------------------------------


@dataclass
class MetricsReport:
    hits: Dict[int, float]
    mrr: float
    n_examples: int
    ranks: Optional[List[int]] = None  # 0 marks a positive missing from the list

    def to_dict(self) -> Dict:
        out = {f"hits@{k}": v for k, v in sorted(self.hits.items())}
        out["mrr"] = self.mrr
        out["n_examples"] = self.n_examples
        return out

    def to_json(self, path=None) -> str:
        text = json.dumps(self.to_dict(), indent=2, sort_keys=True)
        if path is not None:
            Path(path).write_text(text + "\n", encoding="utf-8")
        return text

    def __str__(self) -> str:
        lines = [f"examples: {self.n_examples}"]
        lines += [f"hits@{k}: {v:.4f}" for k, v in sorted(self.hits.items())]
        lines.append(f"MRR: {self.mrr:.4f}")
        return "\n".join(lines)


def evaluate(corpus: Corpus, system, ks: Iterable[int], keep_ranks: bool = True) -> MetricsReport:
    """hits@k and MRR of the positive response under ``system``'s ranking."""
    ks = sorted(set(int(k) for k in ks))
    if not ks:
        raise ValueError("at least one k is required")
    max_k = max(ks)
    hit_counts = {k: 0 for k in ks}
    rr_sum = 0.0
    ranks: List[int] = []
    for ex in corpus.examples:
        if ex.label != 1:
            raise ValueError("every evaluation example must carry its positive response")
        positive = corpus.positive_id(ex)
        ranked = system.rank(ex, corpus, max_k)
        rank = 0
        for i, hit in enumerate(ranked, start=1):
            if hit.response_id == positive:
                rank = i
                break
        ranks.append(rank)
        if rank:
            rr_sum += 1.0 / rank
            for k in ks:
                if rank <= k:
                    hit_counts[k] += 1
    n = len(corpus.examples)
    return MetricsReport(
        hits={k: hit_counts[k] / n for k in ks},
        mrr=rr_sum / n,
        n_examples=n,
        ranks=ranks if keep_ranks else None,
    )


# ----------------------------------------------------------------------
# benchmark
# ----------------------------------------------------------------------


@dataclass
class BenchRow:
    variant: str
    n_r: int
    hits1: float
    mrr: float
    joint_passes_per_query: float
    tower_passes_per_query: float
    ms_per_query: float


def bench(
    corpus: Corpus,
    systems: Dict[str, object],
    vocab: Vocabulary,
    ks: Iterable[int] = (1, 10),
) -> List[BenchRow]:
    """Accuracy plus deterministic compute proxies and wall time per variant.

    Each entry of ``systems`` maps a variant name to a ready system; the
    variant's n_r is read off its config when it has one.
    """
    rows: List[BenchRow] = []
    for name, system in systems.items():
        cross = getattr(system, "cross", None)
        bi = getattr(system, "bi", None)
        joint0 = cross.joint_passes if cross is not None else 0
        tower0 = bi.tower_passes if bi is not None else 0
        t0 = time.perf_counter()
        report = evaluate(corpus, system, ks, keep_ranks=False)
        elapsed = time.perf_counter() - t0
        n = max(1, report.n_examples)
        joint = (cross.joint_passes - joint0) if cross is not None else 0
        tower = (bi.tower_passes - tower0) if bi is not None else 0
        cfg = getattr(system, "cfg", None)
        rows.append(
            BenchRow(
                variant=name,
                n_r=cfg.n_r if cfg is not None else 0,
                hits1=report.hits.get(1, 0.0),
                mrr=report.mrr,
                joint_passes_per_query=joint / n,
                tower_passes_per_query=tower / n,
                ms_per_query=1000.0 * elapsed / n,
            )
        )
    return rows


def bench_to_csv(rows: List[BenchRow], path) -> None:
    import csv

    with Path(path).open("w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh)
        writer.writerow(
            ["variant", "n_r", "hits@1", "mrr", "joint_passes_per_query", "tower_passes_per_query", "ms_per_query"]
        )
        for r in rows:
            writer.writerow(
                [r.variant, r.n_r, r.hits1, r.mrr, r.joint_passes_per_query, r.tower_passes_per_query, r.ms_per_query]
            )


def bench_to_json(rows: List[BenchRow], path=None) -> str:
    payload = [r.__dict__ for r in rows]
    text = json.dumps(payload, indent=2)
    if path is not None:
        Path(path).write_text(text + "\n", encoding="utf-8")
    return text
