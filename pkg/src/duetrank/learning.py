"""Ranking losses, softened-distribution KL mimicry and the alternating
mutual-learning training loop.

Per batch the loop follows the alternating update order: compute both
models' predictions, update the retriever on its supervised loss plus
the KL toward the selector's softened prediction, refresh the retriever
prediction with the just-updated weights, then update the selector
against that refreshed target.  Counterpart distributions are constants:
no gradient crosses between the two models.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Dict, List, Optional

import numpy as np

from .autodiff import Tensor, softmax_temp
from .data import Corpus, FixedNegatives, iter_batches
from .encoders import BiEncoder, CrossEncoder
from .optim import AdamState, ScheduleConfig, adam_step, clip_global_norm, lr_at
from .text import Vocabulary, encode_context, encode_joint, encode_response


@dataclass(frozen=True)
class MutualConfig:
    alpha: float = 1.0
    tau: float = 3.0
    delta_r: int = 32
    epochs: int = 3
    batch_size: int = 8
    peak_lr: float = 3e-5
    warmup_fraction: float = 0.1
    clip_threshold: float = 10.0
    patience: int = 3
    seed: int = 0

    def __post_init__(self):
        if self.alpha < 0:
            raise ValueError("alpha must be non-negative")
        if self.tau <= 0:
            raise ValueError("tau must be positive")


@dataclass
class TrainReport:
    """Per-step losses and per-epoch validation hits@1 for both models."""

    steps: List[Dict] = field(default_factory=list)
    epochs: List[Dict] = field(default_factory=list)

    def to_jsonl(self, path) -> None:
        with Path(path).open("w", encoding="utf-8") as fh:
            for rec in self.epochs:
                fh.write(json.dumps({"record": "epoch", **rec}) + "\n")
            for rec in self.steps:
                fh.write(json.dumps({"record": "step", **rec}) + "\n")


# ----------------------------------------------------------------------
# losses
# ----------------------------------------------------------------------


def nll_loss(scores: Tensor, positive) -> Tensor:
    """Softmax negative log-likelihood of the positive slot.

    ``scores`` is (M,) with an int positive index, or (N, M) with a
    length-N index array; the batched form returns the mean.
    """
    logp = scores.log_softmax(axis=-1)
    if scores.ndim == 1:
        s = int(positive)
        if not 0 <= s < scores.shape[0]:
            raise ValueError(f"positive slot {s} out of range for {scores.shape[0]} scores")
        return -logp[s]
    rows = np.arange(scores.shape[0])
    slots = np.asarray(positive, dtype=np.int64)
    if slots.shape != (scores.shape[0],) or (slots < 0).any() or (slots >= scores.shape[1]).any():
        raise ValueError("positive slots out of range")
    return -(logp[rows, slots].mean())


def kl_div(q: np.ndarray, p: np.ndarray) -> float:
    """D(q || p) = sum q ln(q/p), with 0 ln 0 = 0 and p floored at 1e-12."""
    q = np.asarray(q, dtype=np.float64)
    p = np.asarray(p, dtype=np.float64)
    if q.shape != p.shape:
        raise ValueError(f"distribution length mismatch: {q.shape} vs {p.shape}")
    for name, dist in (("q", q), ("p", p)):
        if (dist < 0).any() or abs(dist.sum() - 1.0) > 1e-9:
            raise ValueError(f"{name} is not a probability distribution")
    p = np.maximum(p, 1e-12)
    mask = q > 0
    return float(np.sum(q[mask] * np.log(q[mask] / p[mask])))


def _kl_to_constant(target: np.ndarray, logits: Tensor, tau: float) -> Tensor:
    """Mean over rows of D(target || softmax(logits / tau)).

    ``target`` is a constant (N, M) distribution; gradient flows only
    through ``logits``.
    """
    logp = (logits * (1.0 / tau)).log_softmax(axis=-1)
    cross = -((Tensor(target) * logp).sum(axis=-1))
    mask = target > 0
    entropy = np.sum(np.where(mask, target * np.log(np.where(mask, target, 1.0)), 0.0), axis=-1)
    return (cross + Tensor(entropy)).mean()


def mutual_losses(retriever_logits: Tensor, selector_logits: Tensor, positive, cfg: MutualConfig):
    """Combined losses (L_g, L_s) for one candidate list or batch.

    Each model's loss is its supervised NLL plus alpha times the KL from
    the counterpart's softened distribution (a constant target) to its
    own softened distribution.
    """
    ret = retriever_logits if retriever_logits.ndim == 2 else retriever_logits.reshape(1, -1)
    sel = selector_logits if selector_logits.ndim == 2 else selector_logits.reshape(1, -1)
    if ret.shape != sel.shape:
        raise ValueError("logit shapes must agree")
    slots = np.atleast_1d(np.asarray(positive, dtype=np.int64))
    q = softmax_temp(sel.data, cfg.tau)
    p = softmax_temp(ret.data, cfg.tau)
    l_g = nll_loss(ret, slots)
    l_s = nll_loss(sel, slots)
    if cfg.alpha > 0:
        l_g = l_g + cfg.alpha * _kl_to_constant(q, ret, cfg.tau)
        l_s = l_s + cfg.alpha * _kl_to_constant(p, sel, cfg.tau)
    return l_g, l_s


# ----------------------------------------------------------------------
# training
# ----------------------------------------------------------------------


class _EncodedCorpus:
    """Token sequences for a corpus, tokenized once up front."""

    def __init__(self, corpus: Corpus, vocab: Vocabulary):
        self.corpus = corpus
        self.vocab = vocab
        self.context_seqs = [encode_context(ex.context, vocab) for ex in corpus.examples]
        self.response_seqs = [encode_response(resp, vocab) for resp in corpus.response_pool]
        self._joint_cache: dict = {}

    def joint(self, example_idx: int, pool_id: int):
        key = (example_idx, pool_id)
        seq = self._joint_cache.get(key)
        if seq is None:
            ex = self.corpus.examples[example_idx]
            seq = encode_joint(ex.context, self.corpus.response_pool[pool_id], self.vocab)
            self._joint_cache[key] = seq
        return seq


def _batch_logits_bi(enc: _EncodedCorpus, bi: BiEncoder, batch, training: bool, rng) -> Tensor:
    n, m = batch.candidate_ids.shape
    ctx_seqs = [enc.context_seqs[i] for i in batch.example_indices]
    resp_seqs = [enc.response_seqs[pid] for pid in batch.candidate_ids.ravel()]
    v_c = bi.encode_context_batch(ctx_seqs, training=training, rng=rng)
    v_r = bi.encode_response_batch(resp_seqs, training=training, rng=rng)
    p = v_c.shape[1]
    logits = v_r.reshape(n, m, p) @ v_c.reshape(n, p, 1)
    return logits.reshape(n, m)


def _batch_logits_cross(enc: _EncodedCorpus, cross: CrossEncoder, batch, training: bool, rng) -> Tensor:
    n, m = batch.candidate_ids.shape
    seqs = [
        enc.joint(ex_idx, pid)
        for ex_idx, row in zip(batch.example_indices, batch.candidate_ids)
        for pid in row
    ]
    return cross.score_batch(seqs, training=training, rng=rng).reshape(n, m)


def _apply_update(model, loss: Tensor, state: AdamState, lr: float, cfg: MutualConfig) -> None:
    model.zero_grad()
    loss.backward()
    grads = clip_global_norm(
        {k: (g if g is not None else None) for k, g in model.gradients().items()},
        cfg.clip_threshold,
    )
    adam_step(model.parameter_arrays(), grads, state, lr)


def _val_hits1(enc: Optional[_EncodedCorpus], bi: Optional[BiEncoder], cross: Optional[CrossEncoder]) -> Dict:
    """Validation hits@1 over fixed candidate lists, eval mode."""
    out: Dict = {}
    if enc is None:
        return out
    corpus = enc.corpus
    n = len(corpus.examples)
    if n == 0:
        return out
    hits_bi = hits_cross = 0
    for idx, ex in enumerate(corpus.examples):
        cands = ex.candidates
        pos_slot = cands.index(ex.response)
        if bi is not None:
            v_c = bi.encode_context_batch([enc.context_seqs[idx]]).data[0]
            seqs = [encode_response(c, enc.vocab) for c in cands]
            v_r = bi.encode_response_batch(seqs).data
            scores = v_r @ v_c
            if _argmax_tiebreak(scores) == pos_slot:
                hits_bi += 1
        if cross is not None:
            seqs = [encode_joint(ex.context, c, enc.vocab) for c in cands]
            scores = cross.score_batch(seqs).data
            if _argmax_tiebreak(scores) == pos_slot:
                hits_cross += 1
    if bi is not None:
        out["retriever_hits1"] = hits_bi / n
    if cross is not None:
        out["selector_hits1"] = hits_cross / n
    return out


def _argmax_tiebreak(scores: np.ndarray) -> int:
    return int(np.lexsort((np.arange(len(scores)), -scores))[0])


def _checksum(model) -> float:
    return float(sum(np.sum(v) for v in model.parameter_arrays().values()))


def train_mutual(
    corpus: Corpus,
    retriever: BiEncoder,
    selector: CrossEncoder,
    cfg: MutualConfig,
    vocab: Vocabulary,
    val_corpus: Optional[Corpus] = None,
    trace: Optional[List[Dict]] = None,
) -> TrainReport:
    """Alternating mutual-learning loop over both models, in place."""
    return _train(corpus, retriever, selector, cfg, vocab, val_corpus, trace)


def train_single(
    corpus: Corpus,
    model,
    cfg: MutualConfig,
    vocab: Vocabulary,
    val_corpus: Optional[Corpus] = None,
) -> TrainReport:
    """Supervised-only training of one model (mutual loop with alpha 0)."""
    cfg = replace(cfg, alpha=0.0)
    if isinstance(model, BiEncoder):
        return _train(corpus, model, None, cfg, vocab, val_corpus, None)
    return _train(corpus, None, model, cfg, vocab, val_corpus, None)


def _train(
    corpus: Corpus,
    retriever: Optional[BiEncoder],
    selector: Optional[CrossEncoder],
    cfg: MutualConfig,
    vocab: Vocabulary,
    val_corpus: Optional[Corpus],
    trace: Optional[List[Dict]],
) -> TrainReport:
    mutual = retriever is not None and selector is not None and cfg.alpha > 0
    rng_data = np.random.default_rng([cfg.seed, 0])
    rng_g = np.random.default_rng([cfg.seed, 1])
    rng_s = np.random.default_rng([cfg.seed, 2])

    enc = _EncodedCorpus(corpus, vocab)
    val_enc = _EncodedCorpus(val_corpus, vocab) if val_corpus is not None else None
    fixed = FixedNegatives.sample(corpus, cfg.delta_r, rng_data)

    steps_per_epoch = math.ceil(len(corpus.examples) / cfg.batch_size)
    total_steps = max(1, cfg.epochs * steps_per_epoch)
    sched = ScheduleConfig(
        peak_lr=cfg.peak_lr,
        warmup_steps=int(cfg.warmup_fraction * total_steps),
        total_steps=total_steps,
    )
    state_g = AdamState.for_params(retriever.parameter_arrays()) if retriever else None
    state_s = AdamState.for_params(selector.parameter_arrays()) if selector else None

    report = TrainReport()
    best_metric = -np.inf
    stale = 0
    step = 0

    def record_trace(event: str) -> None:
        if trace is not None:
            trace.append(
                {
                    "step": step,
                    "event": event,
                    "retriever_checksum": _checksum(retriever) if retriever else 0.0,
                    "selector_checksum": _checksum(selector) if selector else 0.0,
                }
            )

    def check_finite(value: float, model_name: str) -> None:
        if not np.isfinite(value):
            raise RuntimeError(f"non-finite loss ({value}) for {model_name} at step {step}")

    for epoch in range(cfg.epochs):
        for batch in iter_batches(corpus, fixed, cfg.batch_size, rng_data, shuffle=True):
            lr = lr_at(step, sched)
            step_rec: Dict = {"step": step, "epoch": epoch}

            q = None
            if mutual:
                sel_target = _batch_logits_cross(enc, selector, batch, training=False, rng=None)
                q = softmax_temp(sel_target.data, cfg.tau)
                record_trace("compute_targets")

            if retriever is not None:
                logits = _batch_logits_bi(enc, retriever, batch, training=True, rng=rng_g)
                loss = nll_loss(logits, batch.positive_slots)
                step_rec["retriever_nll"] = float(loss.data)
                if mutual:
                    kl = _kl_to_constant(q, logits, cfg.tau)
                    step_rec["retriever_kl"] = float(kl.data)
                    loss = loss + cfg.alpha * kl
                check_finite(float(loss.data), "retriever")
                _apply_update(retriever, loss, state_g, lr, cfg)
                record_trace("update_retriever")

            p = None
            if mutual:
                ret_refresh = _batch_logits_bi(enc, retriever, batch, training=False, rng=None)
                p = softmax_temp(ret_refresh.data, cfg.tau)
                record_trace("refresh_p")

            if selector is not None:
                logits = _batch_logits_cross(enc, selector, batch, training=True, rng=rng_s)
                loss = nll_loss(logits, batch.positive_slots)
                step_rec["selector_nll"] = float(loss.data)
                if mutual:
                    kl = _kl_to_constant(p, logits, cfg.tau)
                    step_rec["selector_kl"] = float(kl.data)
                    loss = loss + cfg.alpha * kl
                check_finite(float(loss.data), "selector")
                _apply_update(selector, loss, state_s, lr, cfg)
                record_trace("update_selector")

            if mutual:
                record_trace("refresh_q")
            report.steps.append(step_rec)
            step += 1

        epoch_rec = {"epoch": epoch, **_val_hits1(val_enc, retriever, selector)}
        report.epochs.append(epoch_rec)
        if val_enc is not None:
            metric = np.mean([v for k, v in epoch_rec.items() if k.endswith("hits1")])
            if metric > best_metric + 1e-12:
                best_metric = metric
                stale = 0
            else:
                stale += 1
                if stale >= cfg.patience:
                    break
    return report
