"""The two scorers: a bi-encoder (two transformer towers + projections,
inner-product score) and a cross-encoder (joint tower + tanh MLP head
with a sigmoid output).

Both are built from the same small post-layer-norm transformer encoder:
token + position + segment embeddings, multi-head self-attention with
key padding masks, GELU feed-forward, residuals with learned layer-norm
scale/shift.  All math is float64 on the autodiff ``Tensor``.
"""

from __future__ import annotations

import json
import math
import struct
from dataclasses import dataclass, asdict
from pathlib import Path
from typing import Dict, List, Optional, Sequence

import numpy as np

from .autodiff import Tensor, dropout, embedding_lookup
from .text import PAD, TokenSequence

CHECKPOINT_MAGIC = b"DUETCKPT"
CHECKPOINT_VERSION = 1

MIN_POSITIONS = 302  # context cap 300 plus [CLS] and [SEP]


class CheckpointFormatError(ValueError):
    """Checkpoint file is corrupt or does not match its manifest."""


@dataclass(frozen=True)
class EncoderConfig:
    vocab_size: int
    model_dim: int = 64
    n_layers: int = 2
    n_heads: int = 4
    ffn_dim: int = 128
    max_positions: int = 384
    dropout_rate: float = 0.1
    projection_dim: int = 64  # bi-encoder output dimension
    emb_init_scale: float = 0.02  # std of the embedding tables at init

    def __post_init__(self):
        if self.model_dim % self.n_heads != 0:
            raise ValueError("model_dim must be divisible by n_heads")
        if self.max_positions < MIN_POSITIONS:
            raise ValueError(f"max_positions must be >= {MIN_POSITIONS}")
        if not 0.0 <= self.dropout_rate < 1.0:
            raise ValueError("dropout_rate must be in [0, 1)")
        if self.emb_init_scale <= 0.0:
            raise ValueError("emb_init_scale must be positive")


def _pad_batch(seqs: Sequence[TokenSequence]) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Right-pad a batch of sequences; returns (ids, segments, key_mask)."""
    max_len = max(len(s) for s in seqs)
    ids = np.full((len(seqs), max_len), PAD, dtype=np.int64)
    segs = np.zeros((len(seqs), max_len), dtype=np.int64)
    mask = np.zeros((len(seqs), max_len), dtype=bool)
    for i, s in enumerate(seqs):
        n = len(s)
        ids[i, :n] = s.ids
        segs[i, :n] = s.segments
        mask[i, :n] = True
    return ids, segs, mask


class TransformerEncoder:
    """One tower.  Holds its parameters as named Tensors."""

    def __init__(self, cfg: EncoderConfig, rng: np.random.Generator, prefix: str = ""):
        self.cfg = cfg
        self.prefix = prefix
        self.pass_count = 0  # sequences pushed through forward()
        p: Dict[str, Tensor] = {}

        def make(name: str, shape, scale: float = 0.02):
            p[name] = Tensor(rng.normal(0.0, scale, size=shape), requires_grad=True, name=prefix + name)

        def zeros(name: str, shape):
            p[name] = Tensor(np.zeros(shape), requires_grad=True, name=prefix + name)

        def ones(name: str, shape):
            p[name] = Tensor(np.ones(shape), requires_grad=True, name=prefix + name)

        d, ffn = cfg.model_dim, cfg.ffn_dim
        make("tok_emb", (cfg.vocab_size, d), scale=cfg.emb_init_scale)
        make("pos_emb", (cfg.max_positions, d), scale=cfg.emb_init_scale)
        make("seg_emb", (2, d), scale=cfg.emb_init_scale)
        for layer in range(cfg.n_layers):
            base = f"layer{layer}."
            for proj in ("wq", "wk", "wv", "wo"):
                make(base + proj, (d, d))
                zeros(base + proj.replace("w", "b"), (d,))
            ones(base + "ln1_g", (d,))
            zeros(base + "ln1_b", (d,))
            make(base + "ffn_w1", (d, ffn))
            zeros(base + "ffn_b1", (ffn,))
            make(base + "ffn_w2", (ffn, d))
            zeros(base + "ffn_b2", (d,))
            ones(base + "ln2_g", (d,))
            zeros(base + "ln2_b", (d,))
        self.params = p

    def forward(
        self,
        ids: np.ndarray,
        segments: np.ndarray,
        key_mask: np.ndarray,
        training: bool = False,
        rng: Optional[np.random.Generator] = None,
    ) -> Tensor:
        """Hidden states (B, T, d) for a padded batch."""
        cfg = self.cfg
        b, t = ids.shape
        if t > cfg.max_positions:
            raise ValueError(f"sequence length {t} exceeds max_positions {cfg.max_positions}")
        self.pass_count += b
        p = self.params
        rate = cfg.dropout_rate
        positions = np.broadcast_to(np.arange(t), (b, t))
        h = (
            embedding_lookup(p["tok_emb"], ids)
            + embedding_lookup(p["pos_emb"], positions)
            + embedding_lookup(p["seg_emb"], segments)
        )
        # Additive attention bias: padded keys get a large negative score.
        bias = Tensor(np.where(key_mask, 0.0, -1e9)[:, None, None, :])
        n_heads = cfg.n_heads
        head_dim = cfg.model_dim // n_heads
        scale = 1.0 / math.sqrt(head_dim)

        def split_heads(x: Tensor) -> Tensor:
            return x.reshape(b, t, n_heads, head_dim).transpose(0, 2, 1, 3)

        for layer in range(cfg.n_layers):
            base = f"layer{layer}."
            q = split_heads(h @ p[base + "wq"] + p[base + "bq"])
            k = split_heads(h @ p[base + "wk"] + p[base + "bk"])
            v = split_heads(h @ p[base + "wv"] + p[base + "bv"])
            scores = (q @ k.transpose(0, 1, 3, 2)) * scale + bias
            probs = scores.softmax(axis=-1)
            ctx = (probs @ v).transpose(0, 2, 1, 3).reshape(b, t, cfg.model_dim)
            attn_out = dropout(ctx @ p[base + "wo"] + p[base + "bo"], rate, training, rng)
            h = (h + attn_out).layer_norm() * p[base + "ln1_g"] + p[base + "ln1_b"]
            f = dropout((h @ p[base + "ffn_w1"] + p[base + "ffn_b1"]).gelu(), rate, training, rng)
            ffn_out = dropout(f @ p[base + "ffn_w2"] + p[base + "ffn_b2"], rate, training, rng)
            h = (h + ffn_out).layer_norm() * p[base + "ln2_g"] + p[base + "ln2_b"]
        return h

    def cls_states(self, seqs: Sequence[TokenSequence], training: bool = False, rng=None) -> Tensor:
        ids, segs, mask = _pad_batch(seqs)
        h = self.forward(ids, segs, mask, training=training, rng=rng)
        return h[:, 0, :]


class _Scorer:
    """Shared parameter bookkeeping for the two scorers."""

    towers: Dict[str, TransformerEncoder]
    extra: Dict[str, Tensor]

    def named_parameters(self) -> Dict[str, Tensor]:
        out: Dict[str, Tensor] = {}
        for tower_name, tower in self.towers.items():
            for name, tensor in tower.params.items():
                out[f"{tower_name}.{name}"] = tensor
        out.update(self.extra)
        return out

    def parameter_arrays(self) -> Dict[str, np.ndarray]:
        return {k: v.data for k, v in self.named_parameters().items()}

    def gradients(self) -> Dict[str, Optional[np.ndarray]]:
        return {k: v.grad for k, v in self.named_parameters().items()}

    def zero_grad(self) -> None:
        for tensor in self.named_parameters().values():
            tensor.grad = None

    def load_arrays(self, arrays: Dict[str, np.ndarray]) -> None:
        params = self.named_parameters()
        for name, value in arrays.items():
            if name not in params:
                raise CheckpointFormatError(f"unknown parameter {name!r}")
            if params[name].data.shape != value.shape:
                raise CheckpointFormatError(
                    f"parameter {name!r}: shape {value.shape} does not match {params[name].data.shape}"
                )
            params[name].data = value.astype(np.float64)


class BiEncoder(_Scorer):
    """Context tower and response tower with separate weights, plus the
    two projections to the shared inner-product space."""

    kind = "bi"

    def __init__(self, cfg: EncoderConfig, rng: np.random.Generator):
        self.cfg = cfg
        self.towers = {
            "ctx": TransformerEncoder(cfg, rng, prefix="ctx."),
            "resp": TransformerEncoder(cfg, rng, prefix="resp."),
        }
        p, d = cfg.projection_dim, cfg.model_dim
        self.extra = {
            "proj_ctx": Tensor(rng.normal(0.0, 0.02, size=(p, d)), requires_grad=True, name="proj_ctx"),
            "proj_resp": Tensor(rng.normal(0.0, 0.02, size=(p, d)), requires_grad=True, name="proj_resp"),
        }

    @property
    def tower_passes(self) -> int:
        return self.towers["ctx"].pass_count + self.towers["resp"].pass_count

    def encode_context_batch(self, seqs: Sequence[TokenSequence], training=False, rng=None) -> Tensor:
        cls = self.towers["ctx"].cls_states(seqs, training=training, rng=rng)
        return cls @ self.extra["proj_ctx"].transpose(1, 0)

    def encode_response_batch(self, seqs: Sequence[TokenSequence], training=False, rng=None) -> Tensor:
        cls = self.towers["resp"].cls_states(seqs, training=training, rng=rng)
        return cls @ self.extra["proj_resp"].transpose(1, 0)

    def encode_context_vec(self, seq: TokenSequence) -> np.ndarray:
        return self.encode_context_batch([seq]).data[0]

    def encode_response_vec(self, seq: TokenSequence) -> np.ndarray:
        return self.encode_response_batch([seq]).data[0]


def retriever_score(v_c: np.ndarray, v_r: np.ndarray) -> float:
    v_c = np.asarray(v_c, dtype=np.float64)
    v_r = np.asarray(v_r, dtype=np.float64)
    if v_c.shape != v_r.shape:
        raise ValueError(f"vector length mismatch: {v_c.shape} vs {v_r.shape}")
    return float(v_c @ v_r)


class CrossEncoder(_Scorer):
    """Joint tower over [context; response] with a tanh MLP scoring head."""

    kind = "cross"

    def __init__(self, cfg: EncoderConfig, rng: np.random.Generator):
        self.cfg = cfg
        self.towers = {"joint": TransformerEncoder(cfg, rng, prefix="joint.")}
        d = cfg.model_dim
        h = cfg.model_dim
        self.extra = {
            "head_w1": Tensor(rng.normal(0.0, 0.02, size=(h, d)), requires_grad=True, name="head_w1"),
            "head_b1": Tensor(np.zeros(h), requires_grad=True, name="head_b1"),
            "head_w2": Tensor(rng.normal(0.0, 0.02, size=(1, h)), requires_grad=True, name="head_w2"),
            "head_b2": Tensor(np.zeros(1), requires_grad=True, name="head_b2"),
        }

    @property
    def joint_passes(self) -> int:
        return self.towers["joint"].pass_count

    def score_batch(self, seqs: Sequence[TokenSequence], training=False, rng=None, with_sigmoid=False) -> Tensor:
        cls = self.towers["joint"].cls_states(seqs, training=training, rng=rng)
        hidden = dropout(
            (cls @ self.extra["head_w1"].transpose(1, 0) + self.extra["head_b1"]).tanh(),
            self.cfg.dropout_rate,
            training,
            rng,
        )
        logits = (hidden @ self.extra["head_w2"].transpose(1, 0) + self.extra["head_b2"]).reshape(len(seqs))
        return logits.sigmoid() if with_sigmoid else logits

    def selector_score(self, seq: TokenSequence, with_sigmoid: bool = False) -> float:
        return float(self.score_batch([seq], with_sigmoid=with_sigmoid).data[0])


# ----------------------------------------------------------------------
# checkpoints
# ----------------------------------------------------------------------


def save_checkpoint(model, path) -> None:
    """Binary container: magic, version, JSON manifest, little-endian f64 data."""
    params = model.parameter_arrays()
    names = sorted(params)
    entries = []
    offset = 0
    for name in names:
        arr = params[name]
        entries.append({"name": name, "shape": list(arr.shape), "offset": offset})
        offset += arr.size * 8
    manifest = json.dumps(
        {"kind": model.kind, "config": asdict(model.cfg), "params": entries}
    ).encode("utf-8")
    with Path(path).open("wb") as fh:
        fh.write(CHECKPOINT_MAGIC)
        fh.write(struct.pack("<II", CHECKPOINT_VERSION, len(manifest)))
        fh.write(manifest)
        for name in names:
            fh.write(np.ascontiguousarray(params[name], dtype="<f8").tobytes())


def load_checkpoint(path):
    """Rebuild a BiEncoder or CrossEncoder from a checkpoint file."""
    raw = Path(path).read_bytes()
    if raw[: len(CHECKPOINT_MAGIC)] != CHECKPOINT_MAGIC:
        raise CheckpointFormatError(f"{path}: bad magic bytes")
    pos = len(CHECKPOINT_MAGIC)
    version, manifest_len = struct.unpack_from("<II", raw, pos)
    if version != CHECKPOINT_VERSION:
        raise CheckpointFormatError(f"{path}: unsupported version {version}")
    pos += 8
    manifest = json.loads(raw[pos : pos + manifest_len].decode("utf-8"))
    pos += manifest_len
    cfg = EncoderConfig(**manifest["config"])
    rng = np.random.default_rng(0)
    model = BiEncoder(cfg, rng) if manifest["kind"] == "bi" else CrossEncoder(cfg, rng)
    arrays: Dict[str, np.ndarray] = {}
    for entry in manifest["params"]:
        shape = tuple(entry["shape"])
        count = int(np.prod(shape)) if shape else 1
        start = pos + entry["offset"]
        end = start + count * 8
        if end > len(raw):
            raise CheckpointFormatError(f"{path}: truncated parameter data for {entry['name']!r}")
        arrays[entry["name"]] = np.frombuffer(raw[start:end], dtype="<f8").reshape(shape).copy()
    expected = set(model.parameter_arrays())
    if set(arrays) != expected:
        raise CheckpointFormatError(f"{path}: manifest parameter names do not match the model")
    model.load_arrays(arrays)
    return model
