"""Vocabulary, tokenization and input-sequence assembly.

Tokens are whitespace-separated strings.  Sequences follow the layouts

    context:  [CLS] u_1 [EOT] u_2 [EOT] ... u_n [EOT] [SEP]
    response: [CLS] r_1 ... r_l [SEP]
    joint:    [CLS] u_1 [EOT] ... [EOT] [SEP] r_1 ... r_l [SEP]

Over-long contexts are cut from the front (oldest tokens dropped, most
recent turns kept); over-long responses are cut from the back.
"""

from __future__ import annotations

from collections import Counter
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, List, Sequence

PAD, UNK, CLS, SEP, EOT = 0, 1, 2, 3, 4
SPECIAL_TOKENS = ["[PAD]", "[UNK]", "[CLS]", "[SEP]", "[EOT]"]
NUM_SPECIALS = len(SPECIAL_TOKENS)

MAX_CONTEXT_LEN = 300
MAX_RESPONSE_LEN = 72


@dataclass(frozen=True)
class Vocabulary:
    """Token-to-id map with five reserved special ids."""

    token_to_id: dict
    id_to_token: tuple

    def __len__(self) -> int:
        return NUM_SPECIALS + len(self.token_to_id)

    def encode_token(self, token: str) -> int:
        return self.token_to_id.get(token, UNK)

    def decode_id(self, token_id: int) -> str:
        if token_id < NUM_SPECIALS:
            return SPECIAL_TOKENS[token_id]
        return self.id_to_token[token_id - NUM_SPECIALS]

    def save(self, path) -> None:
        lines = SPECIAL_TOKENS + list(self.id_to_token)
        Path(path).write_text("\n".join(lines) + "\n", encoding="utf-8")

    @classmethod
    def load(cls, path) -> "Vocabulary":
        lines = Path(path).read_text(encoding="utf-8").splitlines()
        if lines[:NUM_SPECIALS] != SPECIAL_TOKENS:
            raise ValueError(f"vocabulary file {path} does not start with the reserved specials")
        tokens = lines[NUM_SPECIALS:]
        return cls(
            token_to_id={tok: i + NUM_SPECIALS for i, tok in enumerate(tokens)},
            id_to_token=tuple(tokens),
        )


@dataclass(frozen=True)
class TokenSequence:
    """Assembled model input: ids, per-token segment ids, positions."""

    ids: tuple
    segments: tuple
    positions: tuple

    def __post_init__(self):
        if not (len(self.ids) == len(self.segments) == len(self.positions)):
            raise ValueError("ids, segments and positions must have equal length")
        if self.ids[0] != CLS:
            raise ValueError("sequence must start with [CLS]")

    def __len__(self) -> int:
        return len(self.ids)


@dataclass(frozen=True)
class DialogueExample:
    """One (context, response, label) triple; utterances are token lists."""

    context: tuple
    response: tuple
    label: int
    candidates: tuple = field(default=())

    def __post_init__(self):
        if len(self.context) < 1:
            raise ValueError("context needs at least one utterance")
        if self.label not in (0, 1):
            raise ValueError(f"label must be 0 or 1, got {self.label}")


def build_vocab(corpus: Iterable[Sequence[str]], min_freq: int = 1, max_size: int = 30000) -> Vocabulary:
    """Frequency vocabulary over an iterable of token sequences.

    Most frequent tokens get the smallest ids; ties break lexicographically.
    """
    counts: Counter = Counter()
    n_seqs = 0
    for seq in corpus:
        n_seqs += 1
        counts.update(seq)
    if n_seqs == 0:
        raise ValueError("cannot build a vocabulary from an empty corpus")
    kept = [(tok, c) for tok, c in counts.items() if c >= min_freq]
    kept.sort(key=lambda item: (-item[1], item[0]))
    room = max(0, max_size - NUM_SPECIALS)
    tokens = tuple(tok for tok, _ in kept[:room])
    return Vocabulary(
        token_to_id={tok: i + NUM_SPECIALS for i, tok in enumerate(tokens)},
        id_to_token=tokens,
    )


def _sequence(ids: List[int], segments: List[int]) -> TokenSequence:
    return TokenSequence(
        ids=tuple(ids),
        segments=tuple(segments),
        positions=tuple(range(len(ids))),
    )


def _context_body(context: Sequence[Sequence[str]], vocab: Vocabulary, budget: int) -> List[int]:
    """Flattened ``u_1 [EOT] ... u_n [EOT]`` stream cut to ``budget`` tokens.

    Content tokens are dropped from the front before any [EOT] marker is.
    """
    body: List[int] = []
    for utt in context:
        body.extend(vocab.encode_token(t) for t in utt)
        body.append(EOT)
    if len(body) <= budget:
        return body
    overflow = len(body) - budget
    kept: List[int] = []
    dropped = 0
    # First pass drops leading content tokens only; if the budget is so
    # tight that structural [EOT]s alone overflow, the oldest of those
    # go too.
    for tok in body:
        if dropped < overflow and tok != EOT:
            dropped += 1
        else:
            kept.append(tok)
    while len(kept) > budget:
        kept.pop(0)
    return kept


def encode_context(context: Sequence[Sequence[str]], vocab: Vocabulary, max_len: int = MAX_CONTEXT_LEN) -> TokenSequence:
    if len(context) < 1:
        raise ValueError("context must contain at least one utterance")
    body = _context_body(context, vocab, budget=max_len - 2)
    ids = [CLS] + body + [SEP]
    return _sequence(ids, [0] * len(ids))


def encode_response(response: Sequence[str], vocab: Vocabulary, max_len: int = MAX_RESPONSE_LEN) -> TokenSequence:
    if len(response) == 0:
        raise ValueError("response must be non-empty")
    body = [vocab.encode_token(t) for t in response][: max_len - 2]
    ids = [CLS] + body + [SEP]
    return _sequence(ids, [0] * len(ids))


def encode_joint(
    context: Sequence[Sequence[str]],
    response: Sequence[str],
    vocab: Vocabulary,
    max_ctx: int = MAX_CONTEXT_LEN,
    max_resp: int = MAX_RESPONSE_LEN,
) -> TokenSequence:
    if len(response) == 0:
        raise ValueError("response must be non-empty")
    ctx = encode_context(context, vocab, max_len=max_ctx)
    resp_body = [vocab.encode_token(t) for t in response][: max_resp - 2]
    ids = list(ctx.ids) + resp_body + [SEP]
    segments = [0] * len(ctx.ids) + [1] * (len(resp_body) + 1)
    return _sequence(ids, segments)


def decode_ids(ids: Sequence[int], vocab: Vocabulary) -> List[str]:
    """Tokens for ``ids`` with special symbols stripped."""
    return [vocab.decode_id(i) for i in ids if i >= NUM_SPECIALS]
