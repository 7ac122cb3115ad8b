"""Corpus ingestion, synthetic corpus generation, negative sampling and
batch assembly.

The on-disk corpus format is JSON Lines.  Each line is an object with
``context`` (array of utterance strings), ``response`` (string) and
``label`` (0 or 1); evaluation files may add ``candidates`` (array of
response strings) for fixed-candidate ranking.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import List, Optional, Sequence

import numpy as np

from .text import DialogueExample


class CorpusFormatError(ValueError):
    """A corpus file line failed to parse or is missing a field."""


@dataclass
class Corpus:
    """Examples plus the deduplicated response pool.

    Pool ids are assigned by first occurrence, so they are dense 0..P-1
    and every positive response has an id.
    """

    examples: List[DialogueExample]
    response_pool: List[tuple]
    response_ids: dict  # response tokens -> pool id
    example_topics: Optional[List[int]] = None  # synthetic corpora only

    @property
    def pool_size(self) -> int:
        return len(self.response_pool)

    def positive_id(self, example: DialogueExample) -> int:
        return self.response_ids[example.response]


def _build_pool(examples: Sequence[DialogueExample]) -> tuple[list, dict]:
    pool: list = []
    ids: dict = {}
    for ex in examples:
        responses = [ex.response] + list(ex.candidates)
        for resp in responses:
            if resp not in ids:
                ids[resp] = len(pool)
                pool.append(resp)
    return pool, ids


def corpus_from_examples(examples: Sequence[DialogueExample], topics: Optional[List[int]] = None) -> Corpus:
    pool, ids = _build_pool(examples)
    return Corpus(list(examples), pool, ids, example_topics=topics)


def load_corpus(path) -> Corpus:
    path = Path(path)
    examples: List[DialogueExample] = []
    with path.open("r", encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, start=1):
            line = line.strip()
            if not line:
                continue
            try:
                obj = json.loads(line)
            except json.JSONDecodeError as exc:
                raise CorpusFormatError(f"{path}:{lineno}: malformed JSON ({exc.msg})") from exc
            for fieldname in ("context", "response", "label"):
                if fieldname not in obj:
                    raise CorpusFormatError(f"{path}:{lineno}: missing field {fieldname!r}")
            context = tuple(tuple(utt.split()) for utt in obj["context"])
            candidates = tuple(tuple(c.split()) for c in obj.get("candidates", []))
            try:
                examples.append(
                    DialogueExample(
                        context=context,
                        response=tuple(obj["response"].split()),
                        label=obj["label"],
                        candidates=candidates,
                    )
                )
            except ValueError as exc:
                raise CorpusFormatError(f"{path}:{lineno}: {exc}") from exc
    return corpus_from_examples(examples)


def save_corpus(corpus: Corpus, path) -> None:
    with Path(path).open("w", encoding="utf-8") as fh:
        for ex in corpus.examples:
            obj = {
                "context": [" ".join(utt) for utt in ex.context],
                "response": " ".join(ex.response),
                "label": ex.label,
            }
            if ex.candidates:
                obj["candidates"] = [" ".join(c) for c in ex.candidates]
            fh.write(json.dumps(obj) + "\n")


def sample_negatives(corpus: Corpus, positive_id: int, delta_r: int, rng: np.random.Generator) -> List[int]:
    """delta_r distinct pool ids, never the positive, uniform without replacement."""
    pool_size = corpus.pool_size
    if pool_size <= delta_r:
        raise ValueError(
            f"response pool of size {pool_size} cannot supply {delta_r} negatives"
        )
    others = np.array([i for i in range(pool_size) if i != positive_id], dtype=np.int64)
    picked = rng.choice(others, size=delta_r, replace=False)
    return [int(i) for i in picked]


# ----------------------------------------------------------------------
# synthetic corpus
# ----------------------------------------------------------------------

# Each example has a latent topic and a keyword.  Contexts mix topic
# words with shared filler; the true response repeats the topic and the
# keyword.  Topic overlap is what a bi-encoder can pick up; the exact
# keyword echo needs token-level interaction, which favours the
# cross-encoder.

_WORDS_PER_TOPIC = 12
_N_KEYWORDS = 40
_N_FILLER = 30


def _topic_word(topic: int, j: int) -> str:
    return f"t{topic}w{j}"


def make_synthetic_corpus(
    n_examples: int,
    vocab_size: int = 400,
    n_topics: int = 10,
    rng: Optional[np.random.Generator] = None,
    topic_word_prob: float = 0.7,
) -> Corpus:
    """Topic-clustered dialogue corpus with keyword-echo responses.

    ``vocab_size`` caps the filler vocabulary; topic and keyword tokens
    come on top of it.  ``topic_word_prob`` sets how strongly contexts
    and responses lean on topic words versus filler.  Deterministic
    given the rng state.
    """
    if n_topics < 2:
        raise ValueError("need at least two topics")
    if not 0.0 < topic_word_prob <= 1.0:
        raise ValueError("topic_word_prob must be in (0, 1]")
    if rng is None:
        rng = np.random.default_rng(0)
    n_filler = max(4, min(_N_FILLER, vocab_size))
    fillers = [f"f{i}" for i in range(n_filler)]
    keywords = [f"k{i}" for i in range(_N_KEYWORDS)]

    examples: List[DialogueExample] = []
    topics: List[int] = []
    for _ in range(n_examples):
        topic = int(rng.integers(n_topics))
        keyword = keywords[int(rng.integers(_N_KEYWORDS))]

        def topic_tok() -> str:
            return _topic_word(topic, int(rng.integers(_WORDS_PER_TOPIC)))

        def filler_tok() -> str:
            return fillers[int(rng.integers(n_filler))]

        n_turns = int(rng.integers(1, 4))
        context = []
        for turn in range(n_turns):
            length = int(rng.integers(3, 7))
            utt = [topic_tok() if rng.random() < topic_word_prob else filler_tok() for _ in range(length)]
            context.append(tuple(utt))
        # Keyword goes in the most recent turn so truncation keeps it.
        last = list(context[-1])
        last.insert(int(rng.integers(len(last) + 1)), keyword)
        context[-1] = tuple(last)

        length = int(rng.integers(3, 6))
        response = [topic_tok() if rng.random() < topic_word_prob else filler_tok() for _ in range(length)]
        # Guarantee the topic is visible in the response.
        if not any(tok.startswith(f"t{topic}w") for tok in response):
            response[int(rng.integers(length))] = topic_tok()
        response.insert(int(rng.integers(len(response) + 1)), keyword)

        examples.append(DialogueExample(context=tuple(context), response=tuple(response), label=1))
        topics.append(topic)
    return corpus_from_examples(examples, topics=topics)


def attach_candidates(
    corpus: Corpus,
    n_candidates: int,
    rng: np.random.Generator,
    hard_fraction: float = 0.4,
) -> Corpus:
    """Give every example a fixed 1-positive candidate list of size ``n_candidates``.

    A ``hard_fraction`` of the negatives share the example's topic
    (different keyword) when topic labels are available; the rest are
    uniform draws from the pool.
    """
    if n_candidates < 2:
        raise ValueError("need at least two candidates (positive plus one negative)")
    if n_candidates > corpus.pool_size:
        raise ValueError(
            f"n_candidates {n_candidates} exceeds response pool size {corpus.pool_size}"
        )
    topics = corpus.example_topics
    by_topic: dict = {}
    if topics is not None:
        for idx, t in enumerate(topics):
            by_topic.setdefault(t, []).append(corpus.positive_id(corpus.examples[idx]))
    new_examples = []
    for idx, ex in enumerate(corpus.examples):
        pos = corpus.positive_id(ex)
        negatives: List[int] = []
        seen = {pos}
        if topics is not None:
            same_topic = [i for i in by_topic[topics[idx]] if i != pos]
            n_hard = min(int(round(hard_fraction * (n_candidates - 1))), len(same_topic))
            if n_hard > 0:
                for i in rng.choice(np.array(same_topic), size=n_hard, replace=False):
                    if int(i) not in seen:
                        negatives.append(int(i))
                        seen.add(int(i))
        while len(negatives) < n_candidates - 1:
            i = int(rng.integers(corpus.pool_size))
            if i not in seen:
                negatives.append(i)
                seen.add(i)
        cands = [corpus.response_pool[i] for i in negatives]
        slot = int(rng.integers(n_candidates))
        cands.insert(slot, ex.response)
        new_examples.append(
            DialogueExample(
                context=ex.context,
                response=ex.response,
                label=ex.label,
                candidates=tuple(tuple(c) for c in cands),
            )
        )
    return Corpus(
        new_examples,
        corpus.response_pool,
        corpus.response_ids,
        example_topics=corpus.example_topics,
    )


# ----------------------------------------------------------------------
# training batches
# ----------------------------------------------------------------------


@dataclass
class Batch:
    """N contexts, each with M = delta_r + 1 candidate response ids.

    ``positive_slots[i]`` marks where example i's true response sits in
    row i of ``candidate_ids``.
    """

    example_indices: List[int]
    candidate_ids: np.ndarray  # (N, M) pool ids
    positive_slots: np.ndarray  # (N,)

    def __post_init__(self):
        n, m = self.candidate_ids.shape
        for i in range(n):
            row = self.candidate_ids[i]
            if len(set(row.tolist())) != m:
                raise ValueError("candidate row contains duplicate response ids")


@dataclass
class FixedNegatives:
    """Per-example negative sets, sampled once and reused every epoch."""

    negatives: List[List[int]] = field(default_factory=list)

    @classmethod
    def sample(cls, corpus: Corpus, delta_r: int, rng: np.random.Generator) -> "FixedNegatives":
        negs = [
            sample_negatives(corpus, corpus.positive_id(ex), delta_r, rng)
            for ex in corpus.examples
        ]
        return cls(negs)


def iter_batches(
    corpus: Corpus,
    fixed: FixedNegatives,
    batch_size: int,
    rng: np.random.Generator,
    shuffle: bool = True,
):
    """Yield shuffled Batches; the positive slot is randomized per row."""
    order = np.arange(len(corpus.examples))
    if shuffle:
        rng.shuffle(order)
    m = len(fixed.negatives[0]) + 1
    for start in range(0, len(order), batch_size):
        chunk = order[start : start + batch_size]
        rows = np.empty((len(chunk), m), dtype=np.int64)
        slots = np.empty(len(chunk), dtype=np.int64)
        for r, idx in enumerate(chunk):
            ex = corpus.examples[idx]
            slot = int(rng.integers(m)) if shuffle else 0
            row = list(fixed.negatives[idx])
            row.insert(slot, corpus.positive_id(ex))
            rows[r] = row
            slots[r] = slot
        yield Batch(example_indices=[int(i) for i in chunk], candidate_ids=rows, positive_slots=slots)
