"""Tests for corpus loading, synthetic generation and batching."""

import json

import numpy as np
import pytest

from duetrank.data import (
    Corpus,
    CorpusFormatError,
    FixedNegatives,
    attach_candidates,
    corpus_from_examples,
    iter_batches,
    load_corpus,
    make_synthetic_corpus,
    sample_negatives,
    save_corpus,
)
from duetrank.text import DialogueExample


def write_jsonl(path, rows):
    path.write_text("\n".join(json.dumps(r) for r in rows) + "\n")


class TestLoadCorpus:
    def test_two_valid_lines(self, tmp_path):
        path = tmp_path / "c.jsonl"
        write_jsonl(
            path,
            [
                {"context": ["hi there"], "response": "ok", "label": 1},
                {"context": ["bye"], "response": "later", "label": 1},
            ],
        )
        corpus = load_corpus(path)
        assert len(corpus.examples) == 2
        assert corpus.examples[0].context == (("hi", "there"),)

    def test_duplicate_response_shares_pool_id(self, tmp_path):
        path = tmp_path / "c.jsonl"
        write_jsonl(
            path,
            [
                {"context": ["a"], "response": "same reply", "label": 1},
                {"context": ["b"], "response": "same reply", "label": 1},
            ],
        )
        corpus = load_corpus(path)
        assert corpus.pool_size == 1
        assert corpus.positive_id(corpus.examples[0]) == corpus.positive_id(corpus.examples[1])

    def test_missing_field_names_line(self, tmp_path):
        path = tmp_path / "c.jsonl"
        write_jsonl(path, [{"context": ["a"], "label": 1}])
        with pytest.raises(CorpusFormatError, match=r":1:.*response"):
            load_corpus(path)

    def test_malformed_json_names_line(self, tmp_path):
        path = tmp_path / "c.jsonl"
        path.write_text('{"context": ["a"], "response": "x", "label": 1}\nnot json\n')
        with pytest.raises(CorpusFormatError, match=r":2:"):
            load_corpus(path)

    def test_candidates_field(self, tmp_path):
        path = tmp_path / "c.jsonl"
        write_jsonl(
            path,
            [{"context": ["a"], "response": "x", "label": 1, "candidates": ["x", "y z"]}],
        )
        corpus = load_corpus(path)
        assert corpus.examples[0].candidates == (("x",), ("y", "z"))
        assert corpus.pool_size == 2

    def test_save_load_identity(self, tmp_path):
        corpus = attach_candidates(
            make_synthetic_corpus(20, rng=np.random.default_rng(0)),
            5,
            np.random.default_rng(1),
        )
        path = tmp_path / "round.jsonl"
        save_corpus(corpus, path)
        again = load_corpus(path)
        assert again.examples == corpus.examples


class TestSampleNegatives:
    @pytest.fixture
    def corpus41(self):
        examples = [
            DialogueExample(context=(("hi",),), response=(f"r{i}",), label=1)
            for i in range(41)
        ]
        return corpus_from_examples(examples)

    def test_paper_setting(self, corpus41):
        negs = sample_negatives(corpus41, positive_id=5, delta_r=32, rng=np.random.default_rng(0))
        assert len(negs) == len(set(negs)) == 32
        assert 5 not in negs

    def test_forced_complement(self, corpus41):
        negs = sample_negatives(corpus41, positive_id=5, delta_r=40, rng=np.random.default_rng(0))
        assert sorted(negs) == [i for i in range(41) if i != 5]

    def test_deterministic(self, corpus41):
        a = sample_negatives(corpus41, 5, 32, np.random.default_rng(7))
        b = sample_negatives(corpus41, 5, 32, np.random.default_rng(7))
        assert a == b

    def test_pool_too_small(self, corpus41):
        with pytest.raises(ValueError):
            sample_negatives(corpus41, 5, 41, np.random.default_rng(0))


class TestSyntheticCorpus:
    def test_topic_oracle_wins(self):
        corpus = make_synthetic_corpus(1000, n_topics=10, rng=np.random.default_rng(0))
        rng = np.random.default_rng(1)
        hits = 0
        for idx, ex in enumerate(corpus.examples):
            topic = corpus.example_topics[idx]
            pos = corpus.positive_id(ex)
            # 9 random negatives from other topics plus the positive.
            other = [
                corpus.positive_id(corpus.examples[j])
                for j in rng.choice(len(corpus.examples), size=60, replace=False)
                if corpus.example_topics[j] != topic
            ][:9]
            candidates = other + [pos]

            def topic_score(pool_id):
                resp = corpus.response_pool[pool_id]
                return sum(1 for tok in resp if tok.startswith(f"t{topic}w"))

            best = max(candidates, key=lambda c: (topic_score(c), -c))
            hits += best == pos
        assert hits / len(corpus.examples) == 1.0

    def test_random_scorer_near_chance(self):
        corpus = attach_candidates(
            make_synthetic_corpus(1000, rng=np.random.default_rng(0)),
            10,
            np.random.default_rng(1),
        )
        rng = np.random.default_rng(2)
        hits = 0
        for ex in corpus.examples:
            scores = rng.random(10)
            hits += ex.candidates[int(np.argmax(scores))] == ex.response
        assert abs(hits / 1000 - 0.1) < 0.03

    def test_same_seed_identical(self):
        a = make_synthetic_corpus(50, rng=np.random.default_rng(3))
        b = make_synthetic_corpus(50, rng=np.random.default_rng(3))
        assert a.examples == b.examples
        assert a.example_topics == b.example_topics

    def test_keyword_echoed_in_response(self):
        corpus = make_synthetic_corpus(100, rng=np.random.default_rng(4))
        for ex in corpus.examples:
            context_kw = {t for utt in ex.context for t in utt if t.startswith("k")}
            response_kw = {t for t in ex.response if t.startswith("k")}
            assert context_kw & response_kw

    def test_invalid_args(self):
        with pytest.raises(ValueError):
            make_synthetic_corpus(10, n_topics=1)
        with pytest.raises(ValueError):
            make_synthetic_corpus(10, topic_word_prob=0.0)


class TestAttachCandidates:
    def test_positive_present_and_size(self):
        corpus = attach_candidates(
            make_synthetic_corpus(50, rng=np.random.default_rng(0)),
            10,
            np.random.default_rng(1),
        )
        for ex in corpus.examples:
            assert len(ex.candidates) == 10
            assert ex.candidates.count(ex.response) == 1

    def test_hard_negatives_share_topic(self):
        base = make_synthetic_corpus(500, rng=np.random.default_rng(0))
        corpus = attach_candidates(base, 10, np.random.default_rng(1), hard_fraction=1.0)
        shared = 0
        total = 0
        for idx, ex in enumerate(corpus.examples):
            topic = corpus.example_topics[idx]
            for cand in ex.candidates:
                if cand == ex.response:
                    continue
                total += 1
                shared += any(t.startswith(f"t{topic}w") for t in cand)
        assert shared / total > 0.8

    def test_too_few_candidates(self):
        with pytest.raises(ValueError):
            attach_candidates(make_synthetic_corpus(10), 1, np.random.default_rng(0))

    def test_pool_smaller_than_candidate_list(self):
        corpus = make_synthetic_corpus(3, rng=np.random.default_rng(0))
        with pytest.raises(ValueError):
            attach_candidates(corpus, corpus.pool_size + 1, np.random.default_rng(0))


class TestBatches:
    @pytest.fixture
    def corpus(self):
        return make_synthetic_corpus(40, rng=np.random.default_rng(0))

    def test_fixed_negatives_stable_across_epochs(self, corpus):
        fixed = FixedNegatives.sample(corpus, 8, np.random.default_rng(0))
        rng = np.random.default_rng(1)
        sets_by_example = {}
        for _ in range(3):  # three epochs over the same fixed sets
            for batch in iter_batches(corpus, fixed, 16, rng):
                for row_idx, ex_idx in enumerate(batch.example_indices):
                    row = set(batch.candidate_ids[row_idx].tolist())
                    if ex_idx in sets_by_example:
                        assert sets_by_example[ex_idx] == row
                    else:
                        sets_by_example[ex_idx] = row
        assert len(sets_by_example) == 40

    def test_positive_slot_nondegenerate(self, corpus):
        fixed = FixedNegatives.sample(corpus, 8, np.random.default_rng(0))
        slots = []
        rng = np.random.default_rng(2)
        for _ in range(5):
            for batch in iter_batches(corpus, fixed, 16, rng):
                slots.extend(batch.positive_slots.tolist())
        assert len(set(slots)) > 1

    def test_positive_at_marked_slot(self, corpus):
        fixed = FixedNegatives.sample(corpus, 8, np.random.default_rng(0))
        for batch in iter_batches(corpus, fixed, 16, np.random.default_rng(3)):
            for row_idx, ex_idx in enumerate(batch.example_indices):
                pos = corpus.positive_id(corpus.examples[ex_idx])
                assert batch.candidate_ids[row_idx, batch.positive_slots[row_idx]] == pos

    def test_rows_have_no_duplicates(self, corpus):
        fixed = FixedNegatives.sample(corpus, 8, np.random.default_rng(0))
        for batch in iter_batches(corpus, fixed, 16, np.random.default_rng(4)):
            for row in batch.candidate_ids:
                assert len(set(row.tolist())) == row.shape[0]

    def test_all_examples_covered_once(self, corpus):
        fixed = FixedNegatives.sample(corpus, 8, np.random.default_rng(0))
        seen = []
        for batch in iter_batches(corpus, fixed, 16, np.random.default_rng(5)):
            seen.extend(batch.example_indices)
        assert sorted(seen) == list(range(40))
