import math

import numpy as np
import pytest

from helpers import oracle_bleu, oracle_first_rank
from mrnn.corpus import ImageFeatureStore, build_vocabulary
from mrnn.evaluation import (bleu, corpus_perplexity, generation_bleu,
                             recall_curve, retrieval_eval, shortlist)
from mrnn.inference import sentence_log2prob
from mrnn.model import ModelConfig, ModelParams
from mrnn.numerics import Rng
from mrnn.corpus import CaptionedExample


def random_token_fixtures(seed, count):
    """Candidate/reference pairs over a small alphabet, varied lengths."""
    rng = Rng(seed)
    alphabet = list("abcdefg")
    fixtures = []
    for _ in range(count):
        cand = [alphabet[rng.randint(len(alphabet))] for _ in range(3 + rng.randint(6))]
        refs = [[alphabet[rng.randint(len(alphabet))] for _ in range(3 + rng.randint(6))]
                for _ in range(1 + rng.randint(3))]
        fixtures.append((cand, refs))
    return fixtures


class TestBleu:
    def test_perfect_match(self):
        cand = "a man at a tree".split()
        score = bleu([cand], [[list(cand)]])
        assert score.as_tuple() == (1.0, 1.0, 1.0)

    def test_zero_overlap(self):
        score = bleu([list("abc")], [[list("xyz")]])
        assert score.b1 == 0.0 and score.b2 == 0.0 and score.b3 == 0.0

    def test_hand_derived_example(self):
        # candidate "a b b c" vs reference "a b c d": p1 = 3/4, p2 = 2/3
        score = bleu([list("abbc")], [[list("abcd")]])
        assert score.b1 == pytest.approx(0.75, abs=1e-12)
        assert score.b2 == pytest.approx(math.sqrt(0.75 * 2 / 3), abs=1e-12)
        assert score.b3 == 0.0  # no trigram overlap

    def test_matches_oracle_on_random_fixtures(self):
        fixtures = random_token_fixtures(1, 20)
        cands = [c for c, _ in fixtures]
        refs = [r for _, r in fixtures]
        for cumulative in (True, False):
            ours = bleu(cands, refs, cumulative=cumulative)
            expect = oracle_bleu(cands, refs, cumulative=cumulative)
            for got, want in zip(ours.as_tuple(), expect):
                assert got == pytest.approx(want, abs=1e-9)

    def test_pair_permutation_invariance(self):
        fixtures = random_token_fixtures(2, 10)
        cands = [c for c, _ in fixtures]
        refs = [r for _, r in fixtures]
        forward = bleu(cands, refs)
        backward = bleu(cands[::-1], refs[::-1])
        assert forward.as_tuple() == pytest.approx(backward.as_tuple(), abs=1e-12)

    def test_brevity_penalty_active_for_short_candidates(self):
        cand = list("ab")
        ref = list("abcd")
        score = bleu([cand], [[ref]])
        assert score.b1 == pytest.approx(math.exp(1 - 4 / 2) * 1.0, abs=1e-12)

    def test_brevity_penalty_inert_when_length_matched(self):
        cand = list("abxy")
        ref = list("abcd")
        score = bleu([cand], [[ref]])
        assert score.b1 == pytest.approx(0.5, abs=1e-12)  # BP == 1

    def test_misaligned_lists(self):
        with pytest.raises(ValueError):
            bleu([list("ab")], [])

    def test_works_on_integer_tokens(self):
        assert bleu([[1, 2, 3]], [[[1, 2, 3]]]).b1 == 1.0


VOCAB = build_vocabulary(["sand waves shore", "summit ridge pines"])
FEAT_STORE = ImageFeatureStore(3)
for _i in range(3):
    FEAT_STORE.add(f"im{_i}", Rng(100 + _i).uniform(-1, 1, 3))


def example(image_id, tokens):
    return CaptionedExample(image_id, tokens, "")


class TestCorpusPerplexity:
    def zero_params(self, m=32):
        cfg = ModelConfig(vocab_size=m, d_i=3, d_e1=4, d_e2=4, d_r=4, d_m=4)
        return ModelParams.zeros(cfg)

    def test_uniform_model(self):
        params = self.zero_params(32)
        examples = [example("im0", [3, 4, 5]), example("im1", [6, 7])]
        assert corpus_perplexity(params, examples, FEAT_STORE) == pytest.approx(
            32.0, abs=1e-9)

    def test_singleton_equals_sentence_ppl(self):
        cfg = ModelConfig(vocab_size=VOCAB.size, d_i=3, d_e1=4, d_e2=4, d_r=5, d_m=6)
        params = ModelParams.initialize(cfg, Rng(5))
        tokens = VOCAB.encode("sand waves")
        _, sent_ppl = sentence_log2prob(params, tokens, FEAT_STORE.get("im0"))
        corpus = corpus_perplexity(params, [example("im0", tokens)], FEAT_STORE)
        assert corpus == pytest.approx(sent_ppl, abs=1e-9)

    def test_equal_length_sentences_geometric_mean(self):
        # two sentences of equal length: corpus ppl is the geometric mean of
        # their sentence perplexities (the PPL 2 and 8 -> 4 oracle generalized)
        cfg = ModelConfig(vocab_size=VOCAB.size, d_i=3, d_e1=4, d_e2=4, d_r=5, d_m=6)
        params = ModelParams.initialize(cfg, Rng(6))
        ex1, ex2 = example("im0", [3, 4, 5]), example("im1", [5, 4, 3])
        _, p1 = sentence_log2prob(params, ex1.tokens, FEAT_STORE.get("im0"))
        _, p2 = sentence_log2prob(params, ex2.tokens, FEAT_STORE.get("im1"))
        corpus = corpus_perplexity(params, [ex1, ex2], FEAT_STORE)
        assert corpus == pytest.approx(math.sqrt(p1 * p2), rel=1e-9)

    def test_arithmetic_of_the_geometric_mean(self):
        assert math.sqrt(2 * 8) == pytest.approx(4.0)

    def test_empty_error(self):
        with pytest.raises(ValueError):
            corpus_perplexity(self.zero_params(), [], FEAT_STORE)


class TestRetrievalEval:
    def test_oracle_scores(self):
        scores = np.array([[9.0, 1, 2], [1, 9, 2], [2, 1, 9]])
        gt = {0: {0}, 1: {1}, 2: {2}}
        metrics = retrieval_eval(scores, gt, ks=(1, 5, 10))
        assert metrics.r_at[1] == 100.0
        assert metrics.med_r == 1

    def test_anti_oracle(self):
        n_c = 6
        scores = np.tile(np.arange(n_c, 0, -1, dtype=float), (3, 1))
        gt = {q: {n_c - 1} for q in range(3)}  # groundtruth always scores lowest
        metrics = retrieval_eval(scores, gt, ks=(1, 5))
        assert metrics.r_at[1] == 0.0 and metrics.r_at[5] == 0.0
        assert metrics.med_r == n_c

    def test_random_fixture_matches_rank_oracle(self):
        rng = Rng(9)
        scores = np.array([[rng.random() for _ in range(4)] for _ in range(3)])
        gt = {0: {1, 3}, 1: {0}, 2: {2}}
        cids = list(range(4))
        metrics = retrieval_eval(scores, gt, ks=(1, 2, 3, 4), candidate_ids=cids)
        expected = [oracle_first_rank(scores[q], gt[q], cids) for q in range(3)]
        assert metrics.ranks == expected
        assert metrics.med_r == sorted(expected)[(3 - 1) // 2]

    def test_r_at_k_monotone(self):
        rng = Rng(10)
        scores = np.array([[rng.random() for _ in range(8)] for _ in range(5)])
        gt = {q: {q} for q in range(5)}
        metrics = retrieval_eval(scores, gt, ks=(1, 2, 4, 8))
        vals = [metrics.r_at[k] for k in (1, 2, 4, 8)]
        assert vals == sorted(vals)

    def test_monotone_transform_invariance(self):
        rng = Rng(11)
        scores = np.array([[rng.random() for _ in range(6)] for _ in range(4)])
        gt = {q: {(q + 1) % 6} for q in range(4)}
        a = retrieval_eval(scores, gt)
        b = retrieval_eval(np.exp(3 * scores) + 7, gt)
        assert a.ranks == b.ranks

    def test_ties_break_by_candidate_id_never_favoring_groundtruth(self):
        scores = np.array([[1.0, 1.0, 1.0]])
        metrics = retrieval_eval(scores, {0: {2}}, ks=(1, 3))
        assert metrics.ranks == [3]

    def test_missing_groundtruth_errors(self):
        with pytest.raises(ValueError, match="groundtruth"):
            retrieval_eval(np.ones((1, 3)), {0: {"nope"}})

    def test_lower_median_for_even_counts(self):
        scores = np.array([[2.0, 1.0], [1.0, 2.0]])
        gt = {0: {0}, 1: {0}}  # ranks 1 and 2 -> lower median 1
        assert retrieval_eval(scores, gt).med_r == 1


class TestRecallCurve:
    def test_full_fraction_counts_all_groundtruth(self):
        rng = Rng(12)
        scores = np.array([[rng.random() for _ in range(5)] for _ in range(3)])
        gt = {0: {0, 1}, 1: {2}, 2: {3, 4}}
        curve = recall_curve(scores, gt, [1.0])
        assert curve.points[0][1] == pytest.approx((2 + 1 + 2) / 3)

    def test_oracle_scores_single_groundtruth(self):
        n_c = 5
        scores = np.zeros((3, n_c))
        for q in range(3):
            scores[q, q] = 1.0
        gt = {q: {q} for q in range(3)}
        curve = recall_curve(scores, gt, [1 / n_c, 0.5, 1.0])
        assert [m for _, m in curve.points] == [1.0, 1.0, 1.0]

    def test_matches_brute_force_on_random_fixture(self):
        rng = Rng(13)
        n_q, n_c = 4, 7
        scores = np.array([[rng.random() for _ in range(n_c)] for _ in range(n_q)])
        gt = {q: {(2 * q) % n_c, (2 * q + 1) % n_c} for q in range(n_q)}
        fractions = [0.15, 0.3, 0.6, 1.0]
        curve = recall_curve(scores, gt, fractions)
        for f, mean in curve.points:
            top = math.ceil(f * n_c)
            total = 0
            for q in range(n_q):
                order = sorted(range(n_c), key=lambda j: (-scores[q, j], j))
                total += sum(1 for j in order[:top] if j in gt[q])
            assert mean == pytest.approx(total / n_q)

    def test_monotone_nondecreasing(self):
        rng = Rng(14)
        scores = np.array([[rng.random() for _ in range(9)] for _ in range(4)])
        gt = {q: {q, q + 3} for q in range(4)}
        curve = recall_curve(scores, gt, [0.1, 0.2, 0.4, 0.7, 1.0])
        means = [m for _, m in curve.points]
        assert means == sorted(means)

    def test_invalid_fraction(self):
        with pytest.raises(ValueError):
            recall_curve(np.ones((1, 2)), {0: {0}}, [0.0])


class TestShortlist:
    def make_store(self, n=5):
        store = ImageFeatureStore(2)
        for i in range(n):
            store.add(f"im{i}", np.array([float(i), 0.0]))
        return store

    def test_full_size_is_whole_store(self):
        store = self.make_store(5)
        near = shortlist(["im0"], store, size=5)
        assert sorted(near["im0"]) == store.ids()

    def test_query_always_in_own_shortlist(self):
        store = self.make_store(5)
        near = shortlist(store.ids(), store, size=2)
        for qid in store.ids():
            assert qid in near[qid]
            assert near[qid][0] == qid  # distance zero ranks first

    def test_matches_brute_force(self):
        store = ImageFeatureStore(3)
        rng = Rng(15)
        for i in range(5):
            store.add(f"im{i}", rng.uniform(-1, 1, 3))
        near = shortlist(store.ids(), store, size=3)
        for qid in store.ids():
            qvec = store.get(qid)
            expected = sorted(store.ids(),
                              key=lambda c: (float(np.linalg.norm(store.get(c) - qvec)), c))[:3]
            assert near[qid] == expected

    def test_store_too_small(self):
        with pytest.raises(ValueError, match="shortlist"):
            shortlist(["im0"], self.make_store(3), size=10)


class TestGenerationBleu:
    def test_length_matched_candidates(self):
        vocab = build_vocabulary(["sand waves shore", "summit ridge"])
        cfg = ModelConfig(vocab_size=vocab.size, d_i=2, d_e1=4, d_e2=4, d_r=4, d_m=4)
        params = ModelParams.initialize(cfg, Rng(16))
        store = ImageFeatureStore(2)
        store.add("a", np.array([1.0, 0.0]))
        store.add("b", np.array([0.0, 1.0]))
        examples = [CaptionedExample("a", vocab.encode("sand waves shore"), ""),
                    CaptionedExample("b", vocab.encode("summit ridge"), "")]
        _, generated = generation_bleu(params, vocab, examples, store)
        assert len(generated["a"]) == 3
        assert len(generated["b"]) == 2
