import math

import numpy as np
import pytest

from oracles import brute_cider_d
from retcap import retriever as ret
from retcap import reward as rw
from retcap.shapeworld import EOS


def micro_corpus(rng):
    n_images = int(rng.integers(2, 6))
    words = list(range(4, 4 + int(rng.integers(3, 7))))

    def cap():
        return [int(w) for w in rng.choice(words, size=int(rng.integers(1, 8)))]

    corpus = [[cap() for _ in range(int(rng.integers(1, 4)))] for _ in range(n_images)]
    return corpus, cap()


class TestCider:
    def test_matches_brute_force_on_micro_corpora(self):
        rng = np.random.default_rng(0)
        for _ in range(20):
            corpus, cand = micro_corpus(rng)
            stats = rw.corpus_stats(corpus)
            for refs in corpus:
                assert abs(rw.cider_d(cand, refs, stats) - brute_cider_d(cand, refs, corpus)) < 1e-9

    def test_identity_scores_ten(self):
        corpus = [[[4, 5, 6, 7, 8]], [[9, 10, 11, 12]], [[13, 14, 15, 16, 17]]]
        stats = rw.corpus_stats(corpus)
        assert rw.cider_d([4, 5, 6, 7, 8], corpus[0], stats) == pytest.approx(10.0, abs=1e-12)

    def test_disjoint_candidate_scores_zero(self):
        stats = rw.corpus_stats([[[4, 5]], [[6, 7]]])
        assert rw.cider_d([8, 9, 10], [[4, 5]], stats) == 0.0

    def test_ubiquitous_words_carry_no_weight(self):
        corpus = [[[4, 5]], [[4, 6]]]
        stats = rw.corpus_stats(corpus)
        assert rw.cider_d([4], corpus[0], stats) == 0.0

    def test_clipping_penalizes_repetition(self):
        corpus = [[[4, 5, 6]], [[7, 8, 9]]]
        stats = rw.corpus_stats(corpus)
        assert rw.cider_d([4, 4, 4], corpus[0], stats) < rw.cider_d([4, 5, 6], corpus[0], stats)

    def test_cache_does_not_change_scores(self):
        rng = np.random.default_rng(1)
        corpus, _ = micro_corpus(rng)
        scorer = rw.CiderD(rw.corpus_stats(corpus))
        for _ in range(5):
            _, cand = micro_corpus(rng)
            assert scorer.score(cand, corpus[0], key="a") == scorer.score(cand, corpus[0])

    def test_errors(self):
        with pytest.raises(ValueError):
            rw.corpus_stats([])
        with pytest.raises(ValueError):
            rw.corpus_stats([[[4]], []])
        with pytest.raises(ValueError):
            rw.cider_d([4], [], rw.corpus_stats([[[4]]]))

    def test_strip_eos(self):
        assert rw.strip_eos([4, 5, EOS]) == [4, 5]
        assert rw.strip_eos([4, 5]) == [4, 5]
        assert rw.strip_eos([EOS]) == []


class TestCombine:
    def test_worked_examples(self):
        assert rw.combine(1.2, -0.3, 1.0) == pytest.approx(0.9, abs=1e-15)
        assert rw.combine(1.2, -0.3, 4.0) == pytest.approx(0.0, abs=1e-15)
        assert rw.combine(0.0, -0.3, 1.0) == pytest.approx(-0.3, abs=1e-15)

    def test_alpha_validation(self):
        for bad in (-1.0, math.inf, math.nan):
            with pytest.raises(ValueError):
                rw.RewardConfig(alpha=bad)
        with pytest.raises(ValueError):
            rw.RewardConfig(loss_kind="hinge")


@pytest.fixture(scope="module")
def retriever_params():
    return ret.init_params(ret.RetrieverDims(vocab_size=12, d_img=8, embed=5, hidden=6, joint=4), seed=0)


class _NoTouch(list):
    def __iter__(self):
        raise AssertionError("references were read")

    def __len__(self):
        raise AssertionError("references were read")


class TestRewards:
    def test_unlabeled_never_reads_references(self, retriever_params):
        feats = np.random.default_rng(0).normal(size=(4, 8))
        r = rw.unlabeled_reward([4, 5, EOS], feats, 1, rw.RewardConfig(alpha=1.0), retriever_params,
                                references=_NoTouch())
        direct = rw.self_retrieval_reward(retriever_params, [4, 5], feats, 1)
        assert r == direct

    def test_unlabeled_zero_at_alpha_zero(self, retriever_params):
        assert rw.unlabeled_reward([4], np.ones((2, 8)), 0, rw.RewardConfig(alpha=0.0), retriever_params) == 0.0

    def test_labeled_alpha_zero_is_pure_cider(self):
        corpus = [[[4, 5, 6]], [[7, 8]]]
        stats = rw.corpus_stats(corpus)
        r = rw.labeled_reward([4, 5, EOS], corpus[0], None, 0, stats, rw.RewardConfig(alpha=0.0))
        assert r == rw.cider_d([4, 5], corpus[0], stats)

    def test_labeled_adds_scaled_retrieval(self, retriever_params):
        corpus = [[[4, 5, 6]], [[7, 8]]]
        stats = rw.corpus_stats(corpus)
        feats = np.random.default_rng(1).normal(size=(3, 8))
        cfg = rw.RewardConfig(alpha=2.5)
        r = rw.labeled_reward([4, 5], corpus[0], feats, 2, stats, cfg, retriever_params)
        expect = rw.cider_d([4, 5], corpus[0], stats) + 2.5 * rw.self_retrieval_reward(
            retriever_params, [4, 5], feats, 2, cfg)
        assert r == pytest.approx(expect, abs=1e-12)

    def test_retrieval_reward_is_nonpositive(self, retriever_params):
        rng = np.random.default_rng(2)
        for kind in ret.LOSS_KINDS:
            cfg = rw.RewardConfig(loss_kind=kind)
            for _ in range(10):
                r = rw.self_retrieval_reward(retriever_params, [4, 6, 7], rng.normal(size=(5, 8)), 0, cfg)
                assert r <= 0.0

    def test_batched_matches_single(self, retriever_params):
        rng = np.random.default_rng(3)
        feats = rng.normal(size=(4, 8))
        caps = [[4, 5], [6], [], [7, 8, 9]]
        img = ret.encode_images(retriever_params, feats)
        batched = rw.retrieval_rewards(retriever_params, caps, img)
        single = [rw.self_retrieval_reward(retriever_params, c, feats, i) for i, c in enumerate(caps)]
        np.testing.assert_allclose(batched, single, atol=1e-12)

    def test_empty_caption_embeds_as_zero(self, retriever_params):
        emb = rw.caption_embeddings(retriever_params, [[], [4]])
        assert np.all(emb[0] == 0.0)
        assert np.linalg.norm(emb[1]) == pytest.approx(1.0)

    def test_labeled_requires_references(self):
        with pytest.raises(ValueError):
            rw.labeled_reward([4], [], None, 0, rw.corpus_stats([[[4]]]), rw.RewardConfig(alpha=0.0))


def _unit(cos):
    return [cos, math.sqrt(1.0 - cos * cos), 0.0]


@pytest.fixture
def fixed_geometry(monkeypatch):
    """Caption embeds as e1; batch features are used as image embeddings directly."""
    monkeypatch.setattr(rw, "caption_embeddings", lambda p, caps: np.array([[1.0, 0.0, 0.0]] * len(caps)))
    monkeypatch.setattr(rw.ret, "encode_images", lambda p, feats: np.asarray(feats, dtype=np.float64))


class TestWorkedExamples:
    def test_idf_of_ubiquitous_ngram_is_zero(self):
        stats = rw.corpus_stats([[[4, 5]], [[4, 6]]])
        assert stats.idf((4,)) == 0.0

    def test_idf_of_rare_ngram(self):
        stats = rw.corpus_stats([[[4, 5]], [[6]], [[7]], [[6, 7]]])
        assert stats.idf((5,)) == pytest.approx(math.log(4.0), abs=1e-15)
        assert stats.idf((4, 5)) == pytest.approx(math.log(4.0), abs=1e-15)

    def test_length_penalty(self):
        # word 9 is in every image's references, so padding with it leaves the tf-idf bag unchanged
        stats = rw.corpus_stats([[[4, 5], [9]], [[6], [9]], [[7], [9]]])
        config = rw.CiderConfig(n_max=1)
        short = rw.cider_d([4, 5], [[4, 5]], stats, config)
        long = rw.cider_d([4, 5, 9, 9, 9, 9], [[4, 5]], stats, config)
        assert short == pytest.approx(10.0, abs=1e-12)
        assert long == pytest.approx(short * math.exp(-16 / 72), abs=1e-12)

    def test_inactive_hinge_gives_zero_reward(self, fixed_geometry):
        r = rw.self_retrieval_reward(None, [4], [_unit(0.9), _unit(0.3)], 0)
        assert r == 0.0

    def test_loss_point_three_gives_minus_point_three(self, fixed_geometry):
        feats = [_unit(0.5), _unit(0.6), _unit(0.4)]
        assert rw.self_retrieval_reward(None, [4], feats, 0) == pytest.approx(-0.3, abs=1e-12)
        r = rw.unlabeled_reward([4], feats, 0, rw.RewardConfig(alpha=1.0), None)
        assert r == pytest.approx(-0.3, abs=1e-12)

    def test_batch_of_one_gives_zero(self, retriever_params):
        feats = np.random.default_rng(0).normal(size=(1, 8))
        assert rw.self_retrieval_reward(retriever_params, [4, 5], feats, 0) == 0.0
