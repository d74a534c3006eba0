"""CIDEr-D scoring and the composite captioning rewards.

CIDEr-D follows the standard definition: n = 1..4, raw n-gram counts
weighted by ``log(N / max(1, df))``, candidate weights clipped to the
reference weights, a Gaussian length penalty with sigma 6 per reference,
averaged over n and over references, times 10.
"""
from __future__ import annotations

import math
from collections import Counter
from dataclasses import dataclass, field

import numpy as np

from . import retriever as ret
from .shapeworld import EOS


@dataclass(frozen=True)
class CiderConfig:
    n_max: int = 4
    sigma: float = 6.0
    scale: float = 10.0


@dataclass(frozen=True)
class RewardConfig:
    alpha: float = 1.0
    loss_kind: str = "vse_pp"
    margin: float = 0.2
    temperature: float = 0.1
    cider: CiderConfig = field(default_factory=CiderConfig)

    def __post_init__(self):
        if not (math.isfinite(self.alpha) and self.alpha >= 0):
            raise ValueError(f"alpha must be finite and nonnegative, got {self.alpha}")
        if self.loss_kind not in ret.LOSS_KINDS:
            raise ValueError(f"unknown retrieval loss kind {self.loss_kind!r}")
        if self.margin <= 0 or self.temperature <= 0:
            raise ValueError("margin and temperature must be positive")


def strip_eos(tokens):
    tokens = list(tokens)
    return tokens[:tokens.index(EOS)] if EOS in tokens else tokens


def ngrams(tokens, n):
    return Counter(tuple(tokens[i:i + n]) for i in range(len(tokens) - n + 1))


@dataclass
class CorpusStats:
    """Document frequencies; one document is one image's reference set."""

    doc_freq: list          # doc_freq[n-1]: Counter of n-grams
    n_docs: int

    @property
    def log_n(self):
        return math.log(float(self.n_docs))

    def idf(self, gram):
        return self.log_n - math.log(max(1.0, float(self.doc_freq[len(gram) - 1].get(gram, 0))))


def corpus_stats(reference_sets, n_max=4):
    reference_sets = list(reference_sets)
    if not reference_sets:
        raise ValueError("corpus must contain at least one image")
    df = [Counter() for _ in range(n_max)]
    for refs in reference_sets:
        if not refs:
            raise ValueError("every image needs at least one reference caption")
        for n in range(1, n_max + 1):
            seen = set()
            for ref in refs:
                seen.update(ngrams(list(ref), n))
            df[n - 1].update(seen)
    return CorpusStats(df, len(reference_sets))


def _tfidf(tokens, stats, n_max):
    vecs, norms = [], []
    for n in range(1, n_max + 1):
        vec = {g: c * stats.idf(g) for g, c in ngrams(tokens, n).items()}
        vecs.append(vec)
        norms.append(math.sqrt(sum(v * v for v in vec.values())))
    return vecs, norms, len(tokens)


def _sim(hyp, ref, sigma):
    (hv, hn, hl), (rv, rn, rl) = hyp, ref
    penalty = math.exp(-((hl - rl) ** 2) / (2.0 * sigma ** 2))
    out = []
    for n in range(len(hv)):
        dot = sum(min(w, rv[n][g]) * rv[n][g] for g, w in hv[n].items() if g in rv[n])
        if hn[n] != 0.0 and rn[n] != 0.0:
            dot /= hn[n] * rn[n]
        out.append(dot * penalty)
    return out


class CiderD:
    """CIDEr-D scorer over fixed corpus statistics.

    Reference vectors are cached per ``key`` so repeated scoring against
    the same image (as in RL training) stays cheap.
    """

    def __init__(self, stats, config=CiderConfig()):
        self.stats = stats
        self.config = config
        self._cache = {}

    def _refs(self, references, key):
        if key is not None and key in self._cache:
            return self._cache[key]
        vecs = [_tfidf(list(r), self.stats, self.config.n_max) for r in references]
        if key is not None:
            self._cache[key] = vecs
        return vecs

    def score(self, candidate, references, key=None):
        if not references:
            raise ValueError("CIDEr-D needs at least one reference")
        hyp = _tfidf(list(candidate), self.stats, self.config.n_max)
        refs = self._refs(references, key)
        total = np.zeros(self.config.n_max)
        for ref in refs:
            total += _sim(hyp, ref, self.config.sigma)
        return float(np.mean(total) / len(refs) * self.config.scale)


def cider_d(candidate, references, stats, config=CiderConfig()):
    return CiderD(stats, config).score(candidate, references)


# ---------------------------------------------------------------------------
# rewards
# ---------------------------------------------------------------------------

def caption_embeddings(retriever_params, captions):
    """Embeddings of generated captions; an empty caption embeds as the zero
    vector, so it is equally similar (0) to every image."""
    out = np.zeros((len(captions), retriever_params.cap_proj.shape[0]))
    rows = [i for i, c in enumerate(captions) if len(c) > 0]
    if rows:
        out[rows] = ret.encode_captions(retriever_params, [captions[i] for i in rows])
    return out


def self_retrieval_reward(retriever_params, caption, batch_features, positive, config=RewardConfig()):
    """Negative text-to-image loss of ``caption`` against the batch images."""
    c = caption_embeddings(retriever_params, [list(caption)])[0]
    v = ret.encode_images(retriever_params, batch_features)
    loss = ret.retrieval_loss(ret.Eager(), config.loss_kind, c, v, positive, config.margin, config.temperature)
    return -float(loss)


def retrieval_rewards(retriever_params, captions, image_emb, config=RewardConfig()):
    """Batched self-retrieval rewards; caption i belongs to image row i."""
    caps = caption_embeddings(retriever_params, captions)
    return -ret.row_losses(config.loss_kind, caps @ image_emb.T, config.margin, config.temperature)


def combine(cider, retrieval, alpha):
    """r = cider + alpha * retrieval; labeled images pass their CIDEr-D, unlabeled pass 0."""
    return cider + alpha * retrieval


def labeled_reward(caption, references, batch_features, index, stats, config=RewardConfig(),
                   retriever_params=None):
    """CIDEr-D plus alpha times the self-retrieval reward over the whole mixed batch."""
    if not references:
        raise ValueError("labeled reward needs references")
    cider = cider_d(strip_eos(caption), references, stats, config.cider)
    if config.alpha == 0.0:
        return cider
    r_ret = self_retrieval_reward(retriever_params, strip_eos(caption), batch_features, index, config)
    return combine(cider, r_ret, config.alpha)


def unlabeled_reward(caption, batch_features, index, config=RewardConfig(), retriever_params=None,
                     references=None):
    """alpha times the self-retrieval reward; ``references`` are ignored by contract."""
    if config.alpha == 0.0:
        return 0.0
    r_ret = self_retrieval_reward(retriever_params, strip_eos(caption), batch_features, index, config)
    return combine(0.0, r_ret, config.alpha)
