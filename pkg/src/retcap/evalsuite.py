"""Caption quality, self-retrieval and diversity metrics for generated captions."""
from __future__ import annotations

import hashlib
import json
import math
from collections import Counter
from dataclasses import asdict, dataclass

from . import retriever as ret
from .reward import CiderConfig, CiderD, caption_embeddings, corpus_stats, ngrams


@dataclass
class EvalReport:
    cider_d: float
    bleu_1: float
    bleu_2: float
    bleu_3: float
    bleu_4: float
    rouge_l: float
    recall_at_1: float
    recall_at_5: float
    recall_at_10: float
    unique_pct: float
    novel_pct: float
    config_fingerprint: str
    seed: int

    def to_json(self):
        return json.dumps(asdict(self), sort_keys=True, indent=1) + "\n"


def fingerprint(obj):
    """sha256 of the canonical JSON form of ``obj``."""
    canon = json.dumps(obj, sort_keys=True, separators=(",", ":"))
    return hashlib.sha256(canon.encode("utf-8")).hexdigest()


def bleu(generated, references, n_max=4):
    """Corpus-level BLEU-1..n_max with brevity penalty (closest reference length).

    Returns a list ``[bleu_1, ..., bleu_n]``.
    """
    matched = [0] * n_max
    total = [0] * n_max
    hyp_len = ref_len = 0
    for hyp, refs in zip(generated, references):
        hyp_len += len(hyp)
        ref_len += min((abs(len(r) - len(hyp)), len(r)) for r in refs)[1]
        for n in range(1, n_max + 1):
            counts = ngrams(hyp, n)
            max_ref = Counter()
            for r in refs:
                for g, c in ngrams(r, n).items():
                    max_ref[g] = max(max_ref[g], c)
            matched[n - 1] += sum(min(c, max_ref[g]) for g, c in counts.items())
            total[n - 1] += max(len(hyp) - n + 1, 0)
    if hyp_len == 0:
        return [0.0] * n_max
    bp = 1.0 if hyp_len > ref_len else math.exp(1.0 - ref_len / hyp_len)
    out, log_sum = [], 0.0
    for n in range(n_max):
        if matched[n] == 0 or total[n] == 0:
            out.extend([0.0] * (n_max - n))
            break
        log_sum += math.log(matched[n] / total[n])
        out.append(bp * math.exp(log_sum / (n + 1)))
    return out


def lcs_length(a, b):
    prev = [0] * (len(b) + 1)
    for x in a:
        cur = [0]
        for j, y in enumerate(b):
            cur.append(prev[j] + 1 if x == y else max(prev[j + 1], cur[j]))
        prev = cur
    return prev[-1]


def rouge_l(hyp, refs, beta_sq=1.2):
    """ROUGE-L F-measure using the best precision and recall over references."""
    if not hyp:
        return 0.0
    precs, recs = [], []
    for r in refs:
        lcs = lcs_length(hyp, r)
        precs.append(lcs / len(hyp))
        recs.append(lcs / len(r) if r else 0.0)
    p, r = max(precs), max(recs)
    if p == 0.0 or r == 0.0:
        return 0.0
    return (1.0 + beta_sq) * p * r / (r + beta_sq * p)


def caption_metrics(generated, references, stats=None, cider_config=CiderConfig()):
    """CIDEr-D (mean over images), corpus BLEU-1..4 and mean ROUGE-L.

    ``stats`` defaults to document frequencies of ``references`` themselves.
    """
    if not generated:
        raise ValueError("no generated captions to evaluate")
    if len(generated) != len(references):
        raise ValueError("every generated caption needs a reference set")
    if any(not refs for refs in references):
        raise ValueError("every generated caption needs at least one reference")
    if stats is None:
        stats = corpus_stats(references, cider_config.n_max)
    scorer = CiderD(stats, cider_config)
    cider = sum(scorer.score(g, refs) for g, refs in zip(generated, references)) / len(generated)
    b = bleu(generated, references)
    rl = sum(rouge_l(g, refs) for g, refs in zip(generated, references)) / len(generated)
    return {"cider_d": cider, "bleu_1": b[0], "bleu_2": b[1], "bleu_3": b[2], "bleu_4": b[3], "rouge_l": rl}


def self_retrieval_eval(retriever_params, generated, image_features, ks=(1, 5, 10)):
    """Recall@k of each image when its own generated caption is the query."""
    if len(generated) != len(image_features):
        raise ValueError(f"{len(generated)} captions for {len(image_features)} images")
    caps = caption_embeddings(retriever_params, [list(g) for g in generated])
    imgs = ret.encode_images(retriever_params, image_features)
    return ret.recall_from_sims(caps @ imgs.T, ks)


def uniqueness_novelty(generated, training_captions):
    """Percent of distinct generated captions and of captions unseen in training."""
    gen = [tuple(g) for g in generated]
    if not gen:
        return 0.0, 0.0
    seen = {tuple(c) for c in training_captions}
    unique = 100.0 * len(set(gen)) / len(gen)
    novel = 100.0 * sum(g not in seen for g in gen) / len(gen)
    return unique, novel
