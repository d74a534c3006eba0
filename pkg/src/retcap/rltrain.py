"""Self-critical REINFORCE with CIDEr-D and self-retrieval rewards.

Each step samples one caption per image and uses the reward of the
greedy caption of the same image as the baseline.  Labeled images are
rewarded with CIDEr-D plus alpha times the self-retrieval reward;
unlabeled images (mined as moderately hard negatives) only with the
retrieval part.  The retriever is frozen throughout.
"""
from __future__ import annotations

import logging
import math
import time
from dataclasses import dataclass, field

import numpy as np

from . import captioner as cap
from . import optim
from .evalsuite import caption_metrics, self_retrieval_eval
from .graphgrad import NonFiniteError, Tape
from .optim import OptimizerState, adam_update  # noqa: F401  (re-exported)
from .params import leaf_grads
from .retriever import MiningError, MiningRange, NegativeMiner, encode_images
from .reward import CiderD, RewardConfig, combine, corpus_stats, retrieval_rewards, strip_eos
from .shapeworld import T_MAX

log = logging.getLogger(__name__)

MODES = ("baseline", "sr-fl", "sr-pl")


class NonFiniteLoss(NonFiniteError):
    def __init__(self, message, diagnostics):
        super().__init__(message)
        self.diagnostics = diagnostics


@dataclass
class BatchPlan:
    labeled: list
    unlabeled: list
    query_caption: list   # index of the reference used to mine for each labeled image

    @property
    def ids(self):
        return list(self.labeled) + list(self.unlabeled)


def split_counts(batch_size, ratio):
    """Labeled and unlabeled counts for a batch with ratio ``(n_l, n_u)``."""
    a, b = ratio
    if a <= 0 or b < 0:
        raise ValueError(f"ratio needs a positive labeled share and nonnegative unlabeled share, got {ratio}")
    n_l = max(1, int(round(batch_size * a / (a + b))))
    return n_l, batch_size - n_l


def compose_batch(labeled_ids, references, miner, batch_size, ratio, rng, query_fn=None):
    """Draw labeled images uniformly and mine unlabeled ones for them.

    The unlabeled share is split as evenly as possible over the labeled
    images; each mines with one of its references chosen at random (or with
    ``query_fn(image_id, reference)`` when querying by generated caption).
    Ids already in the batch are excluded from later draws.
    """
    n_l, n_u = split_counts(batch_size, ratio)
    if n_l > len(labeled_ids):
        raise ValueError(f"batch needs {n_l} labeled images, only {len(labeled_ids)} available")
    picks = rng.choice(len(labeled_ids), size=n_l, replace=False)
    labeled = [labeled_ids[i] for i in picks]
    queries = [int(rng.integers(len(references[i]))) for i in labeled]
    unlabeled = []
    if n_u > 0:
        if miner is None:
            raise MiningError("unlabeled share requested but no unlabeled pool was given")
        lo, hi = miner.bounds
        per = [n_u // n_l + (k < n_u % n_l) for k in range(n_l)]
        if max(per) > hi - lo + 1 or n_u > len(miner.pool_ids):
            raise MiningError(f"unlabeled pool too small: need a clamped rank range of at least {max(per)} "
                              f"and a pool of at least {n_u}, have [{lo}, {hi}] over {len(miner.pool_ids)}")
        for img, q, count in zip(labeled, queries, per):
            if count == 0:
                continue
            query = references[img][q] if query_fn is None else query_fn(img, references[img][q])
            unlabeled += miner.mine(query, count, rng, exclude=unlabeled)
    return BatchPlan(labeled, unlabeled, queries)


@dataclass
class StepResult:
    params: object
    diagnostics: dict
    sampled: list = field(repr=False, default_factory=list)
    greedy: list = field(repr=False, default_factory=list)


def batch_rewards(captions, references, keys, scorer, retriever_params, image_emb, config):
    """Per-image rewards; ``references[i] is None`` marks an unlabeled image.

    Returns ``(rewards, cider_terms, retrieval_terms)``.  Unlabeled images
    never get a CIDEr term.
    """
    words = [strip_eos(c) for c in captions]
    cider = np.zeros(len(words))
    for i, (w, refs) in enumerate(zip(words, references)):
        if refs is not None:
            cider[i] = scorer.score(w, refs, key=keys[i])
    if retriever_params is None:
        r_ret = np.zeros(len(words))
    else:
        r_ret = retrieval_rewards(retriever_params, words, image_emb, config)
    rewards = np.array([combine(cider[i] if refs is not None else 0.0, r_ret[i], config.alpha)
                        for i, refs in enumerate(references)])
    return rewards, cider, r_ret


def reinforce_step(params, retriever_params, features, references, keys, scorer, config, state, rng,
                   t_max=T_MAX, grad_clip=5.0):
    """One self-critical update on a batch.

    ``retriever_params=None`` drops the retrieval term altogether (pure
    CIDEr-D self-critical training).
    """
    features = np.asarray(features, dtype=np.float64)
    B = features.shape[0]
    tape = Tape()
    p = params.bind(tape)
    sample = cap.sample_op(tape, p, features, rng, params.hidden, t_max)
    greedy = cap.greedy_decode_batch(params, features, t_max)
    image_emb = None if retriever_params is None else encode_images(retriever_params, features)
    r, cider_s, ret_s = batch_rewards(sample.tokens, references, keys, scorer, retriever_params, image_emb, config)
    b, _, _ = batch_rewards(greedy, references, keys, scorer, retriever_params, image_emb, config)
    adv = r - b
    diagnostics = {
        "mean_reward": float(r.mean()), "mean_baseline": float(b.mean()), "mean_advantage": float(adv.mean()),
        "mean_cider": float(cider_s[[x is not None for x in references]].mean()) if any(
            x is not None for x in references) else 0.0,
        "mean_retrieval": float(ret_s.mean()), "lr": state.current_lr(),
    }
    if not np.all(np.isfinite(adv)):
        diagnostics["loss"] = math.nan
        raise NonFiniteLoss("non-finite reward or baseline", diagnostics)
    loss = tape.sum(tape.mul(sample.logprob, -adv / B))
    diagnostics["loss"] = float(tape.value(loss))
    grads, norm = optim.clip_global_norm(leaf_grads(p, tape.backward(loss)), grad_clip)
    diagnostics["grad_norm"] = norm
    new = params.replace(adam_update(state, params.arrays(), grads))
    return StepResult(new, diagnostics, sample.tokens, greedy)


# ---------------------------------------------------------------------------
# training loop
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class RLConfig:
    mode: str = "sr-fl"
    epochs: int = 8
    batch_size: int = 16
    ratio: tuple = (1, 1)             # labeled : unlabeled in sr-pl mode
    steps_per_epoch: int | None = None  # default: one pass over the labeled images
    lr: float = 5e-4
    restart_period: int | None = None   # cosine warm-restart period in steps
    restart_mult: float = 1.0
    grad_clip: float = 5.0
    mining_range: tuple = (100, 1000)
    mining_query: str = "ground_truth"  # or "generated"
    t_max: int = T_MAX
    seed: int = 0

    def __post_init__(self):
        if self.mode not in MODES:
            raise ValueError(f"unknown mode {self.mode!r}; expected one of {MODES}")
        if self.mining_query not in ("ground_truth", "generated"):
            raise ValueError("mining_query must be 'ground_truth' or 'generated'")

    @property
    def effective_ratio(self):
        return tuple(self.ratio) if self.mode == "sr-pl" else (1, 0)


def evaluate_greedy(params, retriever_params, features, references, stats, t_max=T_MAX):
    """Validation CIDEr-D and generated-caption recall@1 under greedy decoding."""
    gen = [strip_eos(g) for g in cap.greedy_decode_batch(params, features, t_max)]
    cider = caption_metrics(gen, references, stats)["cider_d"]
    r1 = self_retrieval_eval(retriever_params, gen, features, ks=(1,))[1]
    return cider, r1


def train_rl(data, retriever_params, init_params, config=RLConfig(), reward_config=RewardConfig(),
             wall_time=False, on_epoch=None):
    """Run self-critical training from MLE-pretrained ``init_params``.

    ``data`` is an :class:`~retcap.shapeworld.EncodedDataset`.  Returns
    ``(final params, best-validation params, history, optimizer state)``;
    the history has one dict per epoch.  The best epoch maximizes
    validation CIDEr-D plus alpha times validation recall@1.  ``wall_time=False`` writes ``None`` for timing so
    that reruns are byte-identical.
    """
    if config.mode == "baseline" and reward_config.alpha != 0.0:
        raise ValueError("baseline mode requires alpha = 0")
    if config.mode != "baseline" and reward_config.alpha == 0.0:
        log.warning("mode %s with alpha = 0 is equivalent to baseline", config.mode)
    split = data.split
    rng = np.random.default_rng([config.seed, 0x5C57])
    train_refs = {i: data.refs[i] for i in split.labeled}
    scorer = CiderD(corpus_stats(train_refs.values(), reward_config.cider.n_max), reward_config.cider)
    val_feats = data.features_of(split.val)
    val_refs = [data.refs[i] for i in split.val]
    val_stats = corpus_stats(val_refs, reward_config.cider.n_max)

    ratio = config.effective_ratio
    miner = None
    if ratio[1] > 0:
        if not split.unlabeled:
            raise MiningError("sr-pl mode needs a nonempty unlabeled pool")
        miner = NegativeMiner(retriever_params, split.unlabeled, data.features_of(split.unlabeled),
                              MiningRange(*config.mining_range))
    n_l, _ = split_counts(config.batch_size, ratio)
    steps = config.steps_per_epoch or math.ceil(len(split.labeled) / n_l)
    schedule = None
    if config.restart_period:
        schedule = optim.CosineRestarts(config.restart_period, config.restart_mult)
    state = OptimizerState(lr=config.lr, schedule=schedule)

    params = init_params.copy()
    query_fn = None
    if config.mining_query == "generated":
        def query_fn(img, _ref):
            out = strip_eos(cap.greedy_decode(params, data.features_of([img])[0], config.t_max))
            return out or _ref

    best, best_score, history = params.copy(), -math.inf, []
    for epoch in range(config.epochs):
        start = time.perf_counter()
        diag = []
        for _ in range(steps):
            plan = compose_batch(split.labeled, data.refs, miner, config.batch_size, ratio, rng, query_fn)
            ids = plan.ids
            refs = [data.refs[i] for i in plan.labeled] + [None] * len(plan.unlabeled)
            step = reinforce_step(params, retriever_params, data.features_of(ids), refs, ids, scorer,
                                  reward_config, state, rng, config.t_max, config.grad_clip)
            params = step.params
            diag.append(step.diagnostics)
        val_cider, val_r1 = evaluate_greedy(params, retriever_params, val_feats, val_refs, val_stats, config.t_max)
        row = {
            "epoch": epoch,
            "mean_reward": float(np.mean([d["mean_reward"] for d in diag])),
            "mean_baseline": float(np.mean([d["mean_baseline"] for d in diag])),
            "val_cider": val_cider,
            "val_recall_at_1": val_r1,
            "lr": state.current_lr(),
            "wall_time_s": round(time.perf_counter() - start, 3) if wall_time else None,
        }
        history.append(row)
        log.info("rl %s epoch %d reward %.3f baseline %.3f val CIDEr %.3f R@1 %.3f", config.mode, epoch,
                 row["mean_reward"], row["mean_baseline"], val_cider, val_r1)
        if on_epoch is not None:
            on_epoch(row, params)
        score = val_cider + reward_config.alpha * val_r1
        if score > best_score:
            best, best_score = params.copy(), score
    return params, best, history, state


__all__ = [
    "BatchPlan", "MODES", "NonFiniteError", "NonFiniteLoss", "OptimizerState", "RLConfig", "StepResult",
    "adam_update", "batch_rewards", "compose_batch", "evaluate_greedy", "reinforce_step", "split_counts",
    "train_rl",
]
