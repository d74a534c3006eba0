"""LSTM caption decoder conditioned on image feature vectors.

The image enters only through the initial state: ``h0 = A f``, ``c0 = B f``.
Decoding starts from BOS.  PAD and BOS can never be emitted: their logits
are pushed to a large negative constant before the log-softmax.
"""
from __future__ import annotations

import logging
import math
from dataclasses import dataclass

import numpy as np

from . import optim
from .graphgrad import Eager, Tape
from .params import ParamSet, leaf_grads
from .shapeworld import BOS, EOS, PAD, T_MAX

log = logging.getLogger(__name__)

BLOCKED_LOGIT = -1e9


@dataclass
class CaptionerParams(ParamSet):
    embed: np.ndarray     # [V, E]
    h0_proj: np.ndarray   # [H, D_img]
    c0_proj: np.ndarray   # [H, D_img]
    gate_w: np.ndarray    # [4H, E + H]; gate order input, forget, cell, output
    gate_b: np.ndarray    # [4H]
    out_w: np.ndarray     # [V, H]
    out_b: np.ndarray     # [V]

    prefix = "captioner"

    @property
    def hidden(self):
        return self.h0_proj.shape[0]

    @property
    def vocab_size(self):
        return self.embed.shape[0]

    @property
    def d_img(self):
        return self.h0_proj.shape[1]


@dataclass(frozen=True)
class CaptionerDims:
    vocab_size: int
    d_img: int = 64
    embed: int = 32
    hidden: int = 64


@dataclass
class DecoderState:
    h: np.ndarray
    c: np.ndarray


@dataclass
class SampleBatch:
    """Captions sampled for a batch on one tape.

    ``logprob`` is a tape node of shape [B] holding each caption's summed
    log-probability; ``step_logprobs`` holds the per-step terms (zero
    after EOS).
    """

    tokens: list
    logprob: int
    step_logprobs: np.ndarray


@dataclass
class SampledCaption:
    tokens: list
    logprob: int          # scalar node on ``tape``
    step_logprobs: np.ndarray
    tape: Tape
    bound: dict           # parameter name -> leaf node on ``tape``


def init_params(dims, seed=0):
    """Uniform(-0.08, 0.08) init with forget-gate bias 1."""
    if min(dims.vocab_size, dims.d_img, dims.embed, dims.hidden) <= 0:
        raise ValueError(f"dimensions must be positive: {dims}")
    rng = np.random.default_rng([seed, 0xCA9])
    V, D, E, H = dims.vocab_size, dims.d_img, dims.embed, dims.hidden

    def uni(*shape):
        return rng.uniform(-0.08, 0.08, size=shape)

    gate_b = uni(4 * H)
    gate_b[H:2 * H] = 1.0
    return CaptionerParams(embed=uni(V, E), h0_proj=uni(H, D), c0_proj=uni(H, D),
                           gate_w=uni(4 * H, E + H), gate_b=gate_b,
                           out_w=uni(V, H), out_b=uni(V))


# ---------------------------------------------------------------------------
# network pieces over op methods
# ---------------------------------------------------------------------------

def _blocked_mask(vocab_size):
    mask = np.zeros(vocab_size)
    mask[[PAD, BOS]] = BLOCKED_LOGIT
    return mask


def init_state_op(ops, p, features):
    return (ops.matmul(features, p["h0_proj"], trans_b=True),
            ops.matmul(features, p["c0_proj"], trans_b=True))


def lstm_step_op(ops, p, h, c, words, hidden):
    """Feed ``words`` [B]; returns (log-probs [B, V], h, c)."""
    x = ops.gather_rows(p["embed"], words)
    gates = ops.add(ops.matmul(ops.concat([x, h]), p["gate_w"], trans_b=True), p["gate_b"])
    i = ops.sigmoid(ops.slice(gates, 0, hidden))
    f = ops.sigmoid(ops.slice(gates, hidden, 2 * hidden))
    g = ops.tanh(ops.slice(gates, 2 * hidden, 3 * hidden))
    o = ops.sigmoid(ops.slice(gates, 3 * hidden, 4 * hidden))
    c = ops.add(ops.mul(f, c), ops.mul(i, g))
    h = ops.mul(o, ops.tanh(c))
    logits = ops.add(ops.matmul(h, p["out_w"], trans_b=True), p["out_b"])
    vocab_size = ops.value(logits).shape[-1]
    logits = ops.add(logits, _blocked_mask(vocab_size))
    return ops.log_softmax(logits), h, c


def _features2d(params, features):
    feats = np.atleast_2d(np.asarray(features, dtype=np.float64))
    if feats.shape[1] != params.d_img:
        raise ValueError(f"features have dimension {feats.shape[1]}, expected {params.d_img}")
    return feats


def _check_tokens(params, captions):
    for cap in captions:
        if len(cap) == 0:
            raise ValueError("caption must be nonempty")
        if min(cap) < 0 or max(cap) >= params.vocab_size:
            raise ValueError(f"token id out of range for vocabulary of size {params.vocab_size}")


# ---------------------------------------------------------------------------
# public eager API
# ---------------------------------------------------------------------------

def init_state(params, features):
    h, c = init_state_op(Eager(), params.arrays(), _features2d(params, features))
    return DecoderState(h, c)


def decode_step(params, state, prev_words):
    """Log-probabilities of the next word and the new state (batched)."""
    words = np.atleast_1d(np.asarray(prev_words, dtype=np.int64))
    if words.min() < 0 or words.max() >= params.vocab_size:
        raise ValueError(f"word id out of range for vocabulary of size {params.vocab_size}")
    lp, h, c = lstm_step_op(Eager(), params.arrays(), state.h, state.c, words, params.hidden)
    return lp, DecoderState(h, c)


def _pad_targets(captions, t_max):
    """Targets = words (truncated to t_max) + EOS; returns ids [B, L] and mask."""
    seqs = [list(c[:t_max]) + [EOS] for c in captions]
    L = max(len(s) for s in seqs)
    ids = np.full((len(seqs), L), PAD, dtype=np.int64)
    mask = np.zeros((len(seqs), L))
    for b, s in enumerate(seqs):
        ids[b, :len(s)] = s
        mask[b, :len(s)] = 1.0
    return ids, mask


def xent_loss_op(ops, p, features, captions, hidden, ss_prob=0.0, rng=None, t_max=T_MAX):
    """Teacher-forced negative log-likelihood, summed over steps, averaged over captions.

    With ``ss_prob > 0`` each step's input word is, with that probability,
    drawn from the model's previous-step distribution instead of the
    ground truth (scheduled sampling).
    """
    targets, mask = _pad_targets(captions, t_max)
    B, L = targets.shape
    vocab = ops.value(p["embed"]).shape[0]
    h, c = init_state_op(ops, p, features)
    words = np.full(B, BOS, dtype=np.int64)
    total = None
    for t in range(L):
        lp, h, c = lstm_step_op(ops, p, h, c, words, hidden)
        pick = np.zeros((B, vocab))
        pick[np.arange(B), targets[:, t]] = mask[:, t]
        term = ops.sum(ops.mul(lp, pick))
        total = term if total is None else ops.add(total, term)
        words = targets[:, t].copy()
        if ss_prob > 0.0 and t + 1 < L:
            swap = rng.random(B) < ss_prob
            if swap.any():
                drawn = _draw(np.exp(ops.value(lp)), rng)
                words[swap] = drawn[swap]
    return ops.scale(total, -1.0 / B)


def xent_loss(params, features, caption, t_max=T_MAX):
    """Negative log-likelihood of one caption (float)."""
    _check_tokens(params, [caption])
    loss = xent_loss_op(Eager(), params.arrays(), _features2d(params, features), [caption],
                        params.hidden, t_max=t_max)
    return float(loss)


def _draw(probs, rng):
    """One categorical draw per row by inverse CDF."""
    u = rng.random(probs.shape[0])
    cdf = np.cumsum(probs, axis=1)
    return np.minimum((cdf < u[:, None] * cdf[:, -1:]).sum(axis=1), probs.shape[1] - 1)


def sample_op(tape, p, features, rng, hidden, t_max=T_MAX):
    """Sample one caption per row of ``features`` on ``tape``."""
    B = features.shape[0]
    h, c = init_state_op(tape, p, features)
    words = np.full(B, BOS, dtype=np.int64)
    alive = np.ones(B, dtype=bool)
    tokens = [[] for _ in range(B)]
    steps, total = [], None
    for _ in range(t_max):
        lp, h, c = lstm_step_op(tape, p, h, c, words, hidden)
        lp_val = tape.value(lp)
        words = _draw(np.exp(lp_val), rng)
        pick = np.zeros_like(lp_val)
        pick[np.arange(B), words] = alive
        term = tape.sum(tape.mul(lp, pick), axis=1)
        total = term if total is None else tape.add(total, term)
        steps.append(np.where(alive, lp_val[np.arange(B), words], 0.0))
        for b in np.flatnonzero(alive):
            tokens[b].append(int(words[b]))
        alive &= words != EOS
        if not alive.any():
            break
    return SampleBatch(tokens, total, np.stack(steps, axis=1))


def sample_caption(params, features, rng, t_max=T_MAX):
    if t_max < 1:
        raise ValueError("t_max must be at least 1")
    tape = Tape()
    p = params.bind(tape)
    batch = sample_op(tape, p, _features2d(params, features)[:1], rng, params.hidden, t_max)
    node = tape.sum(batch.logprob)
    return SampledCaption(batch.tokens[0], node, batch.step_logprobs[0], tape, p)


def greedy_decode_batch(params, features, t_max=T_MAX):
    """Greedy captions for every row of ``features`` (argmax, ties to lowest id)."""
    if t_max < 1:
        raise ValueError("t_max must be at least 1")
    feats = _features2d(params, features)
    ops, p = Eager(), params.arrays()
    h, c = init_state_op(ops, p, feats)
    B = feats.shape[0]
    words = np.full(B, BOS, dtype=np.int64)
    alive = np.ones(B, dtype=bool)
    tokens = [[] for _ in range(B)]
    for _ in range(t_max):
        lp, h, c = lstm_step_op(ops, p, h, c, words, params.hidden)
        words = lp.argmax(axis=1)
        for b in np.flatnonzero(alive):
            tokens[b].append(int(words[b]))
        alive &= words != EOS
        if not alive.any():
            break
    return tokens


def greedy_decode(params, features, t_max=T_MAX):
    return greedy_decode_batch(params, features, t_max)[0]


def beam_search(params, features, width=5, t_max=T_MAX):
    """Length-synchronous beam search over summed log-probability.

    Hypotheses that emit EOS retire; at the end retired hypotheses and
    those still open at ``t_max`` compete on total log-probability, ties
    going to the lexicographically smaller token sequence.
    """
    if width < 1 or t_max < 1:
        raise ValueError("beam width and t_max must be at least 1")
    ops, p = Eager(), params.arrays()
    h, c = init_state_op(ops, p, _features2d(params, features)[:1])
    vocab = params.vocab_size
    emittable = [w for w in range(vocab) if w not in (PAD, BOS)]
    beams = [(0.0, [])]
    words = np.array([BOS])
    finished = []
    for _ in range(t_max):
        lp, h, c = lstm_step_op(ops, p, h, c, words, params.hidden)
        cands = []
        for row, (score, seq) in enumerate(beams):
            for w in emittable:
                cands.append((score + lp[row, w], seq + [w], row))
        cands.sort(key=lambda x: (-x[0], x[1]))
        beams, rows = [], []
        for score, seq, row in cands[:width]:
            if seq[-1] == EOS:
                finished.append((score, seq))
            else:
                beams.append((score, seq))
                rows.append(row)
        if not beams:
            break
        if finished and max(s for s, _ in finished) >= beams[0][0]:
            # open scores only decrease from here
            beams = []
            break
        h, c = h[rows], c[rows]
        words = np.array([seq[-1] for _, seq in beams])
    pool = finished + beams
    pool.sort(key=lambda x: (-x[0], x[1]))
    return pool[0][1]


def beam_search_batch(params, features, width=5, t_max=T_MAX):
    feats = _features2d(params, features)
    return [beam_search(params, f, width, t_max) for f in feats]


def caption_logprob(params, features, tokens):
    """Total log-probability of an emitted token sequence (EOS included if present)."""
    ops, p = Eager(), params.arrays()
    h, c = init_state_op(ops, p, _features2d(params, features)[:1])
    words = np.array([BOS])
    total = 0.0
    for w in tokens:
        lp, h, c = lstm_step_op(ops, p, h, c, words, params.hidden)
        total += lp[0, w]
        words = np.array([w])
    return total


# ---------------------------------------------------------------------------
# MLE pretraining
# ---------------------------------------------------------------------------

def scheduled_sampling_prob(epoch, start=0, every=5, step=0.05, cap=0.25):
    """+``step`` every ``every`` epochs after ``start``, capped at ``cap``."""
    if epoch < start:
        return 0.0
    return min(cap, step * ((epoch - start) // every))


@dataclass(frozen=True)
class MLEConfig:
    epochs: int = 12
    batch_size: int = 64
    lr: float = 5e-3
    grad_clip: float = 5.0
    ss_every: int = 5
    ss_step: float = 0.05
    ss_cap: float = 0.25
    t_max: int = T_MAX
    seed: int = 0


def pretrain_mle(train_features, train_captions, val_features, val_captions, dims, config=MLEConfig()):
    """Cross-entropy training over every (image, reference) pair.

    ``train_captions[i]`` lists the encoded references of image i.  Returns
    ``(params with best validation loss, history)``.
    """
    train_features = np.asarray(train_features, dtype=np.float64)
    pairs = [(i, cap) for i, caps in enumerate(train_captions) for cap in caps]
    if not pairs:
        raise ValueError("MLE pretraining needs labeled data")
    val_pairs = [(i, cap) for i, caps in enumerate(val_captions) for cap in caps]
    rng = np.random.default_rng([config.seed, 0x11E])
    params = init_params(dims, seed=config.seed)
    _check_tokens(params, [c for _, c in pairs + val_pairs])
    state = optim.OptimizerState(lr=config.lr)
    best, best_loss, history = params.copy(), math.inf, []
    for epoch in range(config.epochs):
        ss = scheduled_sampling_prob(epoch, every=config.ss_every, step=config.ss_step, cap=config.ss_cap)
        order = rng.permutation(len(pairs))
        losses = []
        for start in range(0, len(order), config.batch_size):
            chunk = [pairs[j] for j in order[start:start + config.batch_size]]
            tape = Tape()
            p = params.bind(tape)
            loss = xent_loss_op(tape, p, train_features[[i for i, _ in chunk]], [cap for _, cap in chunk],
                                params.hidden, ss_prob=ss, rng=rng, t_max=config.t_max)
            grads, _ = optim.clip_global_norm(leaf_grads(p, tape.backward(loss)), config.grad_clip)
            params = params.replace(optim.adam_update(state, params.arrays(), grads))
            losses.append(float(tape.value(loss)))
        val_loss = mean_xent(params, val_features, val_pairs, config.t_max) if val_pairs else float(np.mean(losses))
        history.append({"epoch": epoch, "train_loss": float(np.mean(losses)), "val_loss": val_loss, "ss_prob": ss})
        log.info("mle epoch %d train %.4f val %.4f ss %.2f", epoch, np.mean(losses), val_loss, ss)
        if val_loss < best_loss:
            best, best_loss = params.copy(), val_loss
    return best, history


def mean_xent(params, features, pairs, t_max=T_MAX, chunk=512):
    """Average per-caption negative log-likelihood over (image index, caption) pairs."""
    features = np.asarray(features, dtype=np.float64)
    total = 0.0
    for start in range(0, len(pairs), chunk):
        part = pairs[start:start + chunk]
        loss = xent_loss_op(Eager(), params.arrays(), features[[i for i, _ in part]],
                            [c for _, c in part], params.hidden, t_max=t_max)
        total += float(loss) * len(part)
    return total / len(pairs)
