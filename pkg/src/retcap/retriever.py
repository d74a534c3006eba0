"""Joint caption/image embedding used as the self-retrieval critic.

Captions go through a GRU whose last hidden state is projected and
L2-normalised; images are linearly projected (no bias) and normalised.
Similarity is the inner product of the normalised vectors.
"""
from __future__ import annotations

import logging
from dataclasses import dataclass

import numpy as np

from . import optim
from .graphgrad import Eager, Tape
from .params import ParamSet, leaf_grads

log = logging.getLogger(__name__)

LOSS_KINDS = ("vse_pp", "vse0", "softmax")


class MiningError(ValueError):
    pass


@dataclass
class RetrieverParams(ParamSet):
    embed: np.ndarray      # [V, E_r]
    gru_w_zr: np.ndarray   # [2 H_r, E_r + H_r]  update and reset gates
    gru_b_zr: np.ndarray   # [2 H_r]
    gru_w_n: np.ndarray    # [H_r, E_r + H_r]    candidate state
    gru_b_n: np.ndarray    # [H_r]
    cap_proj: np.ndarray   # [D_joint, H_r]
    img_proj: np.ndarray   # [D_joint, D_img]

    prefix = "retriever"

    @property
    def hidden(self):
        return self.gru_b_n.shape[0]

    @property
    def vocab_size(self):
        return self.embed.shape[0]

    @property
    def d_img(self):
        return self.img_proj.shape[1]


@dataclass(frozen=True)
class RetrieverDims:
    vocab_size: int
    d_img: int = 64
    embed: int = 32      # 300 at full scale
    hidden: int = 64     # 1024 at full scale
    joint: int = 32      # 1024 at full scale


def init_params(dims, seed=0):
    rng = np.random.default_rng([seed, 0xE7])
    V, D, E, H, J = dims.vocab_size, dims.d_img, dims.embed, dims.hidden, dims.joint

    def uni(shape, fan_in):
        s = 1.0 / np.sqrt(fan_in)
        return rng.uniform(-s, s, size=shape)

    return RetrieverParams(
        embed=rng.normal(0.0, 0.1, size=(V, E)),
        gru_w_zr=uni((2 * H, E + H), E + H),
        gru_b_zr=np.zeros(2 * H),
        gru_w_n=uni((H, E + H), E + H),
        gru_b_n=np.zeros(H),
        cap_proj=uni((J, H), H),
        img_proj=uni((J, D), D),
    )


# ---------------------------------------------------------------------------
# encoders (written against the op methods, so they run on a Tape or Eager)
# ---------------------------------------------------------------------------

def _pad(captions):
    if not captions:
        raise ValueError("no captions to encode")
    lengths = [len(c) for c in captions]
    if min(lengths) == 0:
        raise ValueError("cannot encode an empty caption")
    tokens = np.zeros((len(captions), max(lengths)), dtype=np.int64)
    mask = np.zeros((len(captions), max(lengths)))
    for b, cap in enumerate(captions):
        tokens[b, :len(cap)] = cap
        mask[b, :len(cap)] = 1.0
    return tokens, mask


def gru_step(ops, p, x, h, hidden):
    """One GRU step; returns the next hidden state."""
    zr = ops.sigmoid(ops.add(ops.matmul(ops.concat([x, h]), p["gru_w_zr"], trans_b=True), p["gru_b_zr"]))
    z = ops.slice(zr, 0, hidden)
    r = ops.slice(zr, hidden, 2 * hidden)
    n = ops.tanh(ops.add(ops.matmul(ops.concat([x, ops.mul(r, h)]), p["gru_w_n"], trans_b=True), p["gru_b_n"]))
    return ops.add(n, ops.mul(z, ops.sub(h, n)))


def encode_captions_op(ops, p, captions, hidden, vocab_size):
    tokens, mask = _pad(captions)
    if tokens.max() >= vocab_size or tokens.min() < 0:
        raise ValueError(f"token id out of range for vocabulary of size {vocab_size}")
    h = ops.const(np.zeros((len(captions), hidden)))
    for t in range(tokens.shape[1]):
        x = ops.gather_rows(p["embed"], tokens[:, t])
        h_new = gru_step(ops, p, x, h, hidden)
        m = ops.const(mask[:, t:t + 1])
        h = ops.add(h, ops.mul(m, ops.sub(h_new, h)))
    return ops.l2_normalize(ops.matmul(h, p["cap_proj"], trans_b=True))


def encode_images_op(ops, p, features):
    return ops.l2_normalize(ops.matmul(features, p["img_proj"], trans_b=True))


def encode_captions(params, captions):
    """[n, D_joint] unit-norm embeddings of token-id captions."""
    ops = Eager()
    return encode_captions_op(ops, params.arrays(), [list(c) for c in captions], params.hidden, params.vocab_size)


def encode_caption(params, caption):
    return encode_captions(params, [caption])[0]


def encode_images(params, features):
    features = np.atleast_2d(np.asarray(features, dtype=np.float64))
    if features.shape[1] != params.d_img:
        raise ValueError(f"image features have dimension {features.shape[1]}, expected {params.d_img}")
    return encode_images_op(Eager(), params.arrays(), features)


def encode_image(params, features):
    return encode_images(params, features)[0]


def similarity(c, v):
    return float(np.dot(c, v))


# ---------------------------------------------------------------------------
# retrieval losses
# ---------------------------------------------------------------------------

def _check_kind(kind):
    if kind not in LOSS_KINDS:
        raise ValueError(f"unknown retrieval loss kind {kind!r}; expected one of {LOSS_KINDS}")


def retrieval_loss(ops, kind, c, images, positive, margin=0.2, temperature=0.1):
    """Text-to-image loss of one caption embedding against a batch.

    ``c`` is a [D] embedding handle, ``images`` an [n, D] handle, and
    ``positive`` the row of the matching image.  Returns a scalar handle.
    """
    _check_kind(kind)
    sims = ops.matmul(images, c)
    n = ops.value(sims).shape[0]
    if not 0 <= positive < n:
        raise IndexError(f"positive index {positive} outside batch of {n}")
    if kind == "softmax":
        lp = ops.log_softmax(ops.scale(sims, 1.0 / temperature))
        return ops.scale(ops.sum(ops.slice(lp, positive, positive + 1)), -1.0)
    if n == 1:
        return ops.scale(ops.sum(sims), 0.0)
    s_pos = ops.sum(ops.slice(sims, positive, positive + 1))
    hinge = ops.clamp_min_zero(ops.add(ops.sub(sims, s_pos), ops.const(margin)))
    mask = np.ones(n)
    mask[positive] = 0.0
    if kind == "vse_pp":
        values = np.where(mask > 0, ops.value(hinge), -np.inf)
        mask = np.zeros(n)
        mask[int(np.argmax(values))] = 1.0
    return ops.sum(ops.mul(hinge, ops.const(mask)))


def batch_retrieval_loss(ops, kind, caps, imgs, margin=0.2, temperature=0.1):
    """Mean loss over rows of ``caps @ imgs.T``; row i's positive is image i."""
    _check_kind(kind)
    sims = ops.matmul(caps, imgs, trans_b=True)
    n = ops.value(sims).shape[0]
    eye = np.eye(n)
    if kind == "softmax":
        lp = ops.log_softmax(ops.scale(sims, 1.0 / temperature))
        return ops.scale(ops.sum(ops.mul(lp, ops.const(eye))), -1.0 / n)
    diag = ops.sum(ops.mul(caps, imgs), axis=1, keepdims=True)
    hinge = ops.clamp_min_zero(ops.add(ops.sub(sims, diag), ops.const(margin)))
    mask = 1.0 - eye
    if kind == "vse_pp" and n > 1:
        values = np.where(mask > 0, ops.value(hinge), -np.inf)
        mask = np.zeros((n, n))
        mask[np.arange(n), values.argmax(axis=1)] = 1.0
    return ops.scale(ops.sum(ops.mul(hinge, ops.const(mask))), 1.0 / n)


def row_losses(kind, sims, margin=0.2, temperature=0.1):
    """Per-row losses for a square similarity matrix with positives on the diagonal."""
    _check_kind(kind)
    sims = np.asarray(sims, dtype=np.float64)
    n = sims.shape[0]
    pos = np.diag(sims)[:, None]
    if kind == "softmax":
        z = sims / temperature
        zmax = z.max(axis=1, keepdims=True)
        # offset first so equal logits give exactly log(n)
        return np.log(np.exp(z - zmax).sum(axis=1)) + (zmax[:, 0] - np.diag(z))
    hinge = np.maximum(margin - pos + sims, 0.0)
    hinge[np.arange(n), np.arange(n)] = 0.0
    if kind == "vse_pp":
        return hinge.max(axis=1) if n > 1 else np.zeros(n)
    return hinge.sum(axis=1)


# ---------------------------------------------------------------------------
# training
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class RetrieverTrainConfig:
    epochs: int = 30
    batch_size: int = 128
    lr: float = 2e-3
    margin: float = 0.2
    loss_kind: str = "vse_pp"
    grad_clip: float = 2.0
    seed: int = 0


def validation_query(captions):
    """Longest reference caption (first among equals): the most specific one."""
    return max(captions, key=len)


def recall_from_sims(sims, ks):
    """Recall@k for each k; query i's match is candidate i.

    Candidates tied with the match count ahead of it only if they come
    earlier in candidate order.
    """
    sims = np.asarray(sims)
    n_q, n_c = sims.shape
    for k in ks:
        if k < 1:
            raise ValueError("k must be at least 1")
        if k > n_c:
            raise ValueError(f"k={k} exceeds the {n_c} candidates")
    own = sims[np.arange(n_q), np.arange(n_q)][:, None]
    earlier = np.arange(n_c)[None, :] < np.arange(n_q)[:, None]
    rank = (sims > own).sum(axis=1) + ((sims == own) & earlier).sum(axis=1)
    return {k: float(np.mean(rank < k)) for k in ks}


def recall_at_k(params, query_captions, candidate_features, ks=(1, 5, 10)):
    """Caption-to-image recall@k; query i belongs to candidate image i."""
    if len(query_captions) != len(candidate_features):
        raise ValueError("queries and candidates must be aligned one-to-one")
    caps = encode_captions(params, query_captions)
    imgs = encode_images(params, candidate_features)
    return recall_from_sims(caps @ imgs.T, ks)


def train_retriever(train_captions, train_features, val_captions, val_features,
                    dims, config=RetrieverTrainConfig()):
    """Fit the joint embedding on (reference captions, image) pairs.

    ``train_captions[i]`` is the list of encoded references of image i.
    Each epoch pairs every image with one of its references drawn at
    random.  Returns ``(best params by validation recall@1, history)``.
    """
    if len(train_captions) == 0:
        raise ValueError("retriever training needs labeled images")
    train_features = np.asarray(train_features, dtype=np.float64)
    rng = np.random.default_rng([config.seed, 0x7E7])
    params = init_params(dims, seed=config.seed)
    state = optim.OptimizerState(lr=config.lr)
    val_queries = [validation_query(c) for c in val_captions]
    n = len(train_captions)
    best, best_r1, history = params.copy(), -1.0, []
    for epoch in range(config.epochs):
        order = rng.permutation(n)
        losses = []
        for start in range(0, n, config.batch_size):
            idx = order[start:start + config.batch_size]
            caps = [train_captions[i][rng.integers(len(train_captions[i]))] for i in idx]
            tape = Tape()
            p = params.bind(tape)
            c = encode_captions_op(tape, p, caps, params.hidden, params.vocab_size)
            v = encode_images_op(tape, p, train_features[idx])
            loss = batch_retrieval_loss(tape, config.loss_kind, c, v, config.margin)
            grads, _ = optim.clip_global_norm(leaf_grads(p, tape.backward(loss)), config.grad_clip)
            params = params.replace(optim.adam_update(state, params.arrays(), grads))
            losses.append(float(tape.value(loss)))
        r1 = recall_at_k(params, val_queries, val_features, ks=(1,))[1] if val_queries else 0.0
        history.append({"epoch": epoch, "loss": float(np.mean(losses)), "val_recall_at_1": r1})
        log.info("retriever epoch %d loss %.4f val R@1 %.3f", epoch, np.mean(losses), r1)
        if r1 > best_r1:
            best, best_r1 = params.copy(), r1
    return best, history


# ---------------------------------------------------------------------------
# moderately hard negative mining
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class MiningRange:
    h_min: int = 100
    h_max: int = 1000

    def __post_init__(self):
        if not 1 <= self.h_min < self.h_max:
            raise ValueError(f"mining range needs 1 <= h_min < h_max, got [{self.h_min}, {self.h_max}]")

    def clamp(self, pool_size):
        """1-based inclusive rank bounds after intersecting with the pool."""
        lo, hi = self.h_min, min(self.h_max, pool_size)
        if lo > hi:
            return 1, pool_size
        return lo, hi


class NegativeMiner:
    """Ranks a fixed unlabeled pool against query captions.

    Pool embeddings are computed once; the retriever is frozen while mining.
    """

    def __init__(self, params, pool_ids, pool_features, mining_range=MiningRange()):
        if len(pool_ids) == 0:
            raise MiningError("unlabeled pool is empty")
        self.params = params
        self.pool_ids = list(pool_ids)
        self.pool_emb = encode_images(params, pool_features)
        self.range = mining_range

    @property
    def bounds(self):
        return self.range.clamp(len(self.pool_ids))

    def ranked(self, query):
        """Pool indices by descending similarity to ``query`` (stable on ties)."""
        c = encode_caption(self.params, query)
        return np.argsort(-(self.pool_emb @ c), kind="stable")

    def mine(self, query, count, rng, exclude=()):
        if count < 1:
            raise ValueError("count must be at least 1")
        lo, hi = self.bounds
        if count > hi - lo + 1:
            raise MiningError(f"cannot draw {count} negatives from clamped rank range [{lo}, {hi}]")
        window = self.ranked(query)[lo - 1:hi]
        excluded = set(exclude)
        window = [i for i in window if self.pool_ids[i] not in excluded]
        if count > len(window):
            raise MiningError(f"only {len(window)} unused candidates in rank range [{lo}, {hi}]")
        picks = rng.choice(len(window), size=count, replace=False)
        return [self.pool_ids[window[j]] for j in picks]

    def ranks_of(self, query, ids):
        order = self.ranked(query)
        rank = {self.pool_ids[i]: r + 1 for r, i in enumerate(order)}
        return [rank[i] for i in ids]


def mine_hard_negatives(params, query, pool_ids, pool_features, mining_range, count, rng):
    return NegativeMiner(params, pool_ids, pool_features, mining_range).mine(query, count, rng)
