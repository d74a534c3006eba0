"""
What the rewards see
====================

Shapeworld images come with several reference captions.  Most are
generic ("a circle"); some name every attribute, with varied wording.
CIDEr-D rewards agreement with the references.  The self-retrieval
reward asks whether the caption picks its image out of a batch.  This
script scores a generic and a detailed caption under both.
"""

import numpy as np

from retcap import retriever as ret
from retcap import reward as rw
from retcap import shapeworld as sw

# a small world: one image per attribute tuple is plenty to see the effect
cfg = sw.ShapeWorldConfig(n_labeled=600, n_unlabeled=0, n_val=100, n_test=0, seed=1)
records = sw.generate(cfg)
split = sw.default_split(cfg)
by_id = {r.id: r for r in records}
vocab = sw.build_vocab([c for i in split.labeled for c in by_id[i].captions])
data = sw.EncodedDataset(records, split, vocab)

image = by_id[split.labeled[0]]
print("attributes:", image.attrs.as_dict())
for c in image.captions:
    print("  reference:", " ".join(c))

# document frequencies come from the training references
stats = rw.corpus_stats(data.refs[i] for i in split.labeled)
refs = data.refs[image.id]
generic = vocab.encode(["a", image.attrs.shape])
detailed = max(refs, key=len)
for name, caption in (("generic", generic), ("detailed", detailed)):
    print(f"CIDEr-D {name:8s} {rw.cider_d(caption, refs, stats):.3f}  ({' '.join(vocab.decode(caption))})")

# train the retriever, then score the same captions against a batch
print("training the retriever ...")
retriever, history = ret.train_retriever(
    data.refs_of(split.labeled), data.features_of(split.labeled), data.refs_of(split.val),
    data.features_of(split.val), ret.RetrieverDims(len(vocab)), ret.RetrieverTrainConfig())
print("val recall@1 by epoch:", [round(h["val_recall_at_1"], 2) for h in history])

batch = [image.id] + split.labeled[1:16]
feats = data.features_of(batch)
for name, caption in (("generic", generic), ("detailed", detailed)):
    r = rw.self_retrieval_reward(retriever, caption, feats, 0)
    print(f"self-retrieval {name:8s} {r:+.3f}")

# one image is noisy; averaged over batches of 16 the gap is clearer
emb = ret.encode_images(retriever, data.features_of(split.val))
gen_caps = [vocab.encode(["a", by_id[i].attrs.shape]) for i in split.val]
det_caps = [max(data.refs[i], key=len) for i in split.val]
for name, caps in (("generic", gen_caps), ("detailed", det_caps)):
    r = np.concatenate([rw.retrieval_rewards(retriever, caps[k:k + 16], emb[k:k + 16])
                        for k in range(0, len(caps), 16)])
    print(f"mean self-retrieval {name:8s} {r.mean():+.3f} over {len(r)} validation images")

# the composite labeled reward at a few weights
for alpha in (0.0, 1.0, 4.0):
    config = rw.RewardConfig(alpha=alpha)
    scores = [rw.labeled_reward(c, refs, feats, 0, stats, config, retriever) for c in (generic, detailed)]
    print(f"alpha {alpha}: generic {scores[0]:+.3f} detailed {scores[1]:+.3f}")
