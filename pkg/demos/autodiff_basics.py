"""
Gradients on a tape
===================

The captioner and the retriever are trained with a small reverse-mode
tape.  This script records a few computations, pulls gradients back and
checks them against central differences.
"""

import numpy as np

from retcap.graphgrad import Eager, Tape, grad_check

# record y = sum(tanh(W x)) and differentiate with respect to W
rng = np.random.default_rng(0)
x = rng.normal(size=(4, 1))
tape = Tape()
W = tape.leaf(rng.normal(size=(3, 4)))
y = tape.sum(tape.tanh(tape.matmul(W, x)))
grad_W = tape.backward(y)[W]
print("y =", float(tape.value(y)))
print("dy/dW =\n", grad_W.round(4))

# the same function on Eager runs without recording anything
print("eager y =", float(Eager().sum(Eager().tanh(tape.value(W) @ x))))


# grad_check compares the tape with central differences; the function is
# written once against the op methods and runs under both executors
def softmax_xent(ops, logits):
    onehot = np.eye(5)[[1, 3]]
    return ops.scale(ops.sum(ops.mul(ops.log_softmax(logits), onehot)), -1.0)


print("softmax cross-entropy max rel err:", grad_check(softmax_xent, rng.normal(size=(2, 5))))


# a unit-normalized embedding, as used for the joint retrieval space
def cosine(ops, v):
    u = np.array([1.0, 2.0, -1.0])
    return ops.sum(ops.mul(ops.l2_normalize(v), u / np.linalg.norm(u)))


print("cosine max rel err:", grad_check(cosine, rng.normal(size=3)))

# a caption decoder step end to end: gradient of a caption's NLL with
# respect to the LSTM gate weights
from retcap import captioner as cap

params = cap.init_params(cap.CaptionerDims(vocab_size=8, d_img=6, embed=4, hidden=5), seed=1)
base = params.arrays()
feats = rng.normal(size=(2, 6))


def nll(ops, gate_w):
    return cap.xent_loss_op(ops, dict(base, gate_w=gate_w), feats, [[4, 5, 6], [7]], hidden=5)


print("LSTM NLL max rel err:", grad_check(nll, base["gate_w"]))
