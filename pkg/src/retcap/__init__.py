"""Discriminative image captioning with self-retrieval rewards, on numpy.

Modules:

* ``graphgrad``: reverse-mode autodiff tape over float64 arrays
* ``shapeworld``: synthetic images, template captions, file formats
* ``retriever``: GRU caption encoder, joint embedding, ranking losses, mining
* ``captioner``: LSTM decoder, MLE pretraining, sampling, greedy and beam decoding
* ``reward``: CIDEr-D and self-retrieval rewards
* ``rltrain``: self-critical REINFORCE in baseline, sr-fl and sr-pl modes
* ``evalsuite``: caption metrics, self-retrieval recall, diversity, reports
* ``cli``: the ``retcap`` command-line pipeline
"""

__version__ = "0.1.0"
