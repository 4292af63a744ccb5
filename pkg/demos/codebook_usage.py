"""
Soft versus hard vector quantization
====================================

Nearest-code quantization hands each input to a single code, so codes that
never win get no gradient and the codebook can collapse. The softmax
version spreads every input over all codes. Here we compare how evenly the
two use a 32-entry codebook on the same embeddings.
"""

import numpy as np

from vecformer import quantizer as q
from vecformer.numerics import Rng

codes = q.codebook_init(32, 8, Rng(1))
# embeddings concentrated along a few directions, as after a shallow encoder
h = Rng(2).normal(size=(400, 8)) * np.array([3.0, 2.0, 1.0, 0.2, 0.2, 0.2, 0.2, 0.2])

_, idx = q.vanilla_vq(h, codes)
hard_usage = np.bincount(idx, minlength=codes.size) / idx.size
p = hard_usage[hard_usage > 0]
print("hard: %2d of 32 codes used, usage entropy %.2f nats" % ((hard_usage > 0).sum(), -(p * np.log(p)).sum()))

for t in (0.3, 1.0, 3.0):
    _, w = q.softvq(h, codes, q.SoftVQConfig(t))
    print(f"soft T={t:<4}: usage entropy {q.usage_entropy(w):.2f} nats (uniform is {np.log(32):.2f})")

# as T shrinks the soft tokens approach the dot-product argmax selection
tok, _ = q.softvq(h, codes, q.SoftVQConfig(1e-4))
hard = codes.codes.data[(h @ codes.codes.data.T).argmax(axis=1)]
print("T=1e-4 max deviation from argmax tokens: %.1e" % np.abs(tok.data - hard).max())
