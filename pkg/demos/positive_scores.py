"""
When every query-key score is positive
======================================

Stage 2 queries and keys are both mixtures of codebook entries. If the
entries are mutually orthogonal and every mixing coefficient is positive,
each q.k is a positive sum of squared code norms. This script trains a tiny
model, then applies those constraints and compares the smallest score.
"""

from vecformer import evalbench as eb
from vecformer import trainer as tr
from vecformer.graphio import gen_sbm, make_split
from vecformer.numerics import Rng

data = gen_sbm([30, 30], 0.3, 0.02, feat_dim=8, rng=Rng(3))
split = make_split(data.n, rng=Rng(3))
# the orthogonalization needs m + n <= hidden_dim
config = tr.TrainConfig(hidden_dim=16, m=6, n=6, n_f=3, n_s=3, stage1_epochs=40, stage2_epochs=40)
params = tr.train_vecformer(data, split, config).stage2.checkpoint.params

report = eb.positivity_diagnostic(data, params, config)
print("unconstrained min q.k: %+.4f" % report["general"]["min_qk"])
print("constrained   min q.k: %+.4f" % report["constrained"]["min_qk"])
print("all constrained scores positive:", report["constrained_positive"])
