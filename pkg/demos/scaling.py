"""
Time per epoch against graph size
=================================

Dense node attention builds an N x N score matrix; graph-token attention
scores each node against a fixed list of M tokens. Doubling N should
roughly quadruple the first and double the second.
"""

from vecformer import evalbench as eb
from vecformer.numerics import Rng
from vecformer.trainer import TrainConfig

sizes = [500, 1000, 2000, 4000]
records = eb.bench_scaling(sizes, config=TrainConfig(hidden_dim=32), rng=Rng(0), trials=3,
                           token_list_size=256, measure_memory=False)

print(f"{'N':>6} {'mechanism':>12} {'s/epoch':>9}")
for r in records:
    print(f"{r.n:>6} {r.mechanism:>12} {r.seconds:>9.4f}")

for mech in eb.MECHANISMS:
    print(f"log-log slope {mech}: {eb.loglog_slope(records, mech):.2f}")
