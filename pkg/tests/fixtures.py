"""Small shared graph fixtures and straight-line reference implementations."""
import numpy as np

from vecformer.graphio import GraphDataset, SparseAdjacency, gen_sbm
from vecformer.numerics import Rng


def path_graph(n, symmetric=True):
    edges = [(i, i + 1) for i in range(n - 1)]
    return SparseAdjacency.from_edges(n, edges, symmetric=symmetric)


def triangle():
    return SparseAdjacency.from_edges(3, [(0, 1), (1, 2), (0, 2)], symmetric=True)


def random_dataset(n=8, d=4, classes=3, p=0.3, seed=0):
    r = np.random.default_rng(seed)
    upper = np.triu(r.random((n, n)) < p, 1)
    adj = SparseAdjacency.from_dense(upper | upper.T, symmetric=True)
    x = r.uniform(-1, 1, (n, d))
    y = r.integers(0, classes, n)
    return GraphDataset(adj, x, y, classes)


def sbm40(seed=0, feat_dim=8):
    return gen_sbm([20, 20], 0.9, 0.05, feat_dim=feat_dim, rng=Rng(seed))


def sigmoid(z):
    return 1.0 / (1.0 + np.exp(-z))


def softmax_rows(z, t=1.0):
    z = z / t
    e = np.exp(z - z.max(axis=1, keepdims=True))
    return e / e.sum(axis=1, keepdims=True)


def ref_scaled_cosine(a, b, gamma, eps=1e-8):
    out = []
    for x, y in zip(a, b):
        nx_ = max(np.sqrt(x @ x), eps)
        ny_ = max(np.sqrt(y @ y), eps)
        out.append(max(1.0 - (x @ y) / (nx_ * ny_), 0.0) ** gamma)
    return float(np.mean(out))


def ref_stage1(x, adj_dense, h, fc, sc, fw, fb, dec, t, gamma_f, gamma_g):
    """Dense, loop-free restatement of the stage-1 objective."""
    wf = softmax_rows(h @ fc.T, t)
    ws = softmax_rows(h @ sc.T, t)
    f, s = wf @ fc, ws @ sc
    alpha = np.concatenate([f, s], axis=1) @ fw + fb
    g = alpha[:, :1] * f + alpha[:, 1:] * s
    feat = ref_scaled_cosine(x, f @ dec["decoder.feature.weight"] + dec["decoder.feature.bias"], gamma_f)
    y = s @ dec["decoder.structure.weight"] + dec["decoder.structure.bias"]
    struct = float(((adj_dense - sigmoid(y @ y.T)) ** 2).sum())
    graph = ref_scaled_cosine(h, g @ dec["decoder.graph.weight"] + dec["decoder.graph.bias"], gamma_g)
    return feat, struct, graph
