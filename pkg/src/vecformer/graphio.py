"""Graph data model, on-disk container, split protocol and synthetic generators."""
from __future__ import annotations

import json
import math
from collections import deque
from dataclasses import dataclass, field
from functools import cached_property
from pathlib import Path

import numpy as np

from .errors import ConfigError, FormatError, StructuralError
from .numerics import Rng

GRAPH_FORMAT_VERSION = "vecformer-graph/1"

ID_ENV = 0
OOD_ENV = 1

_SBM_CHUNK = 512


@dataclass(frozen=True, eq=False)
class SparseAdjacency:
    """Unique ``(row, col)`` pairs sorted row-major; pair ``(i, j)`` means ``A[i, j] = 1``."""

    n: int
    rows: np.ndarray
    cols: np.ndarray
    symmetric: bool = False
    self_loops: bool = False

    @classmethod
    def from_edges(cls, n, edges, symmetric=False):
        """Build from an iterable of pairs; ``symmetric`` adds every reverse pair."""
        e = np.asarray(list(edges) if not isinstance(edges, np.ndarray) else edges, dtype=np.int64)
        e = e.reshape(-1, 2)
        if e.size and (e.min() < 0 or e.max() >= n):
            bad = e[(e < 0).any(axis=1) | (e >= n).any(axis=1)][0]
            raise StructuralError(f"edge ({bad[0]}, {bad[1]}) out of range for n={n}")
        if symmetric:
            e = np.concatenate([e, e[:, ::-1]])
        return cls._from_pairs(n, e[:, 0], e[:, 1], symmetric)

    @classmethod
    def _from_pairs(cls, n, rows, cols, symmetric):
        keys = np.unique(rows.astype(np.int64) * n + cols.astype(np.int64))
        rows, cols = keys // n, keys % n
        loops = bool(n > 0 and np.count_nonzero(rows == cols) == n)
        return cls(int(n), rows, cols, bool(symmetric), loops)

    @classmethod
    def from_dense(cls, dense, symmetric=None):
        dense = np.asarray(dense)
        rows, cols = np.nonzero(dense)
        if symmetric is None:
            symmetric = bool(np.array_equal(dense != 0, (dense != 0).T))
        return cls._from_pairs(dense.shape[0], rows, cols, symmetric)

    @property
    def num_edges(self) -> int:
        return int(self.rows.size)

    @cached_property
    def indptr(self) -> np.ndarray:
        return np.searchsorted(self.rows, np.arange(self.n + 1)).astype(np.int64)

    @cached_property
    def looped(self) -> "SparseAdjacency":
        """This adjacency with every self-loop present (cached)."""
        return add_self_loops(self)

    def edges(self) -> np.ndarray:
        return np.stack([self.rows, self.cols], axis=1)

    def degree(self) -> np.ndarray:
        return np.diff(self.indptr)

    def to_dense(self) -> np.ndarray:
        out = np.zeros((self.n, self.n))
        out[self.rows, self.cols] = 1.0
        return out

    def is_symmetric(self) -> bool:
        fwd = self.rows * self.n + self.cols
        rev = np.sort(self.cols * self.n + self.rows)
        return bool(np.array_equal(fwd, rev))

    def neighbors(self, i: int) -> np.ndarray:
        return self.cols[self.indptr[i]:self.indptr[i + 1]]

    def permute(self, perm) -> "SparseAdjacency":
        """Relabel node ``i`` as ``perm[i]``."""
        perm = np.asarray(perm)
        return SparseAdjacency._from_pairs(self.n, perm[self.rows], perm[self.cols], self.symmetric)

    def __eq__(self, other):
        return (isinstance(other, SparseAdjacency) and self.n == other.n
                and self.symmetric == other.symmetric
                and np.array_equal(self.rows, other.rows) and np.array_equal(self.cols, other.cols))

    __hash__ = None


def add_self_loops(adj: SparseAdjacency) -> SparseAdjacency:
    if adj.self_loops:
        return adj
    ids = np.arange(adj.n)
    return SparseAdjacency._from_pairs(adj.n, np.concatenate([adj.rows, ids]),
                                       np.concatenate([adj.cols, ids]), adj.symmetric)


def remove_self_loops(adj: SparseAdjacency) -> SparseAdjacency:
    keep = adj.rows != adj.cols
    return SparseAdjacency._from_pairs(adj.n, adj.rows[keep], adj.cols[keep], adj.symmetric)


@dataclass(frozen=True, eq=False)
class GraphDataset:
    adjacency: SparseAdjacency
    features: np.ndarray
    labels: np.ndarray
    num_classes: int
    environment_id: np.ndarray | None = None
    environments: tuple = (ID_ENV, OOD_ENV)
    meta: dict = field(default_factory=dict)

    def __post_init__(self):
        n = self.adjacency.n
        if self.features.ndim != 2 or self.features.shape[0] != n:
            raise StructuralError(f"features have shape {self.features.shape}, expected {n} rows")
        if self.labels.shape[0] != n:
            raise StructuralError(f"{self.labels.shape[0]} labels for {n} nodes")
        if self.multilabel:
            if not np.isin(self.labels, (0, 1)).all():
                raise StructuralError("multilabel labels must be 0/1")
        elif self.labels.size and (self.labels.min() < 0 or self.labels.max() >= self.num_classes):
            raise StructuralError(f"labels outside [0, {self.num_classes})")
        if self.environment_id is not None:
            if self.environment_id.shape != (n,):
                raise StructuralError("environment_id must have one entry per node")
            if not np.isin(self.environment_id, self.environments).all():
                raise StructuralError("environment_id references an undeclared environment")

    @property
    def n(self) -> int:
        return self.adjacency.n

    @property
    def feat_dim(self) -> int:
        return self.features.shape[1]

    @property
    def multilabel(self) -> bool:
        return self.labels.ndim == 2

    @property
    def binary(self) -> bool:
        return self.multilabel or self.num_classes == 2

    def with_labels(self, labels, num_classes) -> "GraphDataset":
        return GraphDataset(self.adjacency, self.features, np.asarray(labels), num_classes,
                            self.environment_id, self.environments, dict(self.meta))

    def __eq__(self, other):
        if not isinstance(other, GraphDataset):
            return NotImplemented
        envs_equal = (self.environment_id is None and other.environment_id is None) or (
            self.environment_id is not None and other.environment_id is not None
            and np.array_equal(self.environment_id, other.environment_id))
        return (self.adjacency == other.adjacency and self.num_classes == other.num_classes
                and np.array_equal(self.features, other.features)
                and np.array_equal(self.labels, other.labels) and envs_equal)

    __hash__ = None


@dataclass(frozen=True)
class Split:
    train: np.ndarray
    val: np.ndarray
    test: np.ndarray
    ood_test: np.ndarray | None = None

    def __post_init__(self):
        parts = [self.train, self.val, self.test] + ([self.ood_test] if self.ood_test is not None else [])
        allidx = np.concatenate(parts) if parts else np.array([], dtype=np.int64)
        if np.unique(allidx).size != allidx.size:
            raise ConfigError("split parts overlap")

    def masks(self, n):
        out = {}
        for name in ("train", "val", "test", "ood_test"):
            idx = getattr(self, name)
            if idx is not None:
                m = np.zeros(n, dtype=bool)
                m[idx] = True
                out[name] = m
        return out

    def to_dict(self):
        return {k: (None if v is None else [int(i) for i in v])
                for k, v in (("train", self.train), ("val", self.val), ("test", self.test),
                             ("ood_test", self.ood_test))}

    @classmethod
    def from_dict(cls, d):
        conv = lambda v: None if v is None else np.asarray(v, dtype=np.int64)
        return cls(conv(d["train"]), conv(d["val"]), conv(d["test"]), conv(d.get("ood_test")))


PLANETOID_RATIOS = (0.6, 0.2, 0.2)
OOD_RATIOS = (0.5, 0.25, 0.25)


def make_split(n: int, ratios=PLANETOID_RATIOS, rng: Rng | None = None, nodes=None) -> Split:
    """Random train/val/test split.

    Val and test get ``floor(ratio * n)`` nodes each; train gets its own floor
    plus whatever rounding left over. ``nodes`` restricts the split to a subset
    (``n`` is then its size).
    """
    ratios = tuple(float(r) for r in ratios)
    if len(ratios) != 3 or min(ratios) <= 0:
        raise ConfigError(f"ratios must be three positive numbers, got {ratios}")
    if sum(ratios) > 1 + 1e-9:
        raise ConfigError(f"ratios sum to {sum(ratios)} > 1")
    rng = rng if rng is not None else Rng(0)
    total = min(n, math.floor(sum(ratios) * n + 1e-9))
    n_val = math.floor(ratios[1] * n + 1e-9)
    n_test = math.floor(ratios[2] * n + 1e-9)
    n_train = total - n_val - n_test
    order = rng.permutation(n)
    if nodes is not None:
        order = np.asarray(nodes, dtype=np.int64)[order]
    train = np.sort(order[:n_train])
    val = np.sort(order[n_train:n_train + n_val])
    test = np.sort(order[n_train + n_val:n_train + n_val + n_test])
    return Split(train, val, test)


def make_ood_split(dataset: GraphDataset, ratios=OOD_RATIOS, rng: Rng | None = None) -> Split:
    """Split in-distribution nodes; every OOD-environment node goes to ``ood_test``."""
    if dataset.environment_id is None:
        raise ConfigError("dataset has no environment ids")
    id_nodes = np.flatnonzero(dataset.environment_id == ID_ENV)
    s = make_split(id_nodes.size, ratios, rng, nodes=id_nodes)
    return Split(s.train, s.val, s.test, np.flatnonzero(dataset.environment_id != ID_ENV))


def default_split(dataset: GraphDataset, rng: Rng | None = None, ratios=None) -> Split:
    if dataset.environment_id is not None:
        return make_ood_split(dataset, ratios or OOD_RATIOS, rng)
    return make_split(dataset.n, ratios or PLANETOID_RATIOS, rng)


# ---------------------------------------------------------------- generators

def gen_sbm(block_sizes, p_in: float, p_out: float, feat_dim: int = 16,
            feat_signal: float = 1.0, rng: Rng | None = None) -> GraphDataset:
    """Undirected stochastic block model with Gaussian class-mean features.

    Node features are ``feat_signal`` on one class-specific coordinate
    (class ``c`` uses coordinate ``c mod feat_dim``) plus unit noise.
    """
    if not (0 <= p_in <= 1 and 0 <= p_out <= 1):
        raise ConfigError("edge probabilities must lie in [0, 1]")
    block_sizes = [int(b) for b in block_sizes]
    if not block_sizes or min(block_sizes) <= 0:
        raise ConfigError("block sizes must be positive")
    rng = rng if rng is not None else Rng(0)
    labels = np.repeat(np.arange(len(block_sizes)), block_sizes)
    n = labels.size
    g = rng.child("edges")
    # one Bernoulli per unordered pair, drawn in fixed row blocks to bound memory
    found = []
    cols = np.arange(n)
    for start in range(0, n, _SBM_CHUNK):
        rows = np.arange(start, min(start + _SBM_CHUNK, n))
        draw = g.random((rows.size, n))
        prob = np.where(labels[rows, None] == labels[None, :], p_in, p_out)
        hit = (draw < prob) & (cols[None, :] > rows[:, None])
        r, c = np.nonzero(hit)
        found.append(np.stack([rows[r], c], axis=1))
    adj = SparseAdjacency.from_edges(n, np.concatenate(found), symmetric=True)
    means = np.zeros((len(block_sizes), feat_dim))
    means[np.arange(len(block_sizes)), np.arange(len(block_sizes)) % feat_dim] = feat_signal
    x = means[labels] + rng.child("features").normal(size=(n, feat_dim))
    return GraphDataset(adj, x, labels, len(block_sizes),
                        meta={"generator": "sbm", "block_sizes": block_sizes,
                              "p_in": p_in, "p_out": p_out})


def gen_spurious_shift(base: GraphDataset, spurious_dim: int, id_corr: float, ood_corr: float,
                       rng: Rng | None = None, ood_fraction: float = 0.5,
                       spurious_signal: float = 1.0, spurious_noise: float = 0.1) -> GraphDataset:
    """Append label-correlated spurious columns whose correlation shifts between environments.

    Every node draws a spurious class: its true label with probability
    ``id_corr`` (ID environment) or ``ood_corr`` (OOD environment), otherwise
    a class drawn uniformly. The spurious columns are a fixed random
    embedding of that class plus small noise.
    """
    if spurious_dim < 1:
        raise ConfigError("spurious_dim must be >= 1")
    if not (0 <= id_corr <= 1 and 0 <= ood_corr <= 1):
        raise ConfigError("correlations must lie in [0, 1]")
    if base.multilabel:
        raise ConfigError("spurious shift needs single-label classes")
    rng = rng if rng is not None else Rng(0)
    n, c = base.n, base.num_classes
    env = np.full(n, ID_ENV, dtype=np.int64)
    env[rng.child("env").permutation(n)[:int(round(ood_fraction * n))]] = OOD_ENV
    corr = np.where(env == ID_ENV, id_corr, ood_corr)
    draw = rng.child("spurious")
    follow = draw.random(n) < corr
    spurious_class = np.where(follow, base.labels, draw.integers(0, c, size=n))
    table = spurious_signal * rng.child("table").normal(size=(c, spurious_dim))
    cols = table[spurious_class] + spurious_noise * rng.child("noise").normal(size=(n, spurious_dim))
    meta = dict(base.meta, spurious_dim=spurious_dim, id_corr=id_corr, ood_corr=ood_corr)
    return GraphDataset(base.adjacency, np.concatenate([base.features, cols], axis=1),
                        base.labels, c, env, meta=meta)


def pearson_matrix(signals) -> np.ndarray:
    """Row-wise Pearson correlations; rows with zero variance correlate 0 with everything."""
    x = np.asarray(signals, dtype=np.float64)
    x = x - x.mean(axis=1, keepdims=True)
    norm = np.sqrt((x * x).sum(axis=1))
    dead = norm == 0
    x = x / np.where(dead, 1.0, norm)[:, None]
    c = x @ x.T
    c[dead, :] = 0.0
    c[:, dead] = 0.0
    return c


def knn_neighbors(signals, k: int) -> np.ndarray:
    """Each row's ``k`` most correlated other rows (ties to lower index)."""
    c = pearson_matrix(signals)
    n = c.shape[0]
    if k >= n:
        raise ConfigError(f"k={k} must be smaller than the node count {n}")
    if k < 1:
        raise ConfigError("k must be >= 1")
    np.fill_diagonal(c, -np.inf)
    # stable sort on negated correlation keeps lower indices first among ties
    return np.argsort(-c, axis=1, kind="stable")[:, :k]


def build_knn_correlation_graph(signals, k: int) -> SparseAdjacency:
    """Symmetric k-NN graph over Pearson correlation, symmetrized by union."""
    signals = np.asarray(signals, dtype=np.float64)
    if signals.ndim != 2 or signals.shape[1] < 2:
        raise ConfigError("signals need shape (N, samples) with samples >= 2")
    nbrs = knn_neighbors(signals, k)
    n = signals.shape[0]
    rows = np.repeat(np.arange(n), k)
    return SparseAdjacency.from_edges(n, np.stack([rows, nbrs.reshape(-1)], axis=1), symmetric=True)


def graph_distances(adj: SparseAdjacency, source: int) -> np.ndarray:
    """BFS hop counts from ``source``; unreachable nodes get -1."""
    if not 0 <= source < adj.n:
        raise StructuralError(f"node {source} out of range for n={adj.n}")
    dist = np.full(adj.n, -1, dtype=np.int64)
    dist[source] = 0
    queue = deque([source])
    while queue:
        u = queue.popleft()
        for v in adj.neighbors(u):
            if dist[v] < 0:
                dist[v] = dist[u] + 1
                queue.append(v)
    return dist


def gen_de_labels(dataset: GraphDataset, perturb_target: int, radius=1, rng: Rng | None = None) -> np.ndarray:
    """Binary labels: 1 for nodes within ``radius`` hops of ``perturb_target``.

    ``radius`` may be ``math.inf``. ``rng`` is accepted for signature symmetry
    with the other generators; the labelling itself is deterministic.
    """
    if radius < 0:
        raise ConfigError("radius must be >= 0")
    dist = graph_distances(dataset.adjacency, int(perturb_target))
    return ((dist >= 0) & (dist <= radius)).astype(np.int64)


def gen_knn_perturbation(n_nodes: int = 200, n_samples: int = 50, k: int = 10, n_factors: int = 8,
                         feat_dim: int = 16, perturb_target: int = 0, radius: int = 1,
                         rng: Rng | None = None) -> GraphDataset:
    """Synthetic co-expression task: latent-factor signals, k-NN graph, DE labels.

    Node features are a random projection of each node's signal plus the
    perturbed node's own projection, so the model can see which node was hit.
    """
    rng = rng if rng is not None else Rng(0)
    loadings = rng.child("loadings").normal(size=(n_nodes, n_factors))
    factors = rng.child("factors").normal(size=(n_factors, n_samples))
    signals = loadings @ factors + 0.5 * rng.child("noise").normal(size=(n_nodes, n_samples))
    adj = build_knn_correlation_graph(signals, k)
    proj = rng.child("proj").normal(size=(n_samples, feat_dim)) / np.sqrt(n_samples)
    base = signals @ proj
    x = base + base[perturb_target]
    ds = GraphDataset(adj, x, np.zeros(n_nodes, dtype=np.int64), 2,
                      meta={"generator": "knn", "k": k, "perturb_target": perturb_target,
                            "radius": radius})
    return ds.with_labels(gen_de_labels(ds, perturb_target, radius), 2)


# ---------------------------------------------------------------- container format

def save_graph(dataset: GraphDataset, path) -> Path:
    """Write the directory container (graph.json, edges.csv, features.csv, labels.csv[, env.csv])."""
    path = Path(path)
    path.mkdir(parents=True, exist_ok=True)
    adj = dataset.adjacency
    fields = ["edges.csv", "features.csv", "labels.csv"]
    if dataset.environment_id is not None:
        fields.append("env.csv")
    header = {
        "version": GRAPH_FORMAT_VERSION,
        "n": adj.n,
        "d": dataset.feat_dim,
        "num_classes": dataset.num_classes,
        "symmetric": adj.symmetric,
        "label_mode": "multilabel" if dataset.multilabel else "multiclass",
        "fields": fields,
        "meta": dataset.meta,
    }
    with open(path / "graph.json", "w", encoding="utf-8", newline="\n") as fh:
        json.dump(header, fh, indent=2, sort_keys=True, default=_json_default)
        fh.write("\n")
    _write_rows(path / "edges.csv", ("%d,%d" % (r, c) for r, c in zip(adj.rows, adj.cols)))
    _write_rows(path / "features.csv", (",".join(repr(float(v)) for v in row) for row in dataset.features))
    if dataset.multilabel:
        _write_rows(path / "labels.csv", (",".join(str(int(v)) for v in row) for row in dataset.labels))
    else:
        _write_rows(path / "labels.csv", (str(int(v)) for v in dataset.labels))
    if dataset.environment_id is not None:
        _write_rows(path / "env.csv", (str(int(v)) for v in dataset.environment_id))
    return path


def _json_default(o):
    if isinstance(o, np.integer):
        return int(o)
    if isinstance(o, np.floating):
        return float(o)
    if isinstance(o, np.ndarray):
        return o.tolist()
    raise TypeError(type(o).__name__)


def _write_rows(path, rows):
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        for r in rows:
            fh.write(r)
            fh.write("\n")


def _read_rows(path, width, cast, expect_rows=None):
    out = []
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, 1):
            line = line.rstrip("\n")
            if not line.strip():
                continue
            parts = line.split(",")
            if width is not None and len(parts) != width:
                raise FormatError(f"expected {width} columns, found {len(parts)}", path, lineno)
            try:
                out.append([cast(p) for p in parts])
            except ValueError as exc:
                raise FormatError(f"cannot parse {line!r}: {exc}", path, lineno) from None
    if expect_rows is not None and len(out) != expect_rows:
        raise FormatError(f"expected {expect_rows} rows, found {len(out)}", path)
    return out


def load_graph(path) -> GraphDataset:
    path = Path(path)
    hpath = path / "graph.json"
    try:
        header = json.loads(hpath.read_text(encoding="utf-8"))
    except FileNotFoundError:
        raise FormatError("missing graph.json", path) from None
    except json.JSONDecodeError as exc:
        raise FormatError(f"bad JSON: {exc.msg}", hpath, exc.lineno) from None
    for key in ("version", "n", "d", "num_classes", "symmetric"):
        if key not in header:
            raise FormatError(f"header lacks {key!r}", hpath)
    if header["version"] != GRAPH_FORMAT_VERSION:
        raise FormatError(f"unsupported version {header['version']!r}", hpath)
    n, d = int(header["n"]), int(header["d"])
    mode = header.get("label_mode", "multiclass")

    epath = path / "edges.csv"
    edges = _read_rows(epath, 2, int) if epath.exists() else []
    for lineno, (r, c) in enumerate(edges, 1):
        if not (0 <= r < n and 0 <= c < n):
            raise StructuralError(f"edge ({r}, {c}) out of range for n={n}", epath, lineno)
    adj = SparseAdjacency.from_edges(n, np.asarray(edges, dtype=np.int64).reshape(-1, 2),
                                     symmetric=bool(header["symmetric"]))
    feats = np.asarray(_read_rows(path / "features.csv", d, float, n), dtype=np.float64).reshape(n, d)
    if mode == "multilabel":
        labels = np.asarray(_read_rows(path / "labels.csv", int(header["num_classes"]), int, n), dtype=np.int64)
    else:
        labels = np.asarray(_read_rows(path / "labels.csv", 1, int, n), dtype=np.int64).reshape(n)
    env = None
    if (path / "env.csv").exists():
        env = np.asarray(_read_rows(path / "env.csv", 1, int, n), dtype=np.int64).reshape(n)
    return GraphDataset(adj, feats, labels, int(header["num_classes"]), env, meta=header.get("meta", {}))
