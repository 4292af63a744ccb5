"""Stage-1 decoders and the three-term reconstruction objective."""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import numerics as nx
from .errors import ConfigError, ContractError
from .graphio import GraphDataset, SparseAdjacency
from .numerics import Rng, Tensor
from .quantizer import TokenBundle

DENSE = "dense_exact"
SAMPLED = "negative_sampling"
AUTO = "auto"


@dataclass(frozen=True)
class ReconConfig:
    gamma_f: float = 2.0
    gamma_g: float = 2.0
    d_y: int | None = None
    structure_mode: str = AUTO
    neg_ratio: int = 5
    dense_cap: int = 4096
    feature_weight: float = 1.0
    structure_weight: float = 1.0
    graph_weight: float = 1.0

    def __post_init__(self):
        if self.gamma_f < 1 or self.gamma_g < 1:
            raise ConfigError("scaling exponents must be >= 1")
        if self.structure_mode not in (DENSE, SAMPLED, AUTO):
            raise ConfigError(f"unknown structure_mode {self.structure_mode!r}")
        if self.neg_ratio < 1:
            raise ConfigError("neg_ratio must be a positive integer")

    def mode_for(self, n: int) -> str:
        if self.structure_mode == AUTO:
            return DENSE if n <= self.dense_cap else SAMPLED
        return self.structure_mode


def decoder_init(feat_dim: int, hidden_dim: int, rng: Rng, d_y: int | None = None) -> dict:
    d_y = d_y or hidden_dim
    out = {}
    for name, width in (("feature", feat_dim), ("structure", d_y), ("graph", hidden_dim)):
        out[f"decoder.{name}.weight"] = nx.glorot_uniform(hidden_dim, width, rng.child(name))
        out[f"decoder.{name}.bias"] = np.zeros(width)
    return out


def linear(x, params: dict, prefix: str) -> Tensor:
    return nx.matmul(x, nx.as_tensor(params[f"{prefix}.weight"])) + nx.as_tensor(params[f"{prefix}.bias"])


def scaled_cosine_error(target, recon, gamma: float = 2.0, eps: float = 1e-8) -> Tensor:
    """Mean over rows of ``(1 - cos(target_i, recon_i)) ** gamma``; norms clamped at ``eps``."""
    target, recon = nx.as_tensor(target), nx.as_tensor(recon)
    if target.shape != recon.shape:
        raise ContractError(f"shape mismatch {target.shape} vs {recon.shape}")
    dot = (target * recon).sum(axis=1)
    nt = nx.clamp_min(nx.sqrt(nx.clamp_min((target * target).sum(axis=1), 0.0) + 1e-300), eps)
    nr = nx.clamp_min(nx.sqrt(nx.clamp_min((recon * recon).sum(axis=1), 0.0) + 1e-300), eps)
    cos = dot / (nt * nr)
    return nx.power(nx.clamp_min(1.0 - cos, 0.0), gamma).mean()


def _edge_keys(adj: SparseAdjacency) -> np.ndarray:
    return adj.rows * adj.n + adj.cols


def sample_non_edges(adj: SparseAdjacency, count: int, rng: Rng) -> np.ndarray:
    """``count`` uniform draws (with replacement) from the pairs absent in ``adj``.

    Returns flat keys ``i * n + j``; the diagonal counts as a non-edge unless
    a self-loop is stored.
    """
    n = adj.n
    keys = _edge_keys(adj)
    out = np.empty(0, dtype=np.int64)
    while out.size < count:
        draw = rng.integers(0, n * n, size=2 * (count - out.size) + 16)
        draw = draw[~np.isin(draw, keys)]
        out = np.concatenate([out, draw])
    return out[:count]


def structure_recon_loss(adj: SparseAdjacency, y_hat, mode: str = DENSE, neg_ratio: int = 5,
                         rng: Rng | None = None, dense_cap: int = 4096) -> Tensor:
    """Squared Frobenius error between A and sigmoid(Y Y^T).

    ``dense_exact`` sums all N^2 entries. ``negative_sampling`` sums every
    stored edge exactly and estimates the non-edge part from
    ``neg_ratio * |E|`` uniform non-edge draws scaled by (non-edges / draws);
    when that many draws would cover every non-edge, all of them are used
    instead, which reproduces the dense value.
    """
    y = nx.as_tensor(y_hat)
    n = adj.n
    if y.shape[0] != n:
        raise ContractError(f"Y has {y.shape[0]} rows for {n} nodes")
    if mode == DENSE:
        if n > dense_cap:
            raise ConfigError(f"dense structure loss refused for N={n} > dense_cap={dense_cap}")
        probs = nx.sigmoid(nx.matmul(y, y.T))
        diff = Tensor(adj.to_dense()) - probs
        return (diff * diff).sum()
    if mode != SAMPLED:
        raise ConfigError(f"unknown structure mode {mode!r}")
    rows, cols = adj.rows, adj.cols
    pos = nx.sigmoid((nx.take_rows(y, rows) * nx.take_rows(y, cols)).sum(axis=1))
    pos_term = ((1.0 - pos) ** 2).sum()
    n_non = n * n - adj.num_edges
    want = neg_ratio * max(adj.num_edges, 1)
    if n_non == 0:
        return pos_term
    if want >= n_non:
        present = np.zeros(n * n, dtype=bool)
        present[_edge_keys(adj)] = True
        neg = np.flatnonzero(~present)
        scale = 1.0
    else:
        if rng is None:
            raise ContractError("negative sampling needs an Rng")
        neg = sample_non_edges(adj, want, rng)
        scale = n_non / neg.size
    ni, nj = neg // n, neg % n
    negp = nx.sigmoid((nx.take_rows(y, ni) * nx.take_rows(y, nj)).sum(axis=1))
    return pos_term + (negp * negp).sum() * scale


@dataclass
class Stage1Terms:
    total: Tensor
    feature: Tensor
    structure: Tensor
    graph: Tensor

    def as_floats(self) -> dict:
        return {k: float(getattr(self, k).data) for k in ("feature", "structure", "graph", "total")}


def stage1_loss(dataset: GraphDataset, h, bundle: TokenBundle, decoders: dict, cfg: ReconConfig,
                rng: Rng | None = None) -> Stage1Terms:
    """Feature, structure and graph reconstruction terms and their (weighted) sum."""
    x = Tensor(dataset.features)
    feature = scaled_cosine_error(x, linear(bundle.f, decoders, "decoder.feature"), cfg.gamma_f)
    y_hat = linear(bundle.s, decoders, "decoder.structure")
    structure = structure_recon_loss(dataset.adjacency, y_hat, cfg.mode_for(dataset.n), cfg.neg_ratio,
                                     rng, cfg.dense_cap)
    graph = scaled_cosine_error(h, linear(bundle.g, decoders, "decoder.graph"), cfg.gamma_g)
    total = feature * cfg.feature_weight + structure * cfg.structure_weight + graph * cfg.graph_weight
    return Stage1Terms(total, feature, structure, graph)
