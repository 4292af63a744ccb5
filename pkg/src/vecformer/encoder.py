"""Message-passing encoders that turn (X, Â) into node embeddings H."""
from __future__ import annotations

from dataclasses import dataclass
from functools import lru_cache

import numpy as np

from . import numerics as nx
from .errors import ConfigError, ContractError
from .graphio import GraphDataset, SparseAdjacency
from .numerics import Rng, Tensor


@dataclass(frozen=True)
class EncoderConfig:
    kind: str = "gat"
    layers: int = 2
    hidden_dim: int = 64
    heads: int = 1
    dropout: float = 0.1
    residual: bool = True
    negative_slope: float = 0.2

    def __post_init__(self):
        if self.kind not in ("gat", "gcn"):
            raise ConfigError(f"unknown encoder kind {self.kind!r}")
        if self.layers < 1 or self.hidden_dim < 1 or self.heads < 1:
            raise ConfigError("layers, hidden_dim and heads must be positive")
        if not 0.0 <= self.dropout < 1.0:
            raise ConfigError(f"dropout must lie in [0, 1), got {self.dropout}")
        if self.kind == "gat" and self.hidden_dim % self.heads:
            raise ConfigError(f"hidden_dim {self.hidden_dim} not divisible by heads {self.heads}")


def _layer_widths(config: EncoderConfig, feat_dim: int):
    dims = [feat_dim] + [config.hidden_dim] * config.layers
    return list(zip(dims[:-1], dims[1:]))


def _head_width(config: EncoderConfig, layer: int) -> int:
    # hidden layers concatenate heads, the last one averages them
    last = layer == config.layers - 1
    return config.hidden_dim if last else config.hidden_dim // config.heads


def encoder_param_init(config: EncoderConfig, feat_dim: int, rng: Rng, prefix: str = "encoder") -> dict:
    """Glorot-uniform weights and zero biases, keyed by canonical parameter name."""
    params = {}
    for layer, (d_in, d_out) in enumerate(_layer_widths(config, feat_dim)):
        r = rng.child(prefix, layer)
        p = f"{prefix}.{layer}"
        if config.kind == "gcn":
            params[f"{p}.weight"] = nx.glorot_uniform(d_in, d_out, r.child("w"))
        else:
            c = _head_width(config, layer)
            for h in range(config.heads):
                params[f"{p}.head{h}.weight"] = nx.glorot_uniform(d_in, c, r.child("w", h))
                params[f"{p}.head{h}.att_src"] = nx.glorot_uniform(c, 1, r.child("as", h)).reshape(c)
                params[f"{p}.head{h}.att_dst"] = nx.glorot_uniform(c, 1, r.child("ad", h)).reshape(c)
        params[f"{p}.bias"] = np.zeros(d_out)
        if config.residual and d_in != d_out:
            params[f"{p}.shortcut"] = nx.glorot_uniform(d_in, d_out, r.child("res"))
    return params


def gcn_norm_values(adj: SparseAdjacency) -> np.ndarray:
    """Edge weights of D^-1/2 Â D^-1/2 in the adjacency's edge order."""
    deg = adj.degree().astype(np.float64)
    inv = np.where(deg > 0, 1.0 / np.sqrt(np.maximum(deg, 1e-300)), 0.0)
    return inv[adj.rows] * inv[adj.cols]


def gat_attention(adj: SparseAdjacency, wh: Tensor, att_src: Tensor, att_dst: Tensor,
                  negative_slope: float = 0.2) -> Tensor:
    """Per-edge attention coefficients, softmax-normalised over each node's neighbours.

    Edge ``(i, j)`` scores ``leaky_relu(a_dst . Wh_i + a_src . Wh_j)``.
    """
    s_src = nx.matmul(wh, nx.reshape(att_src, (-1, 1))).reshape(-1)
    s_dst = nx.matmul(wh, nx.reshape(att_dst, (-1, 1))).reshape(-1)
    e = nx.take_rows(s_dst, adj.rows) + nx.take_rows(s_src, adj.cols)
    e = nx.leaky_relu(e, negative_slope)
    return nx.segment_softmax(e, adj.rows, adj.indptr)


@lru_cache(maxsize=64)
def _expected_shapes(config: EncoderConfig, feat_dim: int, prefix: str):
    return {k: v.shape for k, v in encoder_param_init(config, feat_dim, Rng(0), prefix).items()}


def _check_params(config, feat_dim, params, prefix):
    for name, shape in _expected_shapes(config, feat_dim, prefix).items():
        if name not in params:
            raise ContractError(f"missing encoder parameter {name!r}")
        if tuple(params[name].shape) != shape:
            raise ContractError(f"parameter {name!r} has shape {tuple(params[name].shape)}, expected {shape}")


def encode(dataset: GraphDataset, config: EncoderConfig, params: dict, mode: str = "eval",
           rng: Rng | None = None, prefix: str = "encoder", features=None, return_inputs=False):
    """Run the encoder and return H (N x hidden_dim).

    ``params`` maps names to arrays or tensors (tensors keep the tape link).
    Each layer does message passing, ELU, dropout (train mode), then adds the
    layer input back, through a learned linear shortcut when widths differ.
    """
    x = nx.as_tensor(dataset.features if features is None else features)
    _check_params(config, x.shape[1], params, prefix)
    adj = dataset.adjacency.looped
    training = mode == "train"
    if training and config.dropout > 0 and rng is None:
        raise ContractError("train mode with dropout needs an Rng")
    norm = Tensor(gcn_norm_values(adj)) if config.kind == "gcn" else None
    h = x
    inputs = []
    for layer in range(config.layers):
        inputs.append(h)
        p = f"{prefix}.{layer}"
        P = lambda name: nx.as_tensor(params[f"{p}.{name}"])
        if config.kind == "gcn":
            z = nx.sparse_dense_matmul(adj, nx.matmul(h, P("weight")), norm)
        else:
            outs = []
            for head in range(config.heads):
                wh = nx.matmul(h, P(f"head{head}.weight"))
                alpha = gat_attention(adj, wh, P(f"head{head}.att_src"), P(f"head{head}.att_dst"),
                                      config.negative_slope)
                outs.append(nx.sparse_dense_matmul(adj, wh, alpha))
            if len(outs) == 1:
                z = outs[0]
            elif layer == config.layers - 1:
                z = outs[0]
                for o in outs[1:]:
                    z = z + o
                z = z * (1.0 / len(outs))
            else:
                z = nx.concat(outs, axis=1)
        z = nx.elu(z + P("bias"))
        if training:
            z = nx.dropout(z, config.dropout, rng.child("dropout", layer), True)
        if config.residual:
            shortcut = f"{p}.shortcut"
            z = z + (nx.matmul(h, nx.as_tensor(params[shortcut])) if shortcut in params else h)
        h = z
    return (h, inputs) if return_inputs else h


def gat_attention_rows(dataset: GraphDataset, config: EncoderConfig, params: dict, layer: int = 0,
                       head: int = 0) -> tuple[SparseAdjacency, np.ndarray]:
    """Eval-mode attention coefficients of one GAT layer/head, in edge order."""
    if config.kind != "gat":
        raise ConfigError("attention coefficients exist only for the GAT encoder")
    _, inputs = encode(dataset, config, params, "eval", return_inputs=True)
    adj = dataset.adjacency.looped
    p = f"encoder.{layer}.head{head}"
    wh = nx.matmul(inputs[layer], nx.as_tensor(params[f"{p}.weight"]))
    alpha = gat_attention(adj, wh, nx.as_tensor(params[f"{p}.att_src"]),
                          nx.as_tensor(params[f"{p}.att_dst"]), config.negative_slope)
    return adj, alpha.data
