"""Stage-2 graph-token attention, the classifier head, and the dense node-attention baseline."""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import numerics as nx
from .errors import ConfigError, ContractError
from .numerics import Rng, Tensor
from .quantizer import fuse


@dataclass
class GraphTokenList:
    feature_tokens: Tensor  # N_f x d
    structure_tokens: Tensor  # N_s x d
    graph_tokens: Tensor  # (N_f * N_s) x d, feature-major
    alpha: Tensor

    @property
    def size(self) -> int:
        return self.graph_tokens.shape[0]


def token_list_init(m: int, n: int, n_f: int, n_s: int, rng: Rng) -> dict:
    if min(n_f, n_s) < 1:
        raise ConfigError("token-list extents must be >= 1")
    return {"tokenlist.W_F": nx.glorot_uniform(m, n_f, rng.child("W_F")),
            "tokenlist.W_S": nx.glorot_uniform(n, n_s, rng.child("W_S"))}


def attention_init(dim: int, num_classes: int, rng: Rng, heads: int = 1, out_dim: int | None = None) -> dict:
    if dim % heads:
        raise ConfigError(f"width {dim} not divisible by {heads} heads")
    out_dim = num_classes if out_dim is None else out_dim
    return {
        "attn.W_Q": nx.glorot_uniform(dim, dim, rng.child("Q")),
        "attn.W_K": nx.glorot_uniform(dim, dim, rng.child("K")),
        "attn.W_V": nx.glorot_uniform(dim, dim, rng.child("V")),
        "classifier.weight": nx.glorot_uniform(dim, out_dim, rng.child("cls")),
        "classifier.bias": np.zeros(out_dim),
    }


def build_token_list(feature_codes, structure_codes, w_f, w_s, fusion: dict,
                     normalize: bool = False) -> GraphTokenList:
    """Project both codebooks to token lists and fuse every (feature, structure) pair.

    Row ``i * N_s + j`` of the graph-token list fuses feature token ``i``
    with structure token ``j``.
    """
    fc, sc = nx.as_tensor(feature_codes), nx.as_tensor(structure_codes)
    w_f, w_s = nx.as_tensor(w_f), nx.as_tensor(w_s)
    if w_f.shape[0] != fc.shape[0] or w_s.shape[0] != sc.shape[0]:
        raise ContractError(f"projection rows {w_f.shape[0]}/{w_s.shape[0]} do not match codebook sizes "
                            f"{fc.shape[0]}/{sc.shape[0]}")
    if fc.shape[1] != sc.shape[1]:
        raise ContractError("codebooks differ in width")
    f_t = nx.matmul(w_f.T, fc)
    s_t = nx.matmul(w_s.T, sc)
    n_f, n_s = f_t.shape[0], s_t.shape[0]
    f_rep = nx.take_rows(f_t, np.repeat(np.arange(n_f), n_s))
    s_rep = nx.take_rows(s_t, np.tile(np.arange(n_s), n_f))
    g_t, alpha = fuse(f_rep, s_rep, fusion["fusion.weight"], fusion["fusion.bias"], normalize)
    return GraphTokenList(f_t, s_t, g_t, alpha)


def _split_heads(x: Tensor, heads: int, h: int) -> Tensor:
    if heads == 1:
        return x
    width = x.shape[1] // heads
    return nx.take_cols(x, np.arange(h * width, (h + 1) * width))


def scaled_dot_attention(q: Tensor, k: Tensor, v: Tensor, heads: int = 1):
    """softmax(Q K^T / sqrt(d_head)) V, heads concatenated; weights averaged over heads."""
    if q.shape[1] != k.shape[1] or k.shape[0] != v.shape[0]:
        raise ContractError(f"attention shapes q{q.shape} k{k.shape} v{v.shape}")
    outs, weights = [], None
    for h in range(heads):
        qh, kh, vh = (_split_heads(t, heads, h) for t in (q, k, v))
        w = nx.row_softmax(nx.matmul(qh, kh.T), float(np.sqrt(qh.shape[1])))
        outs.append(nx.matmul(w, vh))
        weights = w.data if weights is None else weights + w.data
    out = outs[0] if heads == 1 else nx.concat(outs, axis=1)
    return out, (weights if heads == 1 else weights / heads)


def cross_attention(g, token_rows, params: dict, heads: int = 1):
    """Node graph tokens attend over the graph-token list; residual adds ``g`` back.

    Returns ``(Z, weights)`` with ``weights`` the post-softmax N x M matrix.
    """
    g, t = nx.as_tensor(g), nx.as_tensor(token_rows)
    if g.shape[1] != t.shape[1]:
        raise ContractError(f"query width {g.shape[1]} != token width {t.shape[1]}")
    q = nx.matmul(g, nx.as_tensor(params["attn.W_Q"]))
    k = nx.matmul(t, nx.as_tensor(params["attn.W_K"]))
    v = nx.matmul(t, nx.as_tensor(params["attn.W_V"]))
    att, weights = scaled_dot_attention(q, k, v, heads)
    return att + g, weights


def query_key_scores(g, token_rows, params: dict) -> np.ndarray:
    """Pre-softmax Q K^T (unscaled) for diagnostics."""
    q = nx.as_tensor(g).data @ nx.as_tensor(params["attn.W_Q"]).data
    k = nx.as_tensor(token_rows).data @ nx.as_tensor(params["attn.W_K"]).data
    return q @ k.T


def dense_node_attention(h, params: dict, heads: int = 1, dense_cap: int = 16384,
                         return_weights: bool = False):
    """Full N x N scaled dot-product self-attention over node embeddings."""
    h = nx.as_tensor(h)
    if h.shape[0] > dense_cap:
        raise ConfigError(f"dense attention refused for N={h.shape[0]} > dense_cap={dense_cap}")
    q = nx.matmul(h, nx.as_tensor(params["attn.W_Q"]))
    k = nx.matmul(h, nx.as_tensor(params["attn.W_K"]))
    v = nx.matmul(h, nx.as_tensor(params["attn.W_V"]))
    out, weights = scaled_dot_attention(q, k, v, heads)
    return (out, weights) if return_weights else out


def classify(z, params: dict) -> Tensor:
    return nx.matmul(nx.as_tensor(z), nx.as_tensor(params["classifier.weight"])) + \
        nx.as_tensor(params["classifier.bias"])


def cross_entropy(logits, labels, mask=None) -> Tensor:
    """Mean softmax cross-entropy over masked rows."""
    logits = nx.as_tensor(logits)
    labels = np.asarray(labels)
    idx = np.arange(logits.shape[0]) if mask is None else _mask_index(mask, logits.shape[0])
    lp = nx.log_softmax(nx.take_rows(logits, idx))
    onehot = np.zeros(lp.shape)
    onehot[np.arange(idx.size), labels[idx]] = 1.0
    return -(lp * Tensor(onehot)).sum() * (1.0 / idx.size)


def binary_cross_entropy(logits, targets, mask=None) -> Tensor:
    """Mean sigmoid cross-entropy over masked rows and all label columns."""
    logits = nx.as_tensor(logits)
    t = np.asarray(targets, dtype=np.float64).reshape(logits.shape[0], -1)
    idx = np.arange(logits.shape[0]) if mask is None else _mask_index(mask, logits.shape[0])
    z = nx.take_rows(logits, idx)
    y = Tensor(t[idx])
    return (nx.softplus(z) - z * y).mean()


def _mask_index(mask, n):
    mask = np.asarray(mask)
    if mask.dtype == bool:
        if mask.shape != (n,):
            raise ContractError("boolean mask length differs from row count")
        idx = np.flatnonzero(mask)
    else:
        idx = mask.astype(np.int64)
    if idx.size == 0:
        raise ContractError("empty mask")
    return idx
