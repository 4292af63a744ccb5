"""Codebooks, soft and hard vector quantization, and token fusion."""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import numerics as nx
from .errors import ConfigError, ContractError, DomainError
from .numerics import Rng, Tensor

FEATURE = "feature"
STRUCTURE = "structure"

# per-benchmark sizes: (feature codes, structure codes, N_f, N_s)
BENCHMARK_SIZES = {
    "pubmed": (256, 256, 64, 64),
    "corafull": (256, 256, 64, 64),
    "computer": (256, 256, 64, 64),
    "photo": (256, 256, 64, 64),
    "cs": (256, 256, 64, 64),
    "physics": (256, 256, 64, 64),
    "chameleon": (256, 256, 32, 32),
    "squirrel": (128, 128, 32, 32),
    "cora_ood": (64, 64, 16, 16),
    "citeseer_ood": (64, 64, 16, 16),
    "twitch": (512, 512, 64, 64),
    "ogbn_proteins": (64, 64, 16, 16),
    "amazon2m": (256, 256, 64, 64),
    "pokec": (256, 256, 64, 64),
}


@dataclass
class Codebook:
    codes: Tensor
    role: str = FEATURE

    def __post_init__(self):
        self.codes = nx.as_tensor(self.codes)
        if self.role not in (FEATURE, STRUCTURE):
            raise ConfigError(f"unknown codebook role {self.role!r}")
        if self.codes.ndim != 2 or self.codes.shape[0] < 1:
            raise ContractError("a codebook needs at least one code row")

    @property
    def size(self) -> int:
        return self.codes.shape[0]

    @property
    def dim(self) -> int:
        return self.codes.shape[1]


@dataclass(frozen=True)
class SoftVQConfig:
    temperature: float = 1.0

    def __post_init__(self):
        if not self.temperature > 0:
            raise DomainError(f"temperature must be > 0, got {self.temperature}")


@dataclass(frozen=True)
class VanillaVQConfig:
    commitment: float = 0.25

    def __post_init__(self):
        if self.commitment < 0:
            raise DomainError("commitment weight must be >= 0")


@dataclass
class TokenBundle:
    f: Tensor
    s: Tensor
    g: Tensor
    feature_weights: Tensor
    structure_weights: Tensor
    alpha: Tensor


def codebook_init(size: int, dim: int, rng: Rng, role: str = FEATURE) -> Codebook:
    """Unit-Gaussian codes scaled by 1/sqrt(dim)."""
    if size < 1:
        raise ConfigError("codebook size must be >= 1")
    return Codebook(rng.normal(size=(size, dim)) / np.sqrt(dim), role)


def _codes(codebook) -> Tensor:
    return codebook.codes if isinstance(codebook, Codebook) else nx.as_tensor(codebook)


def softvq(h, codebook, cfg: SoftVQConfig = SoftVQConfig()):
    """Soft assignment of each row of ``h`` to the codebook.

    Returns ``(tokens, weights)`` with ``weights[i] = softmax(h_i . e_j / T)``
    over codes ``j`` and ``tokens[i] = sum_j weights[i, j] e_j``. Both are
    differentiable in ``h`` and in the codes.
    """
    h, codes = nx.as_tensor(h), _codes(codebook)
    if h.shape[1] != codes.shape[1]:
        raise ContractError(f"embedding width {h.shape[1]} != code width {codes.shape[1]}")
    weights = nx.row_softmax(nx.matmul(h, codes.T), cfg.temperature)
    return nx.matmul(weights, codes), weights


def vanilla_vq(h, codebook):
    """Nearest code by Euclidean distance, ties to the lowest index.

    Tokens carry a straight-through gradient: the forward value is the
    selected code, the backward pass copies the gradient to ``h``.
    """
    h, codes = nx.as_tensor(h), _codes(codebook)
    if h.shape[1] != codes.shape[1]:
        raise ContractError(f"embedding width {h.shape[1]} != code width {codes.shape[1]}")
    d = ((h.data[:, None, :] - codes.data[None, :, :]) ** 2).sum(axis=2)
    idx = d.argmin(axis=1)
    selected = nx.take_rows(codes, idx)
    tokens = h + nx.stop_gradient(selected - h)
    return tokens, idx


def vq_loss(x, decoded, encoded, code, commitment: float) -> Tensor:
    """Reconstruction + codebook + commitment terms with stop-gradients."""
    x, decoded, encoded, code = map(nx.as_tensor, (x, decoded, encoded, code))
    rec = ((x - decoded) ** 2).sum()
    book = ((nx.stop_gradient(encoded) - code) ** 2).sum()
    commit = ((nx.stop_gradient(code) - encoded) ** 2).sum()
    return rec + book + commit * float(commitment)


def fusion_init(dim: int, rng: Rng) -> dict:
    """Affine map R^{2d} -> R^2 giving the two fusion coefficients."""
    return {"fusion.weight": nx.glorot_uniform(2 * dim, 2, rng) * 0.1,
            "fusion.bias": np.array([0.5, 0.5])}


def fusion_coefficients(f, s, weight, bias, normalize: bool = False) -> Tensor:
    """(alpha_1, alpha_2) per row from ``concat(f, s)``; raw unless ``normalize``."""
    alpha = nx.matmul(nx.concat([f, s], axis=1), nx.as_tensor(weight)) + nx.as_tensor(bias)
    if normalize:
        alpha = nx.row_softmax(alpha, 1.0)
    return alpha


def fuse(f, s, weight, bias, normalize: bool = False):
    """Graph tokens ``g = alpha_1 f + alpha_2 s``; returns ``(g, alpha)``."""
    f, s = nx.as_tensor(f), nx.as_tensor(s)
    alpha = fusion_coefficients(f, s, weight, bias, normalize)
    a1 = nx.take_cols(alpha, [0])
    a2 = nx.take_cols(alpha, [1])
    return a1 * f + a2 * s, alpha


def quantize_node(h, feature_codebook, structure_codebook, cfg: SoftVQConfig, fusion: dict,
                  normalize: bool = False) -> TokenBundle:
    fc, sc = _codes(feature_codebook), _codes(structure_codebook)
    if fc.shape[1] != sc.shape[1]:
        raise ContractError("feature and structure codebooks differ in width")
    f, wf = softvq(h, fc, cfg)
    s, ws = softvq(h, sc, cfg)
    g, alpha = fuse(f, s, fusion["fusion.weight"], fusion["fusion.bias"], normalize)
    return TokenBundle(f, s, g, wf, ws, alpha)


def usage_entropy(weights) -> float:
    """Entropy (nats) of the mean code-usage distribution."""
    p = np.asarray(nx.as_tensor(weights).data).mean(axis=0)
    p = p[p > 0]
    return float(-(p * np.log(p)).sum())


def orthogonalize_rows(*codebooks) -> list[np.ndarray]:
    """Jointly orthogonalize the rows of several codebooks, keeping row norms.

    All codes across all inputs end up mutually orthogonal, which needs the
    total code count to be at most the code width.
    """
    arrays = [np.asarray(_codes(c).data) for c in codebooks]
    stacked = np.concatenate(arrays, axis=0)
    k, d = stacked.shape
    if k > d:
        raise ConfigError(f"{k} codes cannot be mutually orthogonal in {d} dimensions")
    q, _ = np.linalg.qr(stacked.T)
    norms = np.linalg.norm(stacked, axis=1)
    ortho = (q[:, :k] * norms).T
    out, start = [], 0
    for a in arrays:
        out.append(ortho[start:start + a.shape[0]])
        start += a.shape[0]
    return out
