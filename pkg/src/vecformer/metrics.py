"""Classification metrics, the DE overlap score, and attention diagnostics."""
from __future__ import annotations

from dataclasses import asdict, dataclass

import numpy as np
from scipy.stats import rankdata

from .errors import ContractError, UndefinedMetricError


@dataclass(frozen=True)
class MetricReport:
    name: str
    value: float
    split: str
    n_evaluated: int

    def __post_init__(self):
        if not 0.0 <= self.value <= 1.0:
            raise ContractError(f"{self.name} value {self.value} outside [0, 1]")
        if self.n_evaluated <= 0:
            raise ContractError("metric evaluated on no items")


def _index(mask, n):
    if mask is None:
        return np.arange(n)
    mask = np.asarray(mask)
    idx = np.flatnonzero(mask) if mask.dtype == bool else mask.astype(np.int64)
    if idx.size == 0:
        raise ContractError("empty mask")
    return idx


def accuracy(logits, labels, mask=None, split: str = "test") -> MetricReport:
    logits = np.asarray(getattr(logits, "data", logits))
    labels = np.asarray(labels)
    idx = _index(mask, logits.shape[0])
    correct = logits[idx].argmax(axis=1) == labels[idx]
    return MetricReport("accuracy", float(correct.mean()), split, int(idx.size))


def _auc_1d(scores, labels) -> float:
    pos = labels == 1
    n_pos, n_neg = int(pos.sum()), int((~pos).sum())
    if n_pos == 0 or n_neg == 0:
        raise UndefinedMetricError("ROC AUC needs both classes present")
    ranks = rankdata(scores, method="average")
    # Mann-Whitney U from the positive rank sum; ties earn half credit
    u = ranks[pos].sum() - n_pos * (n_pos + 1) / 2.0
    return float(u / (n_pos * n_neg))


def roc_auc(scores, labels, mask=None, split: str = "test") -> MetricReport:
    """Exact ROC AUC as P(score+ > score-) + P(tie)/2.

    2-D ``labels`` (multilabel) average the per-column AUC over the columns
    where both classes occur.
    """
    scores = np.asarray(getattr(scores, "data", scores), dtype=np.float64)
    labels = np.asarray(labels)
    idx = _index(mask, scores.shape[0])
    if labels.ndim == 1:
        s = scores[idx] if scores.ndim == 1 else scores[idx, -1]
        return MetricReport("roc_auc", _auc_1d(s, labels[idx]), split, int(idx.size))
    vals = []
    for c in range(labels.shape[1]):
        y = labels[idx, c]
        if 0 < y.sum() < y.size:
            vals.append(_auc_1d(scores[idx, c], y))
    if not vals:
        raise UndefinedMetricError("no label column has both classes in the mask")
    return MetricReport("roc_auc", float(np.mean(vals)), split, int(idx.size))


def des_score(predicted_probs, true_de_set, predicted_set=None, threshold: float = 0.5,
              split: str = "test") -> MetricReport:
    """Overlap between predicted and true DE nodes, normalised by the true count.

    Without an explicit ``predicted_set`` the prediction is every node with
    probability >= ``threshold``. A prediction larger than the true set is cut
    to its ``len(true)`` most probable members (ties to the lower index).
    """
    probs = np.asarray(predicted_probs, dtype=np.float64).reshape(-1)
    true = np.unique(np.asarray(list(true_de_set), dtype=np.int64))
    if true.size == 0:
        raise ContractError("true DE set is empty")
    if predicted_set is None:
        pred = np.flatnonzero(probs >= threshold)
    else:
        pred = np.unique(np.asarray(list(predicted_set), dtype=np.int64))
    if pred.size > true.size:
        order = np.argsort(-probs[pred], kind="stable")
        pred = pred[order[:true.size]]
    hit = np.intersect1d(pred, true).size
    return MetricReport("des", hit / true.size, split, int(true.size))


@dataclass(frozen=True)
class AttnDiagnostics:
    row_std: np.ndarray
    mean_std: float
    min_qk: float
    mean_kl_uniform: float

    def to_dict(self, include_rows: bool = False) -> dict:
        d = asdict(self)
        d["row_std"] = self.row_std.tolist() if include_rows else None
        if not include_rows:
            d.pop("row_std")
        return d


def attn_diagnostics(weights, q=None, k=None, rows=None, scores=None, tol: float = 1e-6) -> AttnDiagnostics:
    """Spread of attention rows and their distance from uniform.

    ``q``/``k`` (or precomputed ``scores = q k^T``) give the minimum
    pre-softmax score; ``rows`` restricts every statistic to a node subset.
    """
    w = np.asarray(getattr(weights, "data", weights), dtype=np.float64)
    if w.ndim != 2:
        raise ContractError("weights must be a matrix")
    if rows is not None:
        w = w[_index(rows, w.shape[0])]
    if (w < 0).any() or np.abs(w.sum(axis=1) - 1.0).max() > tol:
        raise ContractError("attention rows are not stochastic")
    m = w.shape[1]
    # deviations from each row's first entry: exactly uniform rows give exactly 0
    d = w - w[:, :1]
    row_std = np.sqrt(np.maximum((d * d).mean(axis=1) - d.mean(axis=1) ** 2, 0.0))
    with np.errstate(divide="ignore", invalid="ignore"):
        terms = np.where(w > 0, w * np.log(w * m), 0.0)
    kl = np.maximum(terms.sum(axis=1), 0.0)
    if scores is None and q is not None and k is not None:
        scores = np.asarray(getattr(q, "data", q)) @ np.asarray(getattr(k, "data", k)).T
    min_qk = float("nan")
    if scores is not None:
        scores = np.asarray(scores)
        if rows is not None:
            scores = scores[_index(rows, scores.shape[0])]
        min_qk = float(scores.min())
    return AttnDiagnostics(row_std, float(row_std.mean()), min_qk, float(kl.mean()))
