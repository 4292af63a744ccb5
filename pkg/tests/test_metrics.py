import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from vecformer.errors import ContractError, UndefinedMetricError
from vecformer.metrics import accuracy, attn_diagnostics, des_score, roc_auc


def test_accuracy_hand_cases():
    logits = np.array([[2.0, 1.0], [0.0, 3.0], [1.0, 0.5], [0.1, 0.2]])
    labels = np.array([0, 1, 1, 0])
    rep = accuracy(logits, labels)
    assert rep.value == 0.5 and rep.n_evaluated == 4 and rep.name == "accuracy"
    assert accuracy(logits, labels, mask=np.array([True, True, False, False])).value == 1.0
    assert accuracy(logits, labels, mask=[2, 3], split="val").split == "val"


def test_accuracy_empty_mask():
    with pytest.raises(ContractError):
        accuracy(np.zeros((2, 2)), [0, 1], mask=np.zeros(2, dtype=bool))


def test_auc_perfect_and_inverted():
    y = np.array([0, 0, 1, 1])
    assert roc_auc([0.1, 0.2, 0.8, 0.9], y).value == 1.0
    assert roc_auc([0.9, 0.8, 0.2, 0.1], y).value == 0.0


def test_auc_ties_half_credit():
    assert roc_auc([0.5, 0.5], [0, 1]).value == 0.5


def test_auc_single_class_undefined():
    with pytest.raises(UndefinedMetricError):
        roc_auc([0.1, 0.2], [1, 1])


def _auc_all_pairs(s, y):
    pos, neg = s[y == 1], s[y == 0]
    wins = sum((p > n) + 0.5 * (p == n) for p in pos for n in neg)
    return wins / (pos.size * neg.size)


@settings(max_examples=80)
@given(st.integers(0, 2**32 - 1), st.integers(2, 40))
def test_auc_matches_all_pairs_oracle(seed, n):
    r = np.random.default_rng(seed)
    y = r.integers(0, 2, n)
    y[0], y[1] = 0, 1
    s = r.integers(0, 5, n).astype(float)  # coarse scores force ties
    assert abs(roc_auc(s, y).value - _auc_all_pairs(s, y)) < 1e-12


def test_auc_two_column_scores_use_last_column():
    s = np.array([[0.9, 0.1], [0.2, 0.8]])
    assert roc_auc(s, [0, 1]).value == 1.0


def test_auc_multilabel_skips_degenerate_columns():
    s = np.array([[0.1, 0.3], [0.9, 0.2], [0.4, 0.1]])
    y = np.array([[0, 1], [1, 1], [0, 1]])
    assert roc_auc(s, y).value == 1.0


# -- DES

def test_des_exact_match():
    probs = np.array([0.9, 0.9, 0.1, 0.1])
    assert des_score(probs, {0, 1}).value == 1.0


def test_des_disjoint():
    assert des_score(np.array([0.9, 0.1, 0.1]), {1, 2}).value == 0.0


def test_des_larger_prediction_is_truncated():
    true = {0, 1, 2, 3}
    probs = np.array([0.9, 0.9, 0.9, 0.1, 0.8, 0.6, 0.6])
    # six predicted nodes, cut to the four most probable: 0, 1, 2, 4
    assert des_score(probs, true).value == 0.75


def test_des_explicit_prediction_set():
    assert des_score(np.zeros(5), {0, 1}, predicted_set={1, 3}).value == 0.5


def test_des_empty_true_set():
    with pytest.raises(ContractError):
        des_score(np.zeros(3), set())


# -- attention diagnostics

def test_diagnostics_uniform_rows():
    d = attn_diagnostics(np.full((3, 5), 0.2))
    assert d.mean_std == 0.0 and d.mean_kl_uniform == 0.0
    assert np.isnan(d.min_qk)


def test_diagnostics_one_hot_rows():
    d = attn_diagnostics(np.eye(4))
    np.testing.assert_allclose(d.row_std, np.sqrt(3) / 4, atol=1e-15)
    assert abs(d.mean_kl_uniform - np.log(4)) < 1e-15


def test_diagnostics_min_qk_and_rows():
    w = np.array([[0.5, 0.5], [1.0, 0.0], [0.25, 0.75]])
    q = np.array([[1.0, 0.0], [-2.0, 0.0], [0.0, 1.0]])
    k = np.array([[1.0, 1.0], [0.5, 2.0]])
    assert attn_diagnostics(w, q, k).min_qk == -2.0
    sub = attn_diagnostics(w, q, k, rows=[0, 2])
    assert sub.min_qk == 0.5
    assert sub.row_std.shape == (2,)


def test_diagnostics_rejects_non_stochastic():
    with pytest.raises(ContractError):
        attn_diagnostics(np.array([[0.5, 0.6]]))


def test_diagnostics_to_dict():
    d = attn_diagnostics(np.eye(2)).to_dict()
    assert "row_std" not in d and set(d) == {"mean_std", "min_qk", "mean_kl_uniform"}
    assert len(attn_diagnostics(np.eye(2)).to_dict(include_rows=True)["row_std"]) == 2
