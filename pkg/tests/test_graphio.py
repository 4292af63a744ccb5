import json
import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from vecformer import graphio as gi
from vecformer.errors import ConfigError, FormatError, StructuralError
from vecformer.graphio import GraphDataset, SparseAdjacency
from vecformer.numerics import Rng

from fixtures import path_graph, triangle


def _write_fixture(tmp_path, edges, n=3, d=2, symmetric=True, features=None, labels=None):
    tmp_path.mkdir(parents=True, exist_ok=True)
    header = {"version": gi.GRAPH_FORMAT_VERSION, "n": n, "d": d, "num_classes": 2,
              "symmetric": symmetric, "fields": ["edges.csv", "features.csv", "labels.csv"]}
    (tmp_path / "graph.json").write_text(json.dumps(header))
    (tmp_path / "edges.csv").write_text("".join(f"{a},{b}\n" for a, b in edges))
    feats = features if features is not None else [[0.5 * i, -1.0] for i in range(n)]
    (tmp_path / "features.csv").write_text("".join(",".join(map(str, r)) + "\n" for r in feats))
    labs = labels if labels is not None else [i % 2 for i in range(n)]
    (tmp_path / "labels.csv").write_text("".join(f"{v}\n" for v in labs))
    return tmp_path


# -- container

def test_load_triangle_symmetrizes(tmp_path):
    ds = gi.load_graph(_write_fixture(tmp_path, [(0, 1), (1, 2), (0, 2)]))
    assert ds.n == 3
    assert ds.adjacency.num_edges == 6
    assert ds.adjacency.is_symmetric()


def test_load_dangling_edge_is_structural(tmp_path):
    with pytest.raises(StructuralError, match=r"edges.csv:2"):
        gi.load_graph(_write_fixture(tmp_path, [(0, 1), (0, 5)]))


def test_load_feature_row_mismatch(tmp_path):
    with pytest.raises(FormatError, match="expected 3 rows"):
        gi.load_graph(_write_fixture(tmp_path, [(0, 1)], features=[[1.0, 2.0]] * 2))


def test_load_bad_feature_width_reports_line(tmp_path):
    with pytest.raises(FormatError, match=r"features.csv:2"):
        gi.load_graph(_write_fixture(tmp_path, [(0, 1)], features=[[1.0, 2.0], [1.0], [0.0, 0.0]]))


def test_load_malformed_header(tmp_path):
    tmp_path.joinpath("graph.json").write_text("{not json")
    with pytest.raises(FormatError):
        gi.load_graph(tmp_path)


def test_load_header_missing_key(tmp_path):
    _write_fixture(tmp_path, [(0, 1)])
    tmp_path.joinpath("graph.json").write_text(json.dumps({"version": gi.GRAPH_FORMAT_VERSION, "n": 3}))
    with pytest.raises(FormatError, match="'d'"):
        gi.load_graph(tmp_path)


def test_sbm_round_trip(tmp_path):
    ds = gi.gen_sbm([15, 10], 0.3, 0.05, feat_dim=5, rng=Rng(11))
    assert gi.load_graph(gi.save_graph(ds, tmp_path / "g")) == ds


def test_spurious_round_trip_keeps_environments(tmp_path):
    base = gi.gen_sbm([10, 10], 0.3, 0.05, feat_dim=3, rng=Rng(1))
    ds = gi.gen_spurious_shift(base, 2, 0.9, 0.1, Rng(2))
    back = gi.load_graph(gi.save_graph(ds, tmp_path / "g"))
    assert back == ds
    np.testing.assert_array_equal(back.environment_id, ds.environment_id)


def test_multilabel_round_trip(tmp_path):
    adj = path_graph(4)
    labels = np.array([[1, 0, 1], [0, 0, 1], [1, 1, 0], [0, 1, 0]])
    ds = GraphDataset(adj, np.ones((4, 2)), labels, 3)
    back = gi.load_graph(gi.save_graph(ds, tmp_path / "g"))
    assert back == ds and back.multilabel


def test_container_uses_lf_and_dot_decimal(tmp_path):
    ds = gi.gen_sbm([4, 4], 0.5, 0.1, feat_dim=2, rng=Rng(0))
    gi.save_graph(ds, tmp_path)
    raw = (tmp_path / "features.csv").read_bytes()
    assert b"\r" not in raw and b"." in raw


# -- self loops

def test_self_loops_on_edgeless():
    adj = gi.add_self_loops(SparseAdjacency.from_edges(2, []))
    assert sorted(map(tuple, adj.edges().tolist())) == [(0, 0), (1, 1)]


def test_self_loops_idempotent():
    once = gi.add_self_loops(triangle())
    assert gi.add_self_loops(once) == once


def test_self_loops_triangle_count():
    assert gi.add_self_loops(triangle()).num_edges == 9


def test_from_edges_rejects_out_of_range():
    with pytest.raises(StructuralError):
        SparseAdjacency.from_edges(3, [(0, 5)])


# -- splits

def test_split_sizes_default_ratio():
    s = gi.make_split(10, (0.6, 0.2, 0.2), Rng(0))
    assert (len(s.train), len(s.val), len(s.test)) == (6, 2, 2)


def test_split_sizes_ood_ratio():
    s = gi.make_split(4, (0.5, 0.25, 0.25), Rng(0))
    assert (len(s.train), len(s.val), len(s.test)) == (2, 1, 1)


def test_split_remainder_goes_to_train():
    s = gi.make_split(11, (0.6, 0.2, 0.2), Rng(0))
    assert (len(s.train), len(s.val), len(s.test)) == (7, 2, 2)


def test_split_deterministic():
    a, b = gi.make_split(50, rng=Rng(3)), gi.make_split(50, rng=Rng(3))
    assert a.to_dict() == b.to_dict()


def test_split_ratio_sum_over_one():
    with pytest.raises(ConfigError):
        gi.make_split(10, (0.6, 0.3, 0.2), Rng(0))


def test_split_overlap_rejected():
    with pytest.raises(ConfigError):
        gi.Split(np.array([0, 1]), np.array([1]), np.array([2]))


@settings(max_examples=1000)
@given(st.integers(1, 300), st.floats(0.01, 0.9), st.floats(0.01, 0.5), st.floats(0.01, 0.5),
       st.integers(0, 2**32 - 1))
def test_split_partition_property(n, a, b, c, seed):
    total = a + b + c
    if total > 1:
        a, b, c = a / total, b / total, c / total
    s = gi.make_split(n, (a, b, c), Rng(seed))
    parts = [s.train, s.val, s.test]
    for i in range(3):
        for j in range(i + 1, 3):
            assert np.intersect1d(parts[i], parts[j]).size == 0
    allidx = np.concatenate(parts)
    assert allidx.size == 0 or (allidx.min() >= 0 and allidx.max() < n)
    assert len(s.val) == math.floor(b * n + 1e-9) and len(s.test) == math.floor(c * n + 1e-9)


def test_ood_split_puts_ood_nodes_in_ood_test():
    base = gi.gen_sbm([20, 20], 0.2, 0.05, rng=Rng(0))
    ds = gi.gen_spurious_shift(base, 1, 0.9, 0.1, Rng(1))
    s = gi.make_ood_split(ds, gi.OOD_RATIOS, Rng(2))
    np.testing.assert_array_equal(np.sort(s.ood_test), np.flatnonzero(ds.environment_id == gi.OOD_ENV))
    assert (ds.environment_id[np.concatenate([s.train, s.val, s.test])] == gi.ID_ENV).all()


# -- SBM

def test_sbm_two_cliques():
    ds = gi.gen_sbm([3, 3], 1.0, 0.0, rng=Rng(0))
    dense = ds.adjacency.to_dense()
    block = np.ones((3, 3)) - np.eye(3)
    np.testing.assert_array_equal(dense[:3, :3], block)
    np.testing.assert_array_equal(dense[3:, 3:], block)
    assert not dense[:3, 3:].any()


def test_sbm_edgeless():
    assert gi.gen_sbm([5, 5], 0.0, 0.0, rng=Rng(0)).adjacency.num_edges == 0


def test_sbm_cross_edges_binomial():
    ds = gi.gen_sbm([50, 50], 0.2, 0.02, rng=Rng(5))
    cross = ds.adjacency.to_dense()[:50, 50:].sum()
    mean, sd = 50 * 50 * 0.02, math.sqrt(50 * 50 * 0.02 * 0.98)
    assert abs(cross - mean) <= 4 * sd


def test_sbm_symmetric_scan_and_deterministic():
    a = gi.gen_sbm([30, 20, 25], 0.3, 0.05, rng=Rng(8))
    b = gi.gen_sbm([30, 20, 25], 0.3, 0.05, rng=Rng(8))
    dense = a.adjacency.to_dense()
    assert np.array_equal(dense, dense.T) and not np.diag(dense).any()
    assert a == b


def test_sbm_rejects_bad_probability():
    with pytest.raises(ConfigError):
        gi.gen_sbm([2, 2], 1.5, 0.0)


# -- spurious shift

def test_spurious_width():
    base = gi.gen_sbm([10, 10], 0.2, 0.05, feat_dim=8, rng=Rng(0))
    ds = gi.gen_spurious_shift(base, 2, 0.9, 0.1, Rng(1))
    assert ds.feat_dim == 10
    np.testing.assert_array_equal(ds.features[:, :8], base.features)


def _sign_mi(col, labels):
    joint = np.zeros((2, labels.max() + 1))
    np.add.at(joint, ((col > np.median(col)).astype(int), labels), 1.0)
    joint /= joint.sum()
    px, py = joint.sum(1, keepdims=True), joint.sum(0, keepdims=True)
    nz = joint > 0
    return float((joint[nz] * np.log(joint[nz] / (px @ py)[nz])).sum())


def test_spurious_no_shift_equal_information():
    base = gi.gen_sbm([1000, 1000], 0.0, 0.0, feat_dim=2, rng=Rng(0))
    ds = gi.gen_spurious_shift(base, 1, 0.7, 0.7, Rng(3))
    col = ds.features[:, -1]
    id_, ood = ds.environment_id == gi.ID_ENV, ds.environment_id == gi.OOD_ENV
    assert abs(_sign_mi(col[id_], ds.labels[id_]) - _sign_mi(col[ood], ds.labels[ood])) < 0.02


def test_spurious_ood_column_independent_of_labels():
    base = gi.gen_sbm([1000, 1000], 0.0, 0.0, feat_dim=2, rng=Rng(0))
    ds = gi.gen_spurious_shift(base, 1, 1.0, 0.0, Rng(4))
    ood = ds.environment_id == gi.OOD_ENV
    id_ = ~ood
    assert abs(np.corrcoef(ds.features[ood, -1], ds.labels[ood])[0, 1]) < 0.1
    # and the ID environment encodes the label perfectly
    assert abs(np.corrcoef(ds.features[id_, -1], ds.labels[id_])[0, 1]) > 0.9


def test_spurious_rejects_zero_dim():
    with pytest.raises(ConfigError):
        gi.gen_spurious_shift(gi.gen_sbm([2, 2], 0.5, 0.5), 0, 0.5, 0.5)


# -- k-NN correlation graph

def test_knn_identical_rows_linked():
    signals = np.array([[1.0, 2.0, 3.0, 4.0], [1.0, 2.0, 3.0, 4.0], [4.0, -1.0, 2.0, 0.0]])
    adj = gi.build_knn_correlation_graph(signals, 1)
    assert adj.to_dense()[0, 1] and adj.to_dense()[1, 0]


def test_knn_matches_brute_force_ranking():
    r = np.random.default_rng(0)
    signals = r.normal(size=(6, 10))
    adj = gi.build_knn_correlation_graph(signals, 2).to_dense()
    expected = np.zeros((6, 6), dtype=bool)
    for i in range(6):
        corr = [(np.corrcoef(signals[i], signals[j])[0, 1], j) for j in range(6) if j != i]
        for _, j in sorted(corr, key=lambda t: -t[0])[:2]:
            expected[i, j] = expected[j, i] = True
    np.testing.assert_array_equal(adj.astype(bool), expected)


@pytest.mark.parametrize("k", [5, 10, 20])
def test_knn_out_degree_before_union_is_k(k):
    signals = np.random.default_rng(k).normal(size=(40, 12))
    nbrs = gi.knn_neighbors(signals, k)
    assert nbrs.shape == (40, k)
    assert all(i not in row and len(set(row)) == k for i, row in enumerate(nbrs))
    adj = gi.build_knn_correlation_graph(signals, k)
    assert adj.is_symmetric() and not np.diag(adj.to_dense()).any()


def test_knn_rejects_large_k():
    with pytest.raises(ConfigError):
        gi.build_knn_correlation_graph(np.ones((3, 4)), 3)


def test_pearson_constant_row_is_zero():
    c = gi.pearson_matrix([[1.0, 1.0, 1.0], [1.0, 2.0, 3.0], [3.0, 1.0, 2.0]])
    assert not c[0].any() and not c[:, 0].any()
    assert c[1, 1] == pytest.approx(1.0)


# -- DE labels

def _path_ds(n):
    return GraphDataset(path_graph(n), np.zeros((n, 1)), np.zeros(n, dtype=int), 2)


def test_de_radius_zero():
    np.testing.assert_array_equal(gi.gen_de_labels(_path_ds(5), 2, 0), [0, 0, 1, 0, 0])


def test_de_radius_infinite():
    assert gi.gen_de_labels(_path_ds(6), 0, math.inf).all()


def test_de_radius_two_matches_bfs():
    ds = _path_ds(9)
    got = gi.gen_de_labels(ds, 4, 2)
    expected = (np.abs(np.arange(9) - 4) <= 2).astype(int)
    np.testing.assert_array_equal(got, expected)


def test_de_target_out_of_range():
    with pytest.raises(StructuralError):
        gi.gen_de_labels(_path_ds(3), 7, 1)


def test_knn_perturbation_deterministic_and_labelled():
    a = gi.gen_knn_perturbation(60, 20, 5, rng=Rng(2))
    b = gi.gen_knn_perturbation(60, 20, 5, rng=Rng(2))
    assert a == b
    assert a.labels[0] == 1 and 1 < a.labels.sum() < 60
