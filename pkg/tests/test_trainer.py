import json

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from vecformer import trainer as tr
from vecformer.errors import CheckpointError, ConfigError, ContractError
from vecformer.graphio import make_split
from vecformer.numerics import Rng

from fixtures import sbm40

SMALL = tr.TrainConfig(hidden_dim=8, m=4, n=4, n_f=2, n_s=2, stage1_epochs=5, stage2_epochs=5,
                       patience=50, dropout=0.0)


@pytest.fixture(scope="module")
def data():
    ds = sbm40(0)
    return ds, make_split(ds.n, rng=Rng(0))


@pytest.fixture(scope="module")
def stage1(data):
    return tr.train_stage1(data[0], SMALL)


# -- config

def test_config_unknown_keys(tmp_path):
    with pytest.raises(ConfigError, match="bogus"):
        tr.TrainConfig.from_dict({"bogus": 1})
    p = tmp_path / "c.json"
    p.write_text(json.dumps({"lr": 0.005, "m": 8}))
    cfg = tr.TrainConfig.from_json(p)
    assert cfg.lr == 0.005 and cfg.m == 8
    p.write_text("[1, 2]")
    with pytest.raises(ConfigError):
        tr.TrainConfig.from_json(p)


@pytest.mark.parametrize("kw", [dict(lr=0.0), dict(patience=-1), dict(hidden_dim=6, attn_heads=4),
                                dict(temperature=0.0), dict(encoder="mlp")])
def test_config_validation(kw):
    with pytest.raises(ConfigError):
        tr.TrainConfig(**kw)


def test_config_round_trip():
    cfg = SMALL.replace(seed=3)
    assert tr.TrainConfig.from_dict(cfg.to_dict()) == cfg


# -- optimizer

def test_adam_first_step_is_lr_times_sign():
    p = {"w": np.array([1.0, -2.0, 3.0])}
    tr.Adam(lr=0.1).step(p, {"w": np.array([0.5, -4.0, 0.0])})
    np.testing.assert_allclose(p["w"], [0.9, -1.9, 3.0], atol=1e-7)


def test_adam_decoupled_weight_decay():
    p = {"w": np.array([2.0])}
    tr.Adam(lr=0.1, weight_decay=0.5).step(p, {"w": np.array([0.0])})
    np.testing.assert_allclose(p["w"], [2.0 * (1 - 0.05)], atol=1e-15)


# -- stage 1

def test_stage1_zero_epochs_returns_init(data):
    ds, _ = data
    cfg = SMALL.replace(stage1_epochs=0)
    res = tr.train_stage1(ds, cfg)
    init = tr.init_stage1_params(cfg, ds.feat_dim, Rng(cfg.seed).child("init"))
    assert res.records == []
    assert res.final == res.initial
    for k, v in init.items():
        np.testing.assert_array_equal(res.checkpoint.params[k], v)


def test_stage1_deterministic(data, stage1):
    again = tr.train_stage1(data[0], SMALL)
    assert again.records == stage1.records
    for k, v in stage1.checkpoint.params.items():
        np.testing.assert_array_equal(again.checkpoint.params[k], v)


def test_stage1_records(stage1):
    assert [r["epoch"] for r in stage1.records] == [1, 2, 3, 4, 5]
    r = stage1.records[0]
    assert abs(r["total"] - (r["feature_term"] + r["structure_term"] + r["graph_term"])) < 1e-9


def test_stage1_reduces_loss(data):
    res = tr.train_stage1(data[0], SMALL.replace(stage1_epochs=60))
    assert res.final["total"] < res.initial["total"]


# -- stage 2

def test_stage2_missing_key_is_contract_error(data, stage1):
    ds, split = data
    ck = tr.Checkpoint("stage1", stage1.checkpoint.config,
                       {k: v for k, v in stage1.checkpoint.params.items() if k != "codebook.feature"})
    with pytest.raises(ContractError, match="codebook.feature"):
        tr.train_stage2(ds, split, ck, SMALL)


def test_stage2_shape_mismatch_is_contract_error(data, stage1):
    ds, split = data
    with pytest.raises(ContractError):
        tr.train_stage2(ds, split, stage1.checkpoint, SMALL.replace(m=5))


def test_stage2_patience_zero_stops_after_first_non_improvement(data, stage1):
    ds, split = data
    res = tr.train_stage2(ds, split, stage1.checkpoint, SMALL.replace(patience=0, stage2_epochs=200, lr=0.05))
    epochs = len(res.records)
    assert epochs < 200
    assert res.best_epoch == epochs - 1


def test_stage2_best_checkpoint_reproduces_val(data, stage1):
    ds, split = data
    cfg = SMALL.replace(stage2_epochs=20)
    res = tr.train_stage2(ds, split, stage1.checkpoint, cfg)
    logits = tr.vecformer_forward(ds, res.checkpoint.params, cfg)["logits"]
    assert tr.evaluate_logits(ds, logits, split)["val"] == res.best_val
    assert res.checkpoint.extra["best_epoch"] == res.best_epoch


def test_stage2_fits_separable_training_set(data):
    ds, split = data
    cfg = SMALL.replace(stage1_epochs=30, stage2_epochs=100, patience=100, lr=0.02)
    run = tr.train_vecformer(ds, split, cfg)
    logits = tr.vecformer_forward(ds, run.stage2.checkpoint.params, cfg)["logits"]
    assert tr.evaluate_logits(ds, logits, split)["train"] == 1.0


@pytest.mark.parametrize("group,prefix", [("freeze_encoder", "encoder."), ("freeze_codebooks", "codebook."),
                                          ("freeze_fusion", "fusion.")])
def test_frozen_groups_get_zero_gradients(data, stage1, group, prefix):
    ds, split = data
    cfg = SMALL.replace(**{group: True})
    params = tr.init_stage2_params(ds, stage1.checkpoint, cfg, Rng(0))
    grads = tr.stage2_gradients(ds, split, params, cfg)
    for k, g in grads.items():
        if k.startswith(prefix):
            assert not g.any(), k
        elif k.startswith(("attn.", "classifier.")):
            assert g.any(), k
    res = tr.train_stage2(ds, split, stage1.checkpoint, cfg)
    for k, v in stage1.checkpoint.params.items():
        if k.startswith(prefix):
            np.testing.assert_array_equal(res.checkpoint.params[k], v)


def test_dense_baseline_trains(data):
    ds, split = data
    res = tr.train_dense_baseline(ds, split, SMALL.replace(stage2_epochs=30))
    assert res.best_epoch >= 1
    assert res.records[-1]["loss"] < res.records[0]["loss"]


# -- checkpoints

@settings(max_examples=30)
@given(st.dictionaries(st.text("abcdefgh.", min_size=1, max_size=8),
                       st.tuples(st.integers(0, 4), st.integers(1, 5), st.integers(0, 2**32 - 1)),
                       max_size=5))
def test_checkpoint_bit_exact_round_trip(tmp_path_factory, layout):
    params = {}
    for name, (rows, cols, seed) in layout.items():
        a = np.random.default_rng(seed).normal(size=(rows, cols)) * 1e3
        if a.size:
            a.flat[0] = np.nextafter(1.0, 2.0)
        params[name] = a
    path = tmp_path_factory.mktemp("ck") / "x.ckpt"
    tr.Checkpoint("stage1", SMALL.to_dict(), params, {"seed": 1}, {"note": "x"}).save(path)
    back = tr.Checkpoint.load(path)
    assert back.params.keys() == params.keys()
    for k, v in params.items():
        assert back.params[k].shape == v.shape
        assert back.params[k].tobytes() == v.tobytes()
    assert back.train_config() == SMALL and back.extra == {"note": "x"}


def test_checkpoint_version_mismatch(tmp_path, stage1):
    path = stage1.checkpoint.save(tmp_path / "s1.ckpt")
    raw = path.read_bytes().replace(tr.CHECKPOINT_FORMAT.encode(), b"vecformer-ckpt/9", 1)
    path.write_bytes(raw)
    with pytest.raises(CheckpointError, match="vecformer-ckpt/9"):
        tr.Checkpoint.load(path)


def test_checkpoint_truncated_and_garbage(tmp_path, stage1):
    path = stage1.checkpoint.save(tmp_path / "s1.ckpt")
    path.write_bytes(path.read_bytes()[:-16])
    with pytest.raises(CheckpointError, match="truncated"):
        tr.Checkpoint.load(path)
    path.write_bytes(b"\x00\xff junk\n")
    with pytest.raises(CheckpointError):
        tr.Checkpoint.load(path)


def test_write_csv_float_repr(tmp_path):
    p = tr.write_csv(tmp_path / "a.csv", [{"epoch": 1, "x": 0.1 + 0.2}])
    assert p.read_text().splitlines() == ["epoch,x", "1,0.30000000000000004"]


# -- grid search

def test_validate_space():
    tr.validate_space({"lr": [0.01], "temperature": [0.5]})
    with pytest.raises(ConfigError):
        tr.validate_space({"lr": [0.02]})
    with pytest.raises(ConfigError):
        tr.validate_space({"seed": [1]})
    with pytest.raises(ConfigError):
        tr.validate_space({"lr": []})


def test_grid_search_budget_and_order(data, tmp_path):
    ds, split = data
    base = SMALL.replace(stage1_epochs=2, stage2_epochs=3)
    best, rows = tr.grid_search(ds, split, {"lr": [0.001, 0.01], "dropout": [0.1, 0.5]}, budget=3,
                                base=base, out_dir=tmp_path)
    assert len(rows) == 3
    vals = [r["val"] for r in rows]
    assert vals == sorted(vals, reverse=True)
    assert best == rows[0]["config"]
    lines = (tmp_path / "leaderboard.csv").read_text().splitlines()
    assert lines[0].split(",")[:3] == ["index", "lr", "dropout"] and len(lines) == 4
    with pytest.raises(ConfigError):
        tr.grid_search(ds, split, {"lr": [0.01]}, budget=0, base=base)
