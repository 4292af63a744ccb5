"""Benchmarks and studies: attention scaling, token-list ablation, OOD attention spread, q.k positivity."""
from __future__ import annotations

import contextlib
import gc
import json
import logging
import math
import time
import tracemalloc
from dataclasses import asdict, dataclass
from pathlib import Path

import numpy as np

from . import graphio as gi
from .errors import ConfigError, ContractError
from .graphio import GraphDataset, Split
from .metrics import AttnDiagnostics, accuracy, attn_diagnostics
from .numerics import Rng
from .quantizer import orthogonalize_rows
from .tokenformer import query_key_scores
from .trainer import (Adam, Checkpoint, TrainConfig, dense_baseline_forward, dense_baseline_init, evaluate_logits,
                      init_stage1_params, init_stage2_params, metric_name, train_dense_baseline, train_stage1,
                      train_stage2, train_step, vecformer_forward, write_csv)

log = logging.getLogger(__name__)

DENSE_NODE = "dense_node"
GRAPH_TOKEN = "graph_token"
MECHANISMS = (DENSE_NODE, GRAPH_TOKEN)
ABLATION_SIZES = (4, 16, 64, 256)
CODEBOOK_SWEEP = (2, 4, 8, 16, 32)


@contextlib.contextmanager
def _single_thread():
    """Pin BLAS to one thread so timings compare across N."""
    try:
        from threadpoolctl import threadpool_limits
    except ImportError:  # pragma: no cover - optional
        yield
        return
    with threadpool_limits(limits=1):
        yield


# ---------------------------------------------------------------- scaling


@dataclass(frozen=True)
class ScalingRecord:
    n: int
    mechanism: str
    seconds: float
    bytes: int
    m: int

    def __post_init__(self):
        if self.n <= 0 or self.seconds <= 0 or self.bytes <= 0:
            raise ContractError("scaling records need positive values")

    def to_row(self) -> dict:
        return {"N": self.n, "mechanism": self.mechanism, "seconds": self.seconds, "bytes": self.bytes,
                "M": self.m}


def bench_graph(n: int, rng: Rng, classes: int = 4, avg_degree: float = 10.0, feat_dim: int = 16) -> GraphDataset:
    """SBM with a fixed expected degree, so edge count grows linearly in ``n``."""
    sizes = [n // classes + (1 if i < n % classes else 0) for i in range(classes)]
    block = n / classes
    # 80% of expected degree inside the block, 20% across
    p_in = min(1.0, 0.8 * avg_degree / max(block - 1, 1))
    p_out = min(1.0, 0.2 * avg_degree / max(n - block, 1))
    return gi.gen_sbm(sizes, p_in, p_out, feat_dim=feat_dim, rng=rng)


def _token_side(m_tokens: int) -> int:
    r = math.isqrt(m_tokens)
    if r * r != m_tokens:
        raise ConfigError(f"token-list size {m_tokens} is not a perfect square")
    return r


def _mechanism_setup(dataset: GraphDataset, mechanism: str, config: TrainConfig, rng: Rng):
    if mechanism == GRAPH_TOKEN:
        s1 = Checkpoint("stage1", config.to_dict(), init_stage1_params(config, dataset.feat_dim, rng.child("s1")))
        return init_stage2_params(dataset, s1, config, rng.child("s2")), vecformer_forward
    if mechanism == DENSE_NODE:
        return dense_baseline_init(dataset, config, rng.child("dense")), dense_baseline_forward
    raise ConfigError(f"unknown mechanism {mechanism!r}; expected one of {MECHANISMS}")


def _run_epochs(dataset, params, forward, config, epochs, rng):
    opt = Adam(config.lr, weight_decay=config.weight_decay)
    train_idx = np.arange(dataset.n)
    for e in range(epochs):
        train_step(dataset, train_idx, params, list(params), forward, config, opt, rng.child("epoch", e))


def bench_scaling(n_values, mechanisms=MECHANISMS, config: TrainConfig | None = None, rng: Rng | None = None,
                  trials: int = 3, epochs: int = 1, token_list_size: int = 256, out_dir=None,
                  measure_memory: bool = True) -> list[ScalingRecord]:
    """Wall time per training epoch and peak traced memory for each (N, mechanism).

    ``seconds`` is the median over ``trials`` of the per-epoch time; memory
    comes from one extra traced run so the tracer does not slow the timed
    ones. The graph-token list size is fixed at ``token_list_size``.
    """
    rng = rng or Rng(0)
    side = _token_side(token_list_size)
    config = (config or TrainConfig()).replace(n_f=side, n_s=side, dense_cap=max(n_values))
    records = []
    with _single_thread():
        for n in n_values:
            data = bench_graph(int(n), rng.child("graph", int(n)))
            for mech in mechanisms:
                if mech == DENSE_NODE and n > max(config.dense_cap, 16384):
                    raise ConfigError(f"dense_node refused at N={n}")
                times = []
                for t in range(trials):
                    params, fwd = _mechanism_setup(data, mech, config, rng.child("init", int(n)))
                    _run_epochs(data, params, fwd, config, 1, rng.child("warm", t))  # warm-up
                    gc.collect()
                    start = time.perf_counter()
                    _run_epochs(data, params, fwd, config, epochs, rng.child("trial", t))
                    times.append((time.perf_counter() - start) / epochs)
                    del params
                peak = 1
                if measure_memory:
                    params, fwd = _mechanism_setup(data, mech, config, rng.child("init", int(n)))
                    gc.collect()
                    tracemalloc.start()
                    try:
                        _run_epochs(data, params, fwd, config, 1, rng.child("mem"))
                        peak = tracemalloc.get_traced_memory()[1]
                    finally:
                        tracemalloc.stop()
                    del params
                rec = ScalingRecord(int(n), mech, float(np.median(times)), int(peak),
                                    token_list_size if mech == GRAPH_TOKEN else int(n))
                log.info("scaling N=%d %s %.4fs %d bytes", rec.n, mech, rec.seconds, rec.bytes)
                records.append(rec)
    if out_dir is not None:
        write_csv(Path(out_dir) / "scaling.csv", [r.to_row() for r in records],
                  ["N", "mechanism", "seconds", "bytes", "M"])
    return records


def loglog_slope(records, mechanism: str, field: str = "seconds") -> float:
    """Least-squares slope of log(field) against log(N)."""
    rows = [r for r in records if r.mechanism == mechanism]
    if len(rows) < 2:
        raise ContractError(f"need at least two N values for {mechanism}")
    x = np.log([r.n for r in rows])
    y = np.log([getattr(r, field) for r in rows])
    return float(np.polyfit(x, y, 1)[0])


# ---------------------------------------------------------------- ablations


def factor_list_size(size: int) -> tuple[int, int]:
    """Square factorization ``size = r * r``."""
    r = _token_side(size)
    return r, r


def _median_rows(rows, key, value_fields):
    out = []
    for k in dict.fromkeys(r[key] for r in rows):
        group = [r for r in rows if r[key] == k]
        out.append({key: k, **{f: float(np.median([g[f] for g in group])) for f in value_fields}})
    return out


def ablate_tokens(dataset: GraphDataset, split: Split, list_sizes=ABLATION_SIZES,
                  config: TrainConfig | None = None, seeds=(0,), out_dir=None):
    """Validation/test metric per graph-token list size; returns ``(rows, medians)``.

    Stage 1 is shared across sizes within a seed since it does not see the
    token list.
    """
    config = config or TrainConfig()
    shapes = [(int(s), *factor_list_size(int(s))) for s in list_sizes]
    rows = []
    for seed in seeds:
        base = config.replace(seed=int(seed))
        s1 = train_stage1(dataset, base)
        for size, nf, ns in shapes:
            cfg = base.replace(n_f=nf, n_s=ns)
            fit = train_stage2(dataset, split, s1.checkpoint, cfg)
            scores = evaluate_logits(dataset, vecformer_forward(dataset, fit.checkpoint.params, cfg)["logits"], split)
            rows.append({"size": size, "n_f": nf, "n_s": ns, "seed": int(seed), "best_epoch": fit.best_epoch,
                         "val": scores.get("val", float("nan")), "test": scores.get("test", float("nan"))})
    medians = _median_rows(rows, "size", ("val", "test"))
    if out_dir is not None:
        write_csv(Path(out_dir) / "ablation_tokens.csv", rows)
    return rows, medians


def sweep_codebook_sizes(dataset: GraphDataset, sizes=CODEBOOK_SWEEP, config: TrainConfig | None = None,
                         seeds=(0, 1, 2, 3, 4)):
    """Final eval-mode stage-1 total per codebook size (m = n = size); returns ``(rows, medians)``."""
    config = config or TrainConfig()
    rows = []
    for seed in seeds:
        for size in sizes:
            res = train_stage1(dataset, config.replace(m=int(size), n=int(size), seed=int(seed)))
            rows.append({"size": int(size), "seed": int(seed), "initial": res.initial["total"],
                         "final": res.final["total"]})
    return rows, _median_rows(rows, "size", ("initial", "final"))


# ---------------------------------------------------------------- diagnostics


def diagnose_vecformer(dataset: GraphDataset, params: dict, config: TrainConfig, rows=None) -> AttnDiagnostics:
    out = vecformer_forward(dataset, params, config, "eval")
    scores = query_key_scores(out["g"], out["tokens"].graph_tokens, params)
    return attn_diagnostics(out["weights"], scores=scores, rows=rows)


def diagnose_dense(dataset: GraphDataset, params: dict, config: TrainConfig, rows=None) -> AttnDiagnostics:
    out = dense_baseline_forward(dataset, params, config, "eval")
    scores = query_key_scores(out["g"], out["g"], params)
    return attn_diagnostics(out["weights"], scores=scores, rows=rows)


def positive_qk_params(params: dict, config: TrainConfig) -> tuple[dict, TrainConfig]:
    """Constrained copy of stage-2 parameters under which every q.k is positive.

    Both codebooks are jointly row-orthogonalized, the token-list projections
    take absolute values, fusion is softmax-normalized (so both coefficients
    are positive) and W_Q = W_K = I. Each query and key is then a positive
    combination of mutually orthogonal codes, so their inner product is a
    positive sum of squared code norms.
    """
    fc, sc = orthogonalize_rows(params["codebook.feature"], params["codebook.structure"])
    out = dict(params)
    out["codebook.feature"], out["codebook.structure"] = fc, sc
    out["tokenlist.W_F"] = np.abs(params["tokenlist.W_F"])
    out["tokenlist.W_S"] = np.abs(params["tokenlist.W_S"])
    eye = np.eye(config.hidden_dim)
    out["attn.W_Q"], out["attn.W_K"] = eye, eye.copy()
    return out, config.replace(fusion_normalize=True)


def positivity_diagnostic(dataset: GraphDataset, params: dict, config: TrainConfig) -> dict:
    """min q.k before and after applying the positive-coefficient constraints."""
    general = diagnose_vecformer(dataset, params, config)
    cparams, ccfg = positive_qk_params(params, config)
    constrained = diagnose_vecformer(dataset, cparams, ccfg)
    return {"general": general.to_dict(), "constrained": constrained.to_dict(),
            "constrained_positive": bool(constrained.min_qk > 0)}


@dataclass
class OODSeedResult:
    seed: int
    vecformer_ood_acc: float
    dense_ood_acc: float
    vecformer_ood_std: float
    dense_ood_std: float
    vecformer_ood_kl: float
    dense_ood_kl: float


def spurious_fixture(seed: int, blocks=(100, 100, 100), p_in: float = 0.05, p_out: float = 0.01,
                     feat_dim: int = 16, feat_signal: float = 1.0, spurious_dim: int = 4,
                     id_corr: float = 0.95, ood_corr: float = 0.05, spurious_signal: float = 1.0):
    rng = Rng(seed).child("ood-fixture")
    base = gi.gen_sbm(list(blocks), p_in, p_out, feat_dim, feat_signal, rng.child("sbm"))
    data = gi.gen_spurious_shift(base, spurious_dim, id_corr, ood_corr, rng.child("shift"),
                                 spurious_signal=spurious_signal)
    return data, gi.make_ood_split(data, gi.OOD_RATIOS, rng.child("split"))


def ood_study(seeds=(0, 1, 2, 3, 4), config: TrainConfig | None = None, fixture_kw: dict | None = None,
              out_dir=None):
    """Paired VecFormer vs dense-attention runs on the spurious-shift fixture.

    Returns ``(per_seed, medians)``; attention statistics are taken over the
    OOD test nodes.
    """
    config = config or TrainConfig(m=64, n=64, n_f=16, n_s=16)
    results = []
    for seed in seeds:
        data, split = spurious_fixture(int(seed), **(fixture_kw or {}))
        cfg = config.replace(seed=int(seed))
        run1 = train_stage1(data, cfg)
        vf = train_stage2(data, split, run1.checkpoint, cfg)
        dn = train_dense_baseline(data, split, cfg)
        vparams, dparams = vf.checkpoint.params, dn.checkpoint.params
        ood = split.ood_test
        vlog = vecformer_forward(data, vparams, cfg)["logits"]
        dlog = dense_baseline_forward(data, dparams, cfg)["logits"]
        vd = diagnose_vecformer(data, vparams, cfg, rows=ood)
        dd = diagnose_dense(data, dparams, cfg, rows=ood)
        results.append(OODSeedResult(int(seed), accuracy(vlog, data.labels, ood).value,
                                     accuracy(dlog, data.labels, ood).value, vd.mean_std, dd.mean_std,
                                     vd.mean_kl_uniform, dd.mean_kl_uniform))
    fields = [f for f in asdict(results[0]) if f != "seed"]
    medians = {f: float(np.median([getattr(r, f) for r in results])) for f in fields}
    if out_dir is not None:
        write_csv(Path(out_dir) / "ood_study.csv", [asdict(r) for r in results])
        write_json(Path(out_dir) / "diagnostics.json", {"ood_medians": medians})
    return results, medians


def write_json(path, payload) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(json.dumps(payload, indent=2, sort_keys=True, default=float) + "\n", encoding="utf-8")
    return path


def write_attention(path, weights) -> Path:
    """Post-softmax attention dump: one row per node, one column per token."""
    w = np.asarray(getattr(weights, "data", weights))
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", encoding="utf-8", newline="") as fh:
        fh.write("node," + ",".join(f"t{j}" for j in range(w.shape[1])) + "\n")
        for i, row in enumerate(w):
            fh.write(f"{i}," + ",".join(repr(float(v)) for v in row) + "\n")
    return path


def metric_rows(dataset: GraphDataset, logits, split: Split) -> list[dict]:
    name = metric_name(dataset)
    parts = {p: getattr(split, p) for p in ("train", "val", "test", "ood_test")}
    return [{"name": name, "split": p, "value": v, "n_evaluated": len(parts[p])}
            for p, v in evaluate_logits(dataset, logits, split).items()]
