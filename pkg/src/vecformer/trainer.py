"""Two-stage training: codebook pretraining, then graph-token attention finetuning."""
from __future__ import annotations

import csv
import dataclasses
import itertools
import json
import logging
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import numerics as nx
from .encoder import EncoderConfig, encode, encoder_param_init
from .errors import CheckpointError, ConfigError, ContractError, TrainingError, UndefinedMetricError
from .graphio import GraphDataset, Split
from .metrics import accuracy, roc_auc
from .numerics import Rng, Tape, Tensor
from .quantizer import SoftVQConfig, codebook_init, fusion_init, quantize_node
from .reconstruction import ReconConfig, decoder_init, stage1_loss
from .tokenformer import (attention_init, binary_cross_entropy, build_token_list, classify,
                          cross_attention, cross_entropy, dense_node_attention, token_list_init)

log = logging.getLogger(__name__)

CHECKPOINT_FORMAT = "vecformer-ckpt/1"

LR_GRID = (0.001, 0.005, 0.01)
HIDDEN_GRID = (64, 128, 256)
WEIGHT_DECAY_GRID = (1e-3, 5e-4, 1e-4)
DROPOUT_GRID = (0.1, 0.3, 0.5, 0.7)
DECLARED_GRIDS = {"lr": LR_GRID, "hidden_dim": HIDDEN_GRID,
                  "weight_decay": WEIGHT_DECAY_GRID, "dropout": DROPOUT_GRID}
# searchable beyond the declared grids, any valid value
EXTENSION_KEYS = ("temperature", "gamma_f", "gamma_g", "m", "n", "n_f", "n_s")


@dataclass(frozen=True)
class TrainConfig:
    lr: float = 0.01
    weight_decay: float = 5e-4
    dropout: float = 0.1
    hidden_dim: int = 64
    m: int = 64
    n: int = 64
    n_f: int = 16
    n_s: int = 16
    temperature: float = 1.0
    gamma_f: float = 2.0
    gamma_g: float = 2.0
    stage1_epochs: int = 100
    stage2_epochs: int = 300
    patience: int = 50
    seed: int = 0
    freeze_encoder: bool = False
    freeze_codebooks: bool = False
    freeze_fusion: bool = False
    encoder: str = "gat"
    layers: int = 2
    heads: int = 1
    residual: bool = True
    negative_slope: float = 0.2
    attn_heads: int = 1
    fusion_normalize: bool = False
    structure_mode: str = "auto"
    neg_ratio: int = 5
    dense_cap: int = 4096
    d_y: int | None = None
    feature_weight: float = 1.0
    structure_weight: float = 1.0
    graph_weight: float = 1.0

    def __post_init__(self):
        for name in ("lr", "hidden_dim", "m", "n", "n_f", "n_s", "temperature", "layers", "heads",
                     "attn_heads", "neg_ratio", "dense_cap"):
            if not getattr(self, name) > 0:
                raise ConfigError(f"{name} must be positive, got {getattr(self, name)}")
        for name in ("weight_decay", "stage1_epochs", "stage2_epochs", "patience"):
            if getattr(self, name) < 0:
                raise ConfigError(f"{name} must be >= 0")
        if not 0 <= self.seed < 2**64:
            raise ConfigError("seed must be a 64-bit unsigned integer")
        if self.hidden_dim % self.attn_heads:
            raise ConfigError("hidden_dim must be divisible by attn_heads")
        # delegate the remaining checks
        self.encoder_config()
        self.recon_config()
        SoftVQConfig(self.temperature)

    def encoder_config(self, mode_dropout: float | None = None) -> EncoderConfig:
        return EncoderConfig(self.encoder, self.layers, self.hidden_dim, self.heads,
                             self.dropout if mode_dropout is None else mode_dropout,
                             self.residual, self.negative_slope)

    def recon_config(self) -> ReconConfig:
        return ReconConfig(self.gamma_f, self.gamma_g, self.d_y, self.structure_mode, self.neg_ratio,
                           self.dense_cap, self.feature_weight, self.structure_weight, self.graph_weight)

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "TrainConfig":
        known = {f.name for f in dataclasses.fields(cls)}
        unknown = sorted(set(d) - known)
        if unknown:
            raise ConfigError(f"unknown config keys: {', '.join(unknown)}")
        return cls(**d)

    @classmethod
    def from_json(cls, path) -> "TrainConfig":
        try:
            data = json.loads(Path(path).read_text(encoding="utf-8"))
        except json.JSONDecodeError as exc:
            raise ConfigError(f"{path}: bad JSON ({exc.msg})") from None
        if not isinstance(data, dict):
            raise ConfigError(f"{path}: config must be a JSON object")
        return cls.from_dict(data)

    def replace(self, **kw) -> "TrainConfig":
        return self.from_dict({**self.to_dict(), **kw})


class Adam:
    """Adam with decoupled weight decay; state is keyed by parameter name."""

    def __init__(self, lr=0.01, betas=(0.9, 0.999), eps=1e-8, weight_decay=0.0):
        self.lr, self.betas, self.eps, self.weight_decay = lr, betas, eps, weight_decay
        self.t = 0
        self.m: dict = {}
        self.v: dict = {}

    def step(self, params: dict, grads: dict, names=None) -> None:
        self.t += 1
        b1, b2 = self.betas
        c1, c2 = 1 - b1 ** self.t, 1 - b2 ** self.t
        for name in (grads if names is None else names):
            p, g = params[name], grads[name]
            if name not in self.m:
                self.m[name] = np.zeros_like(p)
                self.v[name] = np.zeros_like(p)
            m, v = self.m[name], self.v[name]
            m *= b1
            m += (1 - b1) * g
            v *= b2
            v += (1 - b2) * g * g
            if self.weight_decay:
                p *= 1 - self.lr * self.weight_decay
            p -= self.lr * (m / c1) / (np.sqrt(v / c2) + self.eps)


@dataclass
class Checkpoint:
    stage: str
    config: dict
    params: dict
    rng_state: dict = field(default_factory=dict)
    extra: dict = field(default_factory=dict)

    def save(self, path) -> Path:
        """Write one file: a JSON manifest line, then little-endian float64 payloads."""
        path = Path(path)
        path.parent.mkdir(parents=True, exist_ok=True)
        entries, offset, blobs = [], 0, []
        for name in sorted(self.params):
            arr = np.ascontiguousarray(self.params[name], dtype="<f8")
            entries.append({"name": name, "shape": list(arr.shape), "offset": offset})
            offset += arr.size
            blobs.append(arr.tobytes(order="C"))
        manifest = {"format": CHECKPOINT_FORMAT, "stage": self.stage, "config": self.config,
                    "rng_state": self.rng_state, "extra": self.extra, "dtype": "<f8",
                    "tensors": entries}
        head = json.dumps(manifest, sort_keys=True, separators=(",", ":"), default=_json_default)
        with open(path, "wb") as fh:
            fh.write(head.encode("utf-8") + b"\n")
            for b in blobs:
                fh.write(b)
        return path

    @classmethod
    def load(cls, path) -> "Checkpoint":
        raw = Path(path).read_bytes()
        nl = raw.find(b"\n")
        try:
            manifest = json.loads(raw[:nl].decode("utf-8"))
        except (ValueError, UnicodeDecodeError):
            raise CheckpointError(f"{path}: not a checkpoint file") from None
        if manifest.get("format") != CHECKPOINT_FORMAT:
            raise CheckpointError(f"{path}: format {manifest.get('format')!r}, expected {CHECKPOINT_FORMAT!r}")
        payload = np.frombuffer(raw[nl + 1:], dtype="<f8")
        params = {}
        for e in manifest["tensors"]:
            size = int(np.prod(e["shape"], dtype=np.int64))
            if e["offset"] + size > payload.size:
                raise CheckpointError(f"{path}: payload truncated at {e['name']}")
            params[e["name"]] = payload[e["offset"]:e["offset"] + size].astype(np.float64).reshape(e["shape"])
        return cls(manifest["stage"], manifest["config"], params, manifest.get("rng_state", {}),
                   manifest.get("extra", {}))

    def train_config(self) -> TrainConfig:
        return TrainConfig.from_dict(self.config)


def _json_default(o):
    if isinstance(o, (np.integer,)):
        return int(o)
    if isinstance(o, (np.floating,)):
        return float(o)
    if isinstance(o, np.ndarray):
        return o.tolist()
    raise TypeError(type(o).__name__)


def write_csv(path, rows: list, fieldnames=None) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    if fieldnames is None:
        fieldnames = list(rows[0]) if rows else []
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.DictWriter(fh, fieldnames=fieldnames, lineterminator="\n")
        w.writeheader()
        for r in rows:
            w.writerow({k: (repr(float(v)) if isinstance(v, (float, np.floating)) else v)
                        for k, v in r.items()})
    return path


# ---------------------------------------------------------------- stage 1

def init_stage1_params(config: TrainConfig, feat_dim: int, rng: Rng) -> dict:
    d = config.hidden_dim
    params = encoder_param_init(config.encoder_config(), feat_dim, rng.child("encoder"))
    params["codebook.feature"] = codebook_init(config.m, d, rng.child("codebook", "feature")).codes.data
    params["codebook.structure"] = codebook_init(config.n, d, rng.child("codebook", "structure")).codes.data
    params.update(fusion_init(d, rng.child("fusion")))
    params.update(decoder_init(feat_dim, d, rng.child("decoder"), config.d_y))
    return params


def stage1_forward(dataset: GraphDataset, params: dict, config: TrainConfig, mode: str = "eval",
                   rng: Rng | None = None):
    """Encoder -> SoftVQ on both codebooks -> fusion -> three reconstruction terms."""
    enc = config.encoder_config()
    h = encode(dataset, enc, params, mode, rng.child("encoder") if rng is not None else None)
    bundle = quantize_node(h, params["codebook.feature"], params["codebook.structure"],
                           SoftVQConfig(config.temperature), params, config.fusion_normalize)
    terms = stage1_loss(dataset, h, bundle, params, config.recon_config(),
                        rng.child("negatives") if rng is not None else Rng(config.seed).child("negatives"))
    return h, bundle, terms


@dataclass
class Stage1Result:
    checkpoint: Checkpoint
    records: list
    initial: dict
    final: dict


def _tracked(params: dict, trainable) -> dict:
    return {k: (nx.parameter(v) if k in trainable else Tensor(v)) for k, v in params.items()}


def train_stage1(dataset: GraphDataset, config: TrainConfig, params: dict | None = None) -> Stage1Result:
    """Optimise encoder, codebooks, fusion and decoders on the reconstruction objective.

    Records one row per epoch with the train-mode terms computed before that
    epoch's update. ``initial``/``final`` hold eval-mode terms before the
    first and after the last update.
    """
    rng = Rng(config.seed)
    if params is None:
        params = init_stage1_params(config, dataset.feat_dim, rng.child("init"))
    params = {k: np.array(v, dtype=np.float64) for k, v in params.items()}
    opt = Adam(config.lr, weight_decay=config.weight_decay)
    names = sorted(params)
    initial = stage1_forward(dataset, params, config, "eval")[2].as_floats()
    records = []
    for epoch in range(1, config.stage1_epochs + 1):
        tracked = _tracked(params, names)
        with Tape({k: tracked[k] for k in names}) as tape:
            _, _, terms = stage1_forward(dataset, tracked, config, "train", rng.child("epoch", epoch))
        vals = terms.as_floats()
        if not all(np.isfinite(v) for v in vals.values()):
            raise TrainingError(f"non-finite stage-1 loss at epoch {epoch}: {vals}")
        grads = nx.backward(tape, terms.total)
        opt.step(params, grads, names)
        records.append({"epoch": epoch, "feature_term": vals["feature"], "structure_term": vals["structure"],
                        "graph_term": vals["graph"], "total": vals["total"]})
    final = stage1_forward(dataset, params, config, "eval")[2].as_floats() if records else dict(initial)
    ckpt = Checkpoint("stage1", config.to_dict(), params,
                      {"algorithm": nx.RNG_ALGORITHM, "seed": config.seed, "epochs": config.stage1_epochs},
                      {"initial": initial, "final": final})
    return Stage1Result(ckpt, records, initial, final)


STAGE1_FIELDS = ["epoch", "feature_term", "structure_term", "graph_term", "total"]


# ---------------------------------------------------------------- stage 2

STAGE1_CARRIED = ("encoder.", "codebook.", "fusion.")


def _frozen_prefixes(config: TrainConfig):
    out = []
    if config.freeze_encoder:
        out.append("encoder.")
    if config.freeze_codebooks:
        out.append("codebook.")
    if config.freeze_fusion:
        out.append("fusion.")
    return tuple(out)


def _output_dim(dataset: GraphDataset) -> int:
    return dataset.labels.shape[1] if dataset.multilabel else dataset.num_classes


def init_stage2_params(dataset: GraphDataset, stage1: Checkpoint, config: TrainConfig, rng: Rng) -> dict:
    carried = {k: np.array(v) for k, v in stage1.params.items() if k.startswith(STAGE1_CARRIED)}
    expected = init_stage1_params(config, dataset.feat_dim, Rng(0))
    for k, v in expected.items():
        if not k.startswith(STAGE1_CARRIED):
            continue
        if k not in carried:
            raise ContractError(f"stage-1 checkpoint lacks {k!r}")
        if carried[k].shape != v.shape:
            raise ContractError(f"stage-1 {k!r} has shape {carried[k].shape}, config expects {v.shape}")
    carried.update(token_list_init(config.m, config.n, config.n_f, config.n_s, rng.child("tokenlist")))
    carried.update(attention_init(config.hidden_dim, dataset.num_classes, rng.child("attn"),
                                  config.attn_heads, _output_dim(dataset)))
    return carried


def vecformer_forward(dataset: GraphDataset, params: dict, config: TrainConfig, mode: str = "eval",
                      rng: Rng | None = None) -> dict:
    enc = config.encoder_config()
    h = encode(dataset, enc, params, mode, rng.child("encoder") if rng is not None else None)
    bundle = quantize_node(h, params["codebook.feature"], params["codebook.structure"],
                           SoftVQConfig(config.temperature), params, config.fusion_normalize)
    tokens = build_token_list(params["codebook.feature"], params["codebook.structure"],
                              params["tokenlist.W_F"], params["tokenlist.W_S"], params, config.fusion_normalize)
    z, weights = cross_attention(bundle.g, tokens.graph_tokens, params, config.attn_heads)
    return {"logits": classify(z, params), "weights": weights, "g": bundle.g, "tokens": tokens, "h": h}


def dense_baseline_init(dataset: GraphDataset, config: TrainConfig, rng: Rng) -> dict:
    d = config.hidden_dim
    params = {"input.weight": nx.glorot_uniform(dataset.feat_dim, d, rng.child("input")),
              "input.bias": np.zeros(d)}
    params.update(attention_init(d, dataset.num_classes, rng.child("attn"), config.attn_heads,
                                 _output_dim(dataset)))
    return params


def dense_baseline_forward(dataset: GraphDataset, params: dict, config: TrainConfig, mode: str = "eval",
                           rng: Rng | None = None) -> dict:
    """Plain transformer node classifier: input projection, full self-attention with residual."""
    x = Tensor(dataset.features)
    h = nx.elu(nx.matmul(x, nx.as_tensor(params["input.weight"])) + nx.as_tensor(params["input.bias"]))
    if mode == "train":
        h = nx.dropout(h, config.dropout, rng.child("dropout"), True)
    att, weights = dense_node_attention(h, params, config.attn_heads, dense_cap=max(config.dense_cap, 16384),
                                        return_weights=True)
    z = att + h
    return {"logits": classify(z, params), "weights": weights, "g": h}


def metric_name(dataset: GraphDataset) -> str:
    return "roc_auc" if dataset.binary else "accuracy"


def classification_loss(dataset: GraphDataset, logits, idx) -> Tensor:
    if dataset.multilabel:
        return binary_cross_entropy(logits, dataset.labels, idx)
    return cross_entropy(logits, dataset.labels, idx)


def positive_scores(dataset: GraphDataset, logits) -> np.ndarray:
    z = np.asarray(getattr(logits, "data", logits))
    if dataset.multilabel:
        return 1.0 / (1.0 + np.exp(-z))
    e = np.exp(z - z.max(axis=1, keepdims=True))
    return (e / e.sum(axis=1, keepdims=True))[:, -1]


def evaluate_logits(dataset: GraphDataset, logits, split: Split) -> dict:
    """Metric value for every non-empty split part (NaN when undefined)."""
    out = {}
    for part in ("train", "val", "test", "ood_test"):
        idx = getattr(split, part)
        if idx is None or len(idx) == 0:
            continue
        try:
            if metric_name(dataset) == "accuracy":
                out[part] = accuracy(logits, dataset.labels, idx, part).value
            else:
                out[part] = roc_auc(positive_scores(dataset, logits), dataset.labels, idx, part).value
        except UndefinedMetricError:
            out[part] = float("nan")
    return out


@dataclass
class FitResult:
    checkpoint: Checkpoint
    records: list
    best_epoch: int
    best_val: float


def train_step(dataset, train_idx, params: dict, trainable, forward, config: TrainConfig, opt: Adam,
               rng: Rng) -> float:
    """One full-batch forward/backward/update; ``params`` is updated in place.

    A non-finite loss returns before the update.
    """
    tracked = _tracked(params, trainable)
    with Tape({k: tracked[k] for k in trainable}) as tape:
        out = forward(dataset, tracked, config, "train", rng)
        loss = classification_loss(dataset, out["logits"], train_idx)
    lv = float(loss.data)
    if np.isfinite(lv):
        grads = nx.backward(tape, loss)
        del out, tape, tracked
        opt.step(params, grads, trainable)
    return lv


def _fit(dataset, split, params, trainable, forward, config: TrainConfig, stage: str, rng: Rng,
         max_epochs: int) -> FitResult:
    """Full-batch training on the train part with early stopping on validation."""
    if len(split.train) == 0:
        raise ContractError("empty training set")
    params = {k: np.array(v, dtype=np.float64) for k, v in params.items()}
    trainable = sorted(trainable)
    opt = Adam(config.lr, weight_decay=config.weight_decay)
    best_val, best_epoch, best = -np.inf, 0, {k: v.copy() for k, v in params.items()}
    bad, records, use_loss = 0, [], False
    for epoch in range(1, max_epochs + 1):
        lv = train_step(dataset, split.train, params, trainable, forward, config, opt, rng.child("epoch", epoch))
        if not np.isfinite(lv):
            raise TrainingError(f"non-finite {stage} loss at epoch {epoch}")
        eval_logits = forward(dataset, params, config, "eval")["logits"]
        scores = evaluate_logits(dataset, eval_logits, split)
        val = scores.get("val", float("nan"))
        if epoch == 1:
            # the val label mix never changes, so this choice holds for the whole run
            use_loss = not np.isfinite(val)
        if use_loss:
            val = -float(classification_loss(dataset, eval_logits, split.val if len(split.val) else split.train).data)
        records.append({"epoch": epoch, "loss": lv, **{f"{k}_{metric_name(dataset)}": v for k, v in scores.items()}})
        if val > best_val:
            best_val, best_epoch, bad = val, epoch, 0
            best = {k: v.copy() for k, v in params.items()}
        else:
            bad += 1
            if bad > config.patience:
                break
    ckpt = Checkpoint(stage, config.to_dict(), best,
                      {"algorithm": nx.RNG_ALGORITHM, "seed": config.seed, "epochs": len(records)},
                      {"best_epoch": best_epoch, "best_val": None if not np.isfinite(best_val) else best_val,
                       "metric": "neg_val_loss" if use_loss else metric_name(dataset)})
    return FitResult(ckpt, records, best_epoch, float(best_val))


def train_stage2(dataset: GraphDataset, split: Split, stage1: Checkpoint, config: TrainConfig) -> FitResult:
    """Finetune with graph-token cross-attention; returns the best-validation checkpoint."""
    rng = Rng(config.seed).child("stage2")
    params = init_stage2_params(dataset, stage1, config, rng.child("init"))
    frozen = _frozen_prefixes(config)
    trainable = [k for k in params if not k.startswith(frozen)]
    return _fit(dataset, split, params, trainable, vecformer_forward, config, "stage2", rng.child("fit"),
                config.stage2_epochs)


def stage2_gradients(dataset: GraphDataset, split: Split, params: dict, config: TrainConfig) -> dict:
    """One eval-mode gradient of the training loss; frozen groups report zeros."""
    frozen = _frozen_prefixes(config)
    trainable = [k for k in params if not k.startswith(frozen)]
    tracked = _tracked(params, trainable)
    with Tape(tracked) as tape:
        loss = classification_loss(dataset, vecformer_forward(dataset, tracked, config, "eval")["logits"],
                                   split.train)
    return nx.backward(tape, loss)


def train_dense_baseline(dataset: GraphDataset, split: Split, config: TrainConfig) -> FitResult:
    rng = Rng(config.seed).child("dense")
    params = dense_baseline_init(dataset, config, rng.child("init"))
    return _fit(dataset, split, params, list(params), dense_baseline_forward, config, "dense",
                rng.child("fit"), config.stage2_epochs)


@dataclass
class RunResult:
    stage1: Stage1Result
    stage2: FitResult


def train_vecformer(dataset: GraphDataset, split: Split, config: TrainConfig) -> RunResult:
    s1 = train_stage1(dataset, config)
    return RunResult(s1, train_stage2(dataset, split, s1.checkpoint, config))


# ---------------------------------------------------------------- grid search

def validate_space(space: dict) -> None:
    if not space or any(len(v) == 0 for v in space.values()):
        raise ConfigError("search space is empty")
    for key, values in space.items():
        if key in DECLARED_GRIDS:
            bad = [v for v in values if v not in DECLARED_GRIDS[key]]
            if bad:
                raise ConfigError(f"{key} values {bad} are outside the declared grid {DECLARED_GRIDS[key]}")
        elif key not in EXTENSION_KEYS:
            raise ConfigError(f"{key!r} is not a searchable hyperparameter")


def grid_search(dataset: GraphDataset, split: Split, space: dict, budget: int | None = None,
                base: TrainConfig | None = None, out_dir=None):
    """Sweep the grid (first ``budget`` points in product order) ranked by validation metric.

    Returns ``(best_config, leaderboard)``; the leaderboard is sorted by
    descending validation score, ties kept in grid order.
    """
    validate_space(space)
    base = base or TrainConfig()
    keys = list(space)
    points = list(itertools.product(*(space[k] for k in keys)))
    if budget is not None:
        points = points[:max(int(budget), 0)]
    if not points:
        raise ConfigError("budget leaves no grid point to run")
    rows = []
    for i, values in enumerate(points):
        cfg = base.replace(**dict(zip(keys, values)))
        run = train_vecformer(dataset, split, cfg)
        scores = evaluate_logits(dataset, vecformer_forward(dataset, run.stage2.checkpoint.params, cfg)["logits"],
                                 split)
        rows.append({"index": i, **dict(zip(keys, values)), "best_epoch": run.stage2.best_epoch,
                     "val": scores.get("val", float("nan")), "test": scores.get("test", float("nan")),
                     "config": cfg})
    key = lambda r: -r["val"] if np.isfinite(r["val"]) else np.inf
    rows.sort(key=key)
    if out_dir is not None:
        write_csv(Path(out_dir) / "leaderboard.csv",
                  [{k: v for k, v in r.items() if k != "config"} for r in rows])
    return rows[0]["config"], rows
