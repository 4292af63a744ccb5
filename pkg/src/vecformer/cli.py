"""Command-line entry point: ``vecformer <verb> [flags]``.

Verbs: gen {sbm,spurious,knn}, train-codebook, finetune, eval, diagnose,
ablate, bench. Every verb writes only under ``--out``. Exit status is 0 on
success, 2 on usage errors and 1 on runtime errors (one ``error:`` line on
stderr).
"""
from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path

import numpy as np

from . import evalbench as eb
from . import graphio as gi
from . import trainer as tr
from .errors import VecFormerError
from .metrics import des_score
from .numerics import Rng

log = logging.getLogger("vecformer")

STAGE1_FILE = "stage1.ckpt"
STAGE2_FILE = "stage2.ckpt"

# flag -> TrainConfig field; explicit flags override --config values
_OVERRIDES = {
    "lr": float, "weight_decay": float, "dropout": float, "hidden_dim": int, "m": int, "n": int,
    "n_f": int, "n_s": int, "temperature": float, "stage1_epochs": int, "stage2_epochs": int,
    "patience": int, "encoder": str,
}

# --n is the node-count list of ``bench``, so codebook sizes get longer names
_FLAG_NAMES = {"m": "feature-codes", "n": "structure-codes"}


def _ints(text: str) -> list[int]:
    try:
        return [int(t) for t in text.split(",") if t.strip()]
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected comma-separated integers, got {text!r}") from None


def _names(text: str) -> list[str]:
    return [t.strip() for t in text.split(",") if t.strip()]


def _global_flags() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(add_help=False)
    g = p.add_argument_group("global")
    g.add_argument("--seed", type=int, default=None, help="64-bit seed (overrides the config file)")
    g.add_argument("--config", type=Path, default=None, help="JSON TrainConfig; unknown keys are rejected")
    g.add_argument("--out", type=Path, required=True, help="output directory")
    g.add_argument("--verbose", action="store_true")
    return p


def _train_flags() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(add_help=False)
    g = p.add_argument_group("training overrides")
    for name, typ in _OVERRIDES.items():
        flag = _FLAG_NAMES.get(name, name.replace("_", "-"))
        g.add_argument("--" + flag, dest="cfg_" + name, type=typ, default=None)
    g.add_argument("--freeze", type=_names, default=None,
                   help="comma list of encoder,codebooks,fusion to freeze in stage 2")
    return p


def build_parser() -> argparse.ArgumentParser:
    common, train = _global_flags(), _train_flags()
    parser = argparse.ArgumentParser(prog="vecformer", description=__doc__.splitlines()[0])
    verbs = parser.add_subparsers(dest="verb", required=True, metavar="verb")

    gen = verbs.add_parser("gen", help="write a synthetic graph container")
    kinds = gen.add_subparsers(dest="kind", required=True, metavar="kind")
    sbm = kinds.add_parser("sbm", parents=[common], help="stochastic block model")
    spur = kinds.add_parser("spurious", parents=[common], help="SBM with a spurious-feature shift")
    for p in (sbm, spur):
        p.add_argument("--blocks", type=_ints, required=True)
        p.add_argument("--p-in", type=float, required=True)
        p.add_argument("--p-out", type=float, required=True)
        p.add_argument("--feat-dim", type=int, default=16)
        p.add_argument("--feat-signal", type=float, default=1.0)
    spur.add_argument("--spurious-dim", type=int, default=4)
    spur.add_argument("--id-corr", type=float, default=0.95)
    spur.add_argument("--ood-corr", type=float, default=0.05)
    knn = kinds.add_parser("knn", parents=[common], help="k-NN correlation graph with DE labels")
    knn.add_argument("--nodes", type=int, default=200)
    knn.add_argument("--samples", type=int, default=50)
    knn.add_argument("--k", type=int, default=10)
    knn.add_argument("--feat-dim", type=int, default=16)
    knn.add_argument("--perturb-target", type=int, default=0)
    knn.add_argument("--radius", type=int, default=1)

    s1 = verbs.add_parser("train-codebook", parents=[common, train], help="stage-1 codebook training")
    s1.add_argument("--data", type=Path, required=True)

    s2 = verbs.add_parser("finetune", parents=[common, train], help="stage-2 finetuning (or a grid search)")
    s2.add_argument("--data", type=Path, required=True)
    s2.add_argument("--stage1", type=Path, default=None, help="stage-1 run directory or checkpoint file")
    s2.add_argument("--grid", type=Path, default=None, help="JSON search space; runs both stages per point")
    s2.add_argument("--budget", type=int, default=None)
    s2.add_argument("--baseline", action="store_true", help="train the dense node-attention baseline instead")

    ev = verbs.add_parser("eval", parents=[common], help="metrics of a stage-2 checkpoint")
    ev.add_argument("--data", type=Path, required=True)
    ev.add_argument("--checkpoint", type=Path, required=True)

    dg = verbs.add_parser("diagnose", parents=[common], help="attention diagnostics and q.k positivity")
    dg.add_argument("--data", type=Path, required=True)
    dg.add_argument("--checkpoint", type=Path, required=True)
    dg.add_argument("--positive-qk", action="store_true", help="also evaluate the constrained positive mode")

    ab = verbs.add_parser("ablate", parents=[common, train], help="graph-token list size ablation")
    ab.add_argument("--data", type=Path, required=True)
    ab.add_argument("--sizes", type=_ints, default=list(eb.ABLATION_SIZES))
    ab.add_argument("--seeds", type=_ints, default=None, help="defaults to the global seed")

    bn = verbs.add_parser("bench", parents=[common, train], help="attention scaling benchmark")
    bn.add_argument("--n", type=_ints, required=True)
    bn.add_argument("--mechanisms", type=_names, default=list(eb.MECHANISMS))
    bn.add_argument("--trials", type=int, default=3)
    bn.add_argument("--epochs", type=int, default=1)
    bn.add_argument("--token-list-size", type=int, default=256)
    return parser


def load_config(args) -> tr.TrainConfig:
    cfg = tr.TrainConfig.from_json(args.config) if args.config else tr.TrainConfig()
    kw = {k: getattr(args, "cfg_" + k) for k in _OVERRIDES if getattr(args, "cfg_" + k, None) is not None}
    if args.seed is not None:
        kw["seed"] = args.seed
    freeze = getattr(args, "freeze", None)
    if freeze is not None:
        bad = set(freeze) - {"encoder", "codebooks", "fusion"}
        if bad:
            raise VecFormerError(f"unknown freeze group(s): {', '.join(sorted(bad))}")
        kw.update({f"freeze_{g}": True for g in freeze})
    return cfg.replace(**kw) if kw else cfg


def _seed(args) -> int:
    return args.seed if args.seed is not None else 0


def _ckpt_path(path: Path, default_name: str) -> Path:
    return path / default_name if path.is_dir() else path


def cmd_gen(args) -> None:
    rng = Rng(_seed(args))
    if args.kind == "sbm":
        ds = gi.gen_sbm(args.blocks, args.p_in, args.p_out, args.feat_dim, args.feat_signal, rng)
    elif args.kind == "spurious":
        base = gi.gen_sbm(args.blocks, args.p_in, args.p_out, args.feat_dim, args.feat_signal, rng.child("sbm"))
        ds = gi.gen_spurious_shift(base, args.spurious_dim, args.id_corr, args.ood_corr, rng.child("shift"))
    else:
        ds = gi.gen_knn_perturbation(args.nodes, args.samples, args.k, feat_dim=args.feat_dim,
                                     perturb_target=args.perturb_target, radius=args.radius, rng=rng)
    gi.save_graph(ds, args.out)


def cmd_train_codebook(args) -> None:
    cfg = load_config(args)
    ds = gi.load_graph(args.data)
    res = tr.train_stage1(ds, cfg)
    res.checkpoint.save(args.out / STAGE1_FILE)
    tr.write_csv(args.out / "stage1_loss.csv", res.records, tr.STAGE1_FIELDS)


def _split_for(ds, cfg) -> gi.Split:
    return gi.default_split(ds, Rng(cfg.seed).child("split"))


def cmd_finetune(args) -> None:
    cfg = load_config(args)
    ds = gi.load_graph(args.data)
    split = _split_for(ds, cfg)
    if args.grid is not None:
        space = json.loads(args.grid.read_text(encoding="utf-8"))
        best, rows = tr.grid_search(ds, split, space, args.budget, cfg, args.out)
        (args.out / "best_config.json").write_text(json.dumps(best.to_dict(), indent=2, sort_keys=True) + "\n",
                                                   encoding="utf-8")
        return
    if args.baseline:
        fit = tr.train_dense_baseline(ds, split, cfg)
    else:
        if args.stage1 is None:
            raise VecFormerError("finetune needs --stage1 (or --grid / --baseline)")
        s1 = tr.Checkpoint.load(_ckpt_path(args.stage1, STAGE1_FILE))
        fit = tr.train_stage2(ds, split, s1, cfg)
    fit.checkpoint.extra["split"] = split.to_dict()
    fit.checkpoint.save(args.out / STAGE2_FILE)
    tr.write_csv(args.out / "stage2_metrics.csv", fit.records)


def _load_stage2(args):
    ckpt = tr.Checkpoint.load(_ckpt_path(args.checkpoint, STAGE2_FILE))
    cfg = ckpt.train_config()
    ds = gi.load_graph(args.data)
    split = gi.Split.from_dict(ckpt.extra["split"]) if "split" in ckpt.extra else _split_for(ds, cfg)
    forward = tr.dense_baseline_forward if ckpt.stage == "dense" else tr.vecformer_forward
    return ckpt, cfg, ds, split, forward


def cmd_eval(args) -> None:
    ckpt, cfg, ds, split, forward = _load_stage2(args)
    out = forward(ds, ckpt.params, cfg, "eval")
    rows = eb.metric_rows(ds, out["logits"], split)
    if ds.meta.get("generator") == "knn":
        probs = tr.positive_scores(ds, out["logits"])
        rep = des_score(probs, np.flatnonzero(ds.labels == 1))
        rows.append({"name": "des", "split": "all", "value": rep.value, "n_evaluated": rep.n_evaluated})
    tr.write_csv(args.out / "metrics.csv", rows, ["name", "split", "value", "n_evaluated"])
    eb.write_attention(args.out / "attn.csv", out["weights"])


def cmd_diagnose(args) -> None:
    ckpt, cfg, ds, split, _ = _load_stage2(args)
    if ckpt.stage == "dense":
        diag = {"mechanism": eb.DENSE_NODE, "all": eb.diagnose_dense(ds, ckpt.params, cfg).to_dict()}
        if split.ood_test is not None:
            diag["ood_test"] = eb.diagnose_dense(ds, ckpt.params, cfg, rows=split.ood_test).to_dict()
        weights = tr.dense_baseline_forward(ds, ckpt.params, cfg)["weights"]
    else:
        diag = {"mechanism": eb.GRAPH_TOKEN, "all": eb.diagnose_vecformer(ds, ckpt.params, cfg).to_dict()}
        if split.ood_test is not None:
            diag["ood_test"] = eb.diagnose_vecformer(ds, ckpt.params, cfg, rows=split.ood_test).to_dict()
        if args.positive_qk:
            diag["positive_qk"] = eb.positivity_diagnostic(ds, ckpt.params, cfg)
        weights = tr.vecformer_forward(ds, ckpt.params, cfg)["weights"]
    eb.write_json(args.out / "diagnostics.json", diag)
    eb.write_attention(args.out / "attn.csv", weights)


def cmd_ablate(args) -> None:
    cfg = load_config(args)
    ds = gi.load_graph(args.data)
    seeds = args.seeds if args.seeds is not None else [cfg.seed]
    _, medians = eb.ablate_tokens(ds, _split_for(ds, cfg), args.sizes, cfg, seeds, args.out)
    tr.write_csv(args.out / "ablation_medians.csv", medians)


def cmd_bench(args) -> None:
    cfg = load_config(args)
    for mech in args.mechanisms:
        if mech not in eb.MECHANISMS:
            raise VecFormerError(f"unknown mechanism {mech!r}")
    eb.bench_scaling(args.n, args.mechanisms, cfg, Rng(cfg.seed), args.trials, args.epochs,
                     args.token_list_size, args.out)


COMMANDS = {"gen": cmd_gen, "train-codebook": cmd_train_codebook, "finetune": cmd_finetune,
            "eval": cmd_eval, "diagnose": cmd_diagnose, "ablate": cmd_ablate, "bench": cmd_bench}


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:  # argparse: --help gives 0, usage errors 2
        return int(exc.code or 0)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        args.out.mkdir(parents=True, exist_ok=True)
        COMMANDS[args.verb](args)
    except Exception as exc:  # noqa: BLE001 - every runtime failure maps to exit 1
        msg = " ".join(str(exc).split())
        print(f"error: {type(exc).__name__}: {msg}", file=sys.stderr)
        return 1
    return 0


if __name__ == "__main__":  # pragma: no cover
    sys.exit(main())
