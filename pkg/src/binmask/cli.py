"""Command-line interface.

Every command writes a report (``key = value`` lines plus tables) that echoes
its configuration, seeds and the package version. Exit codes: 0 ok, 1 user
error (bad flags, missing or malformed files, incompatible artifacts),
2 internal error.
"""
from __future__ import annotations

import argparse
import itertools
import logging
import sys
from pathlib import Path

import numpy as np

from . import __version__
from . import analysis as A
from . import experiments as X
from .data import ParseError, Vocab, gen_classification_task, gen_corpus, gen_tagging_task, load_tsv, save_tsv
from .masking import MaskingConfig
from .model import BERT_BASE, MaskPlan, TransformerConfig
from .persistence import (
    Checkpoint,
    FormatError,
    MaskArtifact,
    load_checkpoint,
    load_maskfile,
    save_checkpoint,
    save_maskfile,
    sniff,
    write_report,
)
from .tensor import DimensionError
from .training import (
    MASK_GRID,
    PAPER_GRID,
    TrainConfig,
    evaluate,
    model_from_checkpoint,
    model_from_masks,
    pretrain,
)

log = logging.getLogger("binmask")

USER_ERRORS = (ValueError, KeyError, IndexError, FileNotFoundError, IsADirectoryError, NotADirectoryError,
               PermissionError, ParseError, FormatError, DimensionError, A.UndefinedResultError)


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(f"{self.prog}: {message}")


def _floats(text):
    try:
        return [float(x) for x in text.split(",") if x.strip()]
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected comma-separated numbers, got {text!r}") from None


def _ints(text):
    try:
        return [int(x) for x in text.split(",") if x.strip()]
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected comma-separated integers, got {text!r}") from None


# --------------------------------------------------------------------------
# loading helpers
# --------------------------------------------------------------------------

def _pretrained(args) -> Checkpoint:
    if getattr(args, "pretrained", None):
        ck = load_checkpoint(args.pretrained)
    else:
        ck = X.load_toy_pretrained()
    if ck.config.get("regime") != "pretrain":
        raise ValueError(f"{args.pretrained} is not a pretrained checkpoint (regime {ck.config.get('regime')!r})")
    return ck


def _pretrained_name(args):
    return args.pretrained or f"<shipped {X.TOY_CHECKPOINT}>"


def _dataset(path, pretrained: Checkpoint, num_labels=None):
    arch = TransformerConfig.from_dict(pretrained.arch)
    ds = load_tsv(path, vocab_size=arch.vocab_size, max_len=arch.max_len, num_labels=num_labels)
    if ds.kind == "mlm-corpus":
        raise ValueError(f"{path} is an unlabelled corpus, a task dataset is needed")
    if ds.truncated:
        log.warning("%d sequences in %s truncated to max_len %d", ds.truncated, path, arch.max_len)
    return ds


def _load_model(path, pretrained: Checkpoint):
    kind = sniff(path)
    if kind == "maskfile":
        return model_from_masks(pretrained, load_maskfile(path))
    ck = load_checkpoint(path)
    if ck.config.get("regime") not in ("finetune",):
        raise ValueError(f"{path} holds a {ck.config.get('regime')!r} checkpoint, not a task model")
    if any(pretrained.arch[k] != v for k, v in ck.arch.items() if k != "num_labels"):
        raise ValueError(f"{path} was trained on a different architecture than the pretrained checkpoint")
    return model_from_checkpoint(ck)


def _dense(path, pretrained):
    kind = sniff(path)
    obj = load_maskfile(path) if kind == "maskfile" else load_checkpoint(path)
    return A.dense_endpoint(pretrained, obj), TransformerConfig.from_dict(
        obj.meta["arch"] if kind == "maskfile" else obj.arch)


def _plan(args, n_blocks):
    plan = MaskPlan.parse(args.mask_blocks, n_blocks, mask_pooler=not args.no_mask_pooler,
                          mask_classifier=not args.no_mask_classifier)
    plan.validate(n_blocks)
    return plan


def _report_path(args, default):
    return Path(args.report) if args.report else Path(default)


def _base_fields(args, command):
    out = {"command": command, "version": __version__}
    for k, v in sorted(vars(args).items()):
        if k in ("func", "report", "verbose"):
            continue
        out[f"arg.{k}"] = v
    return out


def _emit(args, command, fields, tables=None, default_report="report.txt"):
    path = _report_path(args, default_report)
    allf = _base_fields(args, command)
    allf.update(fields)
    write_report(path, allf, tables)
    for k, v in fields.items():
        print(f"{k} = {v}")
    print(f"report written to {path}")


# --------------------------------------------------------------------------
# commands
# --------------------------------------------------------------------------

def cmd_gen_data(args):
    voc = Vocab(args.vocab_size)
    sizes = {"train": args.train, "dev": args.dev, "test": args.test}
    if args.kind == "classification":
        ds = gen_classification_task(args.seed, voc, args.num_labels, sizes, args.variant)
    elif args.kind == "tagging":
        ds = gen_tagging_task(args.seed, voc, args.num_labels, sizes, rule=args.rule)
    else:
        ds = gen_corpus(args.seed, voc, args.train, args.length, max_len=args.max_len)
    save_tsv(ds, args.out)
    counts = {s: len(ds.split(s)) for s in ds.splits}
    _emit(args, "gen-data", {"kind": ds.kind, "num_labels": ds.num_labels, "split_sizes": counts},
          default_report=Path(args.out) / "report.txt")


def cmd_pretrain(args):
    arch = TransformerConfig(num_blocks=args.blocks, hidden=args.hidden, ff=args.ff, heads=args.heads,
                             vocab_size=args.vocab_size, max_len=args.max_len)
    corpus = load_tsv(args.corpus, kind="mlm-corpus", vocab_size=arch.vocab_size, max_len=arch.max_len)
    cfg = TrainConfig(lr=args.lr, regime="pretrain", max_epochs=args.epochs, patience=args.patience,
                      seed=args.seed, batch_size=args.batch_size)
    ck, res = pretrain(arch, corpus, cfg)
    save_checkpoint(ck, args.out)
    fields, tables = res.report()
    _emit(args, "pretrain", fields, tables, default_report=str(args.out) + ".report.txt")


def cmd_train(args):
    pre = _pretrained(args)
    task = _dataset(args.data, pre)
    plan = _plan(args, X.num_blocks(pre)) if args.regime == "mask" else None
    art, res = X.run_one(pre, task, args.regime, args.lr, args.seed, init_sparsity=args.init_sparsity, plan=plan,
                         max_epochs=args.epochs, patience=args.patience, batch_size=args.batch_size,
                         keep_scores=args.save_scores)
    if args.regime == "finetune":
        model = model_from_checkpoint(art)
        save_checkpoint(art, args.out)
    else:
        model = model_from_masks(pre, art)
        save_maskfile(art, args.out)
        if args.save_scores:
            side = Checkpoint({"kind": "mask-scores", "masking": art.masking, "version": __version__}, art.scores)
            save_checkpoint(side, str(args.out) + ".scores")
    res.test = evaluate(model, task, res.metric, "test") if task.split("test") else None
    fields, tables = res.report()
    fields["pretrained"] = _pretrained_name(args)
    _emit(args, "train", fields, tables, default_report=str(args.out) + ".report.txt")


def cmd_grid_search(args):
    pre = _pretrained(args)
    task = _dataset(args.data, pre)
    grid = args.grid or (PAPER_GRID if args.regime == "finetune" else MASK_GRID)
    kw = {}
    if args.regime == "mask":
        kw = {"init_sparsity": args.init_sparsity, "plan": _plan(args, X.num_blocks(pre))}
    gr = X.grid_search(pre, task, args.regime, seed=args.seed, grid=grid, **kw)
    rows = [[lr, score] for lr, score in gr.table]
    _emit(args, "grid-search", {"best_lr": gr.best_lr, "extensions": gr.extensions, "initial_grid": list(grid)},
          {"grid": (["lr", "best_dev"], rows)})


def cmd_eval(args):
    pre = _pretrained(args)
    rows = []
    for mpath in args.model:
        model = _load_model(mpath, pre)
        for dpath in args.data:
            ds = _dataset(dpath, pre)
            score = evaluate(model, ds, args.metric, args.split)
            rows.append([mpath, dpath, args.split, args.metric or ds.meta.get("metric", "accuracy"), score])
    _emit(args, "eval", {"evaluations": len(rows)}, {"eval": (["model", "data", "split", "metric", "value"], rows)})


def cmd_sweep_sparsity(args):
    pre = _pretrained(args)
    task = _dataset(args.data, pre)
    plan = _plan(args, X.num_blocks(pre))
    rows = X.sweep_sparsity(pre, task, args.sparsities, lr=args.lr, seeds=args.seeds, plan=plan)
    means = [[k[0], v] for k, v in X.mean_by(rows, (0,))]
    _emit(args, "sweep-sparsity", {"runs": len(rows)},
          {"runs": (["init_sparsity", "seed", "best_dev"], [list(r) for r in rows]),
           "mean": (["init_sparsity", "mean_best_dev"], means)})


def cmd_sweep_layers(args):
    pre = _pretrained(args)
    task = _dataset(args.data, pre)
    rows = X.sweep_layers(pre, task, args.direction, args.counts, lr=args.lr, seeds=args.seeds,
                          init_sparsity=args.init_sparsity)
    means = [[k[0], k[1], k[2], v] for k, v in X.mean_by(rows, (0, 1, 2))]
    _emit(args, "sweep-layers", {"runs": len(rows)},
          {"runs": (["direction", "count", "blocks", "seed", "best_dev"], [list(r) for r in rows]),
           "mean": (["direction", "count", "blocks", "mean_best_dev"], means)})


def cmd_analyze(args):
    arts = [load_maskfile(p) for p in args.masks]
    tables = {}
    for p, art in zip(args.masks, arts):
        cols, rows = A.mask_stats(art)
        tables[f"stats {p}"] = (cols, rows)
    pair_rows = []
    for (i, a), (j, b) in itertools.combinations(enumerate(arts), 2):
        diff = A.mask_set_diff(a, b, args.masks[i], args.masks[j])
        pair_rows.append([args.masks[i], args.masks[j], diff.overall, diff.shared_init])
        tables[f"s {args.masks[i]} {args.masks[j]}"] = diff.report()[1]["dissimilarity"]
    if pair_rows:
        tables["pairwise"] = (["mask1", "mask2", "s", "shared_init"], pair_rows)
    _emit(args, "analyze", {"mask_files": len(arts)}, tables)


def _arch_from_args(args):
    if args.arch == "bert-base":
        return BERT_BASE
    if args.arch == "toy":
        return TransformerConfig.from_dict(X.load_toy_pretrained().arch)
    return TransformerConfig.from_dict(load_checkpoint(args.arch).arch)


def _tasks(text):
    out = []
    for part in text.split(","):
        if not part.strip():
            continue
        name, _, k = part.partition(":")
        if not k:
            raise argparse.ArgumentTypeError(f"task {part!r} must look like NAME:NUM_LABELS")
        out.append((name.strip(), int(k)))
    return out


def cmd_memory(args):
    arch = _arch_from_args(args)
    plan = _plan(args, arch.num_blocks)
    rep = A.memory_report(arch, plan, args.tasks)
    fields, tables = rep.report()
    fields["plan"] = plan.describe()
    _emit(args, "memory", fields, tables)


def cmd_ensemble(args):
    pre = _pretrained(args)
    models = [_load_model(p, pre) for p in args.models]
    ds = _dataset(args.data, pre)
    modes = A.ENSEMBLE_MODES if args.mode == "all" else (args.mode,)
    metric = args.metric or ds.meta.get("metric") or ("micro_f1" if ds.kind == "tagging" else "accuracy")
    from .metrics import METRICS

    rows = []
    for m in modes:
        gold, pred = A.ensemble_predict(models, ds, m, args.split)
        rows.append([m, METRICS[metric](gold, pred)])
    singles = [[p, evaluate(mod, ds, metric, args.split)] for p, mod in zip(args.models, models)]
    _emit(args, "ensemble", {"metric": metric, "models": len(models)},
          {"ensemble": (["mode", metric], rows), "single": (["model", metric], singles)})


def cmd_connect(args):
    pre = _pretrained(args)
    w0, arch0 = _dense(args.a, pre)
    w1, arch1 = _dense(args.b, pre)
    if arch0 != arch1:
        raise ValueError("the two artifacts have different architectures")
    ds = _dataset(args.data, pre)
    path = A.PathSpec(w0, w1, arch0, label0=args.a, label1=args.b)
    grid = [i / (args.points - 1) for i in range(args.points)]
    fields = {"endpoint0": args.a, "endpoint1": args.b, "dataset": args.data}
    if args.linear:
        rows = A.eval_path(path, ds, args.points, split=args.split)
        fields["min_metric"] = min(r[2] for r in rows)
        _emit(args, "connect", fields, {"path": (["gamma", "loss", "metric"], [list(r) for r in rows])})
        return
    straight = A.CurveSpec.straight(path, args.bends)
    cfg = A.CurveTrainConfig(lr=args.lr, epochs=args.epochs, seed=args.seed, batch_size=args.batch_size)
    trained = A.train_bezier(straight, ds, cfg)
    before = A.curve_losses(straight, ds, grid, split="train")
    after = A.curve_losses(trained, ds, grid, split="train")
    dev = A.curve_losses(trained, ds, grid, split=args.split)
    fields.update({"bends": args.bends, "mean_loss_straight": float(np.mean([r[1] for r in before])),
                   "mean_loss_curve": float(np.mean([r[1] for r in after])),
                   "min_dev_metric_curve": min(r[2] for r in dev)})
    rows = [[t, b[1], a[1], d[2]] for t, b, a, d in zip(grid, before, after, dev)]
    _emit(args, "connect", fields, {"curve": (["t", "train_loss_straight", "train_loss_curve",
                                              f"{args.split}_metric_curve"], rows)})


def cmd_dump_embeddings(args):
    pre = _pretrained(args)
    model = _load_model(args.model, pre)
    ds = _dataset(args.data, pre)
    n = A.dump_cls_embeddings(model, ds, args.out, args.split)
    _emit(args, "dump-embeddings", {"lines": n, "dim": model.cfg.hidden},
          default_report=str(args.out) + ".report.txt")


# --------------------------------------------------------------------------
# parser
# --------------------------------------------------------------------------

def _add_plan_args(p, default="all"):
    p.add_argument("--mask-blocks", default=default,
                   help="all | none | bottom:C | top:C | A-B | i,j,k (default: %(default)s)")
    p.add_argument("--no-mask-pooler", action="store_true")
    p.add_argument("--no-mask-classifier", action="store_true")


def _add_common(p, pretrained=True):
    p.add_argument("--report", help="report path")
    p.add_argument("-v", "--verbose", action="store_true")
    if pretrained:
        p.add_argument("--pretrained", help="pretrained checkpoint (default: the shipped toy checkpoint)")


def build_parser():
    ap = _Parser(prog="binmask", description="Binary masking of frozen pretrained transformers.")
    ap.add_argument("--version", action="version", version=f"binmask {__version__}")
    sub = ap.add_subparsers(dest="command", parser_class=_Parser)
    sub.required = True

    p = sub.add_parser("gen-data", help="generate a synthetic dataset")
    _add_common(p, pretrained=False)
    p.add_argument("--kind", choices=("classification", "tagging", "corpus"), default="classification")
    p.add_argument("--out", required=True)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--num-labels", type=int, default=2)
    p.add_argument("--variant", choices=("A", "B"), default="A")
    p.add_argument("--rule", choices=("window", "copy"), default="window")
    p.add_argument("--train", type=int, default=500)
    p.add_argument("--dev", type=int, default=300)
    p.add_argument("--test", type=int, default=300)
    p.add_argument("--length", type=int, default=24, help="corpus sentence length")
    p.add_argument("--max-len", type=int, default=32)
    p.add_argument("--vocab-size", type=int, default=128)
    p.set_defaults(func=cmd_gen_data)

    p = sub.add_parser("pretrain", help="masked-language-model pretraining")
    _add_common(p, pretrained=False)
    p.add_argument("--corpus", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--lr", type=float, default=1e-3)
    p.add_argument("--epochs", type=int, default=10)
    p.add_argument("--patience", type=int, default=2)
    p.add_argument("--batch-size", type=int, default=32)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--blocks", type=int, default=4)
    p.add_argument("--hidden", type=int, default=64)
    p.add_argument("--ff", type=int, default=256)
    p.add_argument("--heads", type=int, default=4)
    p.add_argument("--max-len", type=int, default=32)
    p.add_argument("--vocab-size", type=int, default=128)
    p.set_defaults(func=cmd_pretrain)

    p = sub.add_parser("train", help="finetune or train masks on a task")
    _add_common(p)
    p.add_argument("--data", required=True)
    p.add_argument("--regime", choices=("finetune", "mask"), required=True)
    p.add_argument("--lr", type=float, required=True)
    p.add_argument("--seed", type=int, default=1)
    p.add_argument("--init-sparsity", type=float, default=0.05)
    _add_plan_args(p)
    p.add_argument("--epochs", type=int, default=10)
    p.add_argument("--patience", type=int, default=2)
    p.add_argument("--batch-size", type=int, default=32)
    p.add_argument("--save-scores", action="store_true", help="also write raw scores next to the mask file")
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("grid-search", help="learning-rate grid with border extension")
    _add_common(p)
    p.add_argument("--data", required=True)
    p.add_argument("--regime", choices=("finetune", "mask"), required=True)
    p.add_argument("--seed", type=int, default=1)
    p.add_argument("--grid", type=_floats)
    p.add_argument("--init-sparsity", type=float, default=0.05)
    _add_plan_args(p)
    p.set_defaults(func=cmd_grid_search)

    p = sub.add_parser("eval", help="evaluate task models on one or more datasets")
    _add_common(p)
    p.add_argument("--model", nargs="+", required=True)
    p.add_argument("--data", nargs="+", required=True)
    p.add_argument("--split", choices=("train", "dev", "test"), default="dev")
    p.add_argument("--metric", choices=("accuracy", "mcc", "micro_f1", "error_rate"))
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("sweep-sparsity", help="initial-sparsity sweep at a fixed lr")
    _add_common(p)
    p.add_argument("--data", required=True)
    p.add_argument("--sparsities", type=_floats, default=[0.05, 0.95])
    p.add_argument("--lr", type=float, default=X.SWEEP_LR)
    p.add_argument("--seeds", type=_ints, default=list(X.SEEDS))
    _add_plan_args(p)
    p.set_defaults(func=cmd_sweep_sparsity)

    p = sub.add_parser("sweep-layers", help="bottom-up / top-down layer-range sweep")
    _add_common(p)
    p.add_argument("--data", required=True)
    p.add_argument("--direction", choices=("bottom", "top", "both"), default="both")
    p.add_argument("--counts", type=_ints)
    p.add_argument("--lr", type=float, default=X.SWEEP_LR)
    p.add_argument("--seeds", type=_ints, default=list(X.SEEDS))
    p.add_argument("--init-sparsity", type=float, default=0.05)
    p.set_defaults(func=cmd_sweep_layers)

    p = sub.add_parser("analyze", help="mask statistics and pairwise dissimilarity")
    _add_common(p, pretrained=False)
    p.add_argument("--masks", nargs="+", required=True)
    p.set_defaults(func=cmd_analyze)

    p = sub.add_parser("memory", help="storage of finetuning vs masking over a task list")
    _add_common(p, pretrained=False)
    p.add_argument("--arch", default="bert-base", help="bert-base | toy | path to a checkpoint")
    _add_plan_args(p, default="2-11")
    p.add_argument("--tasks", type=_tasks, default=[("task1", 2)], help="NAME:K,NAME:K,...")
    p.set_defaults(func=cmd_memory)

    p = sub.add_parser("ensemble", help="label / logit / probability ensembles")
    _add_common(p)
    p.add_argument("--models", nargs="+", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--mode", choices=A.ENSEMBLE_MODES + ("all",), default="all")
    p.add_argument("--split", choices=("train", "dev", "test"), default="dev")
    p.add_argument("--metric", choices=("accuracy", "mcc", "micro_f1", "error_rate"))
    p.set_defaults(func=cmd_ensemble)

    p = sub.add_parser("connect", help="linear path or Bezier curve between two task models")
    _add_common(p)
    g = p.add_mutually_exclusive_group(required=True)
    g.add_argument("--linear", action="store_true")
    g.add_argument("--bezier", action="store_true")
    p.add_argument("--a", required=True, help="endpoint at gamma/t = 0")
    p.add_argument("--b", required=True, help="endpoint at gamma/t = 1")
    p.add_argument("--data", required=True)
    p.add_argument("--points", type=int, default=11)
    p.add_argument("--split", choices=("train", "dev", "test"), default="dev")
    p.add_argument("--bends", type=int, default=3)
    p.add_argument("--lr", type=float, default=1e-4)
    p.add_argument("--epochs", type=int, default=1)
    p.add_argument("--batch-size", type=int, default=32)
    p.add_argument("--seed", type=int, default=0)
    p.set_defaults(func=cmd_connect)

    p = sub.add_parser("dump-embeddings", help="write [CLS] vectors of the top block")
    _add_common(p)
    p.add_argument("--model", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--split", choices=("train", "dev", "test"), default="dev")
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_dump_embeddings)
    return ap


def main(argv=None) -> int:
    try:
        args = build_parser().parse_args(argv)
    except UsageError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(message)s")
    if getattr(args, "points", 11) < 2:
        print("error: --points must be at least 2", file=sys.stderr)
        return 1
    try:
        args.func(args)
    except USER_ERRORS as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    except Exception as exc:  # noqa: BLE001 - last-resort boundary
        log.exception("internal error")
        print(f"internal error: {exc}", file=sys.stderr)
        return 2
    return 0


if __name__ == "__main__":
    sys.exit(main())
