"""Adam, the three training regimes, evaluation and the learning-rate grid protocol."""
from __future__ import annotations

import logging
import math
import time
from dataclasses import asdict, dataclass, field
from typing import Callable, Dict, List, Optional

import numpy as np

from . import __version__
from .data import IGNORE, TaskDataset, collate, iter_batches, mlm_corrupt
from .masking import MaskedLinear, MaskingConfig
from .metrics import METRICS
from .model import (
    MaskPlan,
    TaskModel,
    TransformerConfig,
    apply_mask_plan,
    init_classifier,
    init_params,
    param_shapes,
)
from .persistence import Checkpoint, MaskArtifact
from .tensor import NonFiniteError, backward, cross_entropy, no_grad

log = logging.getLogger(__name__)

EVAL_BATCH = 64
PAPER_GRID = (1e-5, 3e-5, 5e-5, 7e-5, 9e-5)
MASK_GRID = (7e-5, 1e-4, 3e-4, 5e-4, 7e-4, 9e-4, 1e-3)
REGIMES = ("pretrain", "finetune", "mask")


@dataclass
class TrainConfig:
    lr: float
    regime: str = "finetune"
    batch_size: int = 32
    max_epochs: int = 10
    patience: int = 2
    seed: int = 0
    masking: Optional[MaskingConfig] = None
    plan: Optional[MaskPlan] = None

    def __post_init__(self):
        if not self.lr > 0:
            raise ValueError(f"lr must be > 0, got {self.lr}")
        if self.regime not in REGIMES:
            raise ValueError(f"unknown regime {self.regime!r}")
        if self.patience > self.max_epochs:
            raise ValueError("patience cannot exceed max_epochs")
        if self.regime == "mask":
            if self.masking is None:
                self.masking = MaskingConfig(seed=self.seed)
            if self.plan is None:
                raise ValueError("mask regime needs a MaskPlan")

    def echo(self):
        d = {"lr": self.lr, "regime": self.regime, "batch_size": self.batch_size,
             "max_epochs": self.max_epochs, "patience": self.patience, "seed": self.seed,
             "schedule": "constant", "weight_decay": 0.0}
        if self.masking is not None:
            d["masking"] = self.masking.to_dict()
        if self.plan is not None:
            d["plan"] = self.plan.describe()
        return d


# --------------------------------------------------------------------------
# Adam
# --------------------------------------------------------------------------

@dataclass
class AdamState:
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    step: int = 0
    m: Dict[str, np.ndarray] = field(default_factory=dict)
    v: Dict[str, np.ndarray] = field(default_factory=dict)


def adam_step(params, state: AdamState, lr: float):
    """One bias-corrected Adam update of ``params`` (a list of ``(name, Tensor)``).

    Tensors without a gradient are left untouched.
    """
    for name, t in params:
        if t.grad is not None and not np.all(np.isfinite(t.grad)):
            raise NonFiniteError(f"non-finite gradient for {name}")
    state.step += 1
    b1, b2 = state.beta1, state.beta2
    c1 = 1.0 - b1 ** state.step
    c2 = 1.0 - b2 ** state.step
    for name, t in params:
        g = t.grad
        if g is None:
            continue
        m = state.m.get(name)
        if m is None:
            m = state.m[name] = np.zeros_like(t.data)
            state.v[name] = np.zeros_like(t.data)
        v = state.v[name]
        m *= np.float32(b1)
        m += np.float32(1 - b1) * g
        v *= np.float32(b2)
        v += np.float32(1 - b2) * (g * g)
        mhat = m / np.float32(c1)
        vhat = v / np.float32(c2)
        t.data -= np.float32(lr) * mhat / (np.sqrt(vhat) + np.float32(state.eps))


# --------------------------------------------------------------------------
# results
# --------------------------------------------------------------------------

@dataclass
class RunResult:
    regime: str
    metric: str
    higher_is_better: bool = True
    initial_dev: float = float("nan")
    train_loss: List[float] = field(default_factory=list)
    dev: List[float] = field(default_factory=list)
    best_epoch: int = 0
    test: Optional[float] = None
    wall_clock: float = 0.0
    sparsity: Dict[str, float] = field(default_factory=dict)
    config: dict = field(default_factory=dict)

    @property
    def best_dev(self):
        return self.dev[self.best_epoch - 1] if self.best_epoch else self.initial_dev

    @property
    def epochs_run(self):
        return len(self.dev)

    def report(self):
        """Fields and tables for a report file (wall-clock is left out so reports are reproducible)."""
        fields = {"regime": self.regime, "metric": self.metric, "best_epoch": self.best_epoch,
                  "best_dev": self.best_dev, "initial_dev": self.initial_dev,
                  "epochs_run": self.epochs_run, "config": self.config, "version": __version__}
        if self.test is not None:
            fields["test"] = self.test
        tables = {"epochs": (["epoch", "train_loss", f"dev_{self.metric}"],
                             [[i + 1, l, d] for i, (l, d) in enumerate(zip(self.train_loss, self.dev))])}
        if self.sparsity:
            tables["sparsity"] = (["layer", "sparsity"], [[k, v] for k, v in self.sparsity.items()])
        return fields, tables


# --------------------------------------------------------------------------
# evaluation
# --------------------------------------------------------------------------

def head_for(kind: str) -> str:
    return {"classification": "cls", "tagging": "tag", "mlm-corpus": "mlm"}[kind]


def predict(model: TaskModel, items, kind, batch_size=EVAL_BATCH):
    """Gold and predicted labels; tagging returns only non-pad positions."""
    golds, preds = [], []
    with no_grad():
        for batch in iter_batches(items, kind, model.cfg.max_len, batch_size):
            lg = model.logits(batch.ids, batch.attn).data
            p = lg.argmax(axis=-1)
            if kind == "classification":
                golds.append(batch.labels)
                preds.append(p)
            else:
                keep = batch.labels != IGNORE
                golds.append(batch.labels[keep])
                preds.append(p[keep])
    if not golds:
        return np.zeros(0, np.int64), np.zeros(0, np.int64)
    return np.concatenate(golds), np.concatenate(preds)


def evaluate(model: TaskModel, dataset: TaskDataset, metric=None, split="dev") -> float:
    """Score ``model`` on ``dataset[split]``; works across datasets of the same kind and label count."""
    metric = metric or dataset.meta.get("metric") or default_metric(dataset.kind)
    if metric not in METRICS:
        raise ValueError(f"unknown metric {metric!r}")
    if dataset.kind == "mlm-corpus":
        raise ValueError("task metrics do not apply to an MLM corpus")
    if (dataset.kind == "tagging") != (model.head == "tag"):
        raise ValueError(f"{dataset.kind} data cannot be scored with a {model.head!r}-head model")
    if metric == "micro_f1" and dataset.kind != "tagging":
        raise ValueError("micro_f1 is defined for tagging tasks")
    if dataset.num_labels != model.cfg.num_labels:
        raise ValueError(f"dataset has {dataset.num_labels} labels, model {model.cfg.num_labels}")
    y, p = predict(model, dataset.split(split), dataset.kind)
    return METRICS[metric](y, p)


def default_metric(kind):
    return "micro_f1" if kind == "tagging" else "accuracy"


def mlm_eval(model: TaskModel, items, seed, batch_size=EVAL_BATCH):
    """Mean masked-token loss and accuracy with a fixed corruption stream."""
    total, correct, count = 0.0, 0, 0
    with no_grad():
        for bi, batch in enumerate(iter_batches(items, "mlm-corpus", model.cfg.max_len, batch_size)):
            inp, tgt = mlm_corrupt(batch.ids, [seed, 0, bi], model.cfg.vocab_size)
            lg = model.logits(inp, batch.attn)
            n = int(np.count_nonzero(tgt != IGNORE))
            if not n:
                continue
            total += cross_entropy(lg, tgt).item() * n
            keep = tgt != IGNORE
            correct += int(np.count_nonzero(lg.data.argmax(-1)[keep] == tgt[keep]))
            count += n
    if not count:
        return 0.0, 0.0
    return total / count, correct / count


# --------------------------------------------------------------------------
# training loop
# --------------------------------------------------------------------------

def _fit(model, train_items, kind, cfg: TrainConfig, dev_fn, loss_fn, snapshot_fn, result: RunResult):
    params = model.trainable()
    state = AdamState()
    rng = np.random.default_rng([cfg.seed, 11])
    better = (lambda a, b: a > b) if result.higher_is_better else (lambda a, b: a < b)
    result.initial_dev = dev_fn()
    best, snap, bad = None, None, 0
    t0 = time.perf_counter()
    for epoch in range(1, cfg.max_epochs + 1):
        order = rng.permutation(len(train_items))
        losses = []
        for bi, batch in enumerate(iter_batches(train_items, kind, model.cfg.max_len, cfg.batch_size, order)):
            model.zero_grad()
            loss = loss_fn(batch, epoch, bi)
            backward(loss)
            adam_step(params, state, cfg.lr)
            losses.append(loss.item())
        result.train_loss.append(float(np.mean(losses)) if losses else 0.0)
        dev = dev_fn()
        result.dev.append(dev)
        log.info("%s epoch %d loss %.4f dev %s %.4f", cfg.regime, epoch, result.train_loss[-1], result.metric, dev)
        if best is None or better(dev, best):
            best, bad = dev, 0
            result.best_epoch = epoch
            snap = snapshot_fn()
        else:
            bad += 1
            if bad >= cfg.patience:
                break
    result.wall_clock = time.perf_counter() - t0
    return snap


def _dense_snapshot(model: TaskModel):
    return {n: t.data.copy() for n, t in model.params.items()}


def pretrain(arch: TransformerConfig, corpus: TaskDataset, cfg: TrainConfig):
    """Masked-language-model training of every parameter from a seeded init."""
    model = TaskModel(arch, init_params(arch, cfg.seed, head="mlm"), head="mlm")
    model.set_trainable()
    result = RunResult("pretrain", "mlm_loss", higher_is_better=False, config=cfg.echo())
    dev_items = corpus.split("dev")

    def loss_fn(batch, epoch, bi):
        inp, tgt = mlm_corrupt(batch.ids, [cfg.seed, epoch, bi], arch.vocab_size)
        return cross_entropy(model.logits(inp, batch.attn), tgt)

    snap = _fit(model, corpus.split("train"), "mlm-corpus", cfg,
                lambda: mlm_eval(model, dev_items, cfg.seed)[0], loss_fn, lambda: _dense_snapshot(model), result)
    config = {"arch": arch.to_dict(), "head": "mlm", "regime": "pretrain", "seed": cfg.seed,
              "train": cfg.echo(), "best_dev_mlm_loss": result.best_dev, "version": __version__}
    return Checkpoint(config, snap), result


def task_arch(pretrained: Checkpoint, task: TaskDataset) -> TransformerConfig:
    return TransformerConfig.from_dict(pretrained.arch).replace(num_labels=task.num_labels)


def _encoder_params(pretrained: Checkpoint, arch: TransformerConfig, classifier: np.ndarray):
    shapes = param_shapes(arch, "cls")
    params = {n: pretrained.params[n] for n in shapes if n != "classifier.weight"}
    params["classifier.weight"] = classifier
    return params


def _task_loss(model, kind):
    def loss_fn(batch, epoch, bi):
        return cross_entropy(model.logits(batch.ids, batch.attn), batch.labels)
    return loss_fn


def finetune(pretrained: Checkpoint, task: TaskDataset, cfg: TrainConfig, metric=None):
    """Random classifier on top, then every parameter updated; best dev epoch returned."""
    arch = task_arch(pretrained, task)
    head = head_for(task.kind)
    model = TaskModel(arch, _encoder_params(pretrained, arch, init_classifier(arch, cfg.seed)), head=head)
    model.set_trainable()
    metric = metric or task.meta.get("metric") or default_metric(task.kind)
    result = RunResult("finetune", metric, config=cfg.echo())
    snap = _fit(model, task.split("train"), task.kind, cfg, lambda: evaluate(model, task, metric),
                _task_loss(model, task.kind), lambda: _dense_snapshot(model), result)
    config = {"arch": arch.to_dict(), "head": head, "regime": "finetune", "seed": cfg.seed,
              "train": cfg.echo(), "task": task.meta, "metric": metric, "dev_metric": result.best_dev,
              "eval_batch": EVAL_BATCH, "version": __version__}
    ckpt = Checkpoint(config, {n: snap[n] for n in param_shapes(arch, "cls")})
    return ckpt, result


def train_masks(pretrained: Checkpoint, task: TaskDataset, cfg: TrainConfig, metric=None, keep_scores=False):
    """Learn binary masks over the frozen pretrained weights and a frozen random classifier."""
    arch = task_arch(pretrained, task)
    head = head_for(task.kind)
    classifier = init_classifier(arch, cfg.seed)
    model = TaskModel(arch, _encoder_params(pretrained, arch, classifier), head=head)
    apply_mask_plan(model, cfg.plan, cfg.masking)
    metric = metric or task.meta.get("metric") or default_metric(task.kind)
    result = RunResult("mask", metric, config=cfg.echo())

    def snapshot():
        return {n: (m.mask, m.scores.data.copy()) for n, m in model.masked.items()}

    snap = _fit(model, task.split("train"), task.kind, cfg, lambda: evaluate(model, task, metric),
                _task_loss(model, task.kind), snapshot, result)
    masks = {n: mk for n, (mk, _) in snap.items()}
    result.sparsity = {n: float(np.count_nonzero(mk == 0)) / mk.size for n, mk in masks.items()}
    meta = {"arch": arch.to_dict(), "head": head, "regime": "mask", "seed": cfg.seed, "train": cfg.echo(),
            "task": task.meta, "metric": metric, "dev_metric": result.best_dev, "eval_batch": EVAL_BATCH,
            "pretrained": {"seed": pretrained.config.get("seed"), "regime": pretrained.config.get("regime")},
            "version": __version__}
    art = MaskArtifact(cfg.masking.tau, cfg.plan.describe(), cfg.masking.to_dict(), masks,
                       {"classifier.weight": classifier}, meta)
    if keep_scores:
        art.scores = {n: sc for n, (_, sc) in snap.items()}
    return art, result


# --------------------------------------------------------------------------
# reconstruction
# --------------------------------------------------------------------------

def model_from_checkpoint(ckpt: Checkpoint) -> TaskModel:
    arch = TransformerConfig.from_dict(ckpt.arch)
    head = ckpt.config.get("head", "cls")
    return TaskModel(arch, ckpt.params, head=head)


def model_from_masks(pretrained: Checkpoint, art: MaskArtifact) -> TaskModel:
    """Pretrained weights + stored binary masks + stored frozen classifier."""
    arch = TransformerConfig.from_dict(art.meta["arch"])
    if any(pretrained.arch[k] != v for k, v in arch.to_dict().items() if k != "num_labels"):
        raise ValueError("mask file was trained against a different architecture")
    model = TaskModel(arch, _encoder_params(pretrained, arch, art.floats["classifier.weight"]),
                      head=art.meta.get("head", "cls"))
    model.set_trainable(())
    for n, mk in art.masks.items():
        W = model.params.pop(n)
        model.masked[n] = MaskedLinear.from_mask(W.data, mk, art.tau, name=n)
    model.plan = MaskPlan.from_description(art.plan)
    return model


# --------------------------------------------------------------------------
# learning-rate grid
# --------------------------------------------------------------------------

_LADDER = (1, 3, 5, 7, 9)


def _decompose(lr):
    e = math.floor(math.log10(lr) + 1e-9)
    return round(lr / 10 ** e, 6), e


def _mk(m, e):
    return float(f"{m:g}e{e}")


def next_lr_up(lr):
    m, e = _decompose(lr)
    for cand in _LADDER:
        if cand > m + 1e-9:
            return _mk(cand, e)
    return _mk(1, e + 1)


def next_lr_down(lr):
    m, e = _decompose(lr)
    for cand in reversed(_LADDER):
        if cand < m - 1e-9:
            return _mk(cand, e)
    return _mk(9, e - 1)


@dataclass
class GridResult:
    best_lr: float
    table: List[tuple]
    extensions: int


def lr_grid_search(objective: Callable[[float], float], grid=PAPER_GRID, max_extensions=12) -> GridResult:
    """Evaluate ``objective`` on ``grid``; while the best lr sits on a border, extend outward.

    Extensions follow the 1-3-5-7-9 ladder per decade. Ties go to the smaller lr.
    """
    table = {float(lr): objective(float(lr)) for lr in sorted(grid)}
    ext = 0
    while ext < max_extensions:
        lrs = sorted(table)
        scores = [table[x] for x in lrs]
        best = int(np.argmax(scores))
        if len(lrs) > 1 and 0 < best < len(lrs) - 1:
            break
        new = next_lr_down(lrs[0]) if best == 0 else next_lr_up(lrs[-1])
        table[new] = objective(new)
        ext += 1
    lrs = sorted(table)
    best = lrs[int(np.argmax([table[x] for x in lrs]))]
    return GridResult(best, [(x, table[x]) for x in lrs], ext)
