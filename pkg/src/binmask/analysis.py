"""Diagnostics over trained artifacts.

Mask dissimilarity, memory accounting, ensembles, [CLS] embedding dumps and
mode connectivity (straight line and Bézier curve) between two dense models.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field
from decimal import Decimal
from typing import Dict, List, Optional, Sequence

import numpy as np

from .data import IGNORE, TaskDataset, iter_batches
from .masking import MaskingConfig, binarize, init_scores
from .model import HEADS, MaskPlan, TaskModel, TransformerConfig, init_classifier, maskable_count, param_shapes
from .persistence import Checkpoint, MaskArtifact, atomic_write_bytes
from .tensor import Tensor, backward, cross_entropy, no_grad, stack_weighted
from .training import AdamState, EVAL_BATCH, adam_step, default_metric, evaluate, predict


class UndefinedResultError(ArithmeticError):
    pass


# --------------------------------------------------------------------------
# mask dissimilarity
# --------------------------------------------------------------------------

def _l1(a, b) -> int:
    return int(np.count_nonzero(np.asarray(a) != np.asarray(b)))


def _check_binary(*masks):
    shape = np.shape(masks[0])
    for m in masks:
        if np.shape(m) != shape:
            raise ValueError(f"mask shapes differ: {shape} vs {np.shape(m)}")
        if np.any((np.asarray(m) != 0) & (np.asarray(m) != 1)):
            raise ValueError("masks must be binary")


def dissimilarity_s(init1, trained1, init2, trained2) -> float:
    """``|tr1 - tr2|_1 / (|tr1 - init1|_1 + |tr2 - init2|_1)`` over binary masks.

    The denominator is the total number of bits flipped by the two training
    runs; when neither run changed anything the ratio is undefined.
    """
    _check_binary(init1, trained1, init2, trained2)
    num = _l1(trained1, trained2)
    den = _l1(trained1, init1) + _l1(trained2, init2)
    if den == 0:
        raise UndefinedResultError("neither run changed its mask; s is undefined")
    return num / den


def initial_masks(art: MaskArtifact) -> Dict[str, np.ndarray]:
    """Regenerate the init masks of ``art`` from its masking config."""
    cfg = MaskingConfig(**art.masking)
    return {n: binarize(init_scores(m.shape, cfg, key=n), cfg.tau) for n, m in art.masks.items()}


@dataclass
class MaskSetDiff:
    task1: str
    task2: str
    layers: List[str]
    s: Dict[str, Optional[float]]  # None where a layer flipped no bits in either run
    overall: float
    shared_init: bool

    def report(self):
        fields = {"task1": self.task1, "task2": self.task2, "shared_init": self.shared_init, "s_overall": self.overall}
        rows = [[n, "undefined" if self.s[n] is None else self.s[n]] for n in self.layers]
        return fields, {"dissimilarity": (["layer", "s"], rows)}


def mask_set_diff(art1: MaskArtifact, art2: MaskArtifact, task1="task1", task2="task2") -> MaskSetDiff:
    """Layer-wise and pooled s between two mask files over their shared layers."""
    layers = [n for n in art1.masks if n in art2.masks and art1.masks[n].shape == art2.masks[n].shape]
    if not layers:
        raise ValueError("the two mask files share no layer of equal shape")
    i1, i2 = initial_masks(art1), initial_masks(art2)
    per, num, den = {}, 0, 0
    for n in layers:
        a = _l1(art1.masks[n], art2.masks[n])
        b = _l1(art1.masks[n], i1[n]) + _l1(art2.masks[n], i2[n])
        per[n] = a / b if b else None
        num += a
        den += b
    if den == 0:
        raise UndefinedResultError("neither run changed its masks; s is undefined")
    return MaskSetDiff(task1, task2, layers, per, num / den, art1.masking == art2.masking)


def mask_stats(art: MaskArtifact):
    """Per-layer sparsity of the trained masks and the bits flipped since init."""
    init = initial_masks(art)
    rows = []
    for n, m in art.masks.items():
        rows.append([n, int(m.size), float(np.count_nonzero(m == 0)) / m.size,
                     float(np.count_nonzero(init[n] == 0)) / m.size, _l1(m, init[n])])
    return ["layer", "size", "sparsity", "init_sparsity", "flipped"], rows


# --------------------------------------------------------------------------
# memory accounting
# --------------------------------------------------------------------------

def pretrained_param_count(arch: TransformerConfig) -> int:
    """Float parameters of the encoder plus pooler (no task head)."""
    shapes = param_shapes(arch, "cls")
    return sum(math.prod(s) for n, s in shapes.items() if n != "classifier.weight")


def _kb(nbytes) -> Decimal:
    return Decimal(nbytes) / Decimal(1000)


@dataclass
class MemoryReport:
    """Cumulative storage of finetuning vs masking as tasks are added.

    Finetuning keeps one float model per task (the first task reuses the
    pretrained copy and only adds its classifier). Masking keeps one shared
    float model, one frozen random classifier per distinct label count, and
    per task a bit mask over the planned matrices plus its classifier.
    """

    pretrained_params: int
    mask_bits_per_task: int
    rows: List[dict] = field(default_factory=list)

    @property
    def pretrained_kb(self) -> Decimal:
        return _kb(4 * self.pretrained_params)

    @property
    def mask_kb_per_task(self) -> Decimal:
        return _kb(Decimal(self.mask_bits_per_task) / 8)

    def totals(self):
        return self.rows[-1] if self.rows else None

    def report(self):
        fields = {"pretrained_params": self.pretrained_params, "pretrained_kb": str(self.pretrained_kb),
                  "mask_bits_per_task": self.mask_bits_per_task, "mask_kb_per_task": str(self.mask_kb_per_task)}
        cols = ["task", "num_labels", "ft_params_added", "ft_kb_added", "mask_float_params_added",
                "mask_bits_added", "mask_kb_added", "ft_kb_total", "mask_kb_total"]
        rows = [[r[c] if not isinstance(r[c], Decimal) else str(r[c]) for c in cols] for r in self.rows]
        return fields, {"memory": (cols, rows)}


def memory_report(arch: TransformerConfig, plan: MaskPlan, tasks: Sequence) -> MemoryReport:
    """Exact arithmetic; ``tasks`` is a list of ``(name, num_labels)`` pairs."""
    base = pretrained_param_count(arch)
    shared_bits = maskable_count(arch, plan, include_classifier=False)
    rep = MemoryReport(base, shared_bits)
    d = arch.hidden
    ft_total = mask_total = _kb(4 * base)
    seen = set()
    for i, (name, k) in enumerate(tasks):
        k = int(k)
        if k < 1:
            raise ValueError(f"task {name!r} needs at least one label")
        clf = d * k
        ft_params = clf if i == 0 else clf + base
        new_floats = 0 if k in seen else clf
        seen.add(k)
        bits = shared_bits + (clf if plan.mask_classifier else 0)
        mask_kb = _kb(Decimal(bits) / 8)
        ft_kb = _kb(4 * ft_params)
        ft_total += ft_kb
        mask_total += _kb(4 * new_floats) + mask_kb
        rep.rows.append({"task": name, "num_labels": k, "ft_params_added": ft_params, "ft_kb_added": ft_kb,
                         "mask_float_params_added": new_floats, "mask_bits_added": bits, "mask_kb_added": mask_kb,
                         "ft_kb_total": ft_total, "mask_kb_total": mask_total})
    return rep


# --------------------------------------------------------------------------
# ensembles
# --------------------------------------------------------------------------

ENSEMBLE_MODES = ("labels", "logits", "probs")


def majority_vote(labels, num_classes=None):
    """Column-wise vote over ``labels`` [models, N]; ties go to the lowest class index."""
    labels = np.asarray(labels, dtype=np.int64)
    if labels.ndim == 1:
        labels = labels[:, None]
    k = int(labels.max()) + 1 if num_classes is None else int(num_classes)
    counts = np.zeros((labels.shape[1], k), dtype=np.int64)
    for row in labels:
        counts[np.arange(labels.shape[1]), row] += 1
    return counts.argmax(axis=1)  # argmax returns the first maximum


def _softmax(x):
    x = np.asarray(x, dtype=np.float64)
    e = np.exp(x - x.max(axis=-1, keepdims=True))
    return e / e.sum(axis=-1, keepdims=True)


def combine_predictions(outputs: Sequence[np.ndarray], mode: str):
    """Combine per-model logits ``[..., K]`` into predicted labels ``[...]``."""
    if mode not in ENSEMBLE_MODES:
        raise ValueError(f"mode must be one of {ENSEMBLE_MODES}")
    if len(outputs) < 2:
        raise ValueError("an ensemble needs at least two models")
    shapes = {np.shape(o) for o in outputs}
    if len(shapes) != 1:
        raise ValueError(f"models disagree on output shape: {sorted(shapes)}")
    outs = [np.asarray(o, dtype=np.float64) for o in outputs]
    if mode == "labels":
        votes = np.stack([o.argmax(-1).reshape(-1) for o in outs])
        return majority_vote(votes, outs[0].shape[-1]).reshape(outs[0].shape[:-1])
    if mode == "logits":
        return np.mean(outs, axis=0).argmax(-1)
    return np.mean([_softmax(o) for o in outs], axis=0).argmax(-1)


def model_logits(model: TaskModel, items, kind, batch_size=EVAL_BATCH):
    """Stacked logits; classification gives [N, K], tagging the non-pad tokens [T, K]."""
    chunks = []
    with no_grad():
        for batch in iter_batches(items, kind, model.cfg.max_len, batch_size):
            lg = model.logits(batch.ids, batch.attn).data
            if kind == "classification":
                chunks.append(lg)
            else:
                chunks.append(lg[batch.labels != IGNORE])
    return np.concatenate(chunks) if chunks else np.zeros((0, model.cfg.num_labels), np.float32)


def ensemble_predict(models: Sequence[TaskModel], dataset: TaskDataset, mode: str, split="dev"):
    """Gold labels and ensemble predictions on ``dataset[split]``."""
    dims = {m.cfg.num_labels for m in models}
    if len(dims) != 1:
        raise ValueError(f"models have different output sizes {sorted(dims)}")
    items = dataset.split(split)
    outs = [model_logits(m, items, dataset.kind) for m in models]
    gold, _ = predict(models[0], items, dataset.kind)
    return gold, combine_predictions(outs, mode)


# --------------------------------------------------------------------------
# linear interpolation
# --------------------------------------------------------------------------

def _check_manifest(a: Dict[str, np.ndarray], b: Dict[str, np.ndarray]):
    if list(a) != list(b):
        only = sorted(set(a) ^ set(b))
        raise ValueError(f"endpoint manifests differ: {only[:5] or 'order'}")
    for n in a:
        if np.shape(a[n]) != np.shape(b[n]):
            raise ValueError(f"{n}: shapes {np.shape(a[n])} and {np.shape(b[n])} differ")


@dataclass
class PathSpec:
    w0: Dict[str, np.ndarray]
    w1: Dict[str, np.ndarray]
    arch: TransformerConfig
    head: str = "cls"
    label0: str = "w0"
    label1: str = "w1"

    def __post_init__(self):
        _check_manifest(self.w0, self.w1)

    def swapped(self) -> "PathSpec":
        return PathSpec(self.w1, self.w0, self.arch, self.head, self.label1, self.label0)


def line_coefficients(gamma: float):
    """``(a, b)`` with ``W(gamma) = a * W0 + b * W1``.

    For ``gamma >= 1/2`` this is ``(1 - gamma, gamma)``, where the subtraction is
    exact. Below 1/2 the pair is built from ``1 - gamma`` instead, which makes
    the swapped path at ``1 - gamma`` use exactly the same two numbers.
    """
    g = float(gamma)
    if g >= 0.5:
        return 1.0 - g, g
    a = 1.0 - g
    return a, 1.0 - a


def interpolate_params(w0, w1, gamma):
    g = float(gamma)
    if not 0.0 <= g <= 1.0:
        raise ValueError(f"gamma must lie in [0, 1], got {gamma}")
    if g == 0.0:
        return {n: np.array(v, dtype=np.float32) for n, v in w0.items()}
    if g == 1.0:
        return {n: np.array(v, dtype=np.float32) for n, v in w1.items()}
    a, b = line_coefficients(g)
    out = {}
    for n in w0:
        x = np.asarray(w0[n], dtype=np.float64)
        y = np.asarray(w1[n], dtype=np.float64)
        out[n] = (a * x + b * y).astype(np.float32)
    return out


def interpolate_linear(spec: PathSpec, gamma) -> TaskModel:
    return TaskModel(spec.arch, interpolate_params(spec.w0, spec.w1, gamma), head=spec.head)


def dense_endpoint(pretrained: Checkpoint, obj) -> Dict[str, np.ndarray]:
    """Dense parameters of a finetuned checkpoint or a (materialized) mask file."""
    from .training import model_from_checkpoint, model_from_masks

    if isinstance(obj, MaskArtifact):
        return model_from_masks(pretrained, obj).materialize()
    return model_from_checkpoint(obj).materialize()


def pretrained_endpoint(pretrained: Checkpoint, arch: TransformerConfig, seed: int) -> Dict[str, np.ndarray]:
    """Pretrained encoder with the seed's initial random classifier on top."""
    shapes = param_shapes(arch, "cls")
    out = {n: np.array(pretrained.params[n], dtype=np.float32) for n in shapes if n != "classifier.weight"}
    out["classifier.weight"] = init_classifier(arch, seed)
    return {n: out[n] for n in shapes}


def _loss_and_metric(model: TaskModel, dataset: TaskDataset, split, metric):
    items = dataset.split(split)
    total, count = 0.0, 0
    with no_grad():
        for batch in iter_batches(items, dataset.kind, model.cfg.max_len, EVAL_BATCH):
            lg = model.logits(batch.ids, batch.attn)
            n = int(np.count_nonzero(np.asarray(batch.labels) != IGNORE))
            total += cross_entropy(lg, batch.labels).item() * n
            count += n
    return total / max(count, 1), evaluate(model, dataset, metric, split)


def eval_path(spec: PathSpec, dataset: TaskDataset, points=11, split="dev", metric=None):
    """Rows ``(gamma, loss, metric)`` on an even grid over [0, 1]."""
    if points < 2:
        raise ValueError("need at least two grid points")
    metric = metric or dataset.meta.get("metric") or default_metric(dataset.kind)
    gammas = [i / (points - 1) for i in range(points)]
    rows = []
    for g in gammas:
        loss, score = _loss_and_metric(interpolate_linear(spec, g), dataset, split, metric)
        rows.append((g, loss, score))
    return rows


# --------------------------------------------------------------------------
# Bézier curves
# --------------------------------------------------------------------------

def bernstein(degree: int, t: float) -> np.ndarray:
    """Bernstein basis ``C(n, i) (1-t)^(n-i) t^i`` for ``i = 0..n`` in float64."""
    t = float(t)
    return np.array([math.comb(degree, i) * (1.0 - t) ** (degree - i) * t ** i for i in range(degree + 1)])


@dataclass
class CurveSpec:
    """Control points ``w_0 .. w_{n+1}``; the two ends are frozen."""

    points: List[Dict[str, np.ndarray]]
    arch: TransformerConfig
    head: str = "cls"

    @property
    def n_bends(self):
        return len(self.points) - 2

    @property
    def degree(self):
        return len(self.points) - 1

    @classmethod
    def straight(cls, path: PathSpec, n_bends=3) -> "CurveSpec":
        """Bends evenly spaced on the segment, so the curve starts as the straight line."""
        if n_bends < 1:
            raise ValueError("a curve needs at least one bend")
        pts = [interpolate_params(path.w0, path.w1, 0.0)]
        for i in range(1, n_bends + 1):
            pts.append(interpolate_params(path.w0, path.w1, i / (n_bends + 1)))
        pts.append(interpolate_params(path.w0, path.w1, 1.0))
        return cls(pts, path.arch, path.head)

    def copy(self) -> "CurveSpec":
        return CurveSpec([{n: v.copy() for n, v in p.items()} for p in self.points], self.arch, self.head)


def _curve_weights(curve: CurveSpec, t, tensors=None) -> Dict[str, Tensor]:
    """Bernstein combination of the control points as Tensors (grads flow into ``tensors``)."""
    coef = [float(c) for c in bernstein(curve.degree, t)]
    if tensors is None:
        tensors = [{n: Tensor(v) for n, v in p.items()} for p in curve.points]
    return {n: stack_weighted([p[n] for p in tensors], coef) for n in curve.points[0]}


def bezier_params(curve: CurveSpec, t) -> Dict[str, np.ndarray]:
    t = float(t)
    if not 0.0 <= t <= 1.0:
        raise ValueError(f"t must lie in [0, 1], got {t}")
    if t == 0.0:
        return {n: v.copy() for n, v in curve.points[0].items()}
    if t == 1.0:
        return {n: v.copy() for n, v in curve.points[-1].items()}
    with no_grad():
        return {n: w.data for n, w in _curve_weights(curve, t).items()}


def bezier_point(curve: CurveSpec, t) -> TaskModel:
    return TaskModel(curve.arch, bezier_params(curve, t), head=curve.head)


@dataclass
class CurveTrainConfig:
    lr: float = 1e-4
    epochs: int = 1
    batch_size: int = 32
    seed: int = 0
    max_steps: Optional[int] = None


def train_bezier(curve: CurveSpec, dataset: TaskDataset, cfg: CurveTrainConfig, split="train") -> CurveSpec:
    """Minimise ``E_t L(phi(t))`` over the bends with one ``t ~ U[0, 1]`` per step."""
    out = curve.copy()
    ends = [{n: Tensor(v) for n, v in p.items()} for p in (out.points[0], out.points[-1])]
    bends = [{n: Tensor(v, requires_grad=True, name=f"bend{i}.{n}") for n, v in p.items()}
             for i, p in enumerate(out.points[1:-1], 1)]
    tensors = [ends[0]] + bends + [ends[1]]
    params = [(t.name, t) for b in bends for t in b.values()]
    state = AdamState()
    rng = np.random.default_rng([cfg.seed, 13])
    head = HEADS[out.head]
    items = dataset.split(split)
    steps = 0
    for _ in range(cfg.epochs):
        order = rng.permutation(len(items))
        for batch in iter_batches(items, dataset.kind, out.arch.max_len, cfg.batch_size, order):
            if cfg.max_steps is not None and steps >= cfg.max_steps:
                break
            t = float(rng.random())
            for _, p in params:
                p.zero_grad()
            W = _curve_weights(out, t, tensors)
            loss = cross_entropy(head(out.arch, W, batch.ids, batch.attn), batch.labels)
            backward(loss)
            adam_step(params, state, cfg.lr)
            steps += 1
    for i, b in enumerate(bends, 1):
        out.points[i] = {n: t.data.copy() for n, t in b.items()}
    return out


def curve_losses(curve: CurveSpec, dataset: TaskDataset, ts, split="train", metric=None):
    """Rows ``(t, loss, metric)`` along the curve."""
    metric = metric or dataset.meta.get("metric") or default_metric(dataset.kind)
    return [(float(t),) + _loss_and_metric(bezier_point(curve, t), dataset, split, metric) for t in ts]


# --------------------------------------------------------------------------
# [CLS] embeddings
# --------------------------------------------------------------------------

def cls_embeddings(model: TaskModel, items, kind):
    vecs = []
    with no_grad():
        for batch in iter_batches(items, kind, model.cfg.max_len, EVAL_BATCH):
            vecs.append(model.encode(batch.ids, batch.attn).data[:, 0, :])
    return np.concatenate(vecs) if vecs else np.zeros((0, model.cfg.hidden), np.float32)


def dump_cls_embeddings(model: TaskModel, dataset: TaskDataset, out, split="dev"):
    """One line per example: label, then the position-0 vector of the top block."""
    items = dataset.split(split)
    vecs = cls_embeddings(model, items, dataset.kind)
    lines = []
    for (_, label), v in zip(items, vecs):
        lab = " ".join(str(int(x)) for x in np.atleast_1d(label))
        lines.append(lab + "\t" + " ".join(repr(float(x)) for x in v))
    atomic_write_bytes(out, ("\n".join(lines) + "\n" if lines else "").encode("utf-8"))
    return len(lines)
