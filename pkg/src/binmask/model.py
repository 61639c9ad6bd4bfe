"""Post-layernorm transformer encoder with maskable linear layers.

Forward passes are functions of a name -> Tensor weight mapping, so the same
code serves dense models, masked models (whose mapping holds straight-through
outputs), interpolated models and Bezier curve points.
"""
from __future__ import annotations

import math
from dataclasses import asdict, dataclass, field
from typing import Dict, Iterable, Mapping, Optional

import numpy as np

from .masking import MaskedLinear, MaskingConfig, init_scores
from .tensor import (
    DimensionError,
    Tensor,
    add,
    embedding_lookup,
    gelu,
    index,
    layer_norm,
    matmul,
    reshape,
    scale,
    softmax,
    tanh,
    transpose,
)

LINEARS = ("k", "q", "v", "ao", "i", "o")
NEG_INF = -1e9
INIT_STD = 0.02


@dataclass(frozen=True)
class TransformerConfig:
    num_blocks: int = 4
    hidden: int = 64
    ff: int = 256
    heads: int = 4
    vocab_size: int = 128
    max_len: int = 32
    num_labels: int = 2
    type_vocab_size: int = 0
    ln_eps: float = 1e-12

    def __post_init__(self):
        if self.hidden % self.heads:
            raise ValueError(f"hidden={self.hidden} not divisible by heads={self.heads}")
        if self.max_len < 1 or self.num_blocks < 0 or self.num_labels < 1:
            raise ValueError("max_len >= 1, num_blocks >= 0 and num_labels >= 1 required")

    def to_dict(self):
        return asdict(self)

    @classmethod
    def from_dict(cls, d):
        return cls(**{k: d[k] for k in cls.__dataclass_fields__ if k in d})

    def replace(self, **kw):
        d = self.to_dict()
        d.update(kw)
        return TransformerConfig(**d)


# BERT-base-uncased dimensions, used for memory accounting.
BERT_BASE = TransformerConfig(
    num_blocks=12, hidden=768, ff=3072, heads=12, vocab_size=30522, max_len=512, num_labels=2, type_vocab_size=2
)


def linear_shape(cfg: TransformerConfig, which: str):
    d, f = cfg.hidden, cfg.ff
    return {"i": (d, f), "o": (f, d)}.get(which, (d, d))


def param_shapes(cfg: TransformerConfig, head: str = "cls") -> Dict[str, tuple]:
    """Ordered parameter manifest. ``head`` is ``cls``/``tag`` (classifier) or ``mlm``."""
    d, f = cfg.hidden, cfg.ff
    shapes = {"emb.word": (cfg.vocab_size, d), "emb.pos": (cfg.max_len, d)}
    if cfg.type_vocab_size:
        shapes["emb.type"] = (cfg.type_vocab_size, d)
    shapes["emb.ln.gain"] = (d,)
    shapes["emb.ln.bias"] = (d,)
    for l in range(cfg.num_blocks):
        p = f"blocks.{l}."
        for w in ("k", "q", "v", "ao"):
            shapes[p + w + ".weight"] = (d, d)
            shapes[p + w + ".bias"] = (d,)
        shapes[p + "ln1.gain"] = (d,)
        shapes[p + "ln1.bias"] = (d,)
        shapes[p + "i.weight"] = (d, f)
        shapes[p + "i.bias"] = (f,)
        shapes[p + "o.weight"] = (f, d)
        shapes[p + "o.bias"] = (d,)
        shapes[p + "ln2.gain"] = (d,)
        shapes[p + "ln2.bias"] = (d,)
    shapes["pooler.weight"] = (d, d)
    shapes["pooler.bias"] = (d,)
    if head == "mlm":
        shapes["mlm.bias"] = (cfg.vocab_size,)
    else:
        shapes["classifier.weight"] = (d, cfg.num_labels)
    return shapes


def init_params(cfg: TransformerConfig, seed: int, head: str = "cls") -> Dict[str, np.ndarray]:
    rng = np.random.default_rng(seed)
    out = {}
    for name, shape in param_shapes(cfg, head).items():
        if name.endswith(".gain"):
            out[name] = np.ones(shape, np.float32)
        elif len(shape) == 1:
            out[name] = np.zeros(shape, np.float32)
        else:
            out[name] = (rng.standard_normal(shape) * INIT_STD).astype(np.float32)
    return out


def init_classifier(cfg: TransformerConfig, seed: int) -> np.ndarray:
    rng = np.random.default_rng([int(seed), 7])
    return (rng.standard_normal((cfg.hidden, cfg.num_labels)) * INIT_STD).astype(np.float32)


# --------------------------------------------------------------------------
# mask plans
# --------------------------------------------------------------------------

@dataclass(frozen=True)
class MaskPlan:
    """Which weight matrices carry masks. Embeddings, biases and layernorms never do."""

    blocks: tuple = ()
    mask_pooler: bool = True
    mask_classifier: bool = True

    @classmethod
    def bottom_up(cls, count, num_blocks, **kw):
        _check_count(count, num_blocks)
        return cls(tuple(range(count)), **kw)

    @classmethod
    def top_down(cls, count, num_blocks, **kw):
        _check_count(count, num_blocks)
        return cls(tuple(range(num_blocks - count, num_blocks)), **kw)

    @classmethod
    def parse(cls, text: str, num_blocks: int, **kw) -> "MaskPlan":
        """``all``, ``none``, ``bottom:C``, ``top:C``, ``A-B`` or ``i,j,k``."""
        text = text.strip()
        if text == "all":
            return cls(tuple(range(num_blocks)), **kw)
        if text == "none":
            return cls((), **kw)
        if text.startswith("bottom:"):
            return cls.bottom_up(int(text[7:]), num_blocks, **kw)
        if text.startswith("top:"):
            return cls.top_down(int(text[4:]), num_blocks, **kw)
        if "-" in text:
            lo, hi = (int(x) for x in text.split("-"))
            return cls(tuple(range(lo, hi + 1)), **kw)
        return cls(tuple(sorted({int(x) for x in text.split(",") if x})), **kw)

    def validate(self, num_blocks):
        for b in self.blocks:
            if not 0 <= b < num_blocks:
                raise IndexError(f"mask plan block {b} outside 0..{num_blocks - 1}")

    def layer_names(self, cfg: TransformerConfig):
        self.validate(cfg.num_blocks)
        names = [f"blocks.{l}.{w}.weight" for l in sorted(self.blocks) for w in LINEARS]
        if self.mask_pooler:
            names.append("pooler.weight")
        if self.mask_classifier:
            names.append("classifier.weight")
        return names

    def describe(self):
        return {"blocks": list(self.blocks), "mask_pooler": self.mask_pooler, "mask_classifier": self.mask_classifier}

    @classmethod
    def from_description(cls, d):
        return cls(tuple(d["blocks"]), bool(d["mask_pooler"]), bool(d["mask_classifier"]))


def _check_count(count, num_blocks):
    if not 0 <= count <= num_blocks:
        raise IndexError(f"cannot mask {count} of {num_blocks} blocks")


def block_maskable_count(cfg: TransformerConfig) -> int:
    d, f = cfg.hidden, cfg.ff
    return 4 * d * d + 2 * d * f


def maskable_count(cfg: TransformerConfig, plan: MaskPlan, include_classifier=True) -> int:
    plan.validate(cfg.num_blocks)
    n = len(set(plan.blocks)) * block_maskable_count(cfg)
    if plan.mask_pooler:
        n += cfg.hidden * cfg.hidden
    if plan.mask_classifier and include_classifier:
        n += cfg.hidden * cfg.num_labels
    return n


# --------------------------------------------------------------------------
# forward
# --------------------------------------------------------------------------

def _linear(W, name, x):
    return add(matmul(x, W[name + ".weight"]), W[name + ".bias"])


def attention(cfg: TransformerConfig, W: Mapping[str, Tensor], block: int, x: Tensor,
              pad_bias: Optional[np.ndarray] = None, trace: Optional[list] = None) -> Tensor:
    """Multi-head self attention of block ``block``; ``x`` is batch x N x d.

    Scores are scaled by sqrt(d / heads), which is the single-head sqrt(d)
    formula when ``heads == 1``. ``pad_bias`` (batch x N) is added to the
    scores of every query so padded keys get zero weight.
    """
    if x.data.ndim != 3 or x.shape[-1] != cfg.hidden:
        raise DimensionError(f"attention input must be batch x N x {cfg.hidden}, got {x.shape}")
    B, N, d = x.shape
    h = cfg.heads
    dh = d // h
    p = f"blocks.{block}."

    def heads(t):
        return transpose(reshape(t, (B, N, h, dh)), (0, 2, 1, 3))

    q = heads(_linear(W, p + "q", x))
    k = heads(_linear(W, p + "k", x))
    v = heads(_linear(W, p + "v", x))
    s = scale(matmul(q, transpose(k, (0, 1, 3, 2))), 1.0 / math.sqrt(dh))
    if pad_bias is not None:
        s = add(s, Tensor(pad_bias[:, None, None, :], dtype=s.dtype))
    a = softmax(s, axis=-1)
    if trace is not None:
        trace.append(a.data)
    ctx = reshape(transpose(matmul(a, v), (0, 2, 1, 3)), (B, N, d))
    return _linear(W, p + "ao", ctx)


def encode(cfg: TransformerConfig, W: Mapping[str, Tensor], ids, attn=None, trace=None) -> Tensor:
    """Embeddings (+ positions) through all blocks; returns batch x N x d."""
    ids = np.asarray(ids, dtype=np.int64)
    if ids.ndim == 1:
        ids = ids[None, :]
    B, N = ids.shape
    if N > cfg.max_len:
        raise DimensionError(f"sequence length {N} exceeds max_len {cfg.max_len}")
    x = add(embedding_lookup(W["emb.word"], ids), index(W["emb.pos"], slice(0, N)))
    if cfg.type_vocab_size:
        x = add(x, index(W["emb.type"], slice(0, 1)))
    x = layer_norm(x, W["emb.ln.gain"], W["emb.ln.bias"], cfg.ln_eps)
    pad_bias = None
    if attn is not None:
        pad_bias = np.where(np.asarray(attn, dtype=bool), 0.0, NEG_INF).astype(x.dtype)
    for l in range(cfg.num_blocks):
        p = f"blocks.{l}."
        a = attention(cfg, W, l, x, pad_bias, trace)
        x = layer_norm(add(x, a), W[p + "ln1.gain"], W[p + "ln1.bias"], cfg.ln_eps)
        f = _linear(W, p + "o", gelu(_linear(W, p + "i", x)))
        x = layer_norm(add(x, f), W[p + "ln2.gain"], W[p + "ln2.bias"], cfg.ln_eps)
    return x


def cls_vector(hidden: Tensor) -> Tensor:
    return index(hidden, (slice(None), 0, slice(None)))


def classify_sequence(cfg, W, ids, attn=None) -> Tensor:
    h0 = cls_vector(encode(cfg, W, ids, attn))
    pooled = tanh(_linear(W, "pooler", h0))
    return matmul(pooled, W["classifier.weight"])


def tag_tokens(cfg, W, ids, attn=None) -> Tensor:
    return matmul(encode(cfg, W, ids, attn), W["classifier.weight"])


def mlm_logits(cfg, W, ids, attn=None) -> Tensor:
    h = encode(cfg, W, ids, attn)
    return add(matmul(h, transpose(W["emb.word"], (1, 0))), W["mlm.bias"])


HEADS = {"cls": classify_sequence, "tag": tag_tokens, "mlm": mlm_logits}


# --------------------------------------------------------------------------
# model container
# --------------------------------------------------------------------------

class TaskModel:
    """Config + named parameters + optional masked layers.

    ``params`` holds every non-masked parameter as a Tensor; masked weight
    matrices live in ``masked`` and contribute straight-through outputs to
    :meth:`weights`.
    """

    def __init__(self, cfg: TransformerConfig, params: Mapping[str, np.ndarray], head: str = "cls"):
        if head not in HEADS:
            raise ValueError(f"unknown head {head!r}")
        self.cfg = cfg
        self.head = head
        expected = param_shapes(cfg, head)
        missing = [n for n in expected if n not in params]
        if missing:
            raise KeyError(f"missing parameters: {missing[:5]}")
        for n, shp in expected.items():
            if tuple(np.shape(params[n])) != shp:
                raise DimensionError(f"parameter {n} has shape {np.shape(params[n])}, expected {shp}")
        self.params: Dict[str, Tensor] = {
            n: Tensor(np.array(params[n], dtype=np.float32), name=n) for n in expected
        }
        self.masked: Dict[str, MaskedLinear] = {}
        self.plan: Optional[MaskPlan] = None
        self.truncations = 0

    @property
    def names(self):
        return list(param_shapes(self.cfg, self.head))

    def weights(self) -> Dict[str, Tensor]:
        W = dict(self.params)
        for n, layer in self.masked.items():
            W[n] = layer.effective_weight()
        return W

    def set_trainable(self, names: Optional[Iterable[str]] = None):
        """Mark ``names`` (default: all dense parameters) trainable, everything else frozen."""
        chosen = set(self.params) if names is None else set(names)
        for n, t in self.params.items():
            t.requires_grad = n in chosen

    def trainable(self):
        out = [(n, t) for n, t in self.params.items() if t.requires_grad]
        out += [(n + ".scores", m.scores) for n, m in self.masked.items()]
        return out

    def zero_grad(self):
        for _, t in self.trainable():
            t.zero_grad()

    def _clip(self, ids, attn):
        ids = np.asarray(ids, dtype=np.int64)
        if ids.ndim == 1:
            ids = ids[None, :]
        if ids.shape[1] > self.cfg.max_len:
            self.truncations += int(ids.shape[0])
            ids = ids[:, : self.cfg.max_len]
            if attn is not None:
                attn = np.asarray(attn)[:, : self.cfg.max_len]
        return ids, attn

    def encode(self, ids, attn=None, trace=None) -> Tensor:
        ids, attn = self._clip(ids, attn)
        return encode(self.cfg, self.weights(), ids, attn, trace)

    def logits(self, ids, attn=None) -> Tensor:
        ids, attn = self._clip(ids, attn)
        return HEADS[self.head](self.cfg, self.weights(), ids, attn)

    def materialize(self) -> Dict[str, np.ndarray]:
        """Dense parameters with every masked matrix replaced by ``W * M_bin``."""
        out = {n: t.data.copy() for n, t in self.params.items()}
        for n, layer in self.masked.items():
            out[n] = layer.materialize()
        return {n: out[n] for n in self.names}

    def masks(self) -> Dict[str, np.ndarray]:
        return {n: m.mask for n, m in self.masked.items()}


def apply_mask_plan(model: TaskModel, plan: MaskPlan, cfg: MaskingConfig):
    """Turn the planned matrices into masked layers with fresh scores.

    Every other parameter is frozen; afterwards the trainable set is exactly
    the planned layers' scores.
    """
    names = plan.layer_names(model.cfg)
    if model.head == "mlm" and plan.mask_classifier:
        raise ValueError("an MLM-head model has no classifier to mask")
    model.set_trainable(())
    model.masked = {}
    for n in names:
        # biases stay ordinary frozen params; masked layers only own weights
        W = model.params.pop(n)
        model.masked[n] = MaskedLinear(W.data, init_scores(W.shape, cfg, key=n), cfg.tau, name=n)
    model.plan = plan
    return model
