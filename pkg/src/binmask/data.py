"""Synthetic corpora and downstream tasks, TSV I/O, batching and MLM corruption.

All tokens come from one seeded *grammar*: content tokens are grouped into
clusters, sentences are a Markov chain over clusters, and each cluster emits
its member tokens. Tokens of the same cluster are interchangeable in the
corpus, so a pretrained model learns similar representations for them. The
classification tasks exploit this: the label is the trigger cluster with the
most tokens in the sentence; variant ``A`` draws triggers from one half of each
cluster's tokens and variant ``B`` from the other half, which gives two
datasets with the same semantics and disjoint surface forms.
"""
from __future__ import annotations

import json
import os
from dataclasses import dataclass, field
from pathlib import Path
from typing import Dict, List, Optional

import numpy as np

PAD, CLS, SEP, MASK = 0, 1, 2, 3
NUM_RESERVED = 4
IGNORE = -100
SPLITS = ("train", "dev", "test")
KINDS = ("classification", "tagging", "mlm-corpus")


class ParseError(ValueError):
    def __init__(self, path, line, msg):
        super().__init__(f"{path}:{line}: {msg}")
        self.path = path
        self.line = line


@dataclass(frozen=True)
class Vocab:
    size: int = 128

    def __post_init__(self):
        if self.size <= NUM_RESERVED:
            raise ValueError(f"vocab size must exceed {NUM_RESERVED} reserved ids")

    @property
    def content(self):
        return np.arange(NUM_RESERVED, self.size)


@dataclass
class TaskDataset:
    kind: str
    num_labels: int
    splits: Dict[str, list] = field(default_factory=dict)
    seed: Optional[int] = None
    truncated: int = 0
    meta: dict = field(default_factory=dict)

    def __len__(self):
        return sum(len(v) for v in self.splits.values())

    def split(self, name):
        return self.splits.get(name, [])

    def same_as(self, other: "TaskDataset") -> bool:
        if (self.kind, self.num_labels) != (other.kind, other.num_labels):
            return False
        if set(self.splits) != set(other.splits):
            return False
        for s in self.splits:
            a, b = self.splits[s], other.splits[s]
            if len(a) != len(b):
                return False
            for (ia, la), (ib, lb) in zip(a, b):
                if not np.array_equal(ia, ib) or not np.array_equal(np.asarray(la), np.asarray(lb)):
                    return False
        return True


# --------------------------------------------------------------------------
# grammar
# --------------------------------------------------------------------------

class Grammar:
    """Cluster-level Markov chain with per-cluster token emissions."""

    def __init__(self, vocab: Vocab, n_clusters: int = 16, seed: int = 0, concentration: float = 0.3):
        content = vocab.content
        if n_clusters < 2 or n_clusters * 2 > len(content):
            raise ValueError(f"need 2 <= n_clusters <= {len(content) // 2}")
        rng = np.random.default_rng([seed, 101])
        self.vocab = vocab
        self.n_clusters = n_clusters
        self.members = [content[c::n_clusters] for c in range(n_clusters)]
        self.cluster_of = np.full(vocab.size, -1, dtype=np.int64)
        for c, toks in enumerate(self.members):
            self.cluster_of[toks] = c
        self.transition = rng.dirichlet(np.full(n_clusters, concentration), size=n_clusters)
        self.start = rng.dirichlet(np.full(n_clusters, 1.0))
        self.emission = [rng.dirichlet(np.full(len(t), 5.0)) for t in self.members]

    def sample(self, rng, length, exclude=()):
        """One sentence of ``length`` content tokens avoiding clusters in ``exclude``."""
        allowed = np.ones(self.n_clusters, dtype=bool)
        allowed[list(exclude)] = False
        start = self.start * allowed
        trans = self.transition * allowed
        trans[trans.sum(axis=1) == 0] = allowed
        start = start / start.sum()
        trans = trans / trans.sum(axis=1, keepdims=True)
        out = np.empty(length, dtype=np.int32)
        c = rng.choice(self.n_clusters, p=start)
        for i in range(length):
            if i:
                c = rng.choice(self.n_clusters, p=trans[c])
            out[i] = self.members[c][rng.choice(len(self.members[c]), p=self.emission[c])]
        return out

    def trigger_tokens(self, cls, variant):
        toks = self.members[cls]
        return toks[0::2] if variant == "A" else toks[1::2]


def _split_rng(seed, split):
    return np.random.default_rng([int(seed), SPLITS.index(split) + 1])


def gen_corpus(seed, vocab: Vocab, num_seq, length, grammar_seed=0, n_clusters=16, max_len=None) -> TaskDataset:
    """Unlabelled corpus: ``num_seq`` train sentences plus ``num_seq // 10`` dev sentences."""
    if max_len is not None and length > max_len - 2:
        raise ValueError(f"length {length} leaves no room for CLS/SEP within {max_len}")
    g = Grammar(vocab, n_clusters, grammar_seed)
    splits = {}
    for split, n in (("train", num_seq), ("dev", num_seq // 10)):
        rng = _split_rng(seed, split)
        splits[split] = [(g.sample(rng, length), -1) for _ in range(n)]
    return TaskDataset("mlm-corpus", 0, splits, seed, meta={"grammar_seed": grammar_seed, "n_clusters": n_clusters})


def _balanced_labels(rng, n, k):
    labels = np.arange(n) % k
    rng.shuffle(labels)
    return labels


def gen_classification_task(seed, vocab: Vocab, k, num_per_split, variant="A", grammar_seed=0,
                            n_clusters=16, length=(10, 20), majority=(2, 3)) -> TaskDataset:
    """Label = the class whose trigger tokens occur most often in the sentence.

    Each sentence carries ``n`` triggers of its own class (``n`` drawn from
    ``majority``) and ``n - 1`` triggers of one other class. Background tokens
    avoid all ``k`` trigger clusters, so counting triggers classifies every
    example correctly. ``majority=(1, 1)`` gives a plain presence task.
    """
    if k < 2:
        raise ValueError("classification needs k >= 2")
    if k > n_clusters // 2:
        raise ValueError(f"k={k} exceeds the {n_clusters // 2} available trigger clusters")
    if variant not in ("A", "B"):
        raise ValueError("variant must be 'A' or 'B'")
    g = Grammar(vocab, n_clusters, grammar_seed)
    sizes = _sizes(num_per_split)
    splits = {}
    for split in SPLITS:
        rng = _split_rng(seed, split)
        labels = _balanced_labels(rng, sizes[split], k)
        items = []
        for c in labels:
            c = int(c)
            n = int(rng.integers(length[0], length[1] + 1))
            ids = g.sample(rng, n, exclude=range(k))
            n_major = int(rng.integers(majority[0], majority[1] + 1))
            other = int(rng.choice([j for j in range(k) if j != c]))
            plan = [c] * n_major + [other] * (n_major - 1)
            pos = rng.choice(n, size=len(plan), replace=False)
            for p_, cls in zip(pos, plan):
                ids[p_] = rng.choice(g.trigger_tokens(cls, variant))
            items.append((ids, c))
        splits[split] = items
    meta = {"variant": variant, "grammar_seed": grammar_seed, "n_clusters": n_clusters, "metric": "accuracy"}
    return TaskDataset("classification", k, splits, seed, meta=meta)


def count_triggers(grammar: Grammar, ids, k):
    """Per-class trigger counts (either variant)."""
    cl = grammar.cluster_of[np.asarray(ids)]
    return np.bincount(cl[(cl >= 0) & (cl < k)], minlength=k)


def tag_rule(grammar: Grammar, ids, k, rule="window"):
    """Tags from a local window: ``(cluster(x_i) + cluster(x_{i-1})) mod k``; ``copy`` uses ``cluster(x_i) mod k``."""
    cl = grammar.cluster_of[np.asarray(ids)]
    if rule == "copy":
        return (cl % k).astype(np.int32)
    prev = np.concatenate([[0], cl[:-1]])
    return ((cl + prev) % k).astype(np.int32)


def gen_tagging_task(seed, vocab: Vocab, k, num_per_split, grammar_seed=0, n_clusters=16,
                     length=(10, 20), rule="window") -> TaskDataset:
    if k < 2:
        raise ValueError("tagging needs k >= 2")
    g = Grammar(vocab, n_clusters, grammar_seed)
    sizes = _sizes(num_per_split)
    splits = {}
    for split in SPLITS:
        rng = _split_rng(seed, split)
        items = []
        for _ in range(sizes[split]):
            n = int(rng.integers(length[0], length[1] + 1))
            ids = g.sample(rng, n)
            items.append((ids, tag_rule(g, ids, k, rule)))
        splits[split] = items
    meta = {"rule": rule, "grammar_seed": grammar_seed, "n_clusters": n_clusters, "metric": "micro_f1"}
    return TaskDataset("tagging", k, splits, seed, meta=meta)


def _sizes(num_per_split):
    if isinstance(num_per_split, dict):
        return {s: int(num_per_split.get(s, 0)) for s in SPLITS}
    if isinstance(num_per_split, (tuple, list)):
        return dict(zip(SPLITS, (int(x) for x in num_per_split)))
    return {s: int(num_per_split) for s in SPLITS}


# --------------------------------------------------------------------------
# TSV I/O
# --------------------------------------------------------------------------

def _fmt(ids):
    return " ".join(str(int(i)) for i in ids)


def save_tsv(ds: TaskDataset, directory):
    """One ``<split>.tsv`` per split plus ``dataset.json`` (kind, labels, seed, meta)."""
    d = Path(directory)
    d.mkdir(parents=True, exist_ok=True)
    for split, items in ds.splits.items():
        lines = []
        for ids, lab in items:
            if ds.kind == "classification":
                lines.append(f"{int(lab)}\t{_fmt(ids)}")
            elif ds.kind == "tagging":
                lines.append(f"{_fmt(lab)}\t{_fmt(ids)}")
            else:
                lines.append(_fmt(ids))
        _atomic_write_text(d / f"{split}.tsv", "".join(l + "\n" for l in lines))
    info = {"kind": ds.kind, "num_labels": ds.num_labels, "seed": ds.seed, "meta": ds.meta,
            "splits": list(ds.splits)}
    _atomic_write_text(d / "dataset.json", json.dumps(info, sort_keys=True, indent=1) + "\n")


def _atomic_write_text(path, text):
    tmp = Path(str(path) + ".tmp")
    with open(tmp, "w", encoding="utf-8", newline="\n") as fh:
        fh.write(text)
    os.replace(tmp, path)


def _parse_ids(path, lineno, text):
    try:
        return np.array([int(t) for t in text.split()], dtype=np.int32)
    except ValueError:
        raise ParseError(path, lineno, f"non-integer token in {text!r}") from None


def load_split_tsv(path, kind, vocab_size, max_len, num_labels=None):
    """Parse one TSV file. Returns ``(items, truncated)``.

    Sequences longer than ``max_len - 2`` (room for CLS/SEP) are cut and
    counted; tags are cut in step with their tokens.
    """
    if kind not in KINDS:
        raise ValueError(f"unknown dataset kind {kind!r}")
    limit = max_len - 2
    items, truncated = [], 0
    with open(path, encoding="utf-8") as fh:
        for lineno, raw in enumerate(fh, 1):
            line = raw.rstrip("\n")
            if not line.strip():
                continue
            if kind == "mlm-corpus":
                ids, lab = _parse_ids(path, lineno, line), -1
            else:
                parts = line.split("\t")
                if len(parts) != 2:
                    raise ParseError(path, lineno, "expected exactly one TAB separating label(s) and ids")
                ids = _parse_ids(path, lineno, parts[1])
                if kind == "classification":
                    try:
                        lab = int(parts[0])
                    except ValueError:
                        raise ParseError(path, lineno, f"bad label {parts[0]!r}") from None
                    labs = np.array([lab])
                else:
                    lab = _parse_ids(path, lineno, parts[0])
                    if len(lab) != len(ids):
                        raise ParseError(path, lineno, f"{len(lab)} tags for {len(ids)} tokens")
                    labs = lab
                if num_labels is not None and labs.size and (labs.min() < 0 or labs.max() >= num_labels):
                    raise ParseError(path, lineno, f"label outside [0, {num_labels})")
            if len(ids) == 0:
                raise ParseError(path, lineno, "empty token sequence")
            bad = np.flatnonzero((ids < 0) | (ids >= vocab_size))
            if bad.size:
                raise IndexError(f"{path}:{lineno}: id {int(ids[bad[0]])} at token {int(bad[0])} "
                                 f"outside vocabulary of size {vocab_size}")
            if len(ids) > limit:
                truncated += 1
                ids = ids[:limit]
                if kind == "tagging":
                    lab = lab[:limit]
            items.append((ids, lab))
    return items, truncated


def load_tsv(path, kind=None, vocab_size=128, max_len=32, num_labels=None) -> TaskDataset:
    """Load a dataset directory written by :func:`save_tsv`, or a single TSV file as split ``train``."""
    p = Path(path)
    if p.is_dir():
        info = json.loads((p / "dataset.json").read_text(encoding="utf-8"))
        kind = kind or info["kind"]
        if kind != info["kind"]:
            raise ValueError(f"{p} holds a {info['kind']} dataset, not {kind}")
        k = info["num_labels"] if num_labels is None else num_labels
        ds = TaskDataset(kind, k, {}, info.get("seed"), meta=info.get("meta", {}))
        for split in info["splits"]:
            items, t = load_split_tsv(p / f"{split}.tsv", kind, vocab_size, max_len, k or None)
            ds.splits[split] = items
            ds.truncated += t
        return ds
    if kind is None:
        raise ValueError("kind is required when loading a single TSV file")
    items, t = load_split_tsv(p, kind, vocab_size, max_len, num_labels)
    if num_labels is None:
        if kind == "classification":
            num_labels = 1 + max((int(l) for _, l in items), default=-1)
        elif kind == "tagging":
            num_labels = 1 + max((int(np.max(l)) for _, l in items), default=-1)
        else:
            num_labels = 0
    return TaskDataset(kind, num_labels, {"train": items}, None, truncated=t)


# --------------------------------------------------------------------------
# batching
# --------------------------------------------------------------------------

@dataclass
class Batch:
    ids: np.ndarray        # batch x T, CLS ... SEP PAD*
    attn: np.ndarray       # batch x T, True on real tokens
    labels: np.ndarray     # batch (classification) or batch x T (tagging / mlm)


def collate(items, kind, max_len) -> Batch:
    limit = max_len - 2
    T = min(max_len, max(len(ids) for ids, _ in items) + 2)
    B = len(items)
    ids = np.full((B, T), PAD, dtype=np.int64)
    attn = np.zeros((B, T), dtype=bool)
    if kind == "classification":
        labels = np.empty(B, dtype=np.int64)
    else:
        labels = np.full((B, T), IGNORE, dtype=np.int64)
    for r, (seq, lab) in enumerate(items):
        seq = np.asarray(seq)[:limit]
        n = len(seq)
        ids[r, 0] = CLS
        ids[r, 1: n + 1] = seq
        ids[r, n + 1] = SEP
        attn[r, : n + 2] = True
        if kind == "classification":
            labels[r] = lab
        elif kind == "tagging":
            labels[r, 1: n + 1] = np.asarray(lab)[:n]
    return Batch(ids, attn, labels)


def iter_batches(items, kind, max_len, batch_size, order=None):
    idx = np.arange(len(items)) if order is None else order
    for start in range(0, len(idx), batch_size):
        yield collate([items[i] for i in idx[start: start + batch_size]], kind, max_len)


def mlm_corrupt(ids, seed, vocab_size, rate=0.15):
    """BERT-style corruption of non-reserved positions.

    Selected positions (probability ``rate``) become MASK (80%), a random
    content token (10%) or stay unchanged (10%). Targets hold the original id
    at selected positions and ``IGNORE`` elsewhere.
    """
    ids = np.asarray(ids, dtype=np.int64)
    rng = np.random.default_rng(seed)
    eligible = ids >= NUM_RESERVED
    select = (rng.random(ids.shape) < rate) & eligible
    action = rng.random(ids.shape)
    randtok = rng.integers(NUM_RESERVED, vocab_size, size=ids.shape)
    inputs = ids.copy()
    inputs[select & (action < 0.8)] = MASK
    swap = select & (action >= 0.8) & (action < 0.9)
    inputs[swap] = randtok[swap]
    targets = np.where(select, ids, IGNORE)
    return inputs, targets
