"""Experiment recipes: learning-rate grids, seed repeats, sparsity and layer-range sweeps.

Each recipe returns plain rows so the CLI can write them as report tables.
"""
from __future__ import annotations

import logging
from dataclasses import dataclass
from importlib import resources
from typing import List, Optional, Sequence

import numpy as np

from .data import TaskDataset, Vocab, gen_classification_task
from .masking import MaskingConfig
from .model import MaskPlan, TransformerConfig
from .persistence import Checkpoint, load_checkpoint
from .training import MASK_GRID, PAPER_GRID, GridResult, TrainConfig, finetune, lr_grid_search, train_masks

log = logging.getLogger(__name__)

TOY_CHECKPOINT = "toy_pretrained.mwck"
SEEDS = (1, 2, 3, 4)
# fixed lr of the sparsity and layer sweeps (all other knobs controlled)
SWEEP_LR = 5e-5
REFERENCE = {"seed": 0, "k": 2, "sizes": {"train": 500, "dev": 300, "test": 300}, "variant": "A"}


def toy_checkpoint_path():
    return resources.files("binmask") / "assets" / TOY_CHECKPOINT


def load_toy_pretrained() -> Checkpoint:
    with resources.as_file(toy_checkpoint_path()) as p:
        return load_checkpoint(p)


def reference_task(vocab_size=128, variant=None) -> TaskDataset:
    r = REFERENCE
    return gen_classification_task(r["seed"], Vocab(vocab_size), r["k"], r["sizes"], variant or r["variant"])


def num_blocks(pretrained: Checkpoint) -> int:
    return TransformerConfig.from_dict(pretrained.arch).num_blocks


def run_one(pretrained, task, regime, lr, seed, init_sparsity=0.05, plan: Optional[MaskPlan] = None,
            max_epochs=10, patience=2, batch_size=32, keep_scores=False):
    """One training run; returns ``(artifact, RunResult)``."""
    if regime == "finetune":
        cfg = TrainConfig(lr=lr, seed=seed, max_epochs=max_epochs, patience=patience, batch_size=batch_size)
        return finetune(pretrained, task, cfg)
    if regime != "mask":
        raise ValueError(f"regime must be finetune or mask, got {regime!r}")
    plan = plan or MaskPlan.parse("all", num_blocks(pretrained))
    cfg = TrainConfig(lr=lr, regime="mask", seed=seed, max_epochs=max_epochs, patience=patience,
                      batch_size=batch_size, masking=MaskingConfig(init_sparsity=init_sparsity, seed=seed), plan=plan)
    return train_masks(pretrained, task, cfg, keep_scores=keep_scores)


def grid_search(pretrained, task, regime, seed=1, grid=None, **kw) -> GridResult:
    """Best-dev learning rate, extending the grid while the optimum sits on its border."""
    if grid is None:
        grid = PAPER_GRID if regime == "finetune" else MASK_GRID

    def objective(lr):
        _, res = run_one(pretrained, task, regime, lr, seed, **kw)
        log.info("grid %s lr %g dev %.4f", regime, lr, res.best_dev)
        return res.best_dev

    return lr_grid_search(objective, grid)


@dataclass
class SeedRuns:
    regime: str
    lr: float
    seeds: List[int]
    dev: List[float]
    test: List[Optional[float]]

    @property
    def mean(self):
        return float(np.mean(self.dev))

    @property
    def std(self):
        return float(np.std(self.dev))


def run_seeds(pretrained, task, regime, lr, seeds=SEEDS, with_test=False, **kw) -> SeedRuns:
    from .training import model_from_checkpoint, model_from_masks, evaluate

    dev, test = [], []
    for s in seeds:
        art, res = run_one(pretrained, task, regime, lr, s, **kw)
        dev.append(res.best_dev)
        if with_test:
            m = model_from_checkpoint(art) if regime == "finetune" else model_from_masks(pretrained, art)
            test.append(evaluate(m, task, res.metric, "test"))
        else:
            test.append(None)
    return SeedRuns(regime, lr, list(seeds), dev, test)


def sweep_sparsity(pretrained, task, sparsities: Sequence[float], lr=SWEEP_LR, seeds=SEEDS, plan=None):
    """Rows ``(p, seed, best_dev)`` at a fixed learning rate."""
    rows = []
    for p in sparsities:
        for s in seeds:
            _, res = run_one(pretrained, task, "mask", lr, s, init_sparsity=p, plan=plan)
            log.info("sparsity %g seed %d dev %.4f", p, s, res.best_dev)
            rows.append((float(p), int(s), res.best_dev))
    return rows


def layer_plans(direction: str, counts: Sequence[int], n_blocks: int):
    dirs = ("bottom", "top") if direction == "both" else (direction,)
    out = []
    for d in dirs:
        if d not in ("bottom", "top"):
            raise ValueError(f"direction must be bottom, top or both, got {d!r}")
        for c in counts:
            plan = MaskPlan.bottom_up(c, n_blocks) if d == "bottom" else MaskPlan.top_down(c, n_blocks)
            out.append((d, int(c), plan))
    return out


def sweep_layers(pretrained, task, direction="both", counts=None, lr=SWEEP_LR, seeds=SEEDS, init_sparsity=0.05):
    """Rows ``(direction, count, blocks, seed, best_dev)``; counts default to 2, 4, ... up to L."""
    n = num_blocks(pretrained)
    counts = counts or list(range(2, n + 1, 2))
    rows = []
    for d, c, plan in layer_plans(direction, counts, n):
        for s in seeds:
            _, res = run_one(pretrained, task, "mask", lr, s, init_sparsity=init_sparsity, plan=plan)
            blocks = "-".join(str(b) for b in plan.blocks) if plan.blocks else "none"
            log.info("%s %d seed %d dev %.4f", d, c, s, res.best_dev)
            rows.append((d, c, blocks, int(s), res.best_dev))
    return rows


def mean_by(rows, key_idx, val_idx=-1):
    """Average ``rows[val_idx]`` grouped by the columns in ``key_idx`` (insertion order kept)."""
    groups = {}
    for r in rows:
        groups.setdefault(tuple(r[i] for i in key_idx), []).append(r[val_idx])
    return [(k, float(np.mean(v))) for k, v in groups.items()]
