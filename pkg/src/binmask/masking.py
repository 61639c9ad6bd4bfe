"""Binary weight masks trained with a straight-through estimator.

A masked linear layer keeps its pretrained weight ``W`` frozen and learns a
real-valued score matrix ``M`` of the same shape. The forward pass uses
``W * (M >= tau)``; the backward pass hands the gradient wrt the binary mask
straight to ``M``, i.e. ``dL/dM = dL/dW_hat * W``.
"""
from __future__ import annotations

import zlib
from dataclasses import asdict, dataclass

import numpy as np

from . import _kernels as K
from .tensor import DimensionError, Tensor, matmul, add


@dataclass(frozen=True)
class MaskingConfig:
    tau: float = 0.5
    init_sparsity: float = 0.05
    init_halfwidth: float = 0.01
    seed: int = 0

    def __post_init__(self):
        if not 0.0 <= self.init_sparsity <= 1.0:
            raise ValueError(f"init_sparsity must be in [0, 1], got {self.init_sparsity}")
        if not self.init_halfwidth > 0.0:
            raise ValueError(f"init_halfwidth must be > 0, got {self.init_halfwidth}")

    def to_dict(self):
        return asdict(self)


def binarize(scores, tau) -> np.ndarray:
    """1 where ``scores >= tau`` else 0, as uint8. Ties select the weight."""
    return (np.asarray(scores) >= np.asarray(scores).dtype.type(tau)).astype(np.uint8)


def layer_seed(seed: int, key: str) -> list:
    return [int(seed), zlib.crc32(key.encode("utf-8"))]


def init_scores(shape, cfg: MaskingConfig, key: str = "") -> np.ndarray:
    """Shifted-uniform scores ``tau + delta * (u - p)`` with ``u ~ U[0, 1)``.

    ``P(score < tau) = p`` exactly, so the initial mask has expected sparsity
    ``p``. Each layer draws from its own stream keyed by ``(seed, key)`` so the
    init of a layer does not depend on which other layers are masked.
    """
    rng = np.random.default_rng(layer_seed(cfg.seed, key))
    u = rng.random(shape)
    m64 = cfg.tau + cfg.init_halfwidth * (u - cfg.init_sparsity)
    m = m64.astype(np.float32)
    tau32 = np.float32(cfg.tau)
    # float32 rounding may lift a just-below-threshold score onto tau
    off = (u < cfg.init_sparsity) & (m >= tau32)
    if off.any():
        m[off] = np.nextafter(tau32, np.float32(-np.inf))
    return m


def ste_backward(weight: np.ndarray, grad_what: np.ndarray) -> np.ndarray:
    """Score gradient under the straight-through estimator."""
    return grad_what * weight


def masked_weight(weight: Tensor, scores: Tensor, tau: float) -> Tensor:
    """Differentiable ``W * binarize(M)``; gradient flows to ``scores`` only."""
    if weight.shape != scores.shape:
        raise DimensionError(f"weight {weight.shape} and scores {scores.shape} differ")
    W = weight.data
    what, _ = K.masked_weight(W, scores.data, tau)
    return Tensor._from_op(what, (scores,), lambda g: (ste_backward(W, g),))


class MaskedLinear:
    """Frozen ``W`` (and optional frozen bias) selected by trainable scores."""

    def __init__(self, weight, scores, tau=0.5, bias=None, name=None):
        w = np.array(weight, dtype=np.float32)
        w.flags.writeable = False
        s = np.asarray(scores, dtype=np.float32)
        if w.shape != s.shape or w.ndim != 2:
            raise DimensionError(f"weight {w.shape} and scores {s.shape} must be equal 2-D shapes")
        self.name = name
        self.tau = float(tau)
        self.weight = Tensor(w, requires_grad=False, name=name)
        self.scores = Tensor(s.copy(), requires_grad=True, name=f"{name}.scores" if name else None)
        self.bias = None
        if bias is not None:
            b = np.array(bias, dtype=np.float32)
            b.flags.writeable = False
            self.bias = Tensor(b, requires_grad=False)

    @classmethod
    def from_mask(cls, weight, mask, tau=0.5, bias=None, name=None):
        """Rebuild a layer whose scores reproduce a stored binary mask."""
        tau32 = np.float32(tau)
        lo = np.nextafter(tau32, np.float32(-np.inf))
        scores = np.where(np.asarray(mask, dtype=bool), tau32, lo).astype(np.float32)
        return cls(weight, scores, tau, bias, name)

    @property
    def shape(self):
        return self.weight.shape

    @property
    def mask(self) -> np.ndarray:
        return binarize(self.scores.data, self.tau)

    def effective_weight(self) -> Tensor:
        return masked_weight(self.weight, self.scores, self.tau)

    def materialize(self) -> np.ndarray:
        what, _ = K.masked_weight(self.weight.data, self.scores.data, self.tau)
        return what

    def forward(self, x: Tensor) -> Tensor:
        if x.shape[-1] != self.shape[0]:
            raise DimensionError(f"input {x.shape} does not match layer {self.shape}")
        out = matmul(x, self.effective_weight())
        if self.bias is not None:
            out = add(out, self.bias)
        return out

    __call__ = forward

    def realized_sparsity(self) -> float:
        return realized_sparsity(self.mask)


def realized_sparsity(mask) -> float:
    """Fraction of zeros in a binary mask (or in a layer's current mask)."""
    if isinstance(mask, MaskedLinear):
        mask = mask.mask
    mask = np.asarray(mask)
    return float(np.count_nonzero(mask == 0)) / mask.size
