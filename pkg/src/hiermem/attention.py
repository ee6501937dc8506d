"""Context-vector attention and the interaction augmentations.

One attention form serves all three tiers of the read path: project each
item through a tanh layer, score it against a learned context vector,
normalise the scores with a softmax, and pool the original items with the
resulting weights.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import numerics as nm
from .numerics import ShapeError, Tensor


@dataclass
class AttentionParams:
    """tanh-projection weight/bias plus the jointly-learned context vector."""

    w: Tensor
    b: Tensor
    c: Tensor

    def __post_init__(self):
        m = self.w.shape[0]
        if self.b.shape != (m,) or self.c.shape != (m,):
            raise ShapeError("attention bias/context must match projection rows")

    @property
    def item_size(self) -> int:
        return self.w.shape[1]

    def tensors(self, prefix: str):
        yield f"{prefix}.w", self.w
        yield f"{prefix}.b", self.b
        yield f"{prefix}.c", self.c


def init_attention(rng: np.random.Generator, item_size: int, proj_size: int) -> AttentionParams:
    s = 1.0 / np.sqrt(item_size)
    return AttentionParams(
        w=Tensor(rng.uniform(-s, s, size=(proj_size, item_size))),
        b=nm.zeros(proj_size),
        c=Tensor(rng.normal(0.0, 1.0, size=proj_size) / np.sqrt(proj_size)),
    )


def attend_cols(p: AttentionParams, items: Tensor) -> tuple[Tensor, Tensor]:
    """Attention over the columns of a (d, n) matrix.

    Returns (weights (n,), pooled (d,)): weights are the softmax of
    c . tanh(W x + b) per column, pooled is the weight-averaged column.
    """
    if items.data.ndim != 2 or items.data.shape[0] != p.item_size:
        raise ShapeError(f"items must be ({p.item_size}, n)")
    n = items.data.shape[1]
    if n == 0:
        raise ValueError("attention over an empty item list")
    proj = nm.tanh(nm.affine(p.w, items, p.b))
    scores = nm.matmul(nm.transpose(proj), p.c)
    weights = nm.softmax(scores)
    pooled = nm.matmul(items, weights)
    return weights, pooled


def attend(p: AttentionParams, items: list[Tensor]) -> tuple[Tensor, Tensor]:
    """Attention over a list of equal-length vectors."""
    if not items:
        raise ValueError("attention over an empty item list")
    return attend_cols(p, nm.stack_cols(items))


def patch_augment(mem_patch_enc: Tensor, in_patch_enc: Tensor) -> Tensor:
    """[stored * incoming ; |stored - incoming|] for encoded patch pairs."""
    if mem_patch_enc.data.shape != in_patch_enc.data.shape:
        raise ShapeError("patch_augment operands must have equal length")
    return nm.concat([nm.mul(mem_patch_enc, in_patch_enc),
                      nm.abs_diff(mem_patch_enc, in_patch_enc)])


def output_augment(rho_enc: Tensor, q: Tensor, r_prev: Tensor) -> Tensor:
    """[rho * q ; rho * r_prev ; |rho - q|] slot/query interaction vector."""
    if rho_enc.data.shape != q.data.shape or rho_enc.data.shape != r_prev.data.shape:
        raise ShapeError("output_augment operands must have equal length")
    return nm.concat([nm.mul(rho_enc, q), nm.mul(rho_enc, r_prev), nm.abs_diff(rho_enc, q)])
