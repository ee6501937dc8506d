"""FIFO slot memory with a two-stage attention read.

Slots hold raw patch grids exactly as they arrived; nothing is ever
blended into a slot.  A read re-encodes the stored grids, compares each
stored patch against the encoded incoming patch, pools per slot, encodes
the slot summaries, and pools again against the query before a final
linear projection.  Only the running read vector changes on a read.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import numerics as nm
from .attention import attend_cols
from .encoders import bigru_encode_mat
from .numerics import ShapeError, Tensor


@dataclass
class FeatureGrid:
    """One frame's patch embeddings, shape (patches, features)."""

    patches: np.ndarray

    def __post_init__(self):
        self.patches = np.asarray(self.patches, dtype=np.float64)
        if self.patches.ndim != 2:
            raise ShapeError("a feature grid must be 2-d (patches x features)")

    @property
    def num_patches(self) -> int:
        return self.patches.shape[0]

    @property
    def feature_dim(self) -> int:
        return self.patches.shape[1]


@dataclass
class MemoryState:
    """Ring of the last `capacity` grids plus the previous read vector.

    Slots are chronological: the last element is the newest entry, and the
    last `valid_count` slots are the ones that have actually been written.
    """

    slots: list[FeatureGrid]
    valid_count: int
    r_prev: np.ndarray

    @property
    def capacity(self) -> int:
        return len(self.slots)

    @property
    def valid(self) -> np.ndarray:
        mask = np.zeros(self.capacity, dtype=bool)
        if self.valid_count:
            mask[self.capacity - self.valid_count:] = True
        return mask

    def valid_slots(self) -> list[FeatureGrid]:
        if self.valid_count == 0:
            return []
        return self.slots[self.capacity - self.valid_count:]


@dataclass
class ReadTrace:
    """Per-read attention weights, padded with zeros for invalid slots."""

    alpha: np.ndarray  # (capacity, patches)
    gamma: np.ndarray  # (capacity,)


def memory_reset(capacity: int, num_patches: int, feature_dim: int, hidden: int) -> MemoryState:
    """Fresh state: zeroed slots, none valid, zero read vector."""
    if min(capacity, num_patches, feature_dim, hidden) <= 0:
        raise ValueError("memory dimensions must be positive")
    slots = [FeatureGrid(np.zeros((num_patches, feature_dim))) for _ in range(capacity)]
    return MemoryState(slots=slots, valid_count=0, r_prev=np.zeros(2 * hidden))


def memory_update(state: MemoryState, f: FeatureGrid) -> MemoryState:
    """Drop the oldest slot, append the new grid unmodified."""
    ref = state.slots[0]
    if f.patches.shape != ref.patches.shape:
        raise ShapeError(f"grid shape {f.patches.shape} != slot shape {ref.patches.shape}")
    return MemoryState(
        slots=state.slots[1:] + [f],
        valid_count=min(state.valid_count + 1, state.capacity),
        r_prev=state.r_prev,
    )


def _uniform_weights(k: int, n: int) -> Tensor:
    return Tensor(np.full((k, n), 1.0 / k))


def memory_read_traced(state: MemoryState, params, input_enc: Tensor, q: Tensor,
                       use_alpha: bool = True, use_gamma: bool = True,
                       ) -> tuple[Tensor, ReadTrace]:
    """Hierarchical read returning the read vector and attention traces.

    ``params`` must provide mem_encoder / rho_encoder (BiGruParams),
    alpha / gamma (AttentionParams) and w_r (projection tensor).
    input_enc is the (2*hidden, patches) matrix of encoded input patches,
    q the query vector pooled from it.  Invalid slots take no part in the
    read and receive exactly zero attention mass.  The state's running
    read vector is replaced by the result.
    """
    cap = state.capacity
    k = state.slots[0].num_patches
    d = state.slots[0].feature_dim
    two_h = state.r_prev.shape[0]
    if params.mem_encoder.input_size != d:
        raise ShapeError("feature dim of memory and encoder differ")
    if 2 * params.mem_encoder.hidden_size != two_h:
        raise ShapeError("hidden size of state and params differ")
    if input_enc.data.shape != (two_h, k):
        raise ShapeError(f"input_enc must be ({two_h}, {k})")
    if q.data.shape != (two_h,):
        raise ShapeError(f"query must have length {two_h}")

    valid = state.valid_slots()
    n = len(valid)
    trace = ReadTrace(alpha=np.zeros((cap, k)), gamma=np.zeros(cap))
    if n == 0:
        r = nm.zeros(two_h)
        state.r_prev = r.data.copy()
        return r, trace

    # (d, k*n): column k*n + i holds patch k of valid slot i
    stacked = np.stack([g.patches for g in valid], axis=0)  # (n, k, d)
    x_mem = Tensor(np.ascontiguousarray(stacked.transpose(2, 1, 0).reshape(d, k * n)))

    p_enc = bigru_encode_mat(params.mem_encoder, x_mem, k, n)
    f_rep = nm.repeat_cols(input_enc, n)
    aug = nm.concat([nm.mul(p_enc, f_rep), nm.abs_diff(p_enc, f_rep)])  # (4h, k*n)

    if use_alpha:
        proj = nm.tanh(nm.affine(params.alpha.w, aug, params.alpha.b))
        scores = nm.matmul(nm.transpose(proj), params.alpha.c)
        alpha_w = nm.softmax_cols(nm.as_matrix(scores, k, n))
    else:
        alpha_w = _uniform_weights(k, n)
    rho = nm.pool_blocks(aug, alpha_w)  # (4h, n)

    rho_enc = bigru_encode_mat(params.rho_encoder, rho, n, 1)  # (2h, n)
    q_rep = nm.tile_cols(q, n)
    r_rep = nm.tile_cols(Tensor(state.r_prev), n)
    z = nm.concat([nm.mul(rho_enc, q_rep), nm.mul(rho_enc, r_rep),
                   nm.abs_diff(rho_enc, q_rep)])  # (6h, n)

    if use_gamma:
        gamma_w, pooled = attend_cols(params.gamma, z)
    else:
        gamma_w = Tensor(np.full(n, 1.0 / n))
        pooled = nm.matmul(z, gamma_w)
    r = nm.matmul(params.w_r, pooled)

    trace.alpha[cap - n:, :] = alpha_w.data.T
    trace.gamma[cap - n:] = gamma_w.data
    state.r_prev = r.data.copy()
    return r, trace


def memory_read(state: MemoryState, params, input_enc: Tensor, q: Tensor) -> Tensor:
    """Hierarchical read; see :func:`memory_read_traced`."""
    r, _ = memory_read_traced(state, params, input_enc, q)
    return r
