"""GRU cell and bidirectional sequence encoder/decoder.

The cell follows the standard gated formulation: update gate z, reset gate
r, candidate state h~, and h' = (1 - z) * h + z * h~.  The bidirectional
encoder runs independent forward and backward cells over a sequence and
concatenates their states per position.  The decoder unrolls both
directions from a seeded hidden state with no per-step input (the cells
are built with input width zero, so there are no unused input weights).
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import numerics as nm
from .numerics import ShapeError, Tensor


@dataclass
class GruParams:
    """One direction's gate parameters.

    w_* map the input (shape hidden x input_dim), u_* map the previous
    hidden state (hidden x hidden), b_* are biases.
    """

    w_z: Tensor
    u_z: Tensor
    b_z: Tensor
    w_r: Tensor
    u_r: Tensor
    b_r: Tensor
    w_h: Tensor
    u_h: Tensor
    b_h: Tensor

    def __post_init__(self):
        h, d = self.w_z.shape
        for name in ("w_z", "w_r", "w_h"):
            if getattr(self, name).shape != (h, d):
                raise ShapeError(f"{name} must have shape {(h, d)}")
        for name in ("u_z", "u_r", "u_h"):
            if getattr(self, name).shape != (h, h):
                raise ShapeError(f"{name} must have shape {(h, h)}")
        for name in ("b_z", "b_r", "b_h"):
            if getattr(self, name).shape != (h,):
                raise ShapeError(f"{name} must have shape {(h,)}")

    @property
    def hidden_size(self) -> int:
        return self.w_z.shape[0]

    @property
    def input_size(self) -> int:
        return self.w_z.shape[1]

    def tensors(self, prefix: str):
        for name in ("w_z", "u_z", "b_z", "w_r", "u_r", "b_r", "w_h", "u_h", "b_h"):
            t = getattr(self, name)
            if t.size:  # input-free cells have empty input weights
                yield f"{prefix}.{name}", t


@dataclass
class BiGruParams:
    fwd: GruParams
    bwd: GruParams

    def __post_init__(self):
        if self.fwd.hidden_size != self.bwd.hidden_size:
            raise ShapeError("forward/backward hidden sizes differ")
        if self.fwd.input_size != self.bwd.input_size:
            raise ShapeError("forward/backward input sizes differ")

    @property
    def hidden_size(self) -> int:
        return self.fwd.hidden_size

    @property
    def input_size(self) -> int:
        return self.fwd.input_size

    def tensors(self, prefix: str):
        yield from self.fwd.tensors(f"{prefix}.fwd")
        yield from self.bwd.tensors(f"{prefix}.bwd")


def init_gru(rng: np.random.Generator, input_size: int, hidden_size: int) -> GruParams:
    """Uniform fan-in scaled weights, zero biases."""
    def w(rows, cols):
        if cols == 0:
            return Tensor(np.zeros((rows, 0)))
        s = 1.0 / np.sqrt(cols)
        return Tensor(rng.uniform(-s, s, size=(rows, cols)))

    return GruParams(
        w_z=w(hidden_size, input_size), u_z=w(hidden_size, hidden_size), b_z=nm.zeros(hidden_size),
        w_r=w(hidden_size, input_size), u_r=w(hidden_size, hidden_size), b_r=nm.zeros(hidden_size),
        w_h=w(hidden_size, input_size), u_h=w(hidden_size, hidden_size), b_h=nm.zeros(hidden_size),
    )


def init_bigru(rng: np.random.Generator, input_size: int, hidden_size: int) -> BiGruParams:
    return BiGruParams(fwd=init_gru(rng, input_size, hidden_size),
                       bwd=init_gru(rng, input_size, hidden_size))


def gru_step(p: GruParams, x: Tensor | None, h_prev: Tensor) -> Tensor:
    """One cell update.  x may be None for input-free (decoder) cells, or a
    vector / column-batched matrix matching h_prev's layout."""
    if x is not None and x.data.shape[0] != p.input_size:
        raise ShapeError(f"input size {x.data.shape[0]} != {p.input_size}")
    if h_prev.data.shape[0] != p.hidden_size:
        raise ShapeError(f"hidden size {h_prev.data.shape[0]} != {p.hidden_size}")

    batched = h_prev.data.ndim == 2
    if batched:
        n = h_prev.data.shape[1]
        bz = nm.tile_cols(p.b_z, n)
        br = nm.tile_cols(p.b_r, n)
        bh = nm.tile_cols(p.b_h, n)
    else:
        bz, br, bh = p.b_z, p.b_r, p.b_h

    def gate(w, u, b):
        pre = nm.add(nm.matmul(u, h_prev), b)
        if x is not None and p.input_size > 0:
            pre = nm.add(nm.matmul(w, x), pre)
        return pre

    z = nm.sigmoid(gate(p.w_z, p.u_z, bz))
    r = nm.sigmoid(gate(p.w_r, p.u_r, br))
    pre_c = nm.add(nm.matmul(p.u_h, nm.mul(r, h_prev)), bh)
    if x is not None and p.input_size > 0:
        pre_c = nm.add(nm.matmul(p.w_h, x), pre_c)
    cand = nm.tanh(pre_c)
    return nm.gate_blend(z, h_prev, cand)


def _scan(p: GruParams, columns: list[Tensor | None], h0: Tensor) -> list[Tensor]:
    states = []
    h = h0
    for x in columns:
        h = gru_step(p, x, h)
        states.append(h)
    return states


def bigru_encode_mat(p: BiGruParams, x: Tensor, steps: int, batch: int) -> Tensor:
    """Encode a column-batched sequence.

    x has shape (input, steps*batch), step-major: column k*batch + j is step
    k of lane j.  Returns (2*hidden, steps*batch) in the same layout, where
    rows stack the forward state over the backward state at each step.
    """
    if x.data.shape != (p.input_size, steps * batch):
        raise ShapeError(f"expected {(p.input_size, steps * batch)}, got {x.data.shape}")
    if steps < 1:
        raise ValueError("empty sequence")
    cols = [nm.slice_cols(x, k * batch, (k + 1) * batch) for k in range(steps)]
    h0 = nm.zeros(p.hidden_size, batch)
    f_states = _scan(p.fwd, cols, h0)
    b_states = _scan(p.bwd, cols[::-1], h0)[::-1]
    return nm.hstack([nm.concat([f, b]) for f, b in zip(f_states, b_states)])


def bigru_encode(p: BiGruParams, seq: list[Tensor]) -> list[Tensor]:
    """Encode a sequence of vectors; element k of the result concatenates
    the forward state after reading elements 1..k and the backward state
    after reading elements K..k."""
    if not seq:
        raise ValueError("empty sequence")
    h0 = nm.zeros(p.hidden_size)
    f_states = _scan(p.fwd, list(seq), h0)
    b_states = _scan(p.bwd, list(seq)[::-1], h0)[::-1]
    return [nm.concat([f, b]) for f, b in zip(f_states, b_states)]


def bigru_decode(p: BiGruParams, init: Tensor, steps: int) -> list[Tensor]:
    """Unroll both directions for `steps` input-free updates from a shared
    initial hidden state; element k concatenates the forward state at k
    with the backward state at k (scanned from the far end)."""
    if steps < 1:
        raise ValueError("steps must be positive")
    if init.data.shape != (p.hidden_size,):
        raise ShapeError(f"init must have shape {(p.hidden_size,)}")
    f_states = _scan(p.fwd, [None] * steps, init)
    b_states = _scan(p.bwd, [None] * steps, init)[::-1]
    return [nm.concat([f, b]) for f, b in zip(f_states, b_states)]
