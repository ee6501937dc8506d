"""Flat-memory comparators with the same episode interface as the model.

Two styles: an erase/add memory addressed by content similarity (slots
are blended on every write), and an augmented-interaction memory whose
whole contents are recomputed through one rectified affine map per step.
Both consume the image-level summary vector (mean of encoded patches),
since a flat memory has no patch hierarchy, and reuse the same classifier
and future-decoder head structure as the main model.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import numerics as nm
from .attention import AttentionParams, attend_cols, init_attention
from .encoders import BiGruParams, bigru_decode, bigru_encode_mat, init_bigru
from .memory import FeatureGrid
from .model import AblationFlags, ModelConfig, StepOutput
from .numerics import ShapeError, Tensor

_EPS = 1e-8


@dataclass
class FlatMemoryState:
    """Fixed number of vector slots plus the previous read vector."""

    slots: np.ndarray        # (slot_dim, capacity)
    r_prev: np.ndarray       # (slot_dim,)

    @property
    def capacity(self) -> int:
        return self.slots.shape[1]

    @property
    def slot_dim(self) -> int:
        return self.slots.shape[0]

    @property
    def valid(self) -> np.ndarray:
        # a flat memory is fully allocated from the start
        return np.ones(self.capacity, dtype=bool)


def flat_memory_reset(capacity: int, slot_dim: int) -> FlatMemoryState:
    if min(capacity, slot_dim) <= 0:
        raise ValueError("memory dimensions must be positive")
    return FlatMemoryState(slots=np.zeros((slot_dim, capacity)), r_prev=np.zeros(slot_dim))


# -- erase/add (NTM style) -------------------------------------------------------


def ntm_read(state: FlatMemoryState, gamma: Tensor) -> Tensor:
    """Convex combination of slot contents under normalised weights."""
    if gamma.data.shape != (state.capacity,):
        raise ShapeError("weight vector length must equal the slot count")
    if abs(float(gamma.data.sum()) - 1.0) > 1e-9:
        raise ValueError("read weights must sum to 1")
    return nm.matmul(Tensor(state.slots), gamma)


def ntm_update(state: FlatMemoryState, gamma: Tensor, erase: Tensor, add: Tensor,
               ) -> FlatMemoryState:
    """Per-slot erase then add: M_i <- M_i * (1 - g_i e) + g_i a."""
    if gamma.data.shape != (state.capacity,):
        raise ShapeError("weight vector length must equal the slot count")
    if erase.data.shape != (state.slot_dim,) or add.data.shape != (state.slot_dim,):
        raise ShapeError("erase/add vectors must match the slot width")
    if np.any(erase.data < 0) or np.any(erase.data > 1):
        raise ValueError("erase components must lie in [0, 1]")
    e_g = np.outer(erase.data, gamma.data)
    a_g = np.outer(add.data, gamma.data)
    return FlatMemoryState(slots=state.slots * (1.0 - e_g) + a_g,
                           r_prev=state.r_prev)


@dataclass
class NtmParams:
    """Encoder, content addressing, erase/add heads, classifier, decoder."""

    cfg: ModelConfig
    encoder: BiGruParams
    w_q: Tensor
    b_q: Tensor
    w_e: Tensor
    b_e: Tensor
    w_a: Tensor
    b_a: Tensor
    w_y: Tensor
    b_y: Tensor
    w_eta: Tensor
    b_eta: Tensor
    w_init: Tensor
    b_init: Tensor
    decoder: BiGruParams

    def named_tensors(self) -> list[tuple[str, Tensor]]:
        out = list(self.encoder.tensors("encoder"))
        out.extend(self.decoder.tensors("decoder"))
        out.extend([("w_q", self.w_q), ("b_q", self.b_q), ("w_e", self.w_e),
                    ("b_e", self.b_e), ("w_a", self.w_a), ("b_a", self.b_a),
                    ("w_y", self.w_y), ("b_y", self.b_y), ("w_eta", self.w_eta),
                    ("b_eta", self.b_eta), ("w_init", self.w_init),
                    ("b_init", self.b_init)])
        return out

    def param_count(self) -> int:
        return sum(t.size for _, t in self.named_tensors())


def init_ntm(rng: np.random.Generator, cfg: ModelConfig) -> NtmParams:
    h, d = cfg.hidden, cfg.feature_dim
    two_h = 2 * h

    def mat(rows, cols):
        return Tensor(rng.uniform(-1.0 / np.sqrt(cols), 1.0 / np.sqrt(cols), size=(rows, cols)))

    return NtmParams(
        cfg=cfg,
        encoder=init_bigru(rng, d, h),
        w_q=mat(two_h, two_h), b_q=nm.zeros(two_h),
        w_e=mat(two_h, two_h), b_e=nm.zeros(two_h),
        w_a=mat(two_h, two_h), b_a=nm.zeros(two_h),
        w_y=mat(2, two_h), b_y=nm.zeros(2),
        w_eta=mat(d, two_h), b_eta=nm.zeros(d),
        w_init=mat(h, two_h + cfg.noise_dim), b_init=nm.zeros(h),
        decoder=init_bigru(rng, 0, h),
    )


def _summary(encoder: BiGruParams, f: FeatureGrid) -> Tensor:
    """Mean of the encoded patches."""
    k = f.num_patches
    x = Tensor(np.ascontiguousarray(f.patches.T))
    enc = bigru_encode_mat(encoder, x, k, 1)
    return nm.scale(nm.matmul(enc, Tensor(np.ones(k))), 1.0 / k)


def _cosine_address(query: Tensor, slots: np.ndarray) -> Tensor:
    """Softmax over cosine similarity between the query and each slot."""
    q_norm_inv = nm.reciprocal(nm.sqrt(nm.add(nm.dot(query, query), nm.scalar(_EPS))))
    scores = []
    for i in range(slots.shape[1]):
        m = Tensor(slots[:, i].copy())
        m_norm = float(np.sqrt(m.data @ m.data + _EPS))
        sim = nm.scale(nm.dot(query, m), 1.0 / m_norm)
        scores.append(nm.mul(sim, q_norm_inv))
    return nm.softmax(nm.stack_scalars(scores))


def _decode_future(params, r: Tensor, noise: Tensor | None) -> Tensor:
    cfg = params.cfg
    if noise is None:
        noise = nm.zeros(cfg.noise_dim)
    init = nm.affine(params.w_init, nm.concat([r, noise]), params.b_init)
    states = bigru_decode(params.decoder, init, cfg.num_patches)
    return nm.relu(nm.affine(params.w_eta, nm.stack_cols(states), params.b_eta))


class NtmModel:
    """Content-addressed erase/add memory with the shared episode surface."""

    kind = "ntm"

    def __init__(self, params: NtmParams):
        self.params = params

    @property
    def cfg(self) -> ModelConfig:
        return self.params.cfg

    def named_tensors(self) -> list[tuple[str, Tensor]]:
        return self.params.named_tensors()

    def new_state(self) -> FlatMemoryState:
        return flat_memory_reset(self.params.cfg.memory_len, 2 * self.params.cfg.hidden)

    def step(self, state: FlatMemoryState, f: FeatureGrid, noise: Tensor | None = None,
             flags: AblationFlags | None = None) -> tuple[StepOutput, FlatMemoryState]:
        p = self.params
        cfg = p.cfg
        s = _summary(p.encoder, f)
        query = nm.affine(p.w_q, s, p.b_q)
        gamma = _cosine_address(query, state.slots)
        r = ntm_read(state, gamma)
        y_hat = nm.softmax(nm.affine(p.w_y, r, p.b_y))
        eta_hat = _decode_future(p, r, noise)
        erase = nm.sigmoid(nm.affine(p.w_e, s, p.b_e))
        add = nm.sigmoid(nm.affine(p.w_a, s, p.b_a))
        new_state = ntm_update(state, gamma.detach(), erase.detach(), add.detach())
        new_state = FlatMemoryState(slots=new_state.slots, r_prev=r.data.copy())
        out = StepOutput(y_hat=y_hat, eta_hat=eta_hat, r=r,
                         beta=np.zeros(cfg.num_patches),
                         alpha=np.zeros((cfg.memory_len, cfg.num_patches)),
                         gamma=gamma.data.copy())
        return out, new_state


# -- recomputed-memory (DMN style) ------------------------------------------------


@dataclass
class DmnParams:
    """Encoder, query projection, interaction attention, output projection,
    whole-memory update map, classifier, decoder."""

    cfg: ModelConfig
    encoder: BiGruParams
    w_q: Tensor
    b_q: Tensor
    attn: AttentionParams
    w_o: Tensor
    b_o: Tensor
    w_u: Tensor
    w_y: Tensor
    b_y: Tensor
    w_eta: Tensor
    b_eta: Tensor
    w_init: Tensor
    b_init: Tensor
    decoder: BiGruParams

    def named_tensors(self) -> list[tuple[str, Tensor]]:
        out = list(self.encoder.tensors("encoder"))
        out.extend(self.decoder.tensors("decoder"))
        out.extend(self.attn.tensors("attn"))
        out.extend([("w_q", self.w_q), ("b_q", self.b_q), ("w_o", self.w_o),
                    ("b_o", self.b_o), ("w_u", self.w_u), ("w_y", self.w_y),
                    ("b_y", self.b_y), ("w_eta", self.w_eta), ("b_eta", self.b_eta),
                    ("w_init", self.w_init), ("b_init", self.b_init)])
        return out

    def param_count(self) -> int:
        return sum(t.size for _, t in self.named_tensors())


def init_dmn(rng: np.random.Generator, cfg: ModelConfig) -> DmnParams:
    h, d, ell = cfg.hidden, cfg.feature_dim, cfg.memory_len
    two_h = 2 * h

    def mat(rows, cols):
        return Tensor(rng.uniform(-1.0 / np.sqrt(cols), 1.0 / np.sqrt(cols), size=(rows, cols)))

    return DmnParams(
        cfg=cfg,
        encoder=init_bigru(rng, d, h),
        w_q=mat(two_h, two_h), b_q=nm.zeros(two_h),
        attn=init_attention(rng, 4 * two_h, h),
        w_o=mat(two_h, 4 * two_h), b_o=nm.zeros(two_h),
        w_u=mat(ell * two_h, (ell + 2) * two_h),
        w_y=mat(2, two_h), b_y=nm.zeros(2),
        w_eta=mat(d, two_h), b_eta=nm.zeros(d),
        w_init=mat(h, two_h + cfg.noise_dim), b_init=nm.zeros(h),
        decoder=init_bigru(rng, 0, h),
    )


def dmn_read(state: FlatMemoryState, params: DmnParams, q: Tensor, f: Tensor) -> Tensor:
    """Attention-pooled interaction vector projected back to the slot width.

    Interactions per slot: [f*q ; M_i*f ; |f - M_i| ; |f - q|].
    """
    d_m = state.slot_dim
    if q.data.shape != (d_m,) or f.data.shape != (d_m,):
        raise ShapeError("query and input summary must match the slot width")
    n = state.capacity
    slots = Tensor(state.slots)
    f_rep = nm.tile_cols(f, n)
    q_rep = nm.tile_cols(q, n)
    mu = nm.concat([nm.mul(f_rep, q_rep), nm.mul(slots, f_rep),
                    nm.abs_diff(f_rep, slots), nm.abs_diff(f_rep, q_rep)])
    _, pooled = attend_cols(params.attn, mu)
    return nm.affine(params.w_o, pooled, params.b_o)


def dmn_read_weights(state: FlatMemoryState, params: DmnParams, q: Tensor, f: Tensor,
                     ) -> tuple[Tensor, Tensor]:
    """Like :func:`dmn_read` but also returns the attention weights."""
    n = state.capacity
    slots = Tensor(state.slots)
    f_rep = nm.tile_cols(f, n)
    q_rep = nm.tile_cols(q, n)
    mu = nm.concat([nm.mul(f_rep, q_rep), nm.mul(slots, f_rep),
                    nm.abs_diff(f_rep, slots), nm.abs_diff(f_rep, q_rep)])
    weights, pooled = attend_cols(params.attn, mu)
    return nm.affine(params.w_o, pooled, params.b_o), weights


def dmn_update(state: FlatMemoryState, params: DmnParams, r: Tensor, q: Tensor,
               ) -> FlatMemoryState:
    """Whole-memory recomputation: M <- relu(W [vec(M) ; r ; q])."""
    d_m, n = state.slot_dim, state.capacity
    if r.data.shape != (d_m,) or q.data.shape != (d_m,):
        raise ShapeError("r and q must match the slot width")
    flat = Tensor(state.slots.T.reshape(-1).copy())  # slot-major
    stacked = nm.concat([flat, r, q])
    new_flat = nm.relu(nm.matmul(params.w_u, stacked))
    new_slots = new_flat.data.reshape(n, d_m).T.copy()
    return FlatMemoryState(slots=new_slots, r_prev=state.r_prev)


class DmnModel:
    """Recomputed flat memory with the shared episode surface."""

    kind = "dmn"

    def __init__(self, params: DmnParams):
        self.params = params

    @property
    def cfg(self) -> ModelConfig:
        return self.params.cfg

    def named_tensors(self) -> list[tuple[str, Tensor]]:
        return self.params.named_tensors()

    def new_state(self) -> FlatMemoryState:
        return flat_memory_reset(self.params.cfg.memory_len, 2 * self.params.cfg.hidden)

    def step(self, state: FlatMemoryState, f: FeatureGrid, noise: Tensor | None = None,
             flags: AblationFlags | None = None) -> tuple[StepOutput, FlatMemoryState]:
        p = self.params
        cfg = p.cfg
        s = _summary(p.encoder, f)
        query = nm.affine(p.w_q, s, p.b_q)
        r, weights = dmn_read_weights(state, p, query, s)
        y_hat = nm.softmax(nm.affine(p.w_y, r, p.b_y))
        eta_hat = _decode_future(p, r, noise)
        new_state = dmn_update(state, p, r.detach(), query.detach())
        new_state = FlatMemoryState(slots=new_state.slots, r_prev=r.data.copy())
        out = StepOutput(y_hat=y_hat, eta_hat=eta_hat, r=r,
                         beta=np.zeros(cfg.num_patches),
                         alpha=np.zeros((cfg.memory_len, cfg.num_patches)),
                         gamma=weights.data.copy())
        return out, new_state
