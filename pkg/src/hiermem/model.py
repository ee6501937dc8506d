"""Full model step: encode patches, query memory, classify, predict ahead.

A step encodes the incoming grid with the input encoder, pools a query
with input-level attention, reads the slot memory, classifies the read
vector, decodes a predicted future grid, and finally appends the raw grid
to the memory.  The append happens after the read, so a frame never
attends to itself.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field

import numpy as np

from . import numerics as nm
from .attention import AttentionParams, attend_cols, init_attention
from .encoders import BiGruParams, bigru_decode, bigru_encode_mat, init_bigru
from .memory import (FeatureGrid, MemoryState, memory_read_traced, memory_reset,
                     memory_update)
from .numerics import ShapeError, Tensor

log = logging.getLogger(__name__)

NOISE_DIM = 16


@dataclass
class ModelConfig:
    """Shape parameters of one model instance."""

    memory_len: int
    num_patches: int
    feature_dim: int
    hidden: int
    noise_dim: int = NOISE_DIM

    def __post_init__(self):
        if min(self.memory_len, self.num_patches, self.feature_dim, self.hidden) <= 0:
            raise ValueError("model dimensions must be positive")
        if self.noise_dim < 0:
            raise ValueError("noise dimension must be non-negative")


@dataclass
class AblationFlags:
    """Which attention tiers are active; inactive tiers pool uniformly."""

    use_beta: bool = True
    use_alpha: bool = True
    use_gamma: bool = True


@dataclass
class HmnParams:
    """All trainable tensors of the generator side.

    input_encoder encodes incoming patch grids, mem_encoder re-encodes
    stored grids, rho_encoder summarises per-slot pooled interactions,
    decoder unrolls the future prediction.  beta/alpha/gamma are the three
    attention tiers; w_r projects the pooled slot interaction back to the
    read-vector width; w_y/b_y classify and w_eta/b_eta emit patch
    features; w_init/b_init seed the decoder from the read vector plus a
    noise vector.
    """

    cfg: ModelConfig
    input_encoder: BiGruParams
    mem_encoder: BiGruParams
    rho_encoder: BiGruParams
    decoder: BiGruParams
    beta: AttentionParams
    alpha: AttentionParams
    gamma: AttentionParams
    w_r: Tensor
    w_y: Tensor
    b_y: Tensor
    w_eta: Tensor
    b_eta: Tensor
    w_init: Tensor
    b_init: Tensor

    def named_tensors(self) -> list[tuple[str, Tensor]]:
        out = []
        out.extend(self.input_encoder.tensors("input_encoder"))
        out.extend(self.mem_encoder.tensors("mem_encoder"))
        out.extend(self.rho_encoder.tensors("rho_encoder"))
        out.extend(self.decoder.tensors("decoder"))
        out.extend(self.beta.tensors("beta"))
        out.extend(self.alpha.tensors("alpha"))
        out.extend(self.gamma.tensors("gamma"))
        out.extend([("w_r", self.w_r), ("w_y", self.w_y), ("b_y", self.b_y),
                    ("w_eta", self.w_eta), ("b_eta", self.b_eta),
                    ("w_init", self.w_init), ("b_init", self.b_init)])
        return out

    def param_count(self) -> int:
        return sum(t.size for _, t in self.named_tensors())


def init_hmn(rng: np.random.Generator, cfg: ModelConfig) -> HmnParams:
    h, d = cfg.hidden, cfg.feature_dim
    two_h = 2 * h

    def mat(rows, cols):
        return Tensor(rng.uniform(-1.0 / np.sqrt(cols), 1.0 / np.sqrt(cols), size=(rows, cols)))

    params = HmnParams(
        cfg=cfg,
        input_encoder=init_bigru(rng, d, h),
        mem_encoder=init_bigru(rng, d, h),
        rho_encoder=init_bigru(rng, 4 * h, h),
        decoder=init_bigru(rng, 0, h),
        beta=init_attention(rng, two_h, h),
        alpha=init_attention(rng, 4 * h, h),
        gamma=init_attention(rng, 6 * h, h),
        w_r=mat(two_h, 6 * h),
        w_y=mat(2, two_h),
        b_y=nm.zeros(2),
        w_eta=mat(d, two_h),
        b_eta=nm.zeros(d),
        w_init=mat(h, two_h + cfg.noise_dim),
        b_init=nm.zeros(h),
    )
    log.info("model built: %d trainable parameters", params.param_count())
    return params


@dataclass
class StepOutput:
    """One step's predictions and attention traces."""

    y_hat: Tensor            # 2-class probabilities (real, fake)
    eta_hat: Tensor          # predicted future grid, (patches, features) layout (d, K) columns
    r: Tensor                # read vector
    beta: np.ndarray         # (patches,)
    alpha: np.ndarray        # (memory_len, patches), zero rows for invalid slots
    gamma: np.ndarray        # (memory_len,), zero for invalid slots

    def eta_grid(self) -> np.ndarray:
        """Predicted future grid as (patches, features)."""
        return self.eta_hat.data.T.copy()


def classify(params: HmnParams, r: Tensor) -> Tensor:
    """Two-class probabilities from the read vector."""
    return nm.softmax(nm.affine(params.w_y, r, params.b_y))


def predict_future(params: HmnParams, r: Tensor, noise: Tensor | None = None) -> Tensor:
    """Decode a predicted future grid from the read vector.

    Returns a (features, patches) matrix; every entry is non-negative.
    noise defaults to zeros, which is the deterministic inference path.
    """
    cfg = params.cfg
    if r.data.shape != (2 * cfg.hidden,):
        raise ShapeError(f"read vector must have length {2 * cfg.hidden}")
    if noise is None:
        noise = nm.zeros(cfg.noise_dim)
    if noise.data.shape != (cfg.noise_dim,):
        raise ShapeError(f"noise must have length {cfg.noise_dim}")
    init = nm.affine(params.w_init, nm.concat([r, noise]), params.b_init)
    states = bigru_decode(params.decoder, init, cfg.num_patches)
    return nm.relu(nm.affine(params.w_eta, nm.stack_cols(states), params.b_eta))


def encode_input(params: HmnParams, f: FeatureGrid) -> Tensor:
    """Encoded input patches as a (2*hidden, patches) matrix."""
    cfg = params.cfg
    if f.patches.shape != (cfg.num_patches, cfg.feature_dim):
        raise ShapeError(f"grid must be ({cfg.num_patches}, {cfg.feature_dim})")
    x = Tensor(np.ascontiguousarray(f.patches.T))
    return bigru_encode_mat(params.input_encoder, x, cfg.num_patches, 1)


def hmn_step(params: HmnParams, state: MemoryState, f: FeatureGrid,
             noise: Tensor | None = None, flags: AblationFlags | None = None,
             ) -> tuple[StepOutput, MemoryState]:
    """Run one full step and append the raw grid to memory afterwards."""
    cfg = params.cfg
    flags = flags or AblationFlags()
    if state.capacity != cfg.memory_len:
        raise ShapeError("memory capacity does not match configuration")

    f_enc = encode_input(params, f)
    if flags.use_beta:
        beta_w, q = attend_cols(params.beta, f_enc)
        beta_trace = beta_w.data.copy()
    else:
        beta_w = Tensor(np.full(cfg.num_patches, 1.0 / cfg.num_patches))
        q = nm.matmul(f_enc, beta_w)
        beta_trace = beta_w.data.copy()

    r, trace = memory_read_traced(state, params, f_enc, q,
                                  use_alpha=flags.use_alpha, use_gamma=flags.use_gamma)
    y_hat = classify(params, r)
    eta_hat = predict_future(params, r, noise)
    new_state = memory_update(state, f)
    out = StepOutput(y_hat=y_hat, eta_hat=eta_hat, r=r,
                     beta=beta_trace, alpha=trace.alpha, gamma=trace.gamma)
    return out, new_state


def trace_record(frame_index: int, out: StepOutput) -> dict:
    """JSON-serialisable attention trace for one frame."""
    return {
        "frame": frame_index,
        "beta": out.beta.tolist(),
        "alpha": out.alpha.tolist(),
        "gamma": out.gamma.tolist(),
    }


class HmnModel:
    """Episode-stepping adapter around :class:`HmnParams`.

    Baseline memories implement the same surface, so training and
    evaluation code is agnostic to the memory architecture.
    """

    kind = "hmn"

    def __init__(self, params: HmnParams):
        self.params = params

    @property
    def cfg(self) -> ModelConfig:
        return self.params.cfg

    def named_tensors(self) -> list[tuple[str, Tensor]]:
        return self.params.named_tensors()

    def new_state(self) -> MemoryState:
        cfg = self.params.cfg
        return memory_reset(cfg.memory_len, cfg.num_patches, cfg.feature_dim, cfg.hidden)

    def step(self, state: MemoryState, f: FeatureGrid, noise: Tensor | None = None,
             flags: AblationFlags | None = None) -> tuple[StepOutput, MemoryState]:
        return hmn_step(self.params, state, f, noise=noise, flags=flags)
