"""Adversarial multi-task training.

The generator side (the full model) is trained on a non-saturating
adversarial term plus classification cross-entropy plus a squared-error
term on the predicted future grid.  The discriminator scores a future
grid conditioned on the read vector and is updated separately; neither
update ever touches the other side's parameters.
"""

from __future__ import annotations

import io
import json
import logging
import struct
from dataclasses import dataclass, field

import numpy as np

from . import numerics as nm
from .encoders import BiGruParams, bigru_encode_mat, init_bigru
from .model import AblationFlags, ModelConfig
from .numerics import NonFiniteError, ShapeError, Tape, Tensor

log = logging.getLogger(__name__)

DIVERGENCE_LIMIT = 1e6


@dataclass
class TrainConfig:
    """Optimiser, loss and shape settings for one run."""

    learning_rate: float = 2e-3
    batch_size: int = 1
    steps: int = 2000
    seed: int = 42
    lambda_mse: float = 1.0
    lambda_cls: float = 1.0
    d_steps: int = 1
    memory_len: int = 200
    num_patches: int = 196
    feature_dim: int = 256
    hidden: int = 300
    delta: int = 15

    def __post_init__(self):
        positives = dict(batch_size=self.batch_size, steps=self.steps,
                         d_steps=self.d_steps, memory_len=self.memory_len,
                         num_patches=self.num_patches, feature_dim=self.feature_dim,
                         hidden=self.hidden, delta=self.delta)
        for name, value in positives.items():
            if value <= 0 and not (name == "steps" and value == 0):
                raise ValueError(f"{name} must be positive")
        if self.learning_rate < 0 or self.lambda_mse < 0 or self.lambda_cls < 0:
            raise ValueError("rates and loss weights must be non-negative")

    def model_config(self) -> ModelConfig:
        return ModelConfig(memory_len=self.memory_len, num_patches=self.num_patches,
                           feature_dim=self.feature_dim, hidden=self.hidden)


@dataclass
class DiscriminatorParams:
    """Scores a future grid conditioned on the read vector.

    The grid is encoded patchwise, mean-pooled, fused with the read vector
    through a tanh layer, and mapped to a single logit.
    """

    encoder: BiGruParams
    w_fuse: Tensor
    b_fuse: Tensor
    w_out: Tensor
    b_out: Tensor

    def named_tensors(self) -> list[tuple[str, Tensor]]:
        out = list(self.encoder.tensors("disc.encoder"))
        out.extend([("disc.w_fuse", self.w_fuse), ("disc.b_fuse", self.b_fuse),
                    ("disc.w_out", self.w_out), ("disc.b_out", self.b_out)])
        return out


def init_discriminator(rng: np.random.Generator, cfg: ModelConfig) -> DiscriminatorParams:
    h = cfg.hidden

    def mat(rows, cols):
        return Tensor(rng.uniform(-1.0 / np.sqrt(cols), 1.0 / np.sqrt(cols), size=(rows, cols)))

    return DiscriminatorParams(
        encoder=init_bigru(rng, cfg.feature_dim, h),
        w_fuse=mat(h, 4 * h),
        b_fuse=nm.zeros(h),
        w_out=mat(1, h),
        b_out=nm.zeros(1),
    )


def discriminator_logit(disc: DiscriminatorParams, r: Tensor, eta: Tensor) -> Tensor:
    """Scalar logit for a (features, patches) grid under condition r."""
    if eta.data.ndim != 2 or eta.data.shape[0] != disc.encoder.input_size:
        raise ShapeError("grid feature dim does not match discriminator encoder")
    k = eta.data.shape[1]
    enc = bigru_encode_mat(disc.encoder, eta, k, 1)
    summary = nm.scale(nm.matmul(enc, Tensor(np.ones(k))), 1.0 / k)
    fused = nm.tanh(nm.affine(disc.w_fuse, nm.concat([summary, r]), disc.b_fuse))
    return nm.pick(nm.affine(disc.w_out, fused, disc.b_out), 0)


def d_loss(disc: DiscriminatorParams, r: Tensor, eta_real: Tensor, eta_fake: Tensor) -> Tensor:
    """-log D(r, real) - log(1 - D(r, fake)), in log-sigmoid form.

    eta_fake must already be detached from the generator tape.
    """
    logit_real = discriminator_logit(disc, r, eta_real)
    logit_fake = discriminator_logit(disc, r, eta_fake)
    return nm.add(nm.softplus(nm.scale(logit_real, -1.0)), nm.softplus(logit_fake))


def _check_probability(y_hat: Tensor) -> None:
    p = y_hat.data
    if p.ndim != 1 or abs(float(p.sum()) - 1.0) > 1e-6 or np.any(p < 0):
        raise ValueError("y_hat is not a probability vector")


def g_loss(disc: DiscriminatorParams, r: Tensor, eta_fake: Tensor, y_hat: Tensor,
           y_true: int, eta_true: Tensor, cfg: TrainConfig) -> Tensor:
    """Non-saturating adversarial term plus weighted classification
    cross-entropy plus weighted squared error on the predicted grid."""
    _check_probability(y_hat)
    adv = nm.softplus(nm.scale(discriminator_logit(disc, r, eta_fake), -1.0))
    loss = adv
    if cfg.lambda_cls != 0.0:
        loss = nm.add(loss, nm.scale(_cross_entropy(y_hat, y_true), cfg.lambda_cls))
    if cfg.lambda_mse != 0.0:
        loss = nm.add(loss, nm.scale(nm.sq_err_sum(eta_fake, eta_true), cfg.lambda_mse))
    return loss


def _cross_entropy(y_hat: Tensor, y_true: int) -> Tensor:
    if float(y_hat.data[int(y_true)]) <= 0.0:
        raise NonFiniteError("classifier saturated (true-class probability "
                             "underflowed to 0); lower the learning rate")
    return nm.scale(nm.log(nm.pick(y_hat, int(y_true))), -1.0)


class Adam:
    """Adam over a fixed list of (name, tensor) pairs; updates in place."""

    def __init__(self, named: list[tuple[str, Tensor]], lr: float,
                 beta1: float = 0.9, beta2: float = 0.999, eps: float = 1e-8):
        self.named = list(named)
        self.lr = lr
        self.beta1, self.beta2, self.eps = beta1, beta2, eps
        self.t = 0
        self.m = {name: np.zeros(t.data.shape) for name, t in self.named}
        self.v = {name: np.zeros(t.data.shape) for name, t in self.named}

    def zero_grads(self) -> None:
        for _, t in self.named:
            t.grad = None

    def step(self) -> None:
        self.t += 1
        b1, b2 = self.beta1, self.beta2
        for name, t in self.named:
            g = t.grad
            if g is None:
                g = np.zeros(t.data.shape)
            if not np.all(np.isfinite(g)):
                raise NonFiniteError(f"non-finite gradient for {name}")
            m = self.m[name] = b1 * self.m[name] + (1.0 - b1) * g
            v = self.v[name] = b2 * self.v[name] + (1.0 - b2) * (g * g)
            m_hat = m / (1.0 - b1 ** self.t)
            v_hat = v / (1.0 - b2 ** self.t)
            t.data = t.data - self.lr * m_hat / (np.sqrt(v_hat) + self.eps)


def optimizer_step(named: list[tuple[str, Tensor]], opt: Adam) -> None:
    """Apply one Adam update from the accumulated gradients, then clear them."""
    opt.step()
    opt.zero_grads()


@dataclass
class LossTrace:
    """Per-generator-step loss values."""

    rows: list[tuple[int, float, float, float, float]] = field(default_factory=list)

    def append(self, step: int, d_val: float, g_adv: float, g_cls: float, g_mse: float):
        self.rows.append((step, d_val, g_adv, g_cls, g_mse))

    def to_csv(self, path) -> None:
        with open(path, "w") as fh:
            fh.write("step,d_loss,g_adv,g_cls,g_mse\n")
            for row in self.rows:
                fh.write("%d,%.10g,%.10g,%.10g,%.10g\n" % row)


@dataclass
class LossFlags:
    """Which loss terms are trained; attention flags ride along."""

    use_gan: bool = True
    use_eta: bool = True
    attention: AblationFlags = field(default_factory=AblationFlags)


def train_epoch(model, disc: DiscriminatorParams | None, episodes,
                cfg: TrainConfig, rng: np.random.Generator,
                flags: LossFlags | None = None, max_steps: int | None = None,
                g_opt: Adam | None = None, d_opt: Adam | None = None,
                start_step: int = 0) -> LossTrace:
    """One pass over an episode stream.

    ``model`` is any episode stepper (the main model or a flat-memory
    baseline).  Episodes are advanced in lockstep groups of
    ``cfg.batch_size`` so every update mixes labels; each group member
    keeps its own memory state.  Per group time step: run the model on
    each live episode's frame; if adversarial training is on, apply
    ``cfg.d_steps`` discriminator updates on the detached outputs; then
    one generator update on the mean loss.  Raises on an empty stream and
    aborts with a diagnostic if any loss diverges.
    """
    episodes = list(episodes)
    if not episodes:
        raise ValueError("empty episode stream")
    flags = flags or LossFlags()
    mcfg = model.cfg
    g_opt = g_opt or Adam(model.named_tensors(), cfg.learning_rate)
    use_gan = flags.use_gan and flags.use_eta
    if use_gan:
        if disc is None:
            raise ValueError("adversarial training requires a discriminator")
        d_opt = d_opt or Adam(disc.named_tensors(), cfg.learning_rate)

    trace = LossTrace()
    step = start_step
    g_opt.zero_grads()
    if disc is not None:
        _clear_grads(disc)

    order = rng.permutation(len(episodes))
    groups = [order[i:i + cfg.batch_size] for i in range(0, len(order), cfg.batch_size)]
    for group in groups:
        members = [episodes[i] for i in group]
        states = [model.new_state() for _ in members]
        for t in range(max(len(ep) for ep in members)):
            if max_steps is not None and step - start_step >= max_steps:
                return trace
            live = [j for j, ep in enumerate(members) if t < len(ep)]

            outs, targets = [], []
            with Tape() as g_tape:
                for j in live:
                    ep = members[j]
                    eta_true = Tensor(np.ascontiguousarray(ep.futures[t].patches.T))
                    noise = (Tensor(rng.standard_normal(mcfg.noise_dim))
                             if flags.use_eta else None)
                    out, states[j] = model.step(states[j], ep.frames[t], noise=noise,
                                                flags=flags.attention)
                    outs.append(out)
                    targets.append((ep.labels[t], eta_true))

                d_val = 0.0
                if use_gan:
                    consts = [(o.r.detach(), o.eta_hat.detach()) for o in outs]
                    for _ in range(cfg.d_steps):
                        with Tape() as d_tape:
                            parts = [d_loss(disc, r_c, Tensor(tgt[1].data), e_c)
                                     for (r_c, e_c), tgt in zip(consts, targets)]
                            ld = _mean_scalars(parts)
                        d_val = float(ld.data)
                        _check_divergence(d_val, step, "d_loss")
                        d_opt.zero_grads()
                        d_tape.backward(ld)
                        d_opt.step()
                        d_opt.zero_grads()

                if use_gan:
                    parts = [g_loss(disc, o.r, o.eta_hat, o.y_hat, y, eta, cfg)
                             for o, (y, eta) in zip(outs, targets)]
                else:
                    parts = [_supervised_loss(o, y, eta, cfg, flags)
                             for o, (y, eta) in zip(outs, targets)]
                lg = _mean_scalars(parts)

            g_adv = g_cls = g_mse = 0.0
            for o, (y, eta) in zip(outs, targets):
                a, c, m = _trace_terms(disc, o, y, eta, cfg, flags)
                g_adv += a / len(outs)
                g_cls += c / len(outs)
                g_mse += m / len(outs)
            g_val = float(lg.data)
            _check_divergence(g_val, step, "g_loss")
            g_opt.zero_grads()
            if disc is not None:
                _clear_grads(disc)
            g_tape.backward(lg)
            g_opt.step()
            g_opt.zero_grads()
            if disc is not None:
                _clear_grads(disc)

            trace.append(step, d_val, g_adv, g_cls, g_mse)
            step += 1
    return trace


def _mean_scalars(parts: list[Tensor]) -> Tensor:
    total = parts[0]
    for p in parts[1:]:
        total = nm.add(total, p)
    return nm.scale(total, 1.0 / len(parts)) if len(parts) > 1 else total


def _clear_grads(disc: DiscriminatorParams) -> None:
    for _, t in disc.named_tensors():
        t.grad = None


def _supervised_loss(out, y_true: int, eta_true: Tensor, cfg: TrainConfig,
                     flags: LossFlags) -> Tensor:
    _check_probability(out.y_hat)
    loss = nm.scale(_cross_entropy(out.y_hat, y_true), cfg.lambda_cls)
    if flags.use_eta and cfg.lambda_mse != 0.0:
        loss = nm.add(loss, nm.scale(nm.sq_err_sum(out.eta_hat, eta_true), cfg.lambda_mse))
    return loss


def _trace_terms(disc, out, y_true, eta_true, cfg, flags) -> tuple[float, float, float]:
    ce = -float(np.log(max(out.y_hat.data[int(y_true)], 1e-300)))
    se = float(((out.eta_hat.data - eta_true.data) ** 2).sum())
    if flags.use_gan and flags.use_eta and disc is not None:
        logit = discriminator_logit(disc, out.r.detach(), out.eta_hat.detach())
        adv = float(np.logaddexp(0.0, -logit.data))
    else:
        adv = 0.0
    return adv, ce, se


def _check_divergence(value: float, step: int, name: str) -> None:
    if not np.isfinite(value) or abs(value) > DIVERGENCE_LIMIT:
        raise NonFiniteError(
            f"{name} diverged at step {step} (value {value!r}); "
            "lower the learning rate or loss weights")


def full_grad_check(cfg: TrainConfig, seed: int | None = None, warm_slots: int = 3,
                    eps: float = 1e-5, chunk: int = 256) -> float:
    """Central-difference check of every model and discriminator parameter
    against the tape gradients of the combined generator objective.

    One deterministic training example is built from the seed: a memory
    warmed with ``warm_slots`` grids, one incoming frame, a fixed noise
    draw and a fixed future target.  The numeric side evaluates the
    independent straight-line reference in vectorised chunks, so the sweep
    covers all entries exactly yet stays fast.  Returns the max relative
    error |analytic - numeric| / max(1, |numeric|).
    """
    from . import reference
    from .memory import FeatureGrid, memory_reset, memory_update
    from .model import hmn_step, init_hmn

    mcfg = cfg.model_config()
    rng = np.random.Generator(np.random.PCG64(np.random.SeedSequence(
        cfg.seed if seed is None else seed)))
    params = init_hmn(rng, mcfg)
    disc = init_discriminator(rng, mcfg)

    state = memory_reset(mcfg.memory_len, mcfg.num_patches, mcfg.feature_dim, mcfg.hidden)
    for _ in range(max(1, min(warm_slots, mcfg.memory_len))):
        state = memory_update(
            state, FeatureGrid(np.abs(rng.normal(size=(mcfg.num_patches,
                                                       mcfg.feature_dim)))))
    state.r_prev = rng.normal(size=2 * mcfg.hidden) * 0.1
    slots = np.stack([s.patches for s in state.valid_slots()])
    r_prev = state.r_prev.copy()
    frame = np.abs(rng.normal(size=(mcfg.num_patches, mcfg.feature_dim)))
    noise = rng.normal(size=mcfg.noise_dim)
    eta_true = np.abs(rng.normal(size=(mcfg.num_patches, mcfg.feature_dim)))
    y_true = 1

    named = params.named_tensors() + disc.named_tensors()
    for _, t in named:
        t.grad = None
    with Tape() as tape:
        out, _ = hmn_step(params, state, FeatureGrid(frame), noise=Tensor(noise))
        loss = g_loss(disc, out.r, out.eta_hat, out.y_hat, y_true,
                      Tensor(eta_true.T), cfg)
    tape.backward(loss)
    analytic = {n: (t.grad.copy() if t.grad is not None else np.zeros(t.data.shape))
                for n, t in named}
    base = {n: t.data for n, t in named}
    scenario = dict(slots=slots, r_prev=r_prev, frame=frame, noise=noise,
                    y_true=y_true, eta_true=eta_true,
                    lambda_cls=cfg.lambda_cls, lambda_mse=cfg.lambda_mse)
    ref_loss = float(reference.generator_objective(base, **scenario))
    if abs(ref_loss - float(loss.data)) > 1e-9 * max(1.0, abs(ref_loss)):
        raise AssertionError("tape and reference objectives disagree before "
                             f"differencing: {float(loss.data)} vs {ref_loss}")
    return reference.model_grad_check([(n, t.data) for n, t in named], analytic,
                                      base, scenario, eps=eps, chunk=chunk)


# -- checkpoints ----------------------------------------------------------------

CHECKPOINT_MAGIC = b"HMN1"


def save_checkpoint(path, config: dict, named: list[tuple[str, Tensor]]) -> None:
    """Binary bundle: magic, length-prefixed JSON config, then each tensor
    as (u32 name length, name, u32 rank, u32 dims..., f64 little-endian)."""
    buf = io.BytesIO()
    buf.write(CHECKPOINT_MAGIC)
    cfg_bytes = json.dumps(config, sort_keys=True).encode()
    buf.write(struct.pack("<I", len(cfg_bytes)))
    buf.write(cfg_bytes)
    buf.write(struct.pack("<I", len(named)))
    for name, t in named:
        nb = name.encode()
        buf.write(struct.pack("<I", len(nb)))
        buf.write(nb)
        arr = np.ascontiguousarray(t.data, dtype="<f8")
        buf.write(struct.pack("<I", arr.ndim))
        for dim in arr.shape:
            buf.write(struct.pack("<I", dim))
        buf.write(arr.tobytes())
    with open(path, "wb") as fh:
        fh.write(buf.getvalue())


def load_checkpoint(path) -> tuple[dict, dict[str, np.ndarray]]:
    with open(path, "rb") as fh:
        raw = fh.read()
    view = io.BytesIO(raw)
    if view.read(4) != CHECKPOINT_MAGIC:
        raise ValueError(f"{path}: not a checkpoint file (bad magic)")

    def read_u32():
        b = view.read(4)
        if len(b) != 4:
            raise ValueError(f"{path}: truncated checkpoint")
        return struct.unpack("<I", b)[0]

    cfg = json.loads(view.read(read_u32()).decode())
    count = read_u32()
    tensors: dict[str, np.ndarray] = {}
    for _ in range(count):
        name = view.read(read_u32()).decode()
        rank = read_u32()
        shape = tuple(read_u32() for _ in range(rank))
        n = int(np.prod(shape)) if shape else 1
        payload = view.read(8 * n)
        if len(payload) != 8 * n:
            raise ValueError(f"{path}: truncated tensor payload for {name}")
        tensors[name] = np.frombuffer(payload, dtype="<f8").reshape(shape).astype(np.float64)
    return cfg, tensors


def restore_params(named: list[tuple[str, Tensor]], tensors: dict[str, np.ndarray]) -> None:
    """Copy checkpoint arrays into an existing parameter bundle."""
    for name, t in named:
        if name not in tensors:
            raise ValueError(f"checkpoint is missing tensor {name}")
        arr = tensors[name]
        if arr.shape != t.data.shape:
            raise ShapeError(f"checkpoint tensor {name} has shape {arr.shape}, "
                             f"expected {t.data.shape}")
        t.data = arr.copy()
