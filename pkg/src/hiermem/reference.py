"""Straight-line reference evaluation of the full step and its losses.

This module re-derives every quantity directly from the written-out
equations using plain numpy, with no shared code with the tape kernels.
It exists for verification: equivalence tests compare it against the tape
implementation, and the gradient checker uses it as the function being
finite-differenced (many perturbed copies of one parameter tensor are
evaluated in a single vectorised call, which is what makes a full-model
central-difference sweep affordable).

Array convention: row vectors, shape (..., n); any single parameter may
carry one extra leading batch dimension and everything broadcasts.
"""

from __future__ import annotations

import numpy as np


def _sigmoid(x):
    return np.where(x >= 0, 1.0 / (1.0 + np.exp(-np.abs(x))),
                    np.exp(-np.abs(x)) / (1.0 + np.exp(-np.abs(x))))


def _softplus(x):
    return np.logaddexp(0.0, x)


def _softmax(x, axis=-1):
    shifted = x - x.max(axis=axis, keepdims=True)
    e = np.exp(shifted)
    return e / e.sum(axis=axis, keepdims=True)


def _mv(w, x):
    """Matrix-vector product with optional leading batch dims on either side."""
    return np.einsum("...mn,...n->...m", w, x)


def _gru_step(p: dict, prefix: str, x, h):
    """One gated update; x may be None for input-free cells, whose input
    weights are absent from the bundle."""
    uz, bz = p[f"{prefix}.u_z"], p[f"{prefix}.b_z"]
    ur, br = p[f"{prefix}.u_r"], p[f"{prefix}.b_r"]
    uh, bh = p[f"{prefix}.u_h"], p[f"{prefix}.b_h"]
    pre_z = _mv(uz, h) + bz
    pre_r = _mv(ur, h) + br
    if x is not None:
        pre_z = pre_z + _mv(p[f"{prefix}.w_z"], x)
        pre_r = pre_r + _mv(p[f"{prefix}.w_r"], x)
    z = _sigmoid(pre_z)
    r = _sigmoid(pre_r)
    pre_c = _mv(uh, r * h) + bh
    if x is not None:
        pre_c = pre_c + _mv(p[f"{prefix}.w_h"], x)
    c = np.tanh(pre_c)
    return (1.0 - z) * h + z * c


def _bigru_encode(p: dict, prefix: str, seq):
    """seq (..., steps, d_in) -> (..., steps, 2*hidden)."""
    steps = seq.shape[-2]
    hidden = p[f"{prefix}.fwd.u_z"].shape[-1]
    h = np.zeros(hidden)
    fwd = []
    for k in range(steps):
        h = _gru_step(p, f"{prefix}.fwd", seq[..., k, :], h)
        fwd.append(h)
    h = np.zeros(hidden)
    bwd = [None] * steps
    for k in reversed(range(steps)):
        h = _gru_step(p, f"{prefix}.bwd", seq[..., k, :], h)
        bwd[k] = h
    return _join_scans(fwd, bwd)


def _join_scans(fwd: list, bwd: list):
    """Stack per-step states and concatenate directions, broadcasting any
    batch dimension that only one side carries."""
    fwd = [np.broadcast_arrays(f, fwd[-1])[0] for f in fwd]
    bwd = [np.broadcast_arrays(b, bwd[0])[0] for b in bwd]
    f_stack = np.stack(fwd, axis=-2)
    b_stack = np.stack(bwd, axis=-2)
    shape = np.broadcast_shapes(f_stack.shape, b_stack.shape)
    return np.concatenate([np.broadcast_to(f_stack, shape),
                           np.broadcast_to(b_stack, shape)], axis=-1)


def _bigru_decode(p: dict, prefix: str, init, steps: int):
    """Input-free unroll from a shared init; returns (..., steps, 2*hidden)."""
    h = init
    fwd = []
    for _ in range(steps):
        h = _gru_step(p, f"{prefix}.fwd", None, h)
        fwd.append(h)
    h = init
    bwd = [None] * steps
    for k in reversed(range(steps)):
        h = _gru_step(p, f"{prefix}.bwd", None, h)
        bwd[k] = h
    return _join_scans(fwd, bwd)


def _attend(p: dict, prefix: str, items):
    """items (..., n, d) -> (weights (..., n), pooled (..., d))."""
    w, b, c = p[f"{prefix}.w"], p[f"{prefix}.b"], p[f"{prefix}.c"]
    proj = np.tanh(np.einsum("...mn,...kn->...km", w, items) + b[..., None, :])
    scores = np.einsum("...km,...m->...k", proj, c)
    weights = _softmax(scores, axis=-1)
    pooled = np.einsum("...kn,...k->...n", items, weights)
    return weights, pooled


def memory_read(p: dict, slots: np.ndarray, f_enc, q, r_prev):
    """Hierarchical read over valid slots.

    slots: (n_valid, patches, features) raw grids, oldest first.
    f_enc: (..., patches, 2h) encoded input, q: (..., 2h), r_prev (2h,).
    Returns (r, alpha (..., n, patches), gamma (..., n)).  Slots are
    processed one at a time so a parameter batch dimension never collides
    with the slot axis.
    """
    n = slots.shape[0]
    if n == 0:
        two_h = p["w_r"].shape[-2]
        return np.zeros(two_h), None, None
    alpha_parts, rho_parts = [], []
    for i in range(n):
        p_enc = _bigru_encode(p, "mem_encoder", slots[i])   # (..., k, 2h)
        p_enc, f_in = np.broadcast_arrays(p_enc, f_enc)
        aug = np.concatenate([p_enc * f_in, np.abs(p_enc - f_in)], axis=-1)
        alpha_i, rho_i = _attend(p, "alpha", aug)           # (..., k), (..., 4h)
        alpha_parts.append(alpha_i)
        rho_parts.append(rho_i)
    shape_a = np.broadcast_shapes(*(a.shape for a in alpha_parts))
    shape_r = np.broadcast_shapes(*(r_.shape for r_ in rho_parts))
    alpha = np.stack([np.broadcast_to(a, shape_a) for a in alpha_parts], axis=-2)
    rho = np.stack([np.broadcast_to(r_, shape_r) for r_ in rho_parts], axis=-2)
    rho_enc = _bigru_encode(p, "rho_encoder", rho)          # (..., n, 2h)
    q_in = q[..., None, :]
    rho_enc, q_in = np.broadcast_arrays(rho_enc, q_in)
    z = np.concatenate([rho_enc * q_in, rho_enc * r_prev,
                        np.abs(rho_enc - q_in)], axis=-1)   # (..., n, 6h)
    gamma, pooled = _attend(p, "gamma", z)
    r = _mv(p["w_r"], pooled)
    return r, alpha, gamma


def hmn_step(p: dict, slots: np.ndarray, r_prev: np.ndarray, frame: np.ndarray,
             noise: np.ndarray) -> dict:
    """Full step on one frame; returns q, r, y_hat, eta_hat and traces."""
    f_enc = _bigru_encode(p, "input_encoder", frame)        # (..., k, 2h)
    beta, q = _attend(p, "beta", f_enc)
    r, alpha, gamma = memory_read(p, slots, f_enc, q, r_prev)
    y_hat = _softmax(_mv(p["w_y"], r) + p["b_y"], axis=-1)
    noise_b = np.broadcast_to(noise, r.shape[:-1] + noise.shape)
    init = _mv(p["w_init"], np.concatenate([r, noise_b], axis=-1)) + p["b_init"]
    states = _bigru_decode(p, "decoder", init, frame.shape[-2])
    eta_hat = np.maximum(0.0, np.einsum("...mn,...kn->...km", p["w_eta"], states)
                         + p["b_eta"][..., None, :])
    return {"f_enc": f_enc, "beta": beta, "q": q, "r": r, "alpha": alpha,
            "gamma": gamma, "y_hat": y_hat, "eta_hat": eta_hat}


def discriminator_logit(p: dict, r, eta) -> np.ndarray:
    """eta (..., patches, features) conditioned on r (..., 2h) -> (...,)."""
    enc = _bigru_encode(p, "disc.encoder", eta)
    summary = enc.mean(axis=-2)
    summary, r = np.broadcast_arrays(summary, r)
    fused = np.tanh(_mv(p["disc.w_fuse"], np.concatenate([summary, r], axis=-1))
                    + p["disc.b_fuse"])
    return (_mv(p["disc.w_out"], fused) + p["disc.b_out"])[..., 0]


def d_loss(p: dict, r, eta_real, eta_fake) -> np.ndarray:
    return (_softplus(-discriminator_logit(p, r, eta_real))
            + _softplus(discriminator_logit(p, r, eta_fake)))


def g_loss(p: dict, r, eta_fake, y_hat, y_true: int, eta_true,
           lambda_cls: float, lambda_mse: float) -> np.ndarray:
    loss = _softplus(-discriminator_logit(p, r, eta_fake))
    if lambda_cls != 0.0:
        loss = loss - lambda_cls * np.log(y_hat[..., int(y_true)])
    if lambda_mse != 0.0:
        se = ((eta_fake - eta_true) ** 2).sum(axis=(-2, -1))
        loss = loss + lambda_mse * se
    return loss


def generator_objective(p: dict, slots: np.ndarray, r_prev: np.ndarray,
                        frame: np.ndarray, noise: np.ndarray, y_true: int,
                        eta_true: np.ndarray, lambda_cls: float,
                        lambda_mse: float) -> np.ndarray:
    """End-to-end generator loss on one training example.

    Accepts one batch-extended parameter tensor and returns matching
    leading dimensions (a plain scalar when nothing is batched).
    """
    out = hmn_step(p, slots, r_prev, frame, noise)
    return g_loss(p, out["r"], out["eta_hat"], out["y_hat"], y_true, eta_true,
                  lambda_cls, lambda_mse)


def model_grad_check(named_params: list, analytic: dict, base: dict,
                     scenario: dict, eps: float = 1e-5, chunk: int = 256) -> float:
    """Central differences of the reference objective for every entry of
    every listed tensor, vectorised over perturbations.

    named_params: list of (name, np.ndarray) to sweep.
    analytic: name -> gradient array from the tape implementation.
    base: name -> value array for the whole bundle (model + discriminator).
    scenario: kwargs for :func:`generator_objective` minus the params.
    """
    worst = 0.0
    for name, value in named_params:
        flat = value.reshape(-1)
        ana = analytic[name].reshape(-1)
        size = flat.size
        for start in range(0, size, chunk):
            idx = np.arange(start, min(start + chunk, size))
            b = idx.size
            batch = np.repeat(flat[None, :], 2 * b, axis=0)
            batch[np.arange(b), idx] += eps
            batch[np.arange(b, 2 * b), idx] -= eps
            p = dict(base)
            p[name] = batch.reshape((2 * b,) + value.shape)
            losses = generator_objective(p, **scenario)
            numeric = (losses[:b] - losses[b:]) / (2.0 * eps)
            rel = np.abs(ana[idx] - numeric) / np.maximum(1.0, np.abs(numeric))
            m = float(rel.max())
            if m > worst:
                worst = m
    return worst
