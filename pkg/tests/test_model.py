import numpy as np
import pytest

from hiermem import numerics as nm
from hiermem import reference
from hiermem.memory import FeatureGrid, memory_reset, memory_update
from hiermem.model import (AblationFlags, HmnModel, HmnParams, ModelConfig, classify,
                           hmn_step, init_hmn, predict_future, trace_record)
from hiermem.numerics import Tape, Tensor
from hiermem.training import TrainConfig, g_loss, init_discriminator


def tiny(seed=0, memory_len=2, k=2, d=2, h=2):
    rng = np.random.default_rng(seed)
    cfg = ModelConfig(memory_len=memory_len, num_patches=k, feature_dim=d, hidden=h)
    return init_hmn(rng, cfg), cfg, rng


def params_dict(params, disc=None):
    out = {name: t.data for name, t in params.named_tensors()}
    if disc is not None:
        out.update({name: t.data for name, t in disc.named_tensors()})
    return out


class TestClassify:
    def test_zero_head_uniform(self):
        params, cfg, rng = tiny(1)
        params.w_y.data = np.zeros((2, 4))
        params.b_y.data = np.zeros(2)
        out = classify(params, Tensor(rng.normal(size=4)))
        np.testing.assert_allclose(out.data, [0.5, 0.5])

    def test_zero_read_gives_bias_softmax(self):
        params, cfg, rng = tiny(2)
        params.b_y.data = np.array([0.3, -0.2])
        out = classify(params, Tensor(np.zeros(4)))
        e = np.exp(params.b_y.data - params.b_y.data.max())
        np.testing.assert_allclose(out.data, e / e.sum(), atol=1e-15)

    def test_random_matches_affine_softmax(self):
        params, cfg, rng = tiny(3)
        r = rng.normal(size=4)
        logits = params.w_y.data @ r + params.b_y.data
        e = np.exp(logits - logits.max())
        out = classify(params, Tensor(r))
        np.testing.assert_allclose(out.data, e / e.sum(), atol=1e-12)


class TestPredictFuture:
    def test_zero_params_zero_grid(self):
        params, cfg, rng = tiny(4)
        for name, t in params.named_tensors():
            t.data = np.zeros(t.data.shape)
        out = predict_future(params, Tensor(np.zeros(4)))
        np.testing.assert_array_equal(out.data, np.zeros((2, 2)))

    def test_outputs_nonnegative(self):
        params, cfg, rng = tiny(5)
        for _ in range(10):
            out = predict_future(params, Tensor(rng.normal(size=4) * 3))
            assert np.all(out.data >= 0)

    def test_matches_reference_unroll(self):
        params, cfg, rng = tiny(6)
        r = rng.normal(size=4)
        noise = rng.normal(size=cfg.noise_dim)
        out = predict_future(params, Tensor(r), Tensor(noise))
        ref = reference.hmn_step  # reuse only the decode block via full params
        p = params_dict(params)
        init = p["w_init"] @ np.concatenate([r, noise]) + p["b_init"]
        states = reference._bigru_decode(p, "decoder", init, cfg.num_patches)
        expected = np.maximum(0.0, np.einsum("mn,kn->km", p["w_eta"], states) + p["b_eta"])
        np.testing.assert_allclose(out.data.T, expected, atol=1e-10)


class TestHmnStep:
    def test_cold_memory_ignores_frame_content(self):
        params, cfg, rng = tiny(7)
        params.b_y.data = np.array([0.4, -0.1])
        state = memory_reset(cfg.memory_len, cfg.num_patches, cfg.feature_dim, cfg.hidden)
        out1, _ = hmn_step(params, state, FeatureGrid(rng.normal(size=(2, 2))))
        state2 = memory_reset(cfg.memory_len, cfg.num_patches, cfg.feature_dim, cfg.hidden)
        out2, _ = hmn_step(params, state2, FeatureGrid(rng.normal(size=(2, 2))))
        np.testing.assert_array_equal(out1.y_hat.data, out2.y_hat.data)
        # classification equals the bias softmax through a zero read vector
        e = np.exp(params.b_y.data - params.b_y.data.max())
        np.testing.assert_allclose(out1.y_hat.data, e / e.sum(), atol=1e-15)
        # predicted grid equals the zero-read decode
        expected = predict_future(params, Tensor(np.zeros(4)))
        np.testing.assert_array_equal(out1.eta_hat.data, expected.data)

    def test_zero_params_give_uniform_alpha(self):
        params, cfg, rng = tiny(8)
        for name, t in params.named_tensors():
            t.data = np.zeros(t.data.shape)
        state = memory_reset(cfg.memory_len, cfg.num_patches, cfg.feature_dim, cfg.hidden)
        _, state = hmn_step(params, state, FeatureGrid(rng.normal(size=(2, 2))))
        out, _ = hmn_step(params, state, FeatureGrid(rng.normal(size=(2, 2))))
        valid_alpha = out.alpha[-1]
        np.testing.assert_allclose(valid_alpha, np.full(2, 0.5), atol=1e-15)

    def test_full_step_matches_reference(self):
        params, cfg, rng = tiny(9)
        state = memory_reset(cfg.memory_len, cfg.num_patches, cfg.feature_dim, cfg.hidden)
        g1, g2 = (FeatureGrid(np.abs(rng.normal(size=(2, 2)))) for _ in range(2))
        state = memory_update(state, g1)
        state = memory_update(state, g2)
        state.r_prev = rng.normal(size=4)
        slots = np.stack([s.patches for s in state.valid_slots()])
        r_prev = state.r_prev.copy()
        frame = np.abs(rng.normal(size=(2, 2)))
        noise = rng.normal(size=cfg.noise_dim)

        out, _ = hmn_step(params, state, FeatureGrid(frame), noise=Tensor(noise))
        ref = reference.hmn_step(params_dict(params), slots, r_prev, frame, noise)
        np.testing.assert_allclose(out.r.data, ref["r"], atol=1e-10)
        np.testing.assert_allclose(out.y_hat.data, ref["y_hat"], atol=1e-10)
        np.testing.assert_allclose(out.eta_hat.data.T, ref["eta_hat"], atol=1e-10)
        np.testing.assert_allclose(out.beta, ref["beta"], atol=1e-10)
        np.testing.assert_allclose(out.gamma, ref["gamma"], atol=1e-10)

    def test_deterministic(self):
        params, cfg, rng = tiny(10)
        frame = FeatureGrid(rng.normal(size=(2, 2)))
        s1 = memory_reset(2, 2, 2, 2)
        s1 = memory_update(s1, frame)
        s2 = memory_reset(2, 2, 2, 2)
        s2 = memory_update(s2, frame)
        f2 = FeatureGrid(rng.normal(size=(2, 2)))
        o1, _ = hmn_step(params, s1, f2)
        o2, _ = hmn_step(params, s2, f2)
        np.testing.assert_array_equal(o1.y_hat.data, o2.y_hat.data)
        np.testing.assert_array_equal(o1.eta_hat.data, o2.eta_hat.data)

    def test_update_happens_after_read(self):
        params, cfg, rng = tiny(11)
        state = memory_reset(2, 2, 2, 2)
        frame = FeatureGrid(rng.normal(size=(2, 2)))
        out, new_state = hmn_step(params, state, frame)
        # read saw an empty memory; the new state holds the frame
        np.testing.assert_array_equal(out.r.data, np.zeros(4))
        assert new_state.valid_slots()[-1] is frame

    def test_probability_and_trace_invariants(self):
        params, cfg, rng = tiny(12)
        state = memory_reset(2, 2, 2, 2)
        for _ in range(3):
            out, state = hmn_step(params, state, FeatureGrid(rng.normal(size=(2, 2))))
        assert abs(out.y_hat.data.sum() - 1.0) <= 1e-12
        assert abs(out.beta.sum() - 1.0) <= 1e-12
        assert abs(out.gamma.sum() - 1.0) <= 1e-12
        rec = trace_record(5, out)
        assert rec["frame"] == 5 and len(rec["beta"]) == 2 and len(rec["gamma"]) == 2

    def test_no_dead_parameters(self):
        params, cfg, rng = tiny(13, memory_len=3, k=3, d=3, h=2)
        disc = init_discriminator(rng, cfg)
        tc = TrainConfig(memory_len=3, num_patches=3, feature_dim=3, hidden=2, delta=1)
        state = memory_reset(3, 3, 3, 2)
        for _ in range(2):
            state = memory_update(state, FeatureGrid(np.abs(rng.normal(size=(3, 3)))))
        state.r_prev = rng.normal(size=4)
        frame = FeatureGrid(np.abs(rng.normal(size=(3, 3))))
        eta_true = Tensor(np.abs(rng.normal(size=(3, 3))))
        noise = Tensor(rng.normal(size=cfg.noise_dim))

        every = params.named_tensors() + disc.named_tensors()
        for _, t in every:
            t.grad = None
        with Tape() as tape:
            out, _ = hmn_step(params, state, frame, noise=noise)
            loss = g_loss(disc, out.r, out.eta_hat, out.y_hat, 1, eta_true, tc)
        tape.backward(loss)
        for name, t in every:
            assert t.grad is not None, f"no gradient at all for {name}"
            assert np.any(t.grad != 0.0), f"identically zero gradient for {name}"


class TestAblationFlags:
    def test_no_beta_uses_uniform_mean(self):
        params, cfg, rng = tiny(14)
        state = memory_reset(2, 2, 2, 2)
        state = memory_update(state, FeatureGrid(rng.normal(size=(2, 2))))
        frame = FeatureGrid(rng.normal(size=(2, 2)))
        out, _ = hmn_step(params, state, frame, flags=AblationFlags(use_beta=False))
        np.testing.assert_allclose(out.beta, [0.5, 0.5])

    def test_no_alpha_no_gamma_uniform(self):
        params, cfg, rng = tiny(15, memory_len=3)
        state = memory_reset(3, 2, 2, 2)
        for _ in range(2):
            state = memory_update(state, FeatureGrid(rng.normal(size=(2, 2))))
        out, _ = hmn_step(params, state, FeatureGrid(rng.normal(size=(2, 2))),
                          flags=AblationFlags(use_alpha=False, use_gamma=False))
        np.testing.assert_allclose(out.alpha[1:], np.full((2, 2), 0.5))
        np.testing.assert_allclose(out.gamma[1:], np.full(2, 0.5))


class TestModelAdapter:
    def test_model_surface(self):
        params, cfg, rng = tiny(16)
        model = HmnModel(params)
        state = model.new_state()
        out, state = model.step(state, FeatureGrid(rng.normal(size=(2, 2))))
        assert out.y_hat.data.shape == (2,)
        assert model.cfg.hidden == 2
        assert len(model.named_tensors()) == len(params.named_tensors())

    def test_param_count_reported(self):
        params, cfg, rng = tiny(17)
        count = params.param_count()
        assert count == sum(t.data.size for _, t in params.named_tensors())
        assert count > 0
