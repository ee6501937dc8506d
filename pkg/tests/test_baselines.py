import numpy as np
import pytest

from hiermem.baselines import (DmnModel, FlatMemoryState, NtmModel, dmn_read,
                               dmn_update, flat_memory_reset, init_dmn, init_ntm,
                               ntm_read, ntm_update)
from hiermem.data import SynthWorld, generate_dataset
from hiermem.memory import FeatureGrid
from hiermem.model import ModelConfig
from hiermem.numerics import ShapeError, Tensor
from hiermem.training import LossFlags, TrainConfig, train_epoch


def tiny_cfg(memory_len=3, k=2, d=2, h=2):
    return ModelConfig(memory_len=memory_len, num_patches=k, feature_dim=d, hidden=h)


class TestNtmRead:
    def test_one_hot_selects_slot(self):
        state = flat_memory_reset(3, 2)
        state.slots[:, 1] = [4.0, -1.0]
        out = ntm_read(state, Tensor([0.0, 1.0, 0.0]))
        np.testing.assert_array_equal(out.data, [4.0, -1.0])

    def test_uniform_over_identical_slots(self):
        state = flat_memory_reset(2, 2)
        state.slots[:, 0] = state.slots[:, 1] = [2.0, 3.0]
        out = ntm_read(state, Tensor([0.5, 0.5]))
        np.testing.assert_allclose(out.data, [2.0, 3.0])

    def test_random_matches_dot_oracle(self):
        rng = np.random.default_rng(0)
        state = flat_memory_reset(4, 3)
        state.slots[:] = rng.normal(size=(3, 4))
        g = rng.uniform(size=4)
        g = g / g.sum()
        out = ntm_read(state, Tensor(g))
        expected = sum(g[i] * state.slots[:, i] for i in range(4))
        np.testing.assert_allclose(out.data, expected, atol=1e-15)

    def test_unnormalized_rejected(self):
        state = flat_memory_reset(2, 2)
        with pytest.raises(ValueError):
            ntm_read(state, Tensor([0.5, 0.6]))


class TestNtmUpdate:
    def test_zero_gamma_is_identity(self):
        rng = np.random.default_rng(1)
        state = flat_memory_reset(3, 2)
        state.slots[:] = rng.normal(size=(2, 3))
        before = state.slots.copy()
        new = ntm_update(state, Tensor(np.zeros(3)), Tensor(rng.uniform(size=2)),
                         Tensor(rng.normal(size=2)))
        np.testing.assert_array_equal(new.slots, before)

    def test_one_hot_full_erase_then_add(self):
        rng = np.random.default_rng(2)
        state = flat_memory_reset(3, 2)
        state.slots[:] = rng.normal(size=(2, 3))
        a = rng.normal(size=2)
        new = ntm_update(state, Tensor([0.0, 1.0, 0.0]), Tensor(np.ones(2)), Tensor(a))
        np.testing.assert_allclose(new.slots[:, 1], a, atol=1e-15)

    def test_zero_erase_zero_add_identity(self):
        rng = np.random.default_rng(3)
        state = flat_memory_reset(3, 2)
        state.slots[:] = rng.normal(size=(2, 3))
        g = rng.uniform(size=3)
        new = ntm_update(state, Tensor(g / g.sum()), Tensor(np.zeros(2)),
                         Tensor(np.zeros(2)))
        np.testing.assert_array_equal(new.slots, state.slots)

    def test_random_matches_elementwise_oracle(self):
        rng = np.random.default_rng(4)
        state = flat_memory_reset(3, 2)
        state.slots[:] = rng.normal(size=(2, 3))
        g = rng.uniform(size=3)
        g = g / g.sum()
        e = rng.uniform(size=2)
        a = rng.normal(size=2)
        new = ntm_update(state, Tensor(g), Tensor(e), Tensor(a))
        for i in range(3):
            expected = state.slots[:, i] * (1 - g[i] * e) + g[i] * a
            np.testing.assert_allclose(new.slots[:, i], expected, atol=1e-15)

    def test_erase_out_of_range_rejected(self):
        state = flat_memory_reset(2, 2)
        with pytest.raises(ValueError):
            ntm_update(state, Tensor([0.5, 0.5]), Tensor([1.5, 0.0]), Tensor([0.0, 0.0]))


class TestDmn:
    def test_all_zero_inputs_give_zero(self):
        cfg = tiny_cfg()
        params = init_dmn(np.random.default_rng(5), cfg)
        params.b_o.data = np.zeros(4)
        state = flat_memory_reset(3, 4)
        out = dmn_read(state, params, Tensor(np.zeros(4)), Tensor(np.zeros(4)))
        np.testing.assert_allclose(out.data, np.zeros(4), atol=1e-15)

    def test_single_slot_weight_is_one(self):
        cfg = tiny_cfg(memory_len=1)
        params = init_dmn(np.random.default_rng(6), cfg)
        state = flat_memory_reset(1, 4)
        rng = np.random.default_rng(7)
        from hiermem.baselines import dmn_read_weights
        _, w = dmn_read_weights(state, params, Tensor(rng.normal(size=4)),
                                Tensor(rng.normal(size=4)))
        np.testing.assert_allclose(w.data, [1.0])

    def test_read_matches_straight_line_oracle(self):
        cfg = tiny_cfg()
        params = init_dmn(np.random.default_rng(8), cfg)
        rng = np.random.default_rng(9)
        state = flat_memory_reset(3, 4)
        state.slots[:] = rng.normal(size=(4, 3))
        q, f = rng.normal(size=4), rng.normal(size=4)
        out = dmn_read(state, params, Tensor(q), Tensor(f))

        mus = []
        for i in range(3):
            m = state.slots[:, i]
            mus.append(np.concatenate([f * q, m * f, np.abs(f - m), np.abs(f - q)]))
        scores = [params.attn.c.data @ np.tanh(params.attn.w.data @ mu + params.attn.b.data)
                  for mu in mus]
        e = np.exp(scores - np.max(scores))
        w = e / e.sum()
        pooled = sum(wi * mu for wi, mu in zip(w, mus))
        expected = params.w_o.data @ pooled + params.b_o.data
        np.testing.assert_allclose(out.data, expected, atol=1e-12)

    def test_update_zero_map_zeroes_memory(self):
        cfg = tiny_cfg()
        params = init_dmn(np.random.default_rng(10), cfg)
        params.w_u.data = np.zeros(params.w_u.data.shape)
        rng = np.random.default_rng(11)
        state = flat_memory_reset(3, 4)
        state.slots[:] = rng.normal(size=(4, 3))
        new = dmn_update(state, params, Tensor(rng.normal(size=4)),
                         Tensor(rng.normal(size=4)))
        np.testing.assert_array_equal(new.slots, np.zeros((4, 3)))

    def test_update_nonnegative_and_matches_oracle(self):
        cfg = tiny_cfg()
        params = init_dmn(np.random.default_rng(12), cfg)
        rng = np.random.default_rng(13)
        state = flat_memory_reset(3, 4)
        state.slots[:] = rng.normal(size=(4, 3))
        r, q = rng.normal(size=4), rng.normal(size=4)
        new = dmn_update(state, params, Tensor(r), Tensor(q))
        assert np.all(new.slots >= 0)
        stacked = np.concatenate([state.slots.T.reshape(-1), r, q])
        expected = np.maximum(0.0, params.w_u.data @ stacked).reshape(3, 4).T
        np.testing.assert_allclose(new.slots, expected, atol=1e-12)

    def test_shape_errors(self):
        cfg = tiny_cfg()
        params = init_dmn(np.random.default_rng(14), cfg)
        state = flat_memory_reset(3, 4)
        with pytest.raises(ShapeError):
            dmn_read(state, params, Tensor(np.zeros(3)), Tensor(np.zeros(4)))
        with pytest.raises(ShapeError):
            dmn_update(state, params, Tensor(np.zeros(3)), Tensor(np.zeros(4)))


class TestEpisodeInterface:
    """Both baselines run under the shared training loop."""

    @pytest.mark.parametrize("maker", [
        lambda cfg, rng: NtmModel(init_ntm(rng, cfg)),
        lambda cfg, rng: DmnModel(init_dmn(rng, cfg)),
    ])
    def test_supervised_training_runs(self, maker):
        cfg = tiny_cfg()
        rng = np.random.default_rng(15)
        model = maker(cfg, rng)
        tc = TrainConfig(memory_len=3, num_patches=2, feature_dim=2, hidden=2,
                         delta=1, learning_rate=1e-3, steps=3, seed=0)
        world = SynthWorld(num_patches=2, feature_dim=2, noise_width=0.02)
        eps = generate_dataset(world, 2, 3, 1, seed=16)
        trace = train_epoch(model, None, eps, tc, rng,
                            flags=LossFlags(use_gan=False, use_eta=False), max_steps=3)
        assert len(trace.rows) == 3

    def test_ntm_step_output_shape_and_gamma(self):
        cfg = tiny_cfg()
        rng = np.random.default_rng(17)
        model = NtmModel(init_ntm(rng, cfg))
        state = model.new_state()
        out, state = model.step(state, FeatureGrid(np.abs(rng.normal(size=(2, 2)))))
        assert out.y_hat.data.shape == (2,)
        assert abs(out.gamma.sum() - 1.0) <= 1e-12
        assert np.all(out.eta_hat.data >= 0)

    def test_ntm_adversarial_variant_runs(self):
        cfg = tiny_cfg()
        rng = np.random.default_rng(18)
        from hiermem.training import init_discriminator
        model = NtmModel(init_ntm(rng, cfg))
        disc = init_discriminator(rng, cfg)
        tc = TrainConfig(memory_len=3, num_patches=2, feature_dim=2, hidden=2,
                         delta=1, learning_rate=1e-3, steps=2, seed=0)
        world = SynthWorld(num_patches=2, feature_dim=2, noise_width=0.02)
        eps = generate_dataset(world, 2, 3, 1, seed=19)
        trace = train_epoch(model, disc, eps, tc, rng, max_steps=2)
        assert len(trace.rows) == 2
