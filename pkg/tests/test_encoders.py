import numpy as np
import pytest

from hiermem import numerics as nm
from hiermem.encoders import (BiGruParams, GruParams, bigru_decode, bigru_encode,
                              bigru_encode_mat, gru_step, init_bigru, init_gru)
from hiermem.numerics import ShapeError, Tape, Tensor


def sigmoid(x):
    return 1.0 / (1.0 + np.exp(-x))


def gru_oracle(p, x, h):
    """Straight-line evaluation of the gate equations."""
    z = sigmoid(p.w_z.data @ x + p.u_z.data @ h + p.b_z.data)
    r = sigmoid(p.w_r.data @ x + p.u_r.data @ h + p.b_r.data)
    c = np.tanh(p.w_h.data @ x + p.u_h.data @ (r * h) + p.b_h.data)
    return (1 - z) * h + z * c


def zero_gru(input_size, hidden):
    z = lambda *s: Tensor(np.zeros(s))
    return GruParams(w_z=z(hidden, input_size), u_z=z(hidden, hidden), b_z=z(hidden),
                     w_r=z(hidden, input_size), u_r=z(hidden, hidden), b_r=z(hidden),
                     w_h=z(hidden, input_size), u_h=z(hidden, hidden), b_h=z(hidden))


class TestGruStep:
    def test_all_zero_params_and_state(self):
        p = zero_gru(3, 4)
        h = gru_step(p, Tensor(np.ones(3)), Tensor(np.zeros(4)))
        np.testing.assert_array_equal(h.data, np.zeros(4))

    def test_gates_forced_open(self):
        rng = np.random.default_rng(0)
        p = init_gru(rng, 3, 4)
        p.b_z.data = np.full(4, 50.0)  # update gate ~1
        p.b_r.data = np.full(4, 50.0)  # reset gate ~1
        h_prev = rng.normal(size=4) * 0.5
        h = gru_step(p, Tensor(np.zeros(3)), Tensor(h_prev))
        np.testing.assert_allclose(h.data, np.tanh(p.u_h.data @ h_prev), atol=1e-12)

    def test_random_case_matches_oracle(self):
        rng = np.random.default_rng(42)
        p = init_gru(rng, 3, 5)
        for t in ("b_z", "b_r", "b_h"):
            getattr(p, t).data = rng.normal(size=5)
        x, h = rng.normal(size=3), rng.normal(size=5)
        out = gru_step(p, Tensor(x), Tensor(h))
        np.testing.assert_allclose(out.data, gru_oracle(p, x, h), atol=1e-12)

    def test_shape_mismatch(self):
        p = zero_gru(3, 4)
        with pytest.raises(ShapeError):
            gru_step(p, Tensor(np.zeros(2)), Tensor(np.zeros(4)))
        with pytest.raises(ShapeError):
            gru_step(p, Tensor(np.zeros(3)), Tensor(np.zeros(5)))

    def test_convex_combination_property(self):
        rng = np.random.default_rng(9)
        for trial in range(20):
            p = init_gru(rng, 2, 3)
            for t in ("b_z", "b_r", "b_h"):
                getattr(p, t).data = rng.normal(size=3)
            x, h_prev = rng.normal(size=2), rng.normal(size=3)
            z = sigmoid(p.w_z.data @ x + p.u_z.data @ h_prev + p.b_z.data)
            r = sigmoid(p.w_r.data @ x + p.u_r.data @ h_prev + p.b_r.data)
            cand = np.tanh(p.w_h.data @ x + p.u_h.data @ (r * h_prev) + p.b_h.data)
            h = gru_step(p, Tensor(x), Tensor(h_prev)).data
            lo = np.minimum(h_prev, cand) - 1e-12
            hi = np.maximum(h_prev, cand) + 1e-12
            assert np.all(h >= lo) and np.all(h <= hi)

    def test_batched_matches_single(self):
        rng = np.random.default_rng(3)
        p = init_gru(rng, 3, 4)
        xs = rng.normal(size=(3, 5))
        hs = rng.normal(size=(4, 5))
        batched = gru_step(p, Tensor(xs), Tensor(hs))
        for j in range(5):
            single = gru_step(p, Tensor(xs[:, j]), Tensor(hs[:, j]))
            np.testing.assert_allclose(batched.data[:, j], single.data, atol=1e-13)


class TestBigruEncode:
    def test_single_element(self):
        rng = np.random.default_rng(1)
        p = init_bigru(rng, 3, 4)
        x = rng.normal(size=3)
        out = bigru_encode(p, [Tensor(x)])
        fwd = gru_oracle(p.fwd, x, np.zeros(4))
        bwd = gru_oracle(p.bwd, x, np.zeros(4))
        np.testing.assert_allclose(out[0].data, np.concatenate([fwd, bwd]), atol=1e-12)

    def test_empty_rejected(self):
        p = init_bigru(np.random.default_rng(0), 3, 4)
        with pytest.raises(ValueError):
            bigru_encode(p, [])

    def test_reversal_symmetry(self):
        rng = np.random.default_rng(7)
        p = init_bigru(rng, 3, 4)
        swapped = BiGruParams(fwd=p.bwd, bwd=p.fwd)
        seq = [Tensor(rng.normal(size=3)) for _ in range(5)]
        out = bigru_encode(p, seq)
        out_rev = bigru_encode(swapped, seq[::-1])
        h = 4
        for k in range(5):
            # forward half of position k == backward half of mirrored position
            np.testing.assert_allclose(out[k].data[:h], out_rev[4 - k].data[h:], atol=1e-13)
            np.testing.assert_allclose(out[k].data[h:], out_rev[4 - k].data[:h], atol=1e-13)

    def test_k3_matches_unrolled_oracle(self):
        rng = np.random.default_rng(5)
        p = init_bigru(rng, 2, 3)
        xs = [rng.normal(size=2) for _ in range(3)]
        out = bigru_encode(p, [Tensor(x) for x in xs])
        hf = np.zeros(3)
        fwd = []
        for x in xs:
            hf = gru_oracle(p.fwd, x, hf)
            fwd.append(hf)
        hb = np.zeros(3)
        bwd = [None] * 3
        for k in (2, 1, 0):
            hb = gru_oracle(p.bwd, xs[k], hb)
            bwd[k] = hb
        for k in range(3):
            np.testing.assert_allclose(out[k].data, np.concatenate([fwd[k], bwd[k]]),
                                       atol=1e-12)

    def test_matrix_variant_matches_list_variant(self):
        rng = np.random.default_rng(8)
        p = init_bigru(rng, 3, 4)
        seq = [rng.normal(size=3) for _ in range(4)]
        listed = bigru_encode(p, [Tensor(x) for x in seq])
        mat = bigru_encode_mat(p, Tensor(np.stack(seq, axis=1)), 4, 1)
        for k in range(4):
            np.testing.assert_allclose(mat.data[:, k], listed[k].data, atol=1e-13)

    def test_length_preserving_and_deterministic(self):
        rng = np.random.default_rng(2)
        p = init_bigru(rng, 2, 3)
        seq = [Tensor(rng.normal(size=2)) for _ in range(6)]
        a = bigru_encode(p, seq)
        b = bigru_encode(p, seq)
        assert len(a) == 6
        for x, y in zip(a, b):
            np.testing.assert_array_equal(x.data, y.data)

    def test_gradient_reaches_every_element(self):
        rng = np.random.default_rng(4)
        p = init_bigru(rng, 2, 3)
        seq = [Tensor(rng.normal(size=2)) for _ in range(4)]
        with Tape() as tape:
            out = bigru_encode(p, seq)
            loss = nm.sum_all(nm.concat(out))
        tape.backward(loss)
        for x in seq:
            assert x.grad is not None and np.any(x.grad != 0)


class TestBigruDecode:
    def test_zero_params_zero_output(self):
        p = BiGruParams(fwd=zero_gru(0, 3), bwd=zero_gru(0, 3))
        out = bigru_decode(p, Tensor(np.zeros(3)), 1)
        np.testing.assert_array_equal(out[0].data, np.zeros(6))
        for k in (2, 5):
            outs = bigru_decode(p, Tensor(np.zeros(3)), k)
            assert len(outs) == k
            for o in outs:
                np.testing.assert_array_equal(o.data, np.zeros(6))

    def test_bad_steps(self):
        p = BiGruParams(fwd=zero_gru(0, 3), bwd=zero_gru(0, 3))
        with pytest.raises(ValueError):
            bigru_decode(p, Tensor(np.zeros(3)), 0)

    def test_k2_matches_unrolled_oracle(self):
        rng = np.random.default_rng(10)
        p = init_bigru(rng, 0, 3)
        for t in ("b_z", "b_r", "b_h"):
            getattr(p.fwd, t).data = rng.normal(size=3)
            getattr(p.bwd, t).data = rng.normal(size=3)
        init = rng.normal(size=3)

        def orc(pp, x, h):  # input-free oracle
            z = sigmoid(pp.u_z.data @ h + pp.b_z.data)
            r = sigmoid(pp.u_r.data @ h + pp.b_r.data)
            c = np.tanh(pp.u_h.data @ (r * h) + pp.b_h.data)
            return (1 - z) * h + z * c

        f1 = orc(p.fwd, None, init)
        f2 = orc(p.fwd, None, f1)
        b_last = orc(p.bwd, None, init)     # computed at position 2 first
        b_first = orc(p.bwd, None, b_last)  # then position 1
        out = bigru_decode(p, Tensor(init), 2)
        np.testing.assert_allclose(out[0].data, np.concatenate([f1, b_first]), atol=1e-12)
        np.testing.assert_allclose(out[1].data, np.concatenate([f2, b_last]), atol=1e-12)
