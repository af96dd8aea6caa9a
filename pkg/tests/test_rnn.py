import math

import numpy as np
import pytest

from noisin import numerics as nx
from noisin import rnn
from noisin.numerics import ShapeError, Tensor
from noisin.rnn import CellKind, CellParams, DropoutMasks, RnnState


def sig(v):
    return 1.0 / (1.0 + math.exp(-v))


def make_cell(kind, D, H, rng, scale=0.8):
    g = 4 if kind == "lstm" else 1
    return CellParams(
        kind,
        nx.parameter(rng.normal(scale=scale, size=(D, g * H))),
        nx.parameter(rng.normal(scale=scale, size=(H, g * H))),
        nx.parameter(rng.normal(scale=scale, size=g * H)),
    )


def zeros_cell(kind, D, H):
    g = 4 if kind == "lstm" else 1
    return CellParams(kind, nx.parameter(np.zeros((D, g * H))), nx.parameter(np.zeros((H, g * H))), nx.parameter(np.zeros(g * H)))


def scalar_lstm(Wx, Wh, b, x, h, c):
    """Unit-by-unit LSTM reference using the gate blocks f, i, o, candidate."""
    H = h.size
    h_new, c_new = np.zeros(H), np.zeros(H)
    for u in range(H):
        pre = []
        for k in range(4):
            col = k * H + u
            v = b[col]
            for j in range(x.size):
                v += x[j] * Wx[j, col]
            for j in range(H):
                v += h[j] * Wh[j, col]
            pre.append(v)
        f, i, o, cand = sig(pre[0]), sig(pre[1]), sig(pre[2]), math.tanh(pre[3])
        c_new[u] = f * c[u] + i * cand
        h_new[u] = o * math.tanh(c_new[u])
    return h_new, c_new


class TestErnn:
    def test_zero_weights(self):
        x, h = Tensor(np.ones((2, 3))), Tensor(np.ones((2, 4)))
        np.testing.assert_array_equal(rnn.ernn_step(zeros_cell("ernn-sigmoid", 3, 4), x, h).data, 0.5)
        np.testing.assert_array_equal(rnn.ernn_step(zeros_cell("ernn-tanh", 3, 4), x, h).data, 0.0)

    @pytest.mark.parametrize("kind,act", [("ernn-sigmoid", sig), ("ernn-tanh", math.tanh)])
    def test_scalar_oracle(self, kind, act):
        rng = np.random.default_rng(0)
        cell = make_cell(kind, 3, 4, rng)
        x, h = rng.normal(size=(2, 3)), rng.normal(size=(2, 4))
        out = rnn.ernn_step(cell, Tensor(x), Tensor(h)).data
        for r in range(2):
            for u in range(4):
                v = cell.b.data[u] + sum(x[r, j] * cell.W_x.data[j, u] for j in range(3))
                v += sum(h[r, j] * cell.W_h.data[j, u] for j in range(4))
                assert abs(out[r, u] - act(v)) <= 1e-12

    def test_shape_errors(self):
        cell = zeros_cell("ernn-tanh", 3, 4)
        with pytest.raises(ShapeError):
            rnn.ernn_step(cell, Tensor(np.ones((2, 2))), Tensor(np.ones((2, 4))))
        with pytest.raises(ShapeError):
            rnn.ernn_step(cell, Tensor(np.ones((2, 3))), Tensor(np.ones((3, 4))))


class TestLstm:
    def test_zero_weights(self):
        cell = zeros_cell("lstm", 2, 3)
        st = rnn.lstm_step(cell, Tensor(np.ones((1, 2))), rnn.zero_state(cell, 1))
        np.testing.assert_array_equal(st.c.data, 0.0)
        np.testing.assert_array_equal(st.h.data, 0.0)

    def test_saturated_gates_carry_memory(self):
        cell = zeros_cell("lstm", 2, 3)
        b = cell.b.data
        b[0:3] = 50.0   # forget open
        b[3:6] = -50.0  # input closed
        c0 = np.array([[0.3, -0.7, 1.2]])
        st = rnn.lstm_step(cell, Tensor(np.ones((1, 2))), RnnState(Tensor(np.zeros((1, 3))), Tensor(c0)))
        assert np.max(np.abs(st.c.data - c0)) <= 1e-12

    def test_scalar_oracle(self):
        rng = np.random.default_rng(1)
        cell = make_cell("lstm", 2, 2, rng)
        for _ in range(5):
            x, h, c = rng.normal(size=2), rng.normal(size=2), rng.normal(size=2)
            st = rnn.lstm_step(cell, Tensor(x[None]), RnnState(Tensor(h[None]), Tensor(c[None])))
            hr, cr = scalar_lstm(cell.W_x.data, cell.W_h.data, cell.b.data, x, h, c)
            np.testing.assert_allclose(st.h.data[0], hr, rtol=0, atol=1e-12)
            np.testing.assert_allclose(st.c.data[0], cr, rtol=0, atol=1e-12)

    def test_parameter_count(self):
        for D, H in [(3, 5), (7, 2), (10, 10)]:
            cell = rnn.init_cell("lstm", D, H, np.random.default_rng(0))
            assert cell.n_parameters() == 4 * (D * H + H * H + H)
            assert cell.n_gates == 4
        assert rnn.init_cell("ernn-tanh", 3, 5, np.random.default_rng(0)).n_parameters() == 3 * 5 + 25 + 5

    def test_gate_views(self):
        cell = make_cell("lstm", 2, 3, np.random.default_rng(2))
        np.testing.assert_array_equal(cell.gate("o")["W_h"], cell.W_h.data[:, 6:9])
        np.testing.assert_array_equal(cell.gate("c")["b"], cell.b.data[9:12])


def test_init_ranges():
    cell = rnn.init_cell("lstm", 6, 16, np.random.default_rng(3))
    assert np.all(np.abs(cell.W_x.data) <= 0.25) and np.all(np.abs(cell.W_h.data) <= 0.25)
    np.testing.assert_array_equal(cell.b.data, 0.0)


def test_boundedness():
    rng = np.random.default_rng(4)
    for kind, lo, hi in [("ernn-sigmoid", 0, 1), ("ernn-tanh", -1, 1), ("lstm", -1, 1)]:
        cell = make_cell(kind, 3, 5, rng, scale=3.0)
        xs = [Tensor(rng.normal(scale=3, size=(4, 3))) for _ in range(6)]
        out = rnn.forward_sequence([cell], xs, [rnn.zero_state(cell, 4)])
        for h in out.outputs:
            assert np.all(h.data >= lo) and np.all(h.data <= hi)
            if kind == "lstm":
                assert np.all(np.abs(h.data) < 1)


class TestForwardSequence:
    def test_single_step_equals_cell_step(self):
        rng = np.random.default_rng(5)
        cell = make_cell("lstm", 3, 4, rng)
        x = Tensor(rng.normal(size=(2, 3)))
        st0 = rnn.zero_state(cell, 2)
        seq = rnn.forward_sequence([cell], [x], [st0])
        np.testing.assert_array_equal(seq.outputs[0].data, rnn.lstm_step(cell, x, st0).h.data)

    @pytest.mark.parametrize("kind,const", [("ernn-sigmoid", 0.5), ("ernn-tanh", 0.0)])
    def test_zero_second_layer(self, kind, const):
        rng = np.random.default_rng(6)
        stack = [make_cell(kind, 3, 4, rng), zeros_cell(kind, 4, 4)]
        xs = [Tensor(rng.normal(size=(2, 3))) for _ in range(3)]
        out = rnn.forward_sequence(stack, xs, [rnn.zero_state(c, 2) for c in stack])
        for h in out.outputs:
            np.testing.assert_array_equal(h.data, const)

    def test_hand_unrolled(self):
        rng = np.random.default_rng(7)
        cell = make_cell("lstm", 3, 4, rng)
        xs = [Tensor(rng.normal(size=(2, 3))) for _ in range(3)]
        st = rnn.zero_state(cell, 2)
        seq = rnn.forward_sequence([cell], xs, [st])
        for t in range(3):
            st = rnn.lstm_step(cell, xs[t], st)
            np.testing.assert_array_equal(seq.outputs[t].data, st.h.data)
        np.testing.assert_array_equal(seq.final_states[0].c.data, st.c.data)

    def test_layer_wiring(self):
        rng = np.random.default_rng(8)
        stack = [make_cell("ernn-tanh", 3, 4, rng), make_cell("lstm", 4, 2, rng)]
        x = Tensor(rng.normal(size=(1, 3)))
        seq = rnn.forward_sequence(stack, [x], [rnn.zero_state(c, 1) for c in stack])
        h1 = rnn.ernn_step(stack[0], x, Tensor(np.zeros((1, 4))))
        np.testing.assert_array_equal(seq.layer_outputs[0][0].data, h1.data)
        h2 = rnn.lstm_step(stack[1], h1, rnn.zero_state(stack[1], 1)).h
        np.testing.assert_array_equal(seq.outputs[0].data, h2.data)

    def test_errors(self):
        cell = zeros_cell("ernn-tanh", 2, 2)
        with pytest.raises(ValueError):
            rnn.forward_sequence([cell], [], [rnn.zero_state(cell, 1)])
        with pytest.raises(ShapeError):
            rnn.forward_sequence([cell], [Tensor(np.ones((1, 2)))], [])


class TestDropoutLstm:
    def test_unit_masks_bit_identical(self):
        rng = np.random.default_rng(9)
        cell = make_cell("lstm", 3, 4, rng)
        x = Tensor(rng.normal(size=(2, 3)))
        st = RnnState(Tensor(rng.normal(size=(2, 4))), Tensor(rng.normal(size=(2, 4))))
        a = rnn.lstm_step(cell, x, st)
        b = rnn.dropout_lstm_step(cell, DropoutMasks.ones(2, 4), x, st)
        np.testing.assert_array_equal(a.h.data, b.h.data)
        np.testing.assert_array_equal(a.c.data, b.c.data)

    def test_keep_one_sampled_masks_bit_identical(self):
        rng = np.random.default_rng(10)
        cell = make_cell("lstm", 3, 4, rng)
        x = Tensor(rng.normal(size=(2, 3)))
        st = rnn.zero_state(cell, 2)
        m = rnn.sample_dropout_masks(2, 4, 1.0, 1.0, rng)
        np.testing.assert_array_equal(rnn.dropout_lstm_step(cell, m, x, st).h.data, rnn.lstm_step(cell, x, st).h.data)

    def test_zero_input_masks_match_zeroed_input_weights(self):
        rng = np.random.default_rng(11)
        cell = make_cell("lstm", 3, 4, rng)
        ref = CellParams("lstm", Tensor(np.zeros((3, 16))), cell.W_h, cell.b)
        x = Tensor(rng.normal(size=(2, 3)))
        st = RnnState(Tensor(rng.normal(size=(2, 4))), Tensor(rng.normal(size=(2, 4))))
        masks = DropoutMasks(np.zeros((2, 16)), np.ones((2, 16)))
        np.testing.assert_array_equal(rnn.dropout_lstm_step(cell, masks, x, st).h.data, rnn.lstm_step(ref, x, st).h.data)

    def test_input_only_variant(self):
        """Hidden-side masks at one: only the input products are masked."""
        rng = np.random.default_rng(12)
        cell = make_cell("lstm", 3, 4, rng)
        x, h, c = rng.normal(size=(1, 3)), rng.normal(size=(1, 4)), rng.normal(size=(1, 4))
        masks = rnn.sample_dropout_masks(1, 4, 0.5, 1.0, nx.make_rng(0))
        assert np.all(masks.h == 1.0)
        st = rnn.dropout_lstm_step(cell, masks, Tensor(x), RnnState(Tensor(h), Tensor(c)))
        pre = (x @ cell.W_x.data) * masks.x + h @ cell.W_h.data + cell.b.data
        f, i, o = (1 / (1 + np.exp(-pre[:, k * 4:(k + 1) * 4])) for k in range(3))
        c_ref = f * c + i * np.tanh(pre[:, 12:])
        np.testing.assert_allclose(st.c.data, c_ref, rtol=0, atol=1e-12)
        np.testing.assert_allclose(st.h.data, o * np.tanh(c_ref), rtol=0, atol=1e-12)

    def test_mask_scaling(self):
        rng = nx.make_rng(13)
        m = rnn.bernoulli_mask((200, 500), 0.4, rng)
        assert set(np.unique(m)) == {0.0, 2.5}
        assert abs(m.mean() - 1.0) < 0.02
        raw = rnn.bernoulli_mask((10,), 0.4, nx.make_rng(13), inverted=False)
        assert set(np.unique(raw)) <= {0.0, 1.0}

    def test_mask_accessor_and_shape_check(self):
        m = DropoutMasks(np.arange(8.0).reshape(1, 8), np.zeros((1, 8)))
        np.testing.assert_array_equal(m.mask("x", "o"), [[4.0, 5.0]])
        cell = zeros_cell("lstm", 2, 2)
        with pytest.raises(ShapeError):
            rnn.dropout_lstm_step(cell, DropoutMasks.ones(1, 3), Tensor(np.ones((1, 2))), rnn.zero_state(cell, 1))


def test_cell_kind_validation():
    with pytest.raises(ValueError):
        CellKind("gru")
    with pytest.raises(ShapeError):
        CellParams("lstm", Tensor(np.zeros((2, 4))), Tensor(np.zeros((2, 4))), Tensor(np.zeros(4)))
