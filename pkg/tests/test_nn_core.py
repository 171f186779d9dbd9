import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from speechcare.errors import DomainError, FormatError, ShapeError, StateError
from speechcare.nn import autodiff as ad
from speechcare.nn import checkpoint
from speechcare.nn.gradcheck import check_gradients
from speechcare.nn.layers import (
    AttentionBlock,
    Dense,
    Module,
    dense_forward,
    layer_norm,
    multi_head_attention,
    softmax,
)


def naive_matmul(a, b):
    out = np.zeros((a.shape[0], b.shape[1]))
    for i in range(a.shape[0]):
        for j in range(b.shape[1]):
            for k in range(a.shape[1]):
                out[i, j] += a[i, k] * b[k, j]
    return out


class TestDense:
    def test_identity_layer_returns_input(self):
        layer = Dense(4, 4, np.random.default_rng(0), dtype=np.float64)
        layer.weight.data = np.eye(4)
        x = np.arange(12.0).reshape(3, 4)
        np.testing.assert_array_equal(dense_forward(layer, x), x)

    def test_zero_tanh_is_zero(self):
        layer = Dense(4, 2, np.random.default_rng(0), activation="tanh", zero=True)
        assert np.all(dense_forward(layer, np.ones((3, 4))) == 0)

    def test_matches_triple_loop(self):
        rng = np.random.default_rng(3)
        layer = Dense(4, 2, rng, dtype=np.float64)
        layer.bias.data = rng.normal(size=2)
        x = rng.normal(size=(3, 4))
        expected = naive_matmul(x, layer.weight.data.T) + layer.bias.data
        np.testing.assert_allclose(dense_forward(layer, x), expected, atol=1e-12, rtol=0)

    def test_shape_mismatch(self):
        layer = Dense(4, 2, np.random.default_rng(0))
        with pytest.raises(ShapeError):
            dense_forward(layer, np.ones((3, 5)))

    def test_glorot_bounds(self):
        layer = Dense(30, 10, np.random.default_rng(1))
        assert np.abs(layer.weight.data).max() <= math.sqrt(6 / 40)
        assert np.all(layer.bias.data == 0)


class TestSoftmax:
    def test_uniform(self):
        np.testing.assert_allclose(softmax([0, 0, 0]), [1 / 3] * 3, atol=1e-15)

    def test_shift_invariance(self):
        v = np.array([0.3, -1.2, 2.0])
        np.testing.assert_allclose(softmax(v + 123.4), softmax(v), atol=1e-12, rtol=0)

    def test_direct_formula(self):
        e = [math.exp(1), math.exp(2), math.exp(3)]
        np.testing.assert_allclose(softmax([1, 2, 3]), [x / sum(e) for x in e], atol=1e-15)

    def test_empty(self):
        with pytest.raises(DomainError):
            softmax([])

    @given(st.lists(st.floats(-50, 50), min_size=1, max_size=20))
    def test_simplex(self, values):
        p = softmax(values)
        assert np.all(p > 0)
        assert abs(p.sum() - 1) <= 1e-9


class TestLayerNorm:
    def test_constant_vector(self):
        np.testing.assert_array_equal(layer_norm([5, 5, 5], np.ones(3), np.zeros(3)), [0, 0, 0])

    def test_two_elements(self):
        np.testing.assert_allclose(layer_norm([1, 3], np.ones(2), np.zeros(2)), [-1, 1], atol=1e-4)

    def test_zero_scale_gives_shift(self):
        out = layer_norm([1.0, 7.0, -2.0], np.zeros(3), np.full(3, 2.5))
        np.testing.assert_array_equal(out, [2.5, 2.5, 2.5])

    def test_too_short(self):
        with pytest.raises(DomainError):
            layer_norm([1.0], np.ones(1), np.zeros(1))

    def test_tensor_op_agrees(self):
        rng = np.random.default_rng(0)
        x = rng.normal(size=(4, 6))
        g, b = rng.normal(size=6), rng.normal(size=6)
        out = ad.layer_norm(ad.Tensor(x), ad.Tensor(g), ad.Tensor(b)).data
        for i in range(4):
            np.testing.assert_allclose(out[i], layer_norm(x[i], g, b), atol=1e-12)


def hand_attention(x, wq, wk, wv, wo, heads, gamma, beta):
    t, d = x.shape
    hd = d // heads
    q, k, v = x @ wq.T, x @ wk.T, x @ wv.T
    ctx = np.zeros((t, d))
    for h in range(heads):
        sl = slice(h * hd, (h + 1) * hd)
        for i in range(t):
            scores = np.array([q[i, sl] @ k[j, sl] / math.sqrt(hd) for j in range(t)])
            w = np.exp(scores - scores.max())
            w /= w.sum()
            ctx[i, sl] = sum(w[j] * v[j, sl] for j in range(t))
    res = x + ctx @ wo.T
    return np.stack([layer_norm(r, gamma, beta) for r in res])


class TestAttention:
    def _block(self, dim=4, heads=1, seed=0):
        return AttentionBlock(dim, heads, np.random.default_rng(seed), dropout=0.0, dtype=np.float64)

    def test_identity_projections_match_hand_oracle(self):
        block = self._block()
        for layer in (block.query, block.key, block.value, block.output):
            layer.weight.data = np.eye(4)
        x = np.random.default_rng(1).normal(size=(3, 4))
        eye = np.eye(4)
        expected = hand_attention(x, eye, eye, eye, eye, 1, np.ones(4), np.zeros(4))
        np.testing.assert_allclose(multi_head_attention(block, x), expected, atol=1e-10, rtol=0)

    def test_random_four_heads_match_hand_oracle(self):
        block = self._block(dim=8, heads=4, seed=5)
        x = np.random.default_rng(2).normal(size=(5, 8))
        expected = hand_attention(x, block.query.weight.data, block.key.weight.data,
                                  block.value.weight.data, block.output.weight.data, 4,
                                  np.ones(8), np.zeros(8))
        np.testing.assert_allclose(multi_head_attention(block, x), expected, atol=1e-10, rtol=0)

    def test_single_position(self):
        block = self._block()
        x = np.random.default_rng(1).normal(size=(1, 4))
        out = multi_head_attention(block, x)
        np.testing.assert_array_equal(block.last_attention, np.ones((1, 1, 1)))
        proj = block.output.weight.data @ (block.value.weight.data @ x[0])
        np.testing.assert_allclose(out[0], layer_norm(x[0] + proj, np.ones(4), np.zeros(4)), atol=1e-12)

    def test_permutation_equivariance(self):
        block = self._block(dim=8, heads=4)
        x = np.random.default_rng(4).normal(size=(6, 8))
        perm = np.random.default_rng(5).permutation(6)
        np.testing.assert_allclose(multi_head_attention(block, x[perm]), multi_head_attention(block, x)[perm],
                                   atol=1e-12)

    def test_shape_preserved_and_mismatch(self):
        block = self._block(dim=8, heads=4)
        assert multi_head_attention(block, np.zeros((7, 8))).shape == (7, 8)
        with pytest.raises(ShapeError):
            multi_head_attention(block, np.zeros((7, 6)))

    def test_heads_must_divide(self):
        with pytest.raises(ShapeError):
            AttentionBlock(10, 4, np.random.default_rng(0))

    def test_key_mask_ignores_padding(self):
        block = self._block(dim=8, heads=4)
        x = np.random.default_rng(6).normal(size=(4, 8))
        padded = np.concatenate([x, np.full((2, 8), 9.0)])[None]
        mask = np.array([[True] * 4 + [False] * 2])
        out = block(ad.Tensor(padded), key_mask=mask).data[0, :4]
        np.testing.assert_allclose(out, multi_head_attention(block, x), atol=1e-9)

    def test_dropout_deterministic_given_seed(self):
        block = AttentionBlock(8, 4, np.random.default_rng(0), dropout=0.5, dtype=np.float64)
        x = np.random.default_rng(1).normal(size=(5, 8))
        a = multi_head_attention(block, x, training=True, rng=np.random.default_rng(9))
        b = multi_head_attention(block, x, training=True, rng=np.random.default_rng(9))
        np.testing.assert_array_equal(a, b)
        assert not np.allclose(a, multi_head_attention(block, x))


class TestBackward:
    def test_sum_of_parameters(self):
        p = ad.Parameter(np.arange(6.0).reshape(2, 3), name="p")
        tape = ad.backward(ad.sum(p), [p])
        np.testing.assert_array_equal(tape["p"], np.ones((2, 3)))

    def test_half_square(self):
        theta = ad.Parameter(np.array([1.7]), name="theta")
        loss = ad.scale(ad.sum(ad.mul(theta, theta)), 0.5)
        np.testing.assert_allclose(ad.backward(loss, [theta])["theta"], [1.7])

    def test_backward_twice_is_state_error(self):
        p = ad.Parameter(np.ones(3), name="p")
        loss = ad.sum(ad.tanh(p))
        ad.backward(loss, [p])
        with pytest.raises(StateError):
            ad.backward(loss, [p])

    def test_backward_without_graph(self):
        with pytest.raises(StateError):
            ad.backward(ad.Tensor(np.array(1.0)))

    def test_unused_parameter_gets_zero(self):
        p = ad.Parameter(np.ones(3), name="p")
        q = ad.Parameter(np.ones((2, 2)), name="q")
        tape = ad.backward(ad.sum(p), [p, q])
        np.testing.assert_array_equal(tape["q"], np.zeros((2, 2)))

    def test_attention_stack_matches_finite_differences(self):
        class Tiny(Module):
            def __init__(self):
                rng = np.random.default_rng(11)
                self.proj = Dense(5, 8, rng, dtype=np.float64)
                self.blocks = [AttentionBlock(8, 4, rng, dropout=0.0, dtype=np.float64) for _ in range(2)]
                self.head = Dense(8, 3, rng, activation="tanh", dtype=np.float64)

        model = Tiny()
        params = model.parameters()
        for p in params.values():
            p.data += np.random.default_rng(0).normal(scale=0.1, size=p.shape)
        x = np.random.default_rng(12).normal(size=(2, 6, 5))
        mask = np.array([[True] * 6, [True] * 4 + [False] * 2])

        def loss_fn():
            h = model.proj(ad.Tensor(x))
            for block in model.blocks:
                h = block(h, key_mask=mask)
            logits = model.head(h[:, 0, :])
            return ad.cross_entropy_logits(logits, np.array([0, 2]))

        report = check_gradients(loss_fn, params)
        assert report.worst < 1e-4, report.max_rel_error


class TestCheckpoint:
    def test_round_trip_bit_exact(self, tmp_path):
        rng = np.random.default_rng(0)
        state = {"a.weight": rng.normal(size=(3, 4)).astype(np.float32),
                 "a.bias": rng.normal(size=4).astype(np.float32)}
        checkpoint.save(tmp_path / "m.bin", state)
        back = checkpoint.load(tmp_path / "m.bin")
        assert list(back) == list(state)
        np.testing.assert_array_equal(back["a.weight"], state["a.weight"])
        np.testing.assert_array_equal(back["a.bias"].reshape(-1), state["a.bias"])

    def test_layout(self):
        blob = checkpoint.dumps({"w": np.array([[1.0, 2.0]], dtype=np.float32)})
        assert blob[:6] == b"SCNN1\x00"
        assert blob[6:10] == (1).to_bytes(4, "little")
        assert blob[10:11] == b"w"
        assert blob[11:19] == (1).to_bytes(4, "little") + (2).to_bytes(4, "little")
        assert np.frombuffer(blob[19:], "<f4").tolist() == [1.0, 2.0]

    def test_bad_magic_and_truncation(self):
        with pytest.raises(FormatError):
            checkpoint.loads(b"XXXX")
        blob = checkpoint.dumps({"w": np.ones((2, 2), np.float32)})
        with pytest.raises(FormatError):
            checkpoint.loads(blob[:-3])

    def test_module_state_restores(self):
        layer = Dense(3, 2, np.random.default_rng(0))
        state = checkpoint.loads(checkpoint.dumps(layer.state_dict()))
        other = Dense(3, 2, np.random.default_rng(99))
        other.load_state_dict(state)
        np.testing.assert_array_equal(other.weight.data, layer.weight.data)
        assert other.bias.shape == (2,)


@settings(max_examples=30, deadline=None)
@given(st.integers(0, 10_000))
def test_softmax_op_gradient_matches_differences(seed):
    rng = np.random.default_rng(seed)
    p = ad.Parameter(rng.normal(size=(2, 5)), name="p")
    w = rng.normal(size=(2, 5))

    def loss_fn():
        return ad.sum(ad.mul(ad.softmax(p), w))

    assert check_gradients(loss_fn, {"p": p}).worst < 1e-4
