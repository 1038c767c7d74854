"""Tests for the differentiable numeric core.

Derived expectations are computed by independent oracles written here
(triple-loop matmul, extended-precision softmax, unfused attention) and
never by the code under test.
"""

import numpy as np
import pytest

from i2ploc import nncore
from i2ploc.errors import ConfigError, DataError
from i2ploc.nncore import (
    AttentionOutput,
    BlockParams,
    Tensor,
    grad_check,
    init_block,
    init_linear,
    layer_norm,
    linear,
    load_checkpoint,
    save_checkpoint,
    self_attention,
    softmax,
    transformer_block,
)


def matmul_oracle(a, b):
    """Naive triple-loop matrix product."""
    n, k = a.shape
    k2, m = b.shape
    assert k == k2
    out = np.zeros((n, m), dtype=np.float64)
    for i in range(n):
        for j in range(m):
            for t in range(k):
                out[i, j] += float(a[i, t]) * float(b[t, j])
    return out


class TestLinear:
    def test_identity(self):
        y = linear(Tensor([[1.0, 0.0]]), Tensor(np.eye(2)), Tensor([0.0, 0.0]))
        np.testing.assert_array_equal(y.data, [[1.0, 0.0]])

    def test_zero_weights_pass_bias(self):
        y = linear(Tensor([[1.0, 2.0]]), Tensor(np.zeros((2, 2))), Tensor([3.0, 4.0]))
        np.testing.assert_array_equal(y.data, [[3.0, 4.0]])

    def test_matches_triple_loop_oracle(self):
        rng = np.random.default_rng(7)
        x = rng.standard_normal((4, 3)).astype(np.float32)
        w = rng.standard_normal((3, 2)).astype(np.float32)
        b = rng.standard_normal(2).astype(np.float32)
        y = linear(Tensor(x), Tensor(w), Tensor(b))
        expected = matmul_oracle(x, w) + b
        np.testing.assert_allclose(y.data, expected, atol=1e-6)

    def test_shape_mismatch(self):
        with pytest.raises(DataError):
            linear(Tensor(np.ones((2, 3))), Tensor(np.ones((4, 2))), Tensor(np.ones(2)))


class TestSoftmax:
    def test_uniform_input(self):
        out = softmax(Tensor([0.0, 0.0, 0.0]), axis=-1)
        np.testing.assert_allclose(out.data, [1 / 3] * 3, atol=1e-7)

    def test_large_values_do_not_overflow(self):
        out = softmax(Tensor([1000.0, 0.0]), axis=-1)
        assert np.isfinite(out.data).all()
        np.testing.assert_allclose(out.data, [1.0, 0.0], atol=1e-12)

    def test_matches_extended_precision_oracle(self):
        x = np.array([1.0, 2.0, 3.0])
        e = np.exp(x.astype(np.longdouble))
        expected = (e / e.sum()).astype(np.float64)
        out = softmax(Tensor(x.astype(np.float64)), axis=-1)
        np.testing.assert_allclose(out.data, expected, atol=1e-9)

    def test_rows_sum_to_one(self):
        rng = np.random.default_rng(0)
        out = softmax(Tensor(rng.standard_normal((5, 7)).astype(np.float32)), axis=-1)
        np.testing.assert_allclose(out.data.sum(axis=-1), 1.0, atol=1e-5)
        assert (out.data >= 0).all()


def attention_oracle(x, p, heads):
    """Unfused per-head reference: explicit QK^T/sqrt(d), softmax, @V."""
    n, d = x.shape
    hd = d // heads
    q = x @ p.wq.data + p.bq.data
    k = x @ p.wk.data + p.bk.data
    v = x @ p.wv.data + p.bv.data
    ctx = np.zeros((n, d))
    attn = np.zeros((heads, n, n))
    for h in range(heads):
        sl = slice(h * hd, (h + 1) * hd)
        scores = q[:, sl] @ k[:, sl].T / np.sqrt(hd)
        scores -= scores.max(axis=1, keepdims=True)
        e = np.exp(scores)
        a = e / e.sum(axis=1, keepdims=True)
        attn[h] = a
        ctx[:, sl] = a @ v[:, sl]
    return ctx @ p.wo.data + p.bo.data, attn


class TestSelfAttention:
    def test_single_token_forces_unit_attention(self):
        rng = np.random.default_rng(1)
        p = init_block(rng, 4, 8)
        x = Tensor(rng.standard_normal((1, 4)).astype(np.float32))
        out = self_attention(x, p, heads=2)
        np.testing.assert_allclose(out.attn.data, np.ones((2, 1, 1)), atol=1e-7)
        # with attention pinned at 1 the output is the projected value path
        v = x.data @ p.wv.data + p.bv.data
        np.testing.assert_allclose(out.output.data, v @ p.wo.data + p.bo.data, atol=1e-6)

    def test_identical_tokens_split_attention(self):
        rng = np.random.default_rng(2)
        p = init_block(rng, 4, 8)
        row = rng.standard_normal(4).astype(np.float32)
        out = self_attention(Tensor(np.stack([row, row])), p, heads=2)
        np.testing.assert_allclose(out.attn.data, np.full((2, 2, 2), 0.5), atol=1e-6)

    def test_matches_unfused_oracle(self):
        rng = np.random.default_rng(3)
        p = init_block(rng, 4, 8)
        x = rng.standard_normal((3, 4)).astype(np.float32)
        out = self_attention(Tensor(x), p, heads=2)
        expected_out, expected_attn = attention_oracle(x.astype(np.float64), p, 2)
        np.testing.assert_allclose(out.output.data, expected_out, atol=1e-6)
        np.testing.assert_allclose(out.attn.data, expected_attn, atol=1e-6)

    def test_rows_are_stochastic(self):
        rng = np.random.default_rng(4)
        p = init_block(rng, 6, 12)
        x = Tensor(rng.standard_normal((5, 6)).astype(np.float32))
        out = self_attention(x, p, heads=3)
        np.testing.assert_allclose(out.attn.data.sum(axis=-1), 1.0, atol=1e-5)
        assert (out.attn.data >= 0).all() and (out.attn.data <= 1).all()

    def test_indivisible_heads_rejected(self):
        rng = np.random.default_rng(5)
        p = init_block(rng, 4, 8)
        with pytest.raises(ConfigError):
            self_attention(Tensor(np.zeros((2, 4))), p, heads=3)

    def test_batched_matches_per_sample(self):
        rng = np.random.default_rng(6)
        p = init_block(rng, 4, 8)
        xs = rng.standard_normal((3, 2, 4)).astype(np.float32)
        batched = self_attention(Tensor(xs), p, heads=2)
        for i in range(3):
            single = self_attention(Tensor(xs[i]), p, heads=2)
            np.testing.assert_allclose(batched.output.data[i], single.output.data, atol=1e-6)
            np.testing.assert_allclose(batched.attn.data[i], single.attn.data, atol=1e-6)


class TestTransformerBlock:
    def test_zeroed_projections_give_identity(self):
        rng = np.random.default_rng(7)
        p = init_block(rng, 4, 8)
        for t in (p.wo, p.bo, p.ffn_w2, p.ffn_b2):
            t.data[...] = 0.0
        x = rng.standard_normal((3, 4)).astype(np.float32)
        out, _ = transformer_block(Tensor(x), p, heads=2)
        np.testing.assert_array_equal(out.data, x)

    def test_matches_composed_oracle(self):
        rng = np.random.default_rng(8)
        p = init_block(rng, 4, 8)
        x = rng.standard_normal((2, 4)).astype(np.float64)

        def ln(v, scale, off):
            mu = v.mean(axis=-1, keepdims=True)
            var = ((v - mu) ** 2).mean(axis=-1, keepdims=True)
            return (v - mu) / np.sqrt(var + 1e-5) * scale + off

        def gelu(v):
            from scipy.special import erf

            return 0.5 * v * (1 + erf(v / np.sqrt(2)))

        attn_out, _ = attention_oracle(ln(x, p.ln1_scale.data, p.ln1_offset.data), p, 2)
        x1 = x + attn_out
        h = gelu(ln(x1, p.ln2_scale.data, p.ln2_offset.data) @ p.ffn_w1.data + p.ffn_b1.data)
        expected = x1 + h @ p.ffn_w2.data + p.ffn_b2.data

        out, _ = transformer_block(Tensor(x.astype(np.float32)), p, heads=2)
        np.testing.assert_allclose(out.data, expected, atol=1e-5)

    def test_attention_passed_through(self):
        rng = np.random.default_rng(9)
        p = init_block(rng, 4, 8)
        x = Tensor(rng.standard_normal((3, 4)).astype(np.float32))
        _, ao = transformer_block(x, p, heads=2)
        direct = self_attention(layer_norm(x, p.ln1_scale, p.ln1_offset), p, 2)
        np.testing.assert_array_equal(ao.attn.data, direct.attn.data)


class TestAutogradPrimitives:
    """Reverse-mode vs central differences for each primitive op."""

    CASES = {
        "add": lambda x: (x + x * 2.0).sum(),
        "mul": lambda x: (x * x).sum(),
        "div": lambda x: (x / (x * x + 1.5)).sum(),
        "matmul": lambda x: (x @ x.swapaxes(-1, -2)).sum(),
        "pow": lambda x: (x ** 3.0).sum(),
        "exp": lambda x: x.exp().sum(),
        "log": lambda x: (x * x + 1.0).log().sum(),
        "sqrt": lambda x: (x * x + 0.5).sqrt().sum(),
        "tanh": lambda x: x.tanh().sum(),
        "arctanh": lambda x: (x * 0.4).arctanh().sum(),
        "gelu": lambda x: x.gelu().sum(),
        "relu": lambda x: (x + 0.05).relu().sum(),
        "max": lambda x: x.max(axis=1).sum(),
        "mean": lambda x: x.mean(axis=0).sum(),
        "reshape": lambda x: (x.reshape(-1, 1) * 2.0).sum(),
        "getitem": lambda x: (x[1:, :2] * 3.0).sum(),
        "softmax": lambda x: (softmax(x, axis=-1) * softmax(x, axis=-1)).sum(),
        "layer_norm": lambda x: (
            layer_norm(x, Tensor(np.full(4, 1.3)), Tensor(np.full(4, 0.2))) ** 2.0
        ).sum(),
    }

    @pytest.mark.parametrize("name", sorted(CASES))
    def test_f64_gradient_agreement(self, name):
        rng = np.random.default_rng(11)
        theta = rng.uniform(-0.9, 0.9, size=(3, 4)).astype(np.float64)
        err = grad_check(lambda p: self.CASES[name](p["x"]), {"x": Tensor(theta)}, h=1e-6)
        assert err < 1e-6, f"{name}: max rel err {err}"

    def test_f32_forward_agreement(self):
        # f32 forward autodiff against the f64 checker's own reverse pass
        rng = np.random.default_rng(12)
        x32 = Tensor(rng.uniform(-0.9, 0.9, size=(3, 4)).astype(np.float32), requires_grad=True)
        out = (x32.tanh() * x32).sum()
        out.backward()
        x64 = Tensor(x32.data.astype(np.float64), requires_grad=True)
        (x64.tanh() * x64).sum().backward()
        rel = np.abs(x32.grad - x64.grad) / np.maximum(np.abs(x64.grad), 1e-6)
        assert rel.max() < 1e-4

    def test_concat_and_where_gradients(self):
        rng = np.random.default_rng(13)
        a = rng.standard_normal((2, 3))
        b = rng.standard_normal((2, 3))
        mask = rng.standard_normal((2, 3)) > 0

        def f(p):
            cat = nncore.concat([p["a"], p["b"]], axis=0)
            sel = nncore.where(mask, p["a"] * 2.0, p["b"] ** 2.0)
            return (cat * cat).sum() + sel.sum()

        err = grad_check(f, {"a": Tensor(a), "b": Tensor(b)}, h=1e-6)
        assert err < 1e-6

    def test_attention_block_gradients(self):
        rng = np.random.default_rng(14)
        p = init_block(rng, 4, 8)
        x = rng.standard_normal((3, 4)).astype(np.float32)
        params = {name: t for name, t in p.tensors()}

        def f(pd):
            block = BlockParams(**pd)
            out, _ = transformer_block(Tensor(x.astype(np.float64)), block, heads=2)
            return (out * out).sum()

        err = grad_check(f, params, h=1e-6, samples=120)
        assert err < 1e-6


class TestGradCheck:
    def test_quadratic(self):
        err = grad_check(lambda p: (p["t"] * p["t"]).sum(), {"t": Tensor([3.0])}, h=1e-5)
        # gradient is 6 at theta=3
        assert err < 1e-8

    def test_linear_op(self):
        rng = np.random.default_rng(15)
        x = rng.standard_normal((3, 4))
        w0 = rng.standard_normal((4, 2))
        b0 = rng.standard_normal(2)
        err = grad_check(
            lambda p: (linear(Tensor(x), p["w"], p["b"]) ** 2.0).sum(),
            {"w": Tensor(w0), "b": Tensor(b0)},
            h=1e-5,
        )
        assert err < 1e-6

    def test_unused_parameter_reports_zero_gradient(self):
        err = grad_check(
            lambda p: (p["used"] * p["used"]).sum(),
            {"used": Tensor([2.0]), "unused": Tensor([1.0])},
        )
        assert err < 1e-8

    def test_determinism(self):
        rng = np.random.default_rng(16)
        w = Tensor(rng.standard_normal((8, 8)).astype(np.float32), requires_grad=True)
        x = Tensor(rng.standard_normal((4, 8)).astype(np.float32))
        one = ((x @ w).gelu()).sum()
        two = ((x @ w).gelu()).sum()
        assert one.data.tobytes() == two.data.tobytes()


class TestCheckpoint:
    def test_round_trip_bit_identical(self, tmp_path):
        rng = np.random.default_rng(17)
        params = {
            "tower.w": Tensor(rng.standard_normal((3, 5)).astype(np.float32), requires_grad=True),
            "tower.b": Tensor(rng.standard_normal(5).astype(np.float32), requires_grad=True),
        }
        base = str(tmp_path / "ckpt")
        save_checkpoint(base, params, extra={"epoch": 3})
        arrays, extra = load_checkpoint(base)
        assert extra == {"epoch": 3}
        assert set(arrays) == set(params)
        for name, arr in arrays.items():
            assert arr.tobytes() == params[name].data.tobytes()

    def test_missing_file_raises(self, tmp_path):
        with pytest.raises(DataError):
            load_checkpoint(str(tmp_path / "nope"))

    def test_manifest_offsets_consistent(self, tmp_path):
        import json

        params = {
            "a": Tensor(np.arange(6, dtype=np.float32).reshape(2, 3), requires_grad=True),
            "b": Tensor(np.arange(4, dtype=np.float32), requires_grad=True),
        }
        base = str(tmp_path / "ck")
        save_checkpoint(base, params)
        with open(base + ".json") as fh:
            doc = json.load(fh)
        assert doc["params"]["a"]["offset"] == 0
        assert doc["params"]["b"]["offset"] == 24
        assert doc["total_bytes"] == 40


class TestTensorBasics:
    def test_non_finite_leaf_rejected(self):
        with pytest.raises(DataError):
            Tensor([np.inf, 1.0])

    def test_init_linear_is_fan_in_scaled(self):
        rng = np.random.default_rng(18)
        w, b = init_linear(rng, 16, 8)
        assert np.abs(w.data).max() <= 1.0 / 4.0
        assert (b.data == 0).all()
        assert w.requires_grad and b.requires_grad

    def test_gradient_accumulates_across_backward_calls(self):
        t = Tensor([2.0], requires_grad=True)
        (t * t).sum().backward()
        (t * t).sum().backward()
        np.testing.assert_allclose(t.grad, [8.0])
        t.zero_grad()
        assert t.grad is None
