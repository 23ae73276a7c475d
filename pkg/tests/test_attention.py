"""Routing attention vs a dense-attention oracle, plus routing invariants."""

import numpy as np
import pytest

from crossres import tensor as T
from crossres.attention import (
    BilevelRoutingAttention, TransformerBlock,
    gather_kv, region_affinity, region_merge, region_partition, topk_route,
)
from crossres.tensor import ConfigError, ShapeError, backward, finite_diff_check, tensor


def softmax_np(x, axis=-1):
    e = np.exp(x - x.max(axis=axis, keepdims=True))
    return e / e.sum(axis=axis, keepdims=True)


def depthwise_conv_ref(x, w, b):
    """Triple-loop depth-wise convolution (independent of the engine)."""
    H, W, C = x.shape
    k = w.shape[0]
    p = k // 2
    xp = np.pad(x, ((p, p), (p, p), (0, 0)))
    out = np.zeros_like(x)
    for i in range(H):
        for j in range(W):
            out[i, j, :] = (xp[i:i + k, j:j + k, :] * w[:, :, 0, :]).sum(axis=(0, 1)) + b
    return out


def dense_attention_ref(x, attn):
    """Full token-to-token attention + LCE + output projection, in numpy."""
    H, W, C = x.shape
    heads = attn.heads
    d = C // heads
    flat = x.reshape(-1, C)
    q = flat @ attn.wq.weight.data + attn.wq.bias.data
    k = flat @ attn.wk.weight.data + attn.wk.bias.data
    v = flat @ attn.wv.weight.data + attn.wv.bias.data
    n = H * W
    qh = q.reshape(n, heads, d).transpose(1, 0, 2)
    kh = k.reshape(n, heads, d).transpose(1, 0, 2)
    vh = v.reshape(n, heads, d).transpose(1, 0, 2)
    weights = softmax_np(qh @ kh.transpose(0, 2, 1) / np.sqrt(d))
    out = (weights @ vh).transpose(1, 0, 2).reshape(H, W, C)
    lce = depthwise_conv_ref(v.reshape(H, W, C), attn.lce.weight.data, attn.lce.bias.data)
    return ((out + lce).reshape(-1, C) @ attn.wo.weight.data
            + attn.wo.bias.data).reshape(H, W, C)


class TestRegionPartition:
    def test_shape_law(self):
        x = tensor(np.zeros((8, 8, 3)), "f64")
        assert region_partition(x, 4).shape == (16, 4, 3)

    def test_single_region(self):
        x = tensor(np.zeros((8, 8, 3)), "f64")
        assert region_partition(x, 1).shape == (1, 64, 3)

    def test_roundtrip_bit_exact(self):
        rng = np.random.default_rng(0)
        x = tensor(rng.normal(size=(8, 8, 3)), "f64")
        back = region_merge(region_partition(x, 4), (8, 8), 4)
        assert np.array_equal(back.data, x.data)

    def test_indivisible_rejected(self):
        with pytest.raises(ShapeError):
            region_partition(tensor(np.zeros((6, 8, 2))), 4)


class TestRegionAffinity:
    def test_identical_regions_constant_matrix(self):
        x = tensor(np.tile(np.arange(3.0), (4, 2, 1)), "f64")
        a = region_affinity(x, x).data
        np.testing.assert_allclose(a, a[0, 0], atol=1e-12)

    def test_orthogonal_means_diagonal(self):
        q = np.zeros((2, 2, 2))
        q[0, :, 0] = 1.0
        q[1, :, 1] = 1.0
        a = region_affinity(tensor(q, "f64"), tensor(q, "f64")).data
        np.testing.assert_allclose(a, np.eye(2), atol=1e-12)

    def test_matches_triple_loop(self):
        rng = np.random.default_rng(1)
        q = rng.normal(size=(2, 3, 4))
        k = rng.normal(size=(2, 3, 4))
        a = region_affinity(tensor(q, "f64"), tensor(k, "f64")).data
        qr, kr = q.mean(axis=1), k.mean(axis=1)
        ref = np.zeros((2, 2))
        for i in range(2):
            for j in range(2):
                for c in range(4):
                    ref[i, j] += qr[i, c] * kr[j, c]
        np.testing.assert_allclose(a, ref, atol=1e-12)

    def test_within_region_permutation_invariant(self):
        rng = np.random.default_rng(2)
        q = rng.normal(size=(4, 6, 3))
        perm = q.copy()
        perm[2] = perm[2][rng.permutation(6)]
        a1 = region_affinity(tensor(q, "f64"), tensor(q, "f64")).data
        a2 = region_affinity(tensor(perm, "f64"), tensor(perm, "f64")).data
        np.testing.assert_allclose(a1, a2, atol=1e-12)


class TestTopkRoute:
    def test_basic_selection(self):
        idx = topk_route(np.array([[0.9, 0.1], [0.2, 0.8]]), 1)
        np.testing.assert_array_equal(idx, [[0], [1]])

    def test_full_k_is_full_set(self):
        idx = topk_route(np.random.default_rng(3).random((4, 4)), 4)
        for row in idx:
            assert sorted(row) == [0, 1, 2, 3]

    def test_tie_takes_lower_index(self):
        idx = topk_route(np.full((1, 4), 0.5), 2)
        np.testing.assert_array_equal(idx, [[0, 1]])

    def test_row_contains_argmax(self):
        rng = np.random.default_rng(4)
        a = rng.random((16, 16))
        idx = topk_route(a, 3)
        np.testing.assert_array_equal(idx[:, 0], a.argmax(axis=1))

    def test_k_out_of_range(self):
        with pytest.raises(ConfigError):
            topk_route(np.zeros((3, 3)), 4)


class TestGatherKV:
    def test_identity_routing(self):
        rng = np.random.default_rng(5)
        k = tensor(rng.normal(size=(4, 2, 3)), "f64")
        v = tensor(rng.normal(size=(4, 2, 3)), "f64")
        idx = np.arange(4)[:, None]
        kg, vg = gather_kv(k, v, idx)
        assert np.array_equal(kg.data, k.data) and np.array_equal(vg.data, v.data)

    def test_full_gather_holds_all_tokens(self):
        rng = np.random.default_rng(6)
        k = tensor(rng.normal(size=(4, 2, 3)), "f64")
        idx = np.tile(np.arange(4), (4, 1))
        kg, _ = gather_kv(k, k, idx)
        assert kg.shape == (4, 8, 3)
        np.testing.assert_array_equal(kg.data[0], k.data.reshape(8, 3))

    def test_gradient_counts_multiplicity(self):
        k = tensor(np.ones((3, 2, 2)), "f64", requires_grad=True)
        idx = np.array([[0], [0], [2]])
        T._reset_tape()
        kg, _ = gather_kv(k, k.detach(), idx)
        backward(kg.sum())
        counts = k.grad[:, 0, 0]
        np.testing.assert_array_equal(counts, [2.0, 0.0, 1.0])


class TestBilevelRoutingAttention:
    @pytest.mark.parametrize("dtype,tol", [(np.float32, 1e-5), (np.float64, 1e-10)])
    def test_full_k_equals_dense_attention(self, dtype, tol):
        rng = np.random.default_rng(7)
        attn = BilevelRoutingAttention(8, heads=2, s=4, k=16, rng=rng, dtype=dtype)
        worst = 0.0
        for trial in range(5):
            x = rng.normal(size=(16, 16, 8)).astype(dtype)
            got = attn(tensor(x, "f32" if dtype == np.float32 else "f64")).data
            ref = dense_attention_ref(x.astype(np.float64), attn)
            worst = max(worst, np.abs(got - ref).max())
        assert worst <= tol

    def test_zero_values_zero_output(self):
        rng = np.random.default_rng(8)
        attn = BilevelRoutingAttention(4, heads=2, s=2, k=2, rng=rng, dtype=np.float64)
        attn.wv.weight.data[:] = 0.0
        attn.wo.bias.data[:] = 0.0
        attn.lce.bias.data[:] = 0.0
        x = tensor(rng.normal(size=(4, 4, 4)), "f64")
        np.testing.assert_allclose(attn(x).data, 0.0, atol=1e-14)

    def test_weights_sum_to_one_behaviorally(self):
        # constant values turn the attention average into an exact copy
        rng = np.random.default_rng(9)
        attn = BilevelRoutingAttention(4, heads=2, s=2, k=1, rng=rng, dtype=np.float64)
        attn.wv.weight.data[:] = 0.0
        attn.wv.bias.data[:] = np.arange(1.0, 5.0)
        attn.lce.weight.data[:] = 0.0
        attn.lce.bias.data[:] = 0.0
        attn.wo.weight.data[:] = np.eye(4)
        attn.wo.bias.data[:] = 0.0
        x = tensor(rng.normal(size=(8, 8, 4)), "f64")
        out = attn(x).data
        np.testing.assert_allclose(out, np.broadcast_to(np.arange(1.0, 5.0), out.shape),
                                   atol=1e-9)

    def test_heads_must_divide_channels(self):
        with pytest.raises(ConfigError):
            BilevelRoutingAttention(6, heads=4, s=2, k=1, rng=np.random.default_rng(10))

    def test_no_gradient_through_routing_index(self):
        """Replacing the affinity values (hence potential scores) by a
        constant shift leaves parameter gradients untouched as long as the
        selected indices stay fixed."""
        rng = np.random.default_rng(11)
        attn = BilevelRoutingAttention(4, heads=1, s=2, k=4, rng=rng, dtype=np.float64)
        x = tensor(rng.normal(size=(4, 4, 4)), "f64")

        def grads():
            for _, p in attn.parameters():
                p.zero_grad()
            T._reset_tape()
            backward((attn(x) * attn(x)).sum())
            return {n: p.grad.copy() for n, p in attn.parameters()}

        g1 = grads()
        g2 = grads()  # k = S^2: indices are the full set regardless of affinity
        for n in g1:
            np.testing.assert_array_equal(g1[n], g2[n])


class TestTransformerBlock:
    def test_zero_params_identity(self):
        rng = np.random.default_rng(12)
        blk = TransformerBlock(4, heads=2, s=2, k=4, expansion=2, rng=rng, dtype=np.float64)
        for _, p in blk.parameters():
            p.data[:] = 0.0
        x = tensor(rng.normal(size=(4, 4, 4)), "f64")
        np.testing.assert_allclose(blk(x).data, x.data, atol=1e-14)

    def test_shape_preserved(self):
        rng = np.random.default_rng(13)
        blk = TransformerBlock(8, heads=2, s=4, k=4, expansion=2, rng=rng, dtype=np.float64)
        x = tensor(rng.normal(size=(8, 8, 8)), "f64")
        assert blk(x).shape == (8, 8, 8)

    def test_block_gradient_matches_finite_difference(self):
        rng = np.random.default_rng(14)
        blk = TransformerBlock(8, heads=2, s=2, k=2, expansion=2, rng=rng, dtype=np.float64)
        x = tensor(rng.normal(size=(8, 8, 8)), "f64")

        def loss(_):
            y = blk(x)
            return (y * y).sum()

        for name in ("attn.wq.weight", "mlp.fc1.weight", "pos.weight", "norm1.gamma"):
            p = dict(blk.parameters())[name]
            coords = np.random.default_rng(15).choice(p.data.size, size=min(8, p.data.size),
                                                      replace=False)
            assert finite_diff_check(loss, p, eps=1e-5, coords=coords) <= 1e-4, name
