import math

import numpy as np
import pytest

from cobformer import autodiff as ad
from cobformer.autodiff import Tensor, grad_check
from cobformer.layers import (
    AttentionBlock,
    DropoutStream,
    FfnBlock,
    GcnLayer,
    attention_forward,
    ffn_forward,
    gcn_forward,
    normalized_adjacency,
)

from conftest import graph_of


def set_identity_norm(block):
    block.norm.gamma.values[...] = 1.0
    block.norm.beta.values[...] = 0.0


class TestAttention:
    def test_single_node_score_one(self, rng):
        blk = AttentionBlock(rng, 4, 1, "a")
        _, cap = attention_forward(blk, Tensor(rng.normal(size=(1, 4))), Tensor(rng.normal(size=(1, 4))), True)
        assert cap.scores.tolist() == [[1.0]]

    def test_rows_stochastic(self, rng):
        blk = AttentionBlock(rng, 8, 2, "a")
        h = Tensor(rng.normal(size=(7, 8)))
        _, cap = attention_forward(blk, h, h, True)
        assert np.abs(cap.scores.sum(1) - 1).max() < 1e-12

    def test_hand_computed_mixture(self):
        # h = 1: q = 2*x, k = x, v = x, so scores are softmax(2 x_u x_v)
        blk = AttentionBlock(np.random.default_rng(0), 1, 1, "a")
        blk.wq[0].values[...] = 2.0
        blk.wk[0].values[...] = 1.0
        blk.wv[0].values[...] = 1.0
        blk.wo.values[...] = 1.0
        x = np.array([[0.5], [-1.0], [2.0]])
        _, cap = attention_forward(blk, Tensor(x), Tensor(x), True)
        for u in range(3):
            z = np.array([2 * x[u, 0] * x[v, 0] for v in range(3)])
            e = np.exp(z - z.max())
            assert np.allclose(cap.scores[u], e / e.sum(), atol=1e-15)

    def test_output_is_normed_softmax_mixture(self):
        # queries and keys read only the first coordinate; values pass through
        blk = AttentionBlock(np.random.default_rng(0), 2, 1, "a")
        blk.wq[0].values[...] = [[1.0, 0.0], [0.0, 0.0]]
        blk.wk[0].values[...] = [[1.0, 0.0], [0.0, 0.0]]
        blk.wv[0].values[...] = np.eye(2)
        blk.wo.values[...] = np.eye(2)
        x = np.array([[0.5, 1.0], [-1.0, 0.0], [2.0, -0.5]])
        out, _ = attention_forward(blk, Tensor(x), Tensor(x))
        z = np.outer(x[:, 0], x[:, 0]) / math.sqrt(2)
        s = np.exp(z) / np.exp(z).sum(1, keepdims=True)
        pre = x + s @ x
        ref = (pre - pre.mean(1, keepdims=True)) / np.sqrt(pre.var(1, keepdims=True) + 1e-5)
        assert np.allclose(out.values, ref, atol=1e-12)

    def test_dominant_key(self, rng):
        blk = AttentionBlock(rng, 2, 1, "a")
        blk.wq[0].values[...] = np.eye(2)
        blk.wk[0].values[...] = np.eye(2)
        h = Tensor([[30.0, 0.0], [0.0, 1.0], [0.1, 0.1]])
        _, cap = attention_forward(blk, h, h, True)
        assert cap.scores[0, 0] > 1 - 1e-12

    def test_width_mismatch(self, rng):
        blk = AttentionBlock(rng, 4, 1, "a")
        with pytest.raises(ad.ShapeError):
            attention_forward(blk, Tensor(np.ones((2, 3))), Tensor(np.ones((2, 3))))

    def test_heads_must_divide(self, rng):
        with pytest.raises(ValueError):
            AttentionBlock(rng, 5, 2, "a")

    def test_one_head_equals_two_replicated_heads(self, rng):
        h = Tensor(rng.normal(size=(5, 4)))
        a = rng.normal(size=(4, 1))
        b = rng.normal(size=(4, 1))
        v = rng.normal(size=(4, 4))
        wo = rng.normal(size=(4, 4))
        # one head of width 4: (4 * 0.5 * (a.h)(b.h)) / sqrt(4) = (a.h)(b.h)
        one = AttentionBlock(rng, 4, 1, "one")
        one.wq[0].values[...] = np.repeat(a, 4, axis=1)
        one.wk[0].values[...] = np.repeat(b, 4, axis=1) * 0.5
        one.wv[0].values[...] = v
        one.wo.values[...] = wo
        # two heads of width 2: (2 * (a.h)(b.h) / sqrt2) / sqrt(2) = (a.h)(b.h)
        two = AttentionBlock(rng, 4, 2, "two")
        for i in range(2):
            two.wq[i].values[...] = np.repeat(a, 2, axis=1) / math.sqrt(2)
            two.wk[i].values[...] = np.repeat(b, 2, axis=1)
            two.wv[i].values[...] = v[:, 2 * i : 2 * i + 2]
        two.wo.values[...] = wo
        o1, c1 = attention_forward(one, h, h, True)
        o2, c2 = attention_forward(two, h, h, True)
        assert np.allclose(c1.scores, c2.scores, atol=1e-12)
        assert np.allclose(o1.values, o2.values, atol=1e-12)


class TestFfn:
    def test_zero_weights_is_layer_norm(self, rng):
        blk = FfnBlock(rng, 4, "f")
        for p in (blk.lin1.weight, blk.lin2.weight):
            p.values[...] = 0.0
        h = rng.normal(size=(3, 4))
        out = ffn_forward(blk, Tensor(h)).values
        ref = (h - h.mean(1, keepdims=True)) / np.sqrt(h.var(1, keepdims=True) + 1e-5)
        assert np.allclose(out, ref, atol=1e-12)

    def test_shape_preserved(self, rng):
        blk = FfnBlock(rng, 6, "f")
        assert ffn_forward(blk, Tensor(rng.normal(size=(9, 6)))).shape == (9, 6)

    def test_gradient(self, rng):
        blk = FfnBlock(rng, 4, "f")
        h = Tensor(rng.normal(size=(5, 4)), requires_grad=True, name="h")
        w = Tensor(rng.normal(size=(5, 4)))
        with ad.relu_margin() as m:
            ffn_forward(blk, h)
        assert m.value > 1e-3
        err = grad_check(lambda: ad.sum_all(ad.mul(ffn_forward(blk, h), w)), [h, *blk.parameters()])
        assert err < 1e-6


class TestGcn:
    def test_isolated_node(self):
        a = normalized_adjacency(graph_of(1, []))
        assert a.toarray().tolist() == [[1.0]]

    def test_two_nodes(self):
        a = normalized_adjacency(graph_of(2, [(0, 1)])).toarray()
        assert a.tolist() == [[0.5, 0.5], [0.5, 0.5]]

    def test_symmetric_exactly(self, rng):
        g = graph_of(30, rng.integers(0, 30, size=(60, 2)))
        a = normalized_adjacency(g)
        assert abs(a - a.T).max() == 0.0

    def test_star_identity_weights(self):
        # center 0 joined to 1, 2, 3
        g = graph_of(4, [(0, 1), (0, 2), (0, 3)])
        layer = GcnLayer(np.random.default_rng(0), 2, 2, "g")
        layer.weight.values[...] = np.eye(2)
        h = np.array([[1.0, 0.0], [0.0, 2.0], [3.0, 0.0], [0.0, 4.0]])
        out = gcn_forward(layer, normalized_adjacency(g), Tensor(h), activation=False).values
        c = 1 / math.sqrt(4 * 2)
        assert np.allclose(out[0], h[0] / 4 + c * (h[1] + h[2] + h[3]))
        assert np.allclose(out[1], h[1] / 2 + c * h[0])

    def test_row_mismatch(self, rng):
        layer = GcnLayer(rng, 2, 2, "g")
        with pytest.raises(ad.ShapeError):
            gcn_forward(layer, normalized_adjacency(graph_of(3, [])), Tensor(np.ones((2, 2))))


class TestDropoutStream:
    def test_same_key_same_masks(self):
        x = Tensor(np.ones((20, 20)))
        a = DropoutStream(1, 2)(x, 0.5).values
        b = DropoutStream(1, 2)(x, 0.5).values
        c = DropoutStream(1, 3)(x, 0.5).values
        assert np.array_equal(a, b) and not np.array_equal(a, c)

    def test_eval_passthrough(self):
        x = Tensor(np.ones((2, 2)))
        assert DropoutStream(0, training=False)(x, 0.5) is x
