"""Attention, feed-forward and graph-convolution blocks built on :mod:`autodiff`."""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
import scipy.sparse as sp

from . import autodiff as ad
from .autodiff import Tensor
from .graph import Graph


def uniform_weight(rng, fan_in, fan_out, name):
    bound = 1.0 / math.sqrt(fan_in)
    return Tensor(rng.uniform(-bound, bound, size=(fan_in, fan_out)), requires_grad=True, name=name)


def zeros_param(shape, name):
    return Tensor(np.zeros(shape), requires_grad=True, name=name)


def ones_param(shape, name):
    return Tensor(np.ones(shape), requires_grad=True, name=name)


class DropoutStream:
    """Hands out one Generator per dropout site, keyed by (seed..., site counter).

    Rebuilding the stream with the same key reproduces every mask, which is
    how training stays bit-reproducible and how gradient checks freeze masks.
    """

    def __init__(self, *key, training=True):
        self.key = tuple(int(k) for k in key)
        self.training = training
        self.counter = 0

    def __call__(self, x, p):
        if not self.training or p == 0.0:
            return x
        rng = np.random.default_rng([*self.key, self.counter])
        self.counter += 1
        return ad.dropout(x, p, True, rng)


EVAL = DropoutStream(training=False)


class Linear:
    def __init__(self, rng, fan_in, fan_out, name, bias=True):
        self.weight = uniform_weight(rng, fan_in, fan_out, f"{name}.weight")
        self.bias = zeros_param((1, fan_out), f"{name}.bias") if bias else None

    def __call__(self, x):
        y = ad.matmul(x, self.weight)
        return ad.add(y, self.bias) if self.bias is not None else y

    def parameters(self):
        return [self.weight] + ([self.bias] if self.bias is not None else [])


class LayerNormParams:
    def __init__(self, width, name):
        self.gamma = ones_param((1, width), f"{name}.gamma")
        self.beta = zeros_param((1, width), f"{name}.beta")

    def __call__(self, x, eps=1e-5):
        return ad.layer_norm(x, self.gamma, self.beta, eps)

    def parameters(self):
        return [self.gamma, self.beta]


class AttentionBlock:
    """Multi-head scaled dot-product attention with residual + post-LayerNorm."""

    def __init__(self, rng, hidden, num_heads, name):
        if hidden % num_heads:
            raise ValueError(f"hidden {hidden} not divisible by {num_heads} heads")
        self.hidden = hidden
        self.num_heads = num_heads
        dh = hidden // num_heads
        self.wq = [uniform_weight(rng, hidden, dh, f"{name}.wq{i}") for i in range(num_heads)]
        self.wk = [uniform_weight(rng, hidden, dh, f"{name}.wk{i}") for i in range(num_heads)]
        self.wv = [uniform_weight(rng, hidden, dh, f"{name}.wv{i}") for i in range(num_heads)]
        self.wo = uniform_weight(rng, hidden, hidden, f"{name}.wo")
        self.norm = LayerNormParams(hidden, f"{name}.norm")

    @property
    def head_dim(self):
        return self.hidden // self.num_heads

    def parameters(self):
        return [*self.wq, *self.wk, *self.wv, self.wo, *self.norm.parameters()]


@dataclass
class AttentionCapture:
    scores: np.ndarray  # head-averaged, row-stochastic
    logits: np.ndarray  # head-averaged pre-softmax scores


def attention_forward(block: AttentionBlock, h_queries, h_keys, capture=False, drop=EVAL, p=0.0):
    """Return ``(H', capture_or_None)`` with H' = LN(Hq + concat_heads(...) W_O)."""
    if h_queries.shape[1] != block.hidden or h_keys.shape[1] != block.hidden:
        raise ad.ShapeError(f"attention expects width {block.hidden}")
    inv = 1.0 / math.sqrt(block.head_dim)
    outs, scores, logits = [], [], []
    for wq, wk, wv in zip(block.wq, block.wk, block.wv):
        q = ad.matmul(h_queries, wq)
        k = ad.matmul(h_keys, wk)
        v = ad.matmul(h_keys, wv)
        z = ad.scale(ad.matmul(q, k, transpose_b=True), inv)
        s = ad.row_softmax(z)
        outs.append(ad.matmul(s, v))
        if capture:
            scores.append(s.values)
            logits.append(z.values)
    mixed = outs[0] if len(outs) == 1 else ad.concat_cols(outs)
    out = block.norm(ad.add(h_queries, drop(ad.matmul(mixed, block.wo), p)))
    cap = None
    if capture:
        cap = AttentionCapture(np.mean(scores, axis=0), np.mean(logits, axis=0))
    return out, cap


class FfnBlock:
    def __init__(self, rng, hidden, name, expansion=4):
        self.lin1 = Linear(rng, hidden, expansion * hidden, f"{name}.lin1")
        self.lin2 = Linear(rng, expansion * hidden, hidden, f"{name}.lin2")
        self.norm = LayerNormParams(hidden, f"{name}.norm")

    def parameters(self):
        return [*self.lin1.parameters(), *self.lin2.parameters(), *self.norm.parameters()]


def ffn_forward(block: FfnBlock, h, drop=EVAL, p=0.0):
    """H' = LN(H + Lin2(relu(Lin1(H))))."""
    if h.shape[1] != block.lin1.weight.shape[0]:
        raise ad.ShapeError("ffn input width mismatch")
    return block.norm(ad.add(h, drop(block.lin2(ad.relu(block.lin1(h))), p)))


def normalized_adjacency(graph: Graph) -> sp.csr_matrix:
    """(A + I) scaled by 1/sqrt((d_u + 1)(d_v + 1)), symmetric by construction."""
    n = graph.num_nodes
    deg1 = graph.degrees().astype(float) + 1.0
    rows = np.concatenate([np.repeat(np.arange(n), graph.degrees()), np.arange(n)])
    cols = np.concatenate([graph.neighbors, np.arange(n)])
    vals = 1.0 / np.sqrt(deg1[rows] * deg1[cols])
    m = sp.csr_matrix((vals, (rows, cols)), shape=(n, n))
    m.sort_indices()
    return m


class GcnLayer:
    def __init__(self, rng, fan_in, fan_out, name):
        self.weight = uniform_weight(rng, fan_in, fan_out, f"{name}.weight")

    def parameters(self):
        return [self.weight]


def gcn_forward(layer: GcnLayer, adj_norm, h, activation=True, drop=EVAL, p=0.0):
    """act(Ã · dropout(H) · W); the last layer of a stack passes activation=False."""
    if adj_norm.shape[0] != h.shape[0]:
        raise ad.ShapeError(f"graph has {adj_norm.shape[0]} nodes, features have {h.shape[0]} rows")
    out = ad.spmm(adj_norm, ad.matmul(drop(h, p), layer.weight))
    return ad.relu(out) if activation else out
