"""Label-uniform random graphs with a prescribed edge homophily.

All randomness in the graph itself comes from a xoshiro256** stream seeded
through splitmix64, so the edge set is reproducible bit-for-bit from the seed
in any language that implements the same draws in the same order.
"""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass

import numpy as np

from .graph import Graph, NodeData, planetoid_split

MASK64 = (1 << 64) - 1


class GenerationError(RuntimeError):
    pass


def _rotl(x, k):
    return ((x << k) | (x >> (64 - k))) & MASK64


class Xoshiro256:
    """xoshiro256** with splitmix64 seeding."""

    def __init__(self, seed: int):
        sm = seed & MASK64
        state = []
        for _ in range(4):
            sm = (sm + 0x9E3779B97F4A7C15) & MASK64
            z = sm
            z = ((z ^ (z >> 30)) * 0xBF58476D1CE4E5B9) & MASK64
            z = ((z ^ (z >> 27)) * 0x94D049BB133111EB) & MASK64
            state.append(z ^ (z >> 31))
        self.s = state

    def next_u64(self) -> int:
        s0, s1, s2, s3 = self.s
        result = (_rotl((s1 * 5) & MASK64, 7) * 9) & MASK64
        t = (s1 << 17) & MASK64
        s2 ^= s0
        s3 ^= s1
        s1 ^= s2
        s0 ^= s3
        s2 ^= t
        s3 = _rotl(s3, 45)
        self.s = [s0, s1, s2, s3]
        return result

    def random(self) -> float:
        """Uniform double in [0, 1) from the top 53 bits."""
        return (self.next_u64() >> 11) * (1.0 / (1 << 53))

    def randbelow(self, n: int) -> int:
        """Unbiased integer in [0, n): reject draws >= the largest multiple of n."""
        if n <= 0:
            raise ValueError("n must be positive")
        limit = (1 << 64) - ((1 << 64) % n)
        while True:
            x = self.next_u64()
            if x < limit:
                return x % n


@dataclass(frozen=True)
class SynthSpec:
    num_nodes: int
    num_classes: int
    target_rho: float
    avg_degree: float
    seed: int

    def __post_init__(self):
        if self.num_classes < 2:
            raise ValueError("need at least two classes")
        if not 0.0 <= self.target_rho <= 1.0:
            raise ValueError("target_rho must lie in [0, 1]")
        if self.avg_degree <= 0:
            raise ValueError("avg_degree must be positive")
        if self.edge_budget < 1:
            raise ValueError("N * avg_degree / 2 must give at least one edge")

    @property
    def edge_budget(self) -> int:
        return int(math.floor(self.num_nodes * self.avg_degree / 2))

    def to_dict(self):
        return asdict(self)


def generate_homophilic_graph(spec: SynthSpec):
    """Draw labels then edges; returns ``(Graph, labels)``.

    Draw order: one ``randbelow(|Y|)`` per node for its label. Then per edge
    one ``random()`` decides the kind (same-label if below ``target_rho``).
    A same-label pair picks a class with probability proportional to its pair
    count via ``randbelow(total_same_pairs)``, then ``i = randbelow(n_c)`` and
    ``j = randbelow(n_c - 1)`` (shifted past ``i``). A different-label pair
    draws ``u, v = randbelow(N), randbelow(N)`` until the labels differ.
    Duplicate edges redraw a pair of the same kind.
    """
    rng = Xoshiro256(spec.seed)
    n, ny = spec.num_nodes, spec.num_classes
    labels = np.array([rng.randbelow(ny) for _ in range(n)], dtype=np.int64)
    members = [np.flatnonzero(labels == c).tolist() for c in range(ny)]
    pair_counts = [len(m) * (len(m) - 1) // 2 for m in members]
    cum = np.cumsum(pair_counts).tolist()
    same_total = cum[-1]
    diff_total = n * (n - 1) // 2 - same_total

    budget = spec.edge_budget
    if budget > same_total + diff_total:
        raise GenerationError(f"edge budget {budget} exceeds {same_total + diff_total} node pairs")
    if spec.target_rho == 1.0 and budget > same_total:
        raise GenerationError(f"edge budget {budget} exceeds {same_total} same-label pairs")
    if spec.target_rho == 0.0 and budget > diff_total:
        raise GenerationError(f"edge budget {budget} exceeds {diff_total} different-label pairs")

    edges: set[tuple[int, int]] = set()
    n_same = n_diff = 0
    while len(edges) < budget:
        if rng.random() < spec.target_rho:
            if n_same >= same_total:
                raise GenerationError("ran out of distinct same-label pairs")
            while True:
                t = rng.randbelow(same_total)
                c = next(i for i, x in enumerate(cum) if t < x)
                m = members[c]
                i = rng.randbelow(len(m))
                j = rng.randbelow(len(m) - 1)
                if j >= i:
                    j += 1
                e = (min(m[i], m[j]), max(m[i], m[j]))
                if e not in edges:
                    break
            n_same += 1
        else:
            if n_diff >= diff_total:
                raise GenerationError("ran out of distinct different-label pairs")
            while True:
                u, v = rng.randbelow(n), rng.randbelow(n)
                if labels[u] == labels[v]:
                    continue
                e = (min(u, v), max(u, v))
                if e not in edges:
                    break
            n_diff += 1
        edges.add(e)
    graph, _ = Graph.from_edges(n, sorted(edges))
    return graph, labels


def synthetic_features(labels, num_classes, dim=16, kind="random", noise=1.0, seed=0):
    """Smoke-test features: isotropic noise, or noisy one-hot class prototypes."""
    rng = np.random.default_rng(seed)
    n = len(labels)
    x = rng.normal(scale=noise, size=(n, dim))
    if kind == "class":
        protos = rng.normal(size=(num_classes, dim))
        x += protos[labels]
    elif kind != "random":
        raise ValueError(f"unknown feature kind {kind!r}")
    return x


def make_node_data(labels, num_classes, features, per_class=20, num_val=500, num_test=1000):
    n = len(labels)
    num_val = min(num_val, max(0, (n - per_class * num_classes) // 3))
    num_test = min(num_test, max(0, n - per_class * num_classes - num_val))
    train, val, test = planetoid_split(labels, num_classes, per_class, num_val, num_test)
    return NodeData(np.asarray(features, dtype=float), np.asarray(labels), num_classes, train, val, test)
