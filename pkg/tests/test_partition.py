import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from cobformer.partition import (
    Partition,
    PartitionConfigError,
    edge_cut,
    partition_multilevel,
    random_balanced_assignment,
    size_cap,
)
from cobformer.synth import SynthSpec, generate_homophilic_graph

from conftest import graph_of


def grid(side):
    edges = []
    for r in range(side):
        for c in range(side):
            u = r * side + c
            if c + 1 < side:
                edges.append((u, u + 1))
            if r + 1 < side:
                edges.append((u, u + side))
    return graph_of(side * side, edges)


class TestPartitionType:
    def test_members_and_sizes(self):
        p = Partition(np.array([1, 0, 1, 2]), 3)
        assert [m.tolist() for m in p.members] == [[1], [0, 2], [3]]
        assert p.sizes.tolist() == [1, 2, 1]

    def test_empty_cluster_rejected(self):
        with pytest.raises(PartitionConfigError, match="empty"):
            Partition(np.array([0, 0, 2]), 3).check()

    def test_cap_rejected(self):
        with pytest.raises(PartitionConfigError, match="cap"):
            Partition(np.array([0, 0, 0, 1]), 2, epsilon=0.0).check()

    def test_size_cap(self):
        assert size_cap(100, 10, 0.1) == 11
        assert size_cap(2708, 112, 0.1) == 27


class TestEdgeCut:
    def test_hand_count(self, path_graph):
        assert edge_cut(path_graph, [0, 0, 1, 1]) == 1
        assert edge_cut(path_graph, [0, 1, 0, 1]) == 3

    def test_random_balanced_sizes(self, rng):
        a = random_balanced_assignment(103, 10, rng)
        sizes = np.bincount(a)
        assert sizes.max() - sizes.min() <= 1


class TestMultilevel:
    def test_grid_bisection_optimal(self):
        g = grid(20)
        p = partition_multilevel(g, 2, seed=0)
        assert edge_cut(g, p) == 20

    def test_p_equals_one(self, path_graph):
        p = partition_multilevel(path_graph, 1)
        assert p.assignment.tolist() == [0, 0, 0, 0]

    def test_p_equals_n(self, path_graph):
        p = partition_multilevel(path_graph, 4)
        assert sorted(p.assignment.tolist()) == [0, 1, 2, 3]

    def test_invalid_p(self, path_graph):
        with pytest.raises(PartitionConfigError):
            partition_multilevel(path_graph, 5)
        with pytest.raises(PartitionConfigError):
            partition_multilevel(path_graph, 0)

    def test_disconnected_graph(self):
        g = graph_of(40, [(i, i + 1) for i in range(0, 38, 2)])
        p = partition_multilevel(g, 5, seed=1)
        p.check()

    def test_deterministic(self):
        g, _ = generate_homophilic_graph(SynthSpec(500, 3, 0.8, 4, 0))
        assert partition_multilevel(g, 16, seed=3) == partition_multilevel(g, 16, seed=3)

    def test_beats_random(self, rng):
        g, _ = generate_homophilic_graph(SynthSpec(1000, 4, 0.8, 4, 2))
        cut = edge_cut(g, partition_multilevel(g, 32, seed=0))
        rand = np.mean([edge_cut(g, random_balanced_assignment(1000, 32, rng)) for _ in range(10)])
        assert cut < 0.6 * rand

    def test_refinement_never_worsens_balanced_cut(self):
        g, _ = generate_homophilic_graph(SynthSpec(600, 3, 0.7, 4, 5))
        trace = []
        partition_multilevel(g, 12, seed=0, trace=trace)
        assert trace
        for _, before, after, balanced_after, balanced_before in trace:
            if balanced_before:
                assert after <= before and balanced_after

    @settings(max_examples=20, deadline=None)
    @given(st.integers(5, 150), st.integers(1, 12), st.integers(0, 1000))
    def test_always_valid(self, n, p, seed):
        p = min(p, n)
        rng = np.random.default_rng(seed)
        edges = rng.integers(0, n, size=(2 * n, 2))
        g = graph_of(n, edges)
        part = partition_multilevel(g, p, seed=seed)
        part.check(n)
