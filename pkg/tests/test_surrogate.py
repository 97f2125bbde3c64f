"""The Cora pipeline on synthetic stand-ins of matching size and homophily.

These run without the Cora files and check the same directions the Cora
acceptance criteria check, at surrogate scale.
"""

import numpy as np
import pytest

from cobformer.analysis import AttnView, attn_k_profile
from cobformer.graph import edge_homophily, row_normalize
from cobformer.layers import normalized_adjacency
from cobformer.model import ModelConfig
from cobformer.partition import Partition, edge_cut, partition_multilevel, random_balanced_assignment, size_cap
from cobformer.synth import SynthSpec, generate_homophilic_graph, make_node_data
from cobformer.training import CORA_PARTS_GRID, TrainConfig, build_and_train


def bag_of_words(labels, num_classes, dim=1433, words=18, topical=0.3, seed=0):
    """Sparse binary rows: a binomial share of words from a 40-word class topic, the rest uniform."""
    rng = np.random.default_rng(seed)
    topics = [rng.choice(dim, 40, replace=False) for _ in range(num_classes)]
    x = np.zeros((len(labels), dim))
    for u, y in enumerate(labels):
        k = rng.binomial(words, topical)
        x[u, rng.choice(topics[y], k, replace=False)] = 1
        x[u, rng.choice(dim, words - k, replace=False)] = 1
    return x


def surrogate(n, classes, dim, seed, num_val=500, num_test=1000):
    graph, labels = generate_homophilic_graph(SynthSpec(n, classes, 0.81, 3.9, seed))
    data = make_node_data(labels, classes, bag_of_words(labels, classes, dim, seed=seed), 20, num_val, num_test)
    return graph, row_normalize(data), normalized_adjacency(graph)


@pytest.fixture(scope="module")
def cora_like():
    return surrogate(2708, 7, 1433, 0)


@pytest.fixture(scope="module")
def small():
    return surrogate(600, 4, 300, 1, num_val=100, num_test=200)


class TestCoraSizedGraph:
    def test_shape(self, cora_like):
        graph, data, _ = cora_like
        assert graph.num_nodes == 2708 and data.features.shape == (2708, 1433)
        assert abs(edge_homophily(graph, data.labels) - 0.81) < 0.03
        assert data.train_mask.sum() == 140 and data.val_mask.sum() == 500 and data.test_mask.sum() == 1000

    @pytest.mark.parametrize("p", CORA_PARTS_GRID)
    def test_partition_quality(self, cora_like, p):
        graph = cora_like[0]
        part = partition_multilevel(graph, p, seed=0)
        assert part.sizes.max() <= size_cap(graph.num_nodes, p, 0.1)
        rng = np.random.default_rng(p)
        rand = [edge_cut(graph, Partition(random_balanced_assignment(graph.num_nodes, p, rng), p)) for _ in range(10)]
        assert edge_cut(graph, part) <= 0.6 * np.mean(rand)


class TestCoTrainingDirection:
    def test_co_training_helps_transformer_head(self, cora_like):
        graph, data, adj = cora_like
        part = partition_multilevel(graph, 112, seed=0)
        tc = TrainConfig(max_epochs=150, patience=40)
        gcn = build_and_train(data, adj, None, ModelConfig(branches="gcn"), tc).best_record
        solo = build_and_train(data, adj, part, ModelConfig(alpha=1.0), tc).best_record
        co = build_and_train(data, adj, part, ModelConfig(alpha=0.8), tc).best_record
        assert gcn.test_mi_g >= 0.78
        assert co.test_mi_t - solo.test_mi_t >= 0.05
        assert co.test_mi_t >= gcn.test_mi_g and co.test_mi_g >= gcn.test_mi_g - 0.01


class TestAttentionLocality:
    def test_bga_more_local_than_vanilla(self, small):
        graph, data, adj = small
        part = partition_multilevel(graph, 24, seed=0)
        tc = TrainConfig(max_epochs=100, patience=30, num_parts=24)
        local = {}
        for attn in ("bga", "vanilla"):
            run = build_and_train(data, adj, part, ModelConfig(attention=attn), tc)
            run.model.load_state_dict(run.best_state)
            p = part if attn == "bga" else None
            cap = run.model.forward(data.features, adj, p, capture=True).captures[-1]
            prof = attn_k_profile(AttnView.from_capture(cap, p, dense=attn == "vanilla"), graph, 4)
            np.testing.assert_allclose(prof.per_node.sum(axis=1), 1.0, atol=1e-9, rtol=0)
            local[attn] = prof.local_mass(2)
        assert local["bga"] > local["vanilla"]
