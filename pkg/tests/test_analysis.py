import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from cobformer.analysis import (
    AttnView,
    attention_cost,
    attn_k_profile,
    attn_snr,
    cu_reachable,
    denoise_attention,
    empirical_cuk,
    scale_same_label,
    smoothness_frobenius,
    snr_from_masses,
    theoretical_cuk,
    theoretical_cuk_closed,
    label_mass_identity,
)
from cobformer.partition import Partition

from conftest import graph_of


def softmax(z):
    e = np.exp(z - z.max(1, keepdims=True))
    return e / e.sum(1, keepdims=True)


def random_stochastic(rng, n):
    return softmax(rng.normal(size=(n, n)) * 2)


class TestAttnView:
    def test_rows_must_sum_to_one(self):
        with pytest.raises(ValueError):
            AttnView(matrix=np.ones((2, 2)))

    def test_block_shape_checked(self):
        part = Partition(np.array([0, 0, 1]), 2)
        with pytest.raises(ValueError):
            AttnView(intra=[np.eye(1), np.eye(1)], inter=np.eye(2), partition=part)

    def test_expansions_row_stochastic(self, rng):
        part = Partition(np.array([0, 1, 1, 2, 2, 2]), 3)
        view = AttnView(intra=[random_stochastic(rng, len(m)) for m in part.members],
                        inter=random_stochastic(rng, 3), partition=part)
        for mode in ("intra", "inter", "mixed"):
            assert np.allclose(view.expanded(mode).sum(1), 1.0, atol=1e-12)


class TestCuk:
    def test_triangle_same_label(self):
        g = graph_of(3, [(0, 1), (1, 2), (0, 2)])
        assert empirical_cuk(g, [0, 0, 0], 1).mean[1] == 1.0

    def test_path_aba(self):
        g = graph_of(3, [(0, 1), (1, 2)])
        prof = empirical_cuk(g, [0, 1, 0], 2, per_node=True)
        assert prof.per_node[0, 1] == 0.0
        assert prof.per_node[0, 2] == 1.0
        assert prof.mean[0] == 1.0

    def test_empty_rings_excluded(self):
        g = graph_of(3, [(0, 1), (1, 2)])
        prof = empirical_cuk(g, [0, 1, 0], 3)
        assert prof.counts[3] == 0 and np.isnan(prof.mean[3])
        # only the two end nodes have 2-hop rings
        assert prof.counts[2] == 2

    def test_fully_homophilic_component(self, rng):
        g = graph_of(12, [(i, i + 1) for i in range(11)])
        prof = empirical_cuk(g, np.zeros(12, int), 5)
        assert np.all(prof.mean == 1.0)


class TestTheory:
    def test_base_cases(self):
        assert theoretical_cuk(0.37, 4, 0) == 1.0
        assert theoretical_cuk(0.37, 4, 1) == pytest.approx(0.37, abs=1e-15)

    def test_two_steps(self):
        assert theoretical_cuk(0.3, 2, 2) == pytest.approx(0.58, abs=1e-15)

    def test_limit(self):
        # r = 0.8 here, so the gap to 1/|Y| after k steps is 0.5 * 0.8**k
        assert theoretical_cuk(0.9, 2, 50) == pytest.approx(0.5 + 0.5 * 0.8**50, abs=1e-15)
        assert abs(theoretical_cuk(0.9, 2, 100) - 0.5) < 1e-9

    @settings(max_examples=60, deadline=None)
    @given(st.floats(0, 1), st.integers(2, 8), st.integers(0, 60))
    def test_closed_form_matches(self, rho, ny, k):
        assert abs(theoretical_cuk(rho, ny, k) - theoretical_cuk_closed(rho, ny, k)) < 1e-12

    def test_invalid(self):
        with pytest.raises(ValueError):
            theoretical_cuk(1.1, 2, 1)
        with pytest.raises(ValueError):
            theoretical_cuk(0.5, 1, 1)


class TestAttnK:
    def test_identity(self, path_graph):
        prof = attn_k_profile(np.eye(4), path_graph, 3)
        assert prof.bins.tolist() == [1.0, 0.0, 0.0, 0.0]
        assert prof.overflow == 0.0

    def test_uniform_on_path(self, path_graph):
        prof = attn_k_profile(np.full((4, 4), 0.25), path_graph, 3)
        assert prof.per_node[0].tolist() == [0.25, 0.25, 0.25, 0.25, 0.0]
        assert np.allclose(prof.per_node.sum(1), 1.0)

    def test_overflow_catches_far_and_unreachable(self):
        g = graph_of(4, [(0, 1), (1, 2)])
        prof = attn_k_profile(np.full((4, 4), 0.25), g, 1)
        # node 0: itself, 1 at hop 1, 2 beyond kmax, 3 unreachable
        assert prof.per_node[0].tolist() == [0.25, 0.25, 0.5]

    @settings(max_examples=15, deadline=None)
    @given(st.integers(2, 30), st.integers(0, 6), st.integers(0, 1000))
    def test_conservation(self, n, kmax, seed):
        rng = np.random.default_rng(seed)
        g = graph_of(n, rng.integers(0, n, size=(n, 2)))
        prof = attn_k_profile(random_stochastic(rng, n), g, kmax)
        assert np.abs(prof.per_node.sum(1) - 1.0).max() < 1e-9

    def test_bga_mode_uses_block_and_expanded_inter(self):
        g = graph_of(4, [(0, 1), (1, 2), (2, 3)])
        part = Partition(np.array([0, 0, 1, 1]), 2)
        view = AttnView(intra=[np.eye(2), np.eye(2)], inter=np.array([[0.0, 1.0], [1.0, 0.0]]), partition=part)
        assert attn_k_profile(view, g, 3, mode="intra").bins[0] == 1.0
        inter = attn_k_profile(view, g, 3, mode="inter")
        # node 0 sends 1/2 to node 2 (hop 2) and 1/2 to node 3 (hop 3)
        assert inter.per_node[0].tolist() == [0.0, 0.0, 0.5, 0.5, 0.0]
        mixed = attn_k_profile(view, g, 3)
        assert mixed.per_node[0].tolist() == [0.5, 0.0, 0.25, 0.25, 0.0]


class TestSnr:
    def test_equal_masses(self):
        assert snr_from_masses(0.5, 0.5).snr_db == 0.0

    def test_nine_to_one(self):
        assert snr_from_masses(0.9, 0.1).snr_db == pytest.approx(10 * math.log10(9), abs=1e-12)

    def test_sentinels(self):
        assert snr_from_masses(1.0, 0.0).snr_db == math.inf
        assert snr_from_masses(0.0, 1.0).snr_db == -math.inf
        assert snr_from_masses(1.0, 0.0).flag == "zero-diff"

    @settings(max_examples=30, deadline=None)
    @given(st.integers(3, 20), st.integers(0, 10_000))
    def test_doubling_adds_3db(self, n, seed):
        rng = np.random.default_rng(seed)
        labels = np.arange(n) % 2
        a = random_stochastic(rng, n)
        base = attn_snr(a, labels)
        doubled = scale_same_label([a], [labels], 2.0)[0]
        eq = labels[:, None] == labels[None, :]
        shifted = snr_from_masses(doubled[eq].sum(), doubled[~eq].sum())
        assert abs(shifted.snr_db - base.snr_db - 10 * math.log10(2)) < 1e-9

    def test_bga_uses_intra_blocks(self):
        part = Partition(np.array([0, 0, 1, 1]), 2)
        labels = np.array([0, 1, 0, 0])
        view = AttnView(intra=[np.full((2, 2), 0.5), np.full((2, 2), 0.5)], inter=np.full((2, 2), 0.5),
                        partition=part)
        rep = attn_snr(view, labels)
        assert rep.same_label_mass == 3.0 and rep.diff_label_mass == 1.0


class TestDenoise:
    def test_factor_one_unchanged(self, rng):
        z = rng.normal(size=(5, 5))
        view = AttnView(matrix=softmax(z), logits=z)
        out = denoise_attention(view, np.array([0, 1, 0, 1, 1]), 1.0)
        assert np.allclose(out.matrix, view.matrix, atol=1e-15)

    def test_small_case(self):
        # node 0 attends uniformly to itself, a same-label peer and a different-label node
        z = np.zeros((3, 3))
        view = AttnView(matrix=softmax(z), logits=z)
        labels = np.array([0, 0, 1])
        out = denoise_attention(view, labels, 2.0)
        assert np.allclose(out.matrix[0], [0.4, 0.4, 0.2])
        assert attn_snr(out, labels).snr_db > attn_snr(view, labels).snr_db

    @settings(max_examples=30, deadline=None)
    @given(st.floats(1.0001, 50), st.integers(0, 10_000))
    def test_never_decreases_snr(self, factor, seed):
        rng = np.random.default_rng(seed)
        n = 8
        z = rng.normal(size=(n, n)) * 3
        labels = rng.integers(0, 3, size=n)
        labels[:2] = [0, 1]
        view = AttnView(matrix=softmax(z), logits=z)
        assert attn_snr(denoise_attention(view, labels, factor), labels).snr_db >= attn_snr(view, labels).snr_db

    def test_needs_logits(self):
        with pytest.raises(ValueError):
            denoise_attention(AttnView(matrix=np.eye(2)), np.array([0, 1]), 2.0)


class TestSmoothness:
    def test_identity_zero(self, rng):
        assert smoothness_frobenius(rng.normal(size=(4, 3)), np.eye(4)) == 0.0

    def test_identical_rows_zero(self, rng):
        z = np.tile(rng.normal(size=(1, 3)), (6, 1))
        assert smoothness_frobenius(z, random_stochastic(rng, 6)) < 1e-12

    def test_hand_value(self):
        z = np.array([[0.0], [1.0]])
        assert smoothness_frobenius(z, np.full((2, 2), 0.5)) == pytest.approx(math.sqrt(0.5), abs=1e-15)


class TestCuReachable:
    def test_k0(self, path_graph):
        assert cu_reachable(path_graph, [0, 1, 0, 1], 0).tolist() == [1.0] * 4

    def test_path_aba(self):
        g = graph_of(3, [(0, 1), (1, 2)])
        assert cu_reachable(g, [0, 1, 0], 2)[0] == pytest.approx(2 / 3)

    def test_complete_same_label(self):
        g = graph_of(4, [(i, j) for i in range(4) for j in range(i + 1, 4)])
        assert cu_reachable(g, [1, 1, 1, 1], 1).tolist() == [1.0] * 4

    def test_infinite_k_is_component(self):
        g = graph_of(5, [(0, 1), (1, 2), (3, 4)])
        cu = cu_reachable(g, [0, 1, 1, 0, 0], None)
        assert cu[0] == pytest.approx(1 / 3) and cu[3] == 1.0


class TestLabelMassIdentity:
    def test_all_same_label_degenerate(self, rng):
        rep = label_mass_identity(rng.normal(size=(4, 2)), rng.normal(size=(4, 2)), np.zeros(4, int))
        assert rep.degenerate.all()
        assert np.all(rep.lhs == 0.0)
        assert rep.max_gap == 0.0

    def test_three_node_hand_case(self):
        q = np.array([1.0, 2.0, -1.0])
        k = np.array([0.5, -1.0, 2.0])
        labels = np.array([0, 0, 1])
        rep = label_mass_identity(q, k, labels)
        e = np.exp(np.outer(q, k))
        lhs0 = e[0, 2] / e[0].sum()
        eta0, gamma0, c0 = (e[0, 0] + e[0, 1]) / 2, e[0, 2], 2 / 3
        assert rep.lhs[0] == pytest.approx(lhs0, abs=1e-15)
        assert rep.rhs[0] == pytest.approx(1 / (1 + (c0 / (1 - c0)) * (eta0 / gamma0)), abs=1e-15)
        assert rep.max_gap < 1e-15

    @settings(max_examples=20, deadline=None)
    @given(st.sampled_from([10, 50]), st.sampled_from([2, 3]), st.integers(0, 10_000))
    def test_identity_random(self, n, ny, seed):
        rng = np.random.default_rng(seed)
        rep = label_mass_identity(rng.normal(size=(n, 4)), rng.normal(size=(n, 4)), rng.integers(0, ny, size=n))
        assert rep.max_gap < 1e-10


class TestCost:
    def test_p1(self):
        assert attention_cost(Partition(np.zeros(7, int), 1)) == 50

    def test_two_pairs(self):
        assert attention_cost(Partition(np.array([0, 0, 1, 1]), 2)) == 12

    def test_optimal_p_bound(self):
        n = 10_000
        p = math.ceil(n ** (2 / 3))
        a = np.arange(n) % p
        assert attention_cost(Partition(a, p)) <= 3 * n ** (4 / 3)
