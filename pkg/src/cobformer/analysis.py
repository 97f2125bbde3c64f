"""Diagnostics for attention locality and label agreement.

Homophily profiles by hop, attention mass by hop, the attention
signal-to-noise ratio, a label-oracle denoising intervention, embedding
smoothness, the per-node softmax identity relating different-label attention
mass to label agreement, and score-entry cost counting.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .graph import Graph, hop_distances
from .partition import Partition

ROW_TOL = 1e-9


@dataclass
class AttnView:
    """Head-averaged attention of one layer, dense or bi-level.

    Dense views hold an N x N row-stochastic ``matrix``. Bi-level views hold
    the per-cluster ``intra`` blocks, the P x P ``inter`` matrix and the
    ``partition`` that places each block. ``logits`` (pre-softmax scores,
    same layout as the scores) are optional and only needed for denoising.
    """

    matrix: np.ndarray | None = None
    intra: list | None = None
    inter: np.ndarray | None = None
    partition: Partition | None = None
    logits: object = None
    layer: int = 0

    def __post_init__(self):
        if self.matrix is None and (self.intra is None or self.partition is None):
            raise ValueError("need a dense matrix or intra blocks plus a partition")
        if self.matrix is not None:
            m = np.asarray(self.matrix, dtype=float)
            if m.ndim != 2 or m.shape[0] != m.shape[1]:
                raise ValueError("dense view must be square")
            self.matrix = m
        else:
            if len(self.intra) != self.partition.num_parts:
                raise ValueError("one intra block per cluster expected")
            for blk, mem in zip(self.intra, self.partition.members):
                if np.shape(blk) != (len(mem), len(mem)):
                    raise ValueError("intra block shape disagrees with cluster size")
            if self.inter is None:
                self.inter = np.ones((1, 1)) if self.partition.num_parts == 1 else None
            if self.inter is None or np.shape(self.inter) != (self.partition.num_parts,) * 2:
                raise ValueError("inter matrix must be P x P")
        for rows in self._stochastic_parts():
            if not np.allclose(np.sum(rows, axis=1), 1.0, atol=ROW_TOL, rtol=0):
                raise ValueError("attention rows must sum to 1")

    def _stochastic_parts(self):
        if self.is_dense:
            return [self.matrix]
        return [*self.intra, self.inter]

    @property
    def is_dense(self) -> bool:
        return self.matrix is not None

    @property
    def num_nodes(self) -> int:
        return self.matrix.shape[0] if self.is_dense else self.partition.num_nodes

    @classmethod
    def from_capture(cls, capture, partition: Partition | None = None, dense=False):
        """Build from a model capture; ``dense=True`` for the vanilla path."""
        if dense:
            return cls(matrix=capture.intra[0], logits=capture.intra_logits[0], layer=capture.layer)
        return cls(intra=list(capture.intra), inter=capture.inter, partition=partition,
                   logits=list(capture.intra_logits), layer=capture.layer)

    def intra_dense(self) -> np.ndarray:
        """Block-diagonal N x N matrix of the intra scores (zeros off-block)."""
        n = self.num_nodes
        out = np.zeros((n, n))
        for blk, mem in zip(self.intra, self.partition.members):
            out[np.ix_(mem, mem)] = blk
        return out

    def inter_dense(self) -> np.ndarray:
        """Cluster scores spread over nodes: entry (u, v) = inter[p(u), q(v)] / |V_q|."""
        a = self.partition.assignment
        sizes = self.partition.sizes.astype(float)
        return self.inter[a][:, a] / sizes[a][None, :]

    def expanded(self, mode="mixed") -> np.ndarray:
        """Node-level N x N row-stochastic matrix.

        Dense views return their matrix. Bi-level views return ``"intra"``,
        ``"inter"``, or ``"mixed"`` (the average of both, giving each node's
        local and cluster-level routes equal weight).
        """
        if self.is_dense:
            return self.matrix
        if mode == "intra":
            return self.intra_dense()
        if mode == "inter":
            return self.inter_dense()
        if mode == "mixed":
            return 0.5 * (self.intra_dense() + self.inter_dense())
        raise ValueError(f"unknown expansion mode {mode!r}")


# ---------------------------------------------------------------------------
# homophily by hop


@dataclass
class CukProfile:
    mean: np.ndarray  # (kmax + 1,), NaN where no node has a k-hop ring
    counts: np.ndarray  # nodes contributing at each k
    kmax: int
    per_node: np.ndarray | None = None  # (N, kmax + 1), NaN for empty rings


def _ring_counts(graph: Graph, labels, kmax):
    """Per-node ring sizes and same-label ring counts for k = 0..kmax."""
    labels = np.asarray(labels)
    n = graph.num_nodes
    total = np.zeros((n, kmax + 1), dtype=np.int64)
    same = np.zeros((n, kmax + 1), dtype=np.int64)
    for src, dist in hop_distances(graph, kmax):
        d = dist.astype(np.int64)
        eq = labels[None, :] == labels[src][:, None]
        for k in range(kmax + 1):
            ring = d == k
            total[src, k] = ring.sum(axis=1)
            same[src, k] = (ring & eq).sum(axis=1)
    return total, same


def empirical_cuk(graph: Graph, labels, kmax: int, per_node=False) -> CukProfile:
    """Node-averaged same-label fraction of each exact k-hop ring.

    Nodes whose ring at hop k is empty are left out of the average at k.
    """
    if kmax < 0:
        raise ValueError("kmax must be >= 0")
    total, same = _ring_counts(graph, labels, kmax)
    with np.errstate(invalid="ignore", divide="ignore"):
        frac = np.where(total > 0, same / np.maximum(total, 1), np.nan)
    counts = (total > 0).sum(axis=0)
    mean = np.array([np.nanmean(frac[:, k]) if counts[k] else np.nan for k in range(kmax + 1)])
    return CukProfile(mean, counts, kmax, frac if per_node else None)


def theoretical_cuk(rho, num_classes, k) -> float:
    """Expected k-hop label agreement by iterating the one-step recursion."""
    _check_theory_args(rho, num_classes, k)
    c = 1.0
    for _ in range(k):
        c = (1.0 + num_classes * rho * c - rho - c) / (num_classes - 1)
    return c


def theoretical_cuk_closed(rho, num_classes, k) -> float:
    """Closed form 1/|Y| + (1 - 1/|Y|) r^k with r = (|Y| rho - 1)/(|Y| - 1)."""
    _check_theory_args(rho, num_classes, k)
    r = (num_classes * rho - 1.0) / (num_classes - 1.0)
    return 1.0 / num_classes + (1.0 - 1.0 / num_classes) * r**k


def _check_theory_args(rho, num_classes, k):
    if not 0.0 <= rho <= 1.0:
        raise ValueError("rho must lie in [0, 1]")
    if num_classes < 2:
        raise ValueError("num_classes must be >= 2")
    if k < 0:
        raise ValueError("k must be >= 0")


def cu_reachable(graph: Graph, labels, K=None) -> np.ndarray:
    """Per-node same-label fraction over every node within K hops (u included).

    ``K=None`` means the whole connected component.
    """
    labels = np.asarray(labels)
    n = graph.num_nodes
    if K is not None and K < 0:
        raise ValueError("K must be >= 0")
    kmax = max(n - 1, 0) if K is None else K
    kmax = min(kmax, np.iinfo(np.int16).max)
    out = np.zeros(n)
    for src, dist in hop_distances(graph, kmax):
        reach = dist >= 0
        eq = labels[None, :] == labels[src][:, None]
        out[src] = (reach & eq).sum(axis=1) / reach.sum(axis=1)
    return out


# ---------------------------------------------------------------------------
# attention by hop


@dataclass
class AttnKProfile:
    bins: np.ndarray  # (kmax + 1,) node-averaged mass at exact hop k
    overflow: float  # mass beyond kmax or unreachable
    per_node: np.ndarray  # (N, kmax + 2); last column is the overflow bucket
    kmax: int

    def local_mass(self, k) -> float:
        """Average mass within k hops (inclusive)."""
        return float(self.bins[: k + 1].sum())


def attn_k_profile(view: AttnView | np.ndarray, graph: Graph, kmax: int, mode="mixed") -> AttnKProfile:
    """Split each node's attention row by hop distance to the attended node."""
    if kmax < 0:
        raise ValueError("kmax must be >= 0")
    a = view.expanded(mode) if isinstance(view, AttnView) else np.asarray(view, dtype=float)
    n = graph.num_nodes
    if a.shape != (n, n):
        raise ValueError(f"attention is {a.shape}, graph has {n} nodes")
    per = np.zeros((n, kmax + 2))
    for src, dist in hop_distances(graph, kmax):
        rows = a[src]
        for k in range(kmax + 1):
            per[src, k] = np.where(dist == k, rows, 0.0).sum(axis=1)
        per[src, kmax + 1] = np.where(dist < 0, rows, 0.0).sum(axis=1)
    means = per.mean(axis=0)
    return AttnKProfile(means[: kmax + 1], float(means[kmax + 1]), per, kmax)


# ---------------------------------------------------------------------------
# signal-to-noise


@dataclass
class AttnSnrReport:
    same_label_mass: float
    diff_label_mass: float
    snr_db: float
    flag: str = ""  # "zero-diff" -> +inf sentinel, "zero-same" -> -inf sentinel


def snr_from_masses(same, diff) -> AttnSnrReport:
    if same < 0 or diff < 0:
        raise ValueError("masses must be non-negative")
    if diff == 0:
        return AttnSnrReport(same, diff, math.inf, "zero-diff")
    if same == 0:
        return AttnSnrReport(same, diff, -math.inf, "zero-same")
    return AttnSnrReport(same, diff, 10.0 * math.log10(same / diff))


def _label_masses(blocks, label_blocks):
    s = d = 0.0
    for blk, lab in zip(blocks, label_blocks):
        eq = lab[:, None] == lab[None, :]
        s += float(np.sum(blk[eq]))
        d += float(np.sum(blk[~eq]))
    return s, d


def _blocks(view: AttnView, labels, logits=False):
    labels = np.asarray(labels)
    if view.is_dense:
        return [view.logits if logits else view.matrix], [labels]
    src = view.logits if logits else view.intra
    return list(src), [labels[m] for m in view.partition.members]


def attn_snr(view: AttnView | np.ndarray, labels) -> AttnSnrReport:
    """10 lg(same-label mass / different-label mass); bi-level views use intra blocks."""
    if not isinstance(view, AttnView):
        view = AttnView(matrix=view)
    blocks, labs = _blocks(view, labels)
    return snr_from_masses(*_label_masses(blocks, labs))


def scale_same_label(blocks, labels_per_block, factor):
    """Unnormalized copy with every same-label score multiplied by ``factor``."""
    out = []
    for blk, lab in zip(blocks, labels_per_block):
        eq = lab[:, None] == lab[None, :]
        out.append(np.where(eq, blk * factor, blk))
    return out


def _denoise_block(logit, lab, factor):
    z = np.asarray(logit, dtype=float)
    e = np.exp(z - z.max(axis=1, keepdims=True))
    e = np.where(lab[:, None] == lab[None, :], e * factor, e)
    return e / e.sum(axis=1, keepdims=True)


def denoise_attention(view: AttnView, labels, factor) -> AttnView:
    """Label-oracle intervention: boost same-label exp-scores, renormalize rows.

    Uses true labels, so it is a diagnostic only. Bi-level views are denoised
    inside the intra blocks; the inter matrix is carried over unchanged.
    """
    if factor <= 0:
        raise ValueError("factor must be > 0")
    if view.logits is None:
        raise ValueError("denoising needs pre-softmax scores")
    logits, labs = _blocks(view, labels, logits=True)
    new = [_denoise_block(z, lab, factor) for z, lab in zip(logits, labs)]
    if view.is_dense:
        return AttnView(matrix=new[0], logits=view.logits, layer=view.layer)
    return AttnView(intra=new, inter=view.inter, partition=view.partition, logits=view.logits, layer=view.layer)


# ---------------------------------------------------------------------------
# smoothness, per-node identity, cost


def smoothness_frobenius(z, view: AttnView | np.ndarray, mode="mixed") -> float:
    """||Z - A Z||_F with A the dense (or node-level expanded) attention."""
    a = view.expanded(mode) if isinstance(view, AttnView) else np.asarray(view, dtype=float)
    z = np.asarray(z, dtype=float)
    if z.ndim == 1:
        z = z[:, None]
    if a.shape != (z.shape[0], z.shape[0]):
        raise ValueError("attention and embeddings disagree on node count")
    return float(np.linalg.norm(z - a @ z))


@dataclass
class LabelMassReport:
    lhs: np.ndarray  # different-label attention mass per node
    rhs: np.ndarray  # value predicted from C_u, eta_u, gamma_u (NaN if degenerate)
    gap: np.ndarray  # |lhs - rhs|, NaN if degenerate
    degenerate: np.ndarray  # bool: node lacks a different-label peer

    @property
    def max_gap(self) -> float:
        ok = ~self.degenerate
        return float(np.max(self.gap[ok])) if ok.any() else 0.0


def label_mass_identity(q, k, labels) -> LabelMassReport:
    """Check, per node, that softmax different-label mass equals
    1 / (1 + (C_u / (1 - C_u)) * (eta_u / gamma_u)).

    eta_u and gamma_u are mean exp-scores over same-label peers (u included)
    and different-label peers; C_u is u's same-label share of all N nodes.
    """
    q = np.asarray(q, dtype=float)
    k = np.asarray(k, dtype=float)
    labels = np.asarray(labels)
    if q.ndim == 1:
        q = q[:, None]
    if k.ndim == 1:
        k = k[:, None]
    if q.shape != k.shape or q.shape[0] != len(labels):
        raise ValueError("Q, K and labels must agree on N and width")
    n, d = q.shape
    z = q @ k.T / math.sqrt(d)
    shift = z.max(axis=1, keepdims=True)
    e = np.exp(z - shift)
    same = labels[:, None] == labels[None, :]
    alpha = e / e.sum(axis=1, keepdims=True)
    lhs = np.where(same, 0.0, alpha).sum(axis=1)
    n_same = same.sum(axis=1)
    n_diff = n - n_same
    degenerate = n_diff == 0
    rhs = np.full(n, np.nan)
    ok = ~degenerate
    eta = np.where(same, e, 0.0).sum(axis=1) / n_same
    gamma = np.where(same, 0.0, e).sum(axis=1) / np.maximum(n_diff, 1)
    c = n_same / n
    rhs[ok] = 1.0 / (1.0 + (c[ok] / (1.0 - c[ok])) * (eta[ok] / gamma[ok]))
    gap = np.abs(lhs - rhs)
    return LabelMassReport(lhs, rhs, gap, degenerate)


def attention_cost(partition: Partition) -> int:
    """Score entries one bi-level layer materializes: sum |V_p|^2 + P^2."""
    sizes = partition.sizes.astype(np.int64)
    return int(np.sum(sizes * sizes) + partition.num_parts**2)
