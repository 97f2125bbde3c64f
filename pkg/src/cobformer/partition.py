"""Balanced k-way partitioning in the multilevel style.

Coarsen by heavy-edge matching, grow regions from spread-out seeds on the
coarsest graph, then project back level by level with boundary
Fiduccia-Mattheyses passes that only ever keep balanced states.
"""

from __future__ import annotations

import heapq
import math
from dataclasses import dataclass, field

import numpy as np
import scipy.sparse as sp
from scipy.sparse.csgraph import connected_components

from .graph import Graph


class PartitionConfigError(ValueError):
    pass


def size_cap(num_nodes: int, num_parts: int, epsilon: float) -> int:
    # 1e-9 absorbs float noise in (1 + eps) * ceil(N / P)
    return int(math.floor((1.0 + epsilon) * math.ceil(num_nodes / num_parts) + 1e-9))


@dataclass(frozen=True, eq=False)
class Partition:
    assignment: np.ndarray
    num_parts: int
    epsilon: float = 0.1
    members: list = field(init=False, repr=False)

    def __post_init__(self):
        a = np.asarray(self.assignment, dtype=np.int64)
        a.setflags(write=False)
        object.__setattr__(self, "assignment", a)
        order = np.argsort(a, kind="stable")
        bounds = np.searchsorted(a[order], np.arange(self.num_parts + 1))
        members = [order[bounds[p] : bounds[p + 1]] for p in range(self.num_parts)]
        object.__setattr__(self, "members", members)

    @property
    def num_nodes(self) -> int:
        return len(self.assignment)

    @property
    def sizes(self) -> np.ndarray:
        return np.bincount(self.assignment, minlength=self.num_parts)

    @property
    def cap(self) -> int:
        return size_cap(self.num_nodes, self.num_parts, self.epsilon)

    def check(self, num_nodes=None):
        """Raise PartitionConfigError unless cover, non-empty and balance all hold."""
        n = self.num_nodes if num_nodes is None else num_nodes
        if len(self.assignment) != n:
            raise PartitionConfigError("assignment length differs from node count")
        if n and (self.assignment.min() < 0 or self.assignment.max() >= self.num_parts):
            raise PartitionConfigError("cluster id out of range")
        sizes = self.sizes
        if np.any(sizes == 0):
            raise PartitionConfigError(f"cluster {int(np.argmin(sizes))} is empty")
        if sizes.max() > self.cap:
            raise PartitionConfigError(f"cluster size {sizes.max()} exceeds cap {self.cap}")

    def __eq__(self, other):
        if not isinstance(other, Partition):
            return NotImplemented
        return self.num_parts == other.num_parts and np.array_equal(
            self.assignment, other.assignment
        )


def edge_cut(graph: Graph, partition) -> int:
    a = partition.assignment if isinstance(partition, Partition) else np.asarray(partition)
    e = graph.edges()
    return int(np.count_nonzero(a[e[:, 0]] != a[e[:, 1]]))


def random_balanced_assignment(num_nodes, num_parts, rng) -> np.ndarray:
    """Uniformly random assignment whose cluster sizes differ by at most one."""
    a = np.empty(num_nodes, dtype=np.int64)
    a[rng.permutation(num_nodes)] = np.arange(num_nodes) % num_parts
    return a


# ---------------------------------------------------------------------------
# weighted working graph


@dataclass
class _Level:
    adj: sp.csr_matrix  # symmetric, edge weights, zero diagonal
    vwgt: np.ndarray
    cmap: np.ndarray | None = None  # fine vertex -> coarse vertex (of the next level)


def _cut(adj, part):
    coo = adj.tocoo()
    return float(coo.data[part[coo.row] != part[coo.col]].sum()) / 2.0


def _heavy_edge_matching(adj, vwgt, max_vwgt, rng):
    n = adj.shape[0]
    indptr, indices, data = adj.indptr, adj.indices, adj.data
    match = np.full(n, -1, dtype=np.int64)
    for u in rng.permutation(n):
        if match[u] >= 0:
            continue
        best, bw = -1, -1.0
        for idx in range(indptr[u], indptr[u + 1]):
            v = indices[idx]
            if match[v] < 0 and vwgt[u] + vwgt[v] <= max_vwgt and data[idx] > bw:
                best, bw = v, data[idx]
        if best >= 0:
            match[u], match[best] = best, u
        else:
            match[u] = u
    cmap = np.full(n, -1, dtype=np.int64)
    c = 0
    for u in range(n):
        if cmap[u] < 0:
            cmap[u] = cmap[match[u]] = c
            c += 1
    return cmap, c


def _contract(adj, vwgt, cmap, nc):
    n = adj.shape[0]
    proj = sp.csr_matrix((np.ones(n), (np.arange(n), cmap)), shape=(n, nc))
    cadj = (proj.T @ adj @ proj).tocsr()
    cadj.setdiag(0)
    cadj.eliminate_zeros()
    cadj.sort_indices()
    return cadj, np.bincount(cmap, weights=vwgt, minlength=nc)


def _bfs_dist(adj, sources):
    n = adj.shape[0]
    dist = np.full(n, -1, dtype=np.int64)
    frontier = np.asarray(sources, dtype=np.int64)
    dist[frontier] = 0
    k = 0
    while len(frontier):
        k += 1
        nb = adj[frontier].indices
        nb = np.unique(nb[dist[nb] < 0])
        dist[nb] = k
        frontier = nb
    return dist


def _initial_partition(adj, vwgt, num_parts, cap, rng):
    """Region growing from farthest-point seeds, component aware."""
    n = adj.shape[0]
    total = vwgt.sum()
    target = math.ceil(total / num_parts)
    ncomp, comp = connected_components(adj, directed=False)
    cw = np.bincount(comp, weights=vwgt, minlength=ncomp)

    # seeds per component: floor(w / target), the rest by largest remainder
    share = cw / target
    seeds_per = np.minimum(np.floor(share).astype(np.int64), np.bincount(comp, minlength=ncomp))
    rest = num_parts - seeds_per.sum()  # sum(floor(w/target)) <= P always
    avail = np.bincount(comp, minlength=ncomp) - seeds_per
    for c in np.lexsort((np.arange(ncomp), -(share - np.floor(share)))):
        if rest == 0:
            break
        if avail[c] > 0:
            seeds_per[c] += 1
            avail[c] -= 1
            rest -= 1
    while rest > 0:  # more parts than fractional winners: spread over big components
        for c in np.argsort(-cw, kind="stable"):
            if rest == 0:
                break
            if avail[c] > 0:
                seeds_per[c] += 1
                avail[c] -= 1
                rest -= 1

    part = np.full(n, -1, dtype=np.int64)
    weights = np.zeros(num_parts)
    frontiers = [[] for _ in range(num_parts)]
    pid = 0
    for c in range(ncomp):
        k = int(seeds_per[c])
        if k == 0:
            continue
        nodes = np.flatnonzero(comp == c)
        seeds = [int(nodes[rng.integers(len(nodes))])]
        for _ in range(k - 1):
            dist = _bfs_dist(adj, seeds)
            dist[np.asarray(seeds)] = -1
            cand = nodes[dist[nodes] == dist[nodes].max()]
            seeds.append(int(cand.min()))
        for s in seeds:
            part[s] = pid
            weights[pid] += vwgt[s]
            frontiers[pid] = [s]
            pid += 1

    indptr, indices = adj.indptr, adj.indices
    heap = [(weights[p], p) for p in range(num_parts)]
    heapq.heapify(heap)
    heads = [0] * num_parts
    queues = [list(f) for f in frontiers]
    while heap:
        w, p = heapq.heappop(heap)
        if w != weights[p]:
            continue
        grew = False
        q = queues[p]
        while heads[p] < len(q) and not grew:
            u = q[heads[p]]
            for v in indices[indptr[u] : indptr[u + 1]]:
                if part[v] < 0 and weights[p] + vwgt[v] <= target:
                    part[v] = p
                    weights[p] += vwgt[v]
                    q.append(v)
                    grew = True
                    break
            else:
                heads[p] += 1
        if grew:
            heapq.heappush(heap, (weights[p], p))

    # unreached vertices: pack whole leftover pieces where they fit
    left = np.flatnonzero(part < 0)
    if len(left):
        sub = adj[left][:, left]
        npiece, piece = connected_components(sub, directed=False)
        pw = np.bincount(piece, weights=vwgt[left], minlength=npiece)
        for pc in np.argsort(-pw, kind="stable"):
            nodes = left[piece == pc]
            fits = np.flatnonzero(weights + pw[pc] <= cap)
            if len(fits):
                p = fits[np.argmin(weights[fits])]
                part[nodes] = p
                weights[p] += pw[pc]
                continue
            for u in nodes:  # too big to keep together: smallest cluster each
                p = int(np.argmin(weights))
                part[u] = p
                weights[p] += vwgt[u]
    return part


class _Refiner:
    """k-way boundary FM on a weighted graph with a hard size cap."""

    def __init__(self, adj, vwgt, part, num_parts, cap):
        self.adj = adj
        self.vwgt = vwgt
        self.part = part
        self.k = num_parts
        self.cap = cap
        self.weights = np.bincount(part, weights=vwgt, minlength=num_parts)
        self.counts = np.bincount(part, minlength=num_parts)

    def _conn(self, u):
        a = self.adj
        lo, hi = a.indptr[u], a.indptr[u + 1]
        conn = {}
        for v, w in zip(a.indices[lo:hi], a.data[lo:hi]):
            p = self.part[v]
            conn[p] = conn.get(p, 0.0) + w
        return conn

    def _best_move(self, u, soft_cap):
        conn = self._conn(u)
        src = self.part[u]
        if self.counts[src] <= 1:
            return None
        internal = conn.get(src, 0.0)
        best = None
        for q, w in conn.items():
            if q == src or self.weights[q] + self.vwgt[u] > soft_cap:
                continue
            gain = w - internal
            if best is None or gain > best[0] or (gain == best[0] and self.weights[q] < self.weights[best[1]]):
                best = (gain, q)
        return best

    def _move(self, u, q):
        src = self.part[u]
        self.part[u] = q
        self.weights[src] -= self.vwgt[u]
        self.weights[q] += self.vwgt[u]
        self.counts[src] -= 1
        self.counts[q] += 1

    def balanced(self):
        return self.weights.max() <= self.cap

    def rebalance(self):
        """Push vertices out of overweight clusters; may raise the cut."""
        guard = 0
        while not self.balanced() and guard < 10 * len(self.part):
            guard += 1
            over = int(np.argmax(self.weights))
            nodes = np.flatnonzero(self.part == over)
            best = None
            for u in nodes:
                conn = self._conn(u)
                internal = conn.get(over, 0.0)
                for q in range(self.k):
                    if q == over or self.weights[q] + self.vwgt[u] > self.cap:
                        continue
                    gain = conn.get(q, 0.0) - internal
                    key = (gain, -self.weights[q])
                    if best is None or key > best[0]:
                        best = (key, u, q)
            if best is None:
                break
            self._move(best[1], best[2])

    def fm_pass(self, patience=100):
        """One pass; returns the cut reduction achieved (>= 0)."""
        soft_cap = self.cap + self.vwgt.max()
        n = len(self.part)
        locked = np.zeros(n, dtype=bool)
        version = np.zeros(n, dtype=np.int64)
        heap = []
        a = self.adj

        def push(u):
            version[u] += 1
            mv = self._best_move(u, soft_cap)
            if mv is not None:
                heapq.heappush(heap, (-mv[0], u, version[u], mv[1]))

        nb_part = self.part[a.indices]
        src = np.repeat(np.arange(n), np.diff(a.indptr))
        boundary = np.unique(src[nb_part != self.part[src]])
        for u in boundary:
            push(u)

        moves = []
        delta = 0.0
        best_delta, best_len = 0.0, 0
        since_best = 0
        while heap and since_best < patience:
            neg_gain, u, ver, q = heapq.heappop(heap)
            if locked[u] or ver != version[u]:
                continue
            mv = self._best_move(u, soft_cap)
            if mv is None:
                continue
            if mv[1] != q or mv[0] != -neg_gain:
                heapq.heappush(heap, (-mv[0], u, version[u], mv[1]))
                continue
            gain = mv[0]
            moves.append((u, self.part[u]))
            self._move(u, q)
            locked[u] = True
            delta += gain
            if self.balanced() and delta > best_delta + 1e-12:
                best_delta, best_len = delta, len(moves)
                since_best = 0
            else:
                since_best += 1
            for v in a.indices[a.indptr[u] : a.indptr[u + 1]]:
                if not locked[v]:
                    push(v)
        for u, p in reversed(moves[best_len:]):
            self._move(u, p)
        return best_delta


def partition_multilevel(graph: Graph, num_parts: int, epsilon: float = 0.1, seed: int = 0, trace=None):
    """Balanced partition into ``num_parts`` non-empty clusters.

    ``trace``, when a list, receives one ``(level, cut_before, cut_after,
    balanced_after, balanced_before)`` tuple per refinement pass.
    """
    n = graph.num_nodes
    if not 1 <= num_parts <= n:
        raise PartitionConfigError(f"need 1 <= P <= N, got P={num_parts}, N={n}")
    if epsilon < 0:
        raise PartitionConfigError("epsilon must be >= 0")
    cap = size_cap(n, num_parts, epsilon)
    if cap * num_parts < n:
        raise PartitionConfigError(f"cap {cap} x {num_parts} clusters cannot hold {n} nodes")
    if num_parts == 1:
        return Partition(np.zeros(n, dtype=np.int64), 1, epsilon)

    rng = np.random.default_rng(seed)
    adj = graph.adjacency().astype(float)
    levels = [_Level(adj, np.ones(n))]
    stop = max(30 * num_parts, 2 * num_parts)
    max_vwgt = max(1, math.ceil(n / num_parts) // 2)
    while levels[-1].adj.shape[0] > stop:
        cur = levels[-1]
        cmap, nc = _heavy_edge_matching(cur.adj, cur.vwgt, max_vwgt, rng)
        if nc > 0.95 * cur.adj.shape[0] or nc < num_parts:
            break
        cur.cmap = cmap
        cadj, cw = _contract(cur.adj, cur.vwgt, cmap, nc)
        levels.append(_Level(cadj, cw))

    coarsest = levels[-1]
    part = _initial_partition(coarsest.adj, coarsest.vwgt, num_parts, cap, rng)
    for depth in range(len(levels) - 1, -1, -1):
        lvl = levels[depth]
        if depth < len(levels) - 1:
            part = part[lvl.cmap]
        ref = _Refiner(lvl.adj, lvl.vwgt, part, num_parts, cap)
        if not ref.balanced():
            ref.rebalance()
        for _ in range(10):
            before = _cut(lvl.adj, ref.part)
            was_balanced = ref.balanced()
            gain = ref.fm_pass()
            after = _cut(lvl.adj, ref.part)
            if trace is not None:
                trace.append((depth, before, after, ref.balanced(), was_balanced))
            if gain <= 0:
                break
        part = ref.part
    result = Partition(part, num_parts, epsilon)
    result.check(n)
    return result
