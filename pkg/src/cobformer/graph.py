"""Graph storage, text-format ingestion, k-hop rings and edge homophily."""

from __future__ import annotations

import logging
from collections import OrderedDict
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import scipy.sparse as sp

log = logging.getLogger(__name__)

CORA_CLASSES = (
    "Case_Based",
    "Genetic_Algorithms",
    "Neural_Networks",
    "Probabilistic_Methods",
    "Reinforcement_Learning",
    "Rule_Learning",
    "Theory",
)


class GraphFormatError(ValueError):
    """A data file could not be parsed."""

    def __init__(self, path, lineno, msg):
        self.path = str(path)
        self.lineno = lineno
        super().__init__(f"{path}:{lineno}: {msg}")


class GraphValidationError(ValueError):
    """Parsed data violates a structural requirement."""


@dataclass(frozen=True, eq=False)
class Graph:
    """Simple undirected graph in CSR form (no self-loops, sorted neighbor lists)."""

    offsets: np.ndarray
    neighbors: np.ndarray

    def __post_init__(self):
        self.offsets.setflags(write=False)
        self.neighbors.setflags(write=False)

    @property
    def num_nodes(self) -> int:
        return len(self.offsets) - 1

    @property
    def num_edges(self) -> int:
        return len(self.neighbors) // 2

    def neighbors_of(self, u: int) -> np.ndarray:
        return self.neighbors[self.offsets[u] : self.offsets[u + 1]]

    def degrees(self) -> np.ndarray:
        return np.diff(self.offsets)

    def edges(self) -> np.ndarray:
        """Undirected edges as an (E, 2) array with u < v, lexicographically sorted."""
        src = np.repeat(np.arange(self.num_nodes), self.degrees())
        keep = src < self.neighbors
        return np.stack([src[keep], self.neighbors[keep]], axis=1)

    def adjacency(self) -> sp.csr_matrix:
        data = np.ones(len(self.neighbors))
        return sp.csr_matrix(
            (data, self.neighbors, self.offsets), shape=(self.num_nodes, self.num_nodes)
        )

    def __eq__(self, other):
        if not isinstance(other, Graph):
            return NotImplemented
        return np.array_equal(self.offsets, other.offsets) and np.array_equal(
            self.neighbors, other.neighbors
        )

    def check(self):
        """Assert every CSR invariant; raises GraphValidationError."""
        n = self.num_nodes
        if self.offsets[0] != 0 or self.offsets[-1] != len(self.neighbors):
            raise GraphValidationError("offsets do not span the neighbor array")
        if np.any(np.diff(self.offsets) < 0):
            raise GraphValidationError("offsets decrease")
        if len(self.neighbors) and (self.neighbors.min() < 0 or self.neighbors.max() >= n):
            raise GraphValidationError("neighbor id out of range")
        for u in range(n):
            nb = self.neighbors_of(u)
            if np.any(np.diff(nb) <= 0):
                raise GraphValidationError(f"neighbors of {u} not strictly ascending")
            if np.any(nb == u):
                raise GraphValidationError(f"self-loop at {u}")
        a = self.adjacency()
        if (a != a.T).nnz:
            raise GraphValidationError("adjacency is not symmetric")

    @classmethod
    def from_edges(cls, num_nodes: int, edges) -> tuple["Graph", int]:
        """Build from an arbitrary (m, 2) edge array.

        Directed pairs are symmetrized and duplicates merged. Returns the graph
        and the number of self-loop entries that were dropped.
        """
        edges = np.asarray(edges, dtype=np.int64).reshape(-1, 2)
        if len(edges) and (edges.min() < 0 or edges.max() >= num_nodes):
            raise GraphValidationError(
                f"edge endpoint out of range [0, {num_nodes})"
            )
        loops = edges[:, 0] == edges[:, 1]
        n_loops = int(loops.sum())
        edges = edges[~loops]
        both = np.concatenate([edges, edges[:, ::-1]])
        if len(both):
            key = np.unique(both[:, 0] * num_nodes + both[:, 1])
            src, dst = np.divmod(key, num_nodes)
        else:
            src = dst = np.zeros(0, dtype=np.int64)
        offsets = np.zeros(num_nodes + 1, dtype=np.int64)
        np.cumsum(np.bincount(src, minlength=num_nodes), out=offsets[1:])
        return cls(offsets, dst.astype(np.int64)), n_loops


@dataclass(frozen=True, eq=False)
class NodeData:
    """Node features, labels and disjoint train/val/test masks.

    Unlabeled nodes carry label -1 and may not appear in any mask.
    """

    features: np.ndarray
    labels: np.ndarray
    num_classes: int
    train_mask: np.ndarray
    val_mask: np.ndarray
    test_mask: np.ndarray

    def __post_init__(self):
        n = len(self.labels)
        if self.features.shape[0] != n:
            raise GraphValidationError(
                f"{self.features.shape[0]} feature rows for {n} nodes"
            )
        if not np.all(np.isfinite(self.features)):
            raise GraphValidationError("non-finite feature value")
        masks = (self.train_mask, self.val_mask, self.test_mask)
        for m in masks:
            if m.shape != (n,) or m.dtype != bool:
                raise GraphValidationError("masks must be boolean vectors over nodes")
        overlap = (
            (self.train_mask & self.val_mask)
            | (self.train_mask & self.test_mask)
            | (self.val_mask & self.test_mask)
        )
        if overlap.any():
            raise GraphValidationError(
                f"masks overlap at node {int(np.flatnonzero(overlap)[0])}"
            )
        masked = self.train_mask | self.val_mask | self.test_mask
        bad = masked & ((self.labels < 0) | (self.labels >= self.num_classes))
        if bad.any():
            raise GraphValidationError(
                f"masked node {int(np.flatnonzero(bad)[0])} has no valid label"
            )
        for arr in (self.features, self.labels, *masks):
            arr.setflags(write=False)

    @property
    def num_nodes(self) -> int:
        return len(self.labels)

    @property
    def num_features(self) -> int:
        return self.features.shape[1]


@dataclass(frozen=True)
class KHopRings:
    source: int
    rings: list = field(default_factory=list)

    @property
    def kmax(self) -> int:
        return len(self.rings) - 1


@dataclass
class LoadStats:
    raw_edge_lines: int = 0
    self_loops: int = 0
    skipped_edges: int = 0


def _lines(path):
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, 1):
            line = line.rstrip("\n").rstrip("\r")
            if not line.strip() or line.startswith("#"):
                continue
            yield lineno, line


def _parse_ids(path, lineno, line, n_fields=2):
    parts = line.split("\t")
    if len(parts) != n_fields:
        raise GraphFormatError(path, lineno, f"expected {n_fields} tab-separated fields")
    return parts


def _parse_int(path, lineno, text):
    try:
        return int(text)
    except ValueError:
        raise GraphFormatError(path, lineno, f"not an integer: {text!r}") from None


def read_features(path) -> np.ndarray:
    it = _lines(path)
    try:
        lineno, header = next(it)
    except StopIteration:
        raise GraphFormatError(path, 1, "missing 'N d' header") from None
    parts = header.split(" ")
    if len(parts) != 2:
        raise GraphFormatError(path, lineno, "header must be 'N d'")
    n, d = (_parse_int(path, lineno, p) for p in parts)
    feats = np.empty((n, d))
    row = 0
    for lineno, line in it:
        if row >= n:
            raise GraphFormatError(path, lineno, f"more than {n} feature rows")
        vals = line.split(" ") if d else []
        if len(vals) != d:
            raise GraphFormatError(path, lineno, f"expected {d} values, got {len(vals)}")
        try:
            feats[row] = [float(v) for v in vals]
        except ValueError as exc:
            raise GraphFormatError(path, lineno, str(exc)) from None
        row += 1
    if row != n:
        raise GraphFormatError(path, lineno if n else 1, f"expected {n} rows, got {row}")
    return feats


def load_edge_list(edge_path, label_path, feature_path, mask_path=None):
    """Read the tab-separated text formats into ``(Graph, NodeData, LoadStats)``.

    The node count comes from the feature header; labels and masks are keyed
    by 0-based node id.
    """
    features = read_features(feature_path)
    n = features.shape[0]

    labels = np.full(n, -1, dtype=np.int64)
    for lineno, line in _lines(label_path):
        a, b = _parse_ids(label_path, lineno, line)
        u, c = _parse_int(label_path, lineno, a), _parse_int(label_path, lineno, b)
        if not 0 <= u < n:
            raise GraphValidationError(f"{label_path}:{lineno}: node id {u} out of range [0, {n})")
        if c < 0:
            raise GraphFormatError(label_path, lineno, "negative class id")
        labels[u] = c
    num_classes = int(labels.max()) + 1 if (labels >= 0).any() else 0

    stats = LoadStats()
    pairs = []
    for lineno, line in _lines(edge_path):
        a, b = _parse_ids(edge_path, lineno, line)
        u, v = _parse_int(edge_path, lineno, a), _parse_int(edge_path, lineno, b)
        for x in (u, v):
            if not 0 <= x < n:
                raise GraphValidationError(
                    f"{edge_path}:{lineno}: node id {x} out of range [0, {n})"
                )
        pairs.append((u, v))
        stats.raw_edge_lines += 1
    graph, stats.self_loops = Graph.from_edges(n, pairs)
    if stats.self_loops:
        log.warning("dropped %d self-loop(s) from %s", stats.self_loops, edge_path)

    masks = {k: np.zeros(n, dtype=bool) for k in ("train", "val", "test")}
    if mask_path is not None:
        for lineno, line in _lines(mask_path):
            a, b = _parse_ids(mask_path, lineno, line)
            u = _parse_int(mask_path, lineno, a)
            if not 0 <= u < n:
                raise GraphValidationError(f"{mask_path}:{lineno}: node id {u} out of range [0, {n})")
            if b not in masks:
                raise GraphFormatError(mask_path, lineno, f"unknown split {b!r}")
            masks[b][u] = True
    data = NodeData(features, labels, num_classes, masks["train"], masks["val"], masks["test"])
    return graph, data, stats


def _fmt(x: float) -> str:
    return repr(float(x))


def save_edge_list(graph: Graph, data: NodeData, directory) -> dict:
    """Write edges.tsv, labels.tsv, features.txt and masks.tsv; returns the paths."""
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    paths = {
        "edges": directory / "edges.tsv",
        "labels": directory / "labels.tsv",
        "features": directory / "features.txt",
        "masks": directory / "masks.tsv",
    }
    with open(paths["edges"], "w", encoding="utf-8", newline="\n") as fh:
        for u, v in graph.edges():
            fh.write(f"{u}\t{v}\n")
    with open(paths["labels"], "w", encoding="utf-8", newline="\n") as fh:
        for u, c in enumerate(data.labels):
            if c >= 0:
                fh.write(f"{u}\t{c}\n")
    with open(paths["features"], "w", encoding="utf-8", newline="\n") as fh:
        n, d = data.features.shape
        fh.write(f"{n} {d}\n")
        for row in data.features:
            fh.write(" ".join(_fmt(x) for x in row) + "\n")
    with open(paths["masks"], "w", encoding="utf-8", newline="\n") as fh:
        for name, mask in (("train", data.train_mask), ("val", data.val_mask), ("test", data.test_mask)):
            for u in np.flatnonzero(mask):
                fh.write(f"{u}\t{name}\n")
    return paths


def planetoid_split(labels, num_classes, per_class=20, num_val=500, num_test=1000):
    """Deterministic public-style split in node order.

    The first ``per_class`` nodes of each class train; of the remaining nodes,
    the next ``num_val`` validate and the following ``num_test`` test.
    """
    n = len(labels)
    train = np.zeros(n, dtype=bool)
    seen = np.zeros(num_classes, dtype=np.int64)
    for u, c in enumerate(labels):
        if c >= 0 and seen[c] < per_class:
            train[u] = True
            seen[c] += 1
    rest = np.flatnonzero(~train & (np.asarray(labels) >= 0))
    val = np.zeros(n, dtype=bool)
    test = np.zeros(n, dtype=bool)
    val[rest[:num_val]] = True
    test[rest[num_val : num_val + num_test]] = True
    return train, val, test


def load_cora_raw(content_path, cites_path, split="planetoid-public", classes=CORA_CLASSES):
    """Parse cora.content / cora.cites.

    Paper ids map to dense ids in content-file order. Citations naming an
    unknown paper are skipped and counted in the returned stats.
    """
    class_index = {c: i for i, c in enumerate(classes)}
    ids: OrderedDict[str, int] = OrderedDict()
    rows, labels = [], []
    width = None
    for lineno, line in _lines(content_path):
        parts = line.split("\t")
        if len(parts) < 3:
            raise GraphFormatError(content_path, lineno, "expected id, features, class")
        pid, feats, cname = parts[0], parts[1:-1], parts[-1]
        if width is None:
            width = len(feats)
        elif len(feats) != width:
            raise GraphFormatError(content_path, lineno, f"expected {width} features")
        if cname not in class_index:
            raise GraphValidationError(f"{content_path}:{lineno}: unknown class {cname!r}")
        if pid in ids:
            raise GraphFormatError(content_path, lineno, f"duplicate paper id {pid!r}")
        ids[pid] = len(ids)
        try:
            rows.append(np.array(feats, dtype=float))
        except ValueError as exc:
            raise GraphFormatError(content_path, lineno, str(exc)) from None
        labels.append(class_index[cname])

    stats = LoadStats()
    pairs = []
    for lineno, line in _lines(cites_path):
        parts = line.split("\t")
        if len(parts) != 2:
            raise GraphFormatError(cites_path, lineno, "expected 'cited<TAB>citing'")
        stats.raw_edge_lines += 1
        a, b = ids.get(parts[0]), ids.get(parts[1])
        if a is None or b is None:
            stats.skipped_edges += 1
            continue
        pairs.append((a, b))
    if stats.skipped_edges:
        log.warning("skipped %d citation(s) naming unknown papers", stats.skipped_edges)

    n = len(ids)
    graph, stats.self_loops = Graph.from_edges(n, pairs)
    labels = np.array(labels, dtype=np.int64)
    features = np.vstack(rows) if rows else np.zeros((0, 0))
    if split == "planetoid-public":
        train, val, test = planetoid_split(labels, len(classes))
    elif split is None or split == "none":
        train, val, test = (np.zeros(n, dtype=bool) for _ in range(3))
    else:
        raise ValueError(f"unknown split {split!r}")
    data = NodeData(features, labels, len(classes), train, val, test)
    return graph, data, stats


def khop_rings(graph: Graph, u: int, kmax: int) -> KHopRings:
    """BFS layers around ``u``: ring k holds the nodes at exact distance k."""
    if not 0 <= u < graph.num_nodes:
        raise IndexError(f"node {u} out of range")
    if kmax < 0:
        raise ValueError("kmax must be >= 0")
    seen = np.zeros(graph.num_nodes, dtype=bool)
    seen[u] = True
    frontier = np.array([u], dtype=np.int64)
    rings = [frontier]
    for _ in range(kmax):
        if len(frontier):
            nxt = np.concatenate([graph.neighbors_of(x) for x in frontier])
            nxt = np.unique(nxt[~seen[nxt]])
            seen[nxt] = True
        else:
            nxt = frontier
        rings.append(nxt)
        frontier = nxt
    return KHopRings(u, rings)


def hop_distances(graph: Graph, kmax: int, sources=None, batch=512):
    """Yield ``(source_ids, dist)`` blocks with exact hop distances.

    ``dist`` has shape (len(source_ids), N); entries beyond ``kmax`` or
    unreachable are -1. Runs a batched frontier expansion on the sparse
    adjacency so all-pairs distances on Cora-sized graphs stay cheap.
    """
    n = graph.num_nodes
    adj = graph.adjacency().astype(np.int32)
    sources = np.arange(n) if sources is None else np.asarray(sources)
    for start in range(0, len(sources), batch):
        src = sources[start : start + batch]
        dist = np.full((len(src), n), -1, dtype=np.int16)
        dist[np.arange(len(src)), src] = 0
        frontier = sp.csr_matrix(
            (np.ones(len(src), dtype=np.int32), (np.arange(len(src)), src)), shape=(len(src), n)
        )
        for k in range(1, kmax + 1):
            if frontier.nnz == 0:
                break
            reach = (frontier @ adj).tocoo()
            r, c = reach.row, reach.col
            new = dist[r, c] < 0
            r, c = r[new], c[new]
            dist[r, c] = k
            frontier = sp.csr_matrix(
                (np.ones(len(r), dtype=np.int32), (r, c)), shape=(len(src), n)
            )
        yield src, dist


def edge_homophily(graph: Graph, labels) -> float:
    """Fraction of undirected edges joining equal labels."""
    if graph.num_edges == 0:
        raise ZeroDivisionError("edge homophily is undefined for a graph without edges")
    labels = np.asarray(labels)
    e = graph.edges()
    return float(np.mean(labels[e[:, 0]] == labels[e[:, 1]]))


def row_normalize(data: NodeData) -> NodeData:
    """Copy of ``data`` with each feature row scaled to sum 1 (zero rows kept)."""
    x = np.array(data.features, dtype=float)
    s = x.sum(axis=1, keepdims=True)
    x = np.divide(x, s, out=np.zeros_like(x), where=s != 0)
    return NodeData(x, data.labels.copy(), data.num_classes, data.train_mask.copy(),
                    data.val_mask.copy(), data.test_mask.copy())
