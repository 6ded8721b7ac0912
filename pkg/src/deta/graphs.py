"""Graph data model, KNN construction and shortest-path neighborhoods."""

from __future__ import annotations

import json
from collections import deque
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np
import scipy.sparse as sp

DOMAINS = ("source", "target")


def _canonical_edges(edges, n: int) -> np.ndarray:
    arr = np.asarray(edges, dtype=np.int64).reshape(-1, 2) if len(edges) else np.zeros((0, 2), np.int64)
    if arr.size and (arr.min() < 0 or arr.max() >= n):
        raise ValueError(f"edge endpoint outside [0, {n})")
    if np.any(arr[:, 0] == arr[:, 1]):
        raise ValueError("self-loops are not stored as edges")
    arr = np.sort(arr, axis=1)
    arr = np.unique(arr, axis=0)
    return arr.reshape(-1, 2)


@dataclass
class WSIGraph:
    """Node features plus an undirected edge set, with an optional survival label.

    ``censor`` follows the convention 1 = event observed, 0 = censored.
    """

    features: np.ndarray
    edges: np.ndarray = field(default_factory=lambda: np.zeros((0, 2), np.int64))
    time_bin: int | None = None
    censor: int | None = None
    domain: str = "source"

    def __post_init__(self):
        self.features = np.atleast_2d(np.asarray(self.features, dtype=np.float64))
        self.edges = _canonical_edges(self.edges, self.num_nodes)
        if (self.time_bin is None) != (self.censor is None):
            raise ValueError("time_bin and censor must be given together")
        if self.censor is not None and self.censor not in (0, 1):
            raise ValueError(f"censor must be 0 or 1, got {self.censor}")
        if self.time_bin is not None:
            self.time_bin = int(self.time_bin)
            self.censor = int(self.censor)
        if self.domain not in DOMAINS:
            raise ValueError(f"domain must be one of {DOMAINS}, got {self.domain!r}")

    @property
    def num_nodes(self) -> int:
        return self.features.shape[0]

    @property
    def labeled(self) -> bool:
        return self.time_bin is not None

    def unlabeled(self) -> "WSIGraph":
        return WSIGraph(self.features, self.edges, None, None, self.domain)

    def neighbors(self) -> list[list[int]]:
        adj: list[list[int]] = [[] for _ in range(self.num_nodes)]
        for i, j in self.edges:
            adj[i].append(int(j))
            adj[j].append(int(i))
        for row in adj:
            row.sort()
        return adj


def knn_graph(features: np.ndarray, k: int) -> np.ndarray:
    """Symmetrised k-nearest-neighbour edges under Euclidean distance.

    Each node links to its ``k`` closest other nodes; the union of these
    directed links is returned as sorted ``(i, j)`` pairs with ``i < j``.
    Equal distances are resolved in favour of the smaller node index.
    """
    x = np.asarray(features, dtype=np.float64)
    if x.ndim == 1:
        x = x[:, None]
    n = x.shape[0]
    if k < 1:
        raise ValueError(f"k must be positive, got {k}")
    if k >= n:
        raise ValueError(f"k={k} must be smaller than the node count {n}")
    diff = x[:, None, :] - x[None, :, :]
    dist = np.einsum("ijk,ijk->ij", diff, diff)
    np.fill_diagonal(dist, np.inf)
    cols = np.arange(n)
    pairs = []
    for i in range(n):
        order = np.lexsort((cols, dist[i]))[:k]
        pairs.extend((i, int(j)) for j in order)
    return _canonical_edges(pairs, n)


@dataclass
class SPNeighborhoods:
    """``sets[k-1][u]``: sorted nodes at shortest-path distance exactly k from u."""

    k_sp: int
    sets: list[list[np.ndarray]]

    @property
    def num_nodes(self) -> int:
        return len(self.sets[0]) if self.sets else 0

    def indicator(self, k: int) -> sp.csr_matrix:
        """Sparse 0/1 matrix whose row u marks N_k(u)."""
        n = self.num_nodes
        rows = [np.full(len(s), u) for u, s in enumerate(self.sets[k - 1])]
        rows = np.concatenate(rows) if rows else np.zeros(0, np.int64)
        cols = np.concatenate(self.sets[k - 1]) if n else np.zeros(0, np.int64)
        return sp.csr_matrix((np.ones(len(rows)), (rows, cols)), shape=(n, n))


def shortest_path_sets(graph: WSIGraph, k_sp: int) -> SPNeighborhoods:
    """Breadth-first hop distances from every node, truncated at ``k_sp``."""
    if k_sp < 1:
        raise ValueError(f"K_sp must be positive, got {k_sp}")
    n = graph.num_nodes
    adj = graph.neighbors()
    sets: list[list[list[int]]] = [[[] for _ in range(n)] for _ in range(k_sp)]
    for u in range(n):
        dist = {u: 0}
        queue = deque([u])
        while queue:
            v = queue.popleft()
            d = dist[v]
            if d == k_sp:
                continue
            for w in adj[v]:
                if w not in dist:
                    dist[w] = d + 1
                    sets[d][u].append(w)
                    queue.append(w)
    return SPNeighborhoods(k_sp, [[np.array(sorted(s), dtype=np.int64) for s in level] for level in sets])


def normalized_adjacency(graph: WSIGraph, sparse: bool = False):
    """D^{-1/2} (A + I) D^{-1/2}, the symmetric GCN propagation matrix."""
    n = graph.num_nodes
    e = graph.edges
    rows = np.concatenate([e[:, 0], e[:, 1], np.arange(n)])
    cols = np.concatenate([e[:, 1], e[:, 0], np.arange(n)])
    a = sp.csr_matrix((np.ones(len(rows)), (rows, cols)), shape=(n, n))
    d = np.asarray(a.sum(axis=1)).ravel()
    inv = sp.diags(1.0 / np.sqrt(d))
    out = (inv @ a @ inv).tocsr()
    return out if sparse else out.toarray()


# ------------------------------------------------------------------ batching


@dataclass
class PreparedGraph:
    graph: WSIGraph
    adj: sp.csr_matrix
    sp_ops: list[sp.csr_matrix]


def prepare(graph: WSIGraph, k_sp: int) -> PreparedGraph:
    sets = shortest_path_sets(graph, k_sp)
    ops = [sets.indicator(k) for k in range(1, k_sp + 1)]
    return PreparedGraph(graph, normalized_adjacency(graph, sparse=True), ops)


@dataclass
class GraphBatch:
    """Several graphs stacked as one disconnected graph.

    ``pool`` averages node rows back to one row per graph; ``rows`` gives each
    node's position in the owning dataset, which is how per-node perturbations
    are looked up.
    """

    features: np.ndarray
    adj: sp.csr_matrix
    sp_ops: list[sp.csr_matrix]
    pool: sp.csr_matrix
    sizes: np.ndarray
    rows: np.ndarray
    indices: np.ndarray
    time_bins: np.ndarray | None
    censors: np.ndarray | None

    @property
    def num_graphs(self) -> int:
        return len(self.sizes)


class GraphDataset:
    """A list of graphs with cached propagation operators."""

    def __init__(self, graphs: Sequence[WSIGraph], k_sp: int):
        if not graphs:
            raise ValueError("empty dataset")
        self.graphs = list(graphs)
        self.k_sp = k_sp
        self.prepared = [prepare(g, k_sp) for g in self.graphs]
        sizes = np.array([g.num_nodes for g in self.graphs])
        self.offsets = np.concatenate([[0], np.cumsum(sizes)])
        self.feature_dim = self.graphs[0].features.shape[1]
        for g in self.graphs:
            if g.features.shape[1] != self.feature_dim:
                raise ValueError(
                    f"feature width mismatch: {g.features.shape[1]} vs {self.feature_dim}"
                )

    def __len__(self) -> int:
        return len(self.graphs)

    @property
    def total_nodes(self) -> int:
        return int(self.offsets[-1])

    @property
    def labeled(self) -> bool:
        return all(g.labeled for g in self.graphs)

    def batch(self, indices: Iterable[int] | None = None) -> GraphBatch:
        idx = np.arange(len(self)) if indices is None else np.asarray(list(indices), dtype=np.int64)
        if idx.size == 0:
            raise ValueError("empty batch")
        parts = [self.prepared[i] for i in idx]
        sizes = np.array([p.graph.num_nodes for p in parts])
        total = int(sizes.sum())
        owner = np.repeat(np.arange(len(parts)), sizes)
        pool = sp.csr_matrix(
            (1.0 / sizes[owner], (owner, np.arange(total))), shape=(len(parts), total)
        )
        rows = np.concatenate([np.arange(self.offsets[i], self.offsets[i + 1]) for i in idx])
        labeled = all(p.graph.labeled for p in parts)
        return GraphBatch(
            features=np.concatenate([p.graph.features for p in parts]),
            adj=sp.block_diag([p.adj for p in parts], format="csr"),
            sp_ops=[
                sp.block_diag([p.sp_ops[k] for p in parts], format="csr")
                for k in range(self.k_sp)
            ],
            pool=pool,
            sizes=sizes,
            rows=rows,
            indices=idx,
            time_bins=np.array([p.graph.time_bin for p in parts]) if labeled else None,
            censors=np.array([p.graph.censor for p in parts]) if labeled else None,
        )


# --------------------------------------------------------------------- files


def graph_to_dict(g: WSIGraph) -> dict:
    return {
        "domain": g.domain,
        "features": g.features.tolist(),
        "edges": g.edges.tolist(),
        "time_bin": g.time_bin,
        "censor": g.censor,
    }


def graph_from_dict(record: dict, knn_k: int = 8) -> WSIGraph:
    features = np.asarray(record["features"], dtype=np.float64)
    edges = record.get("edges")
    if edges is None:
        n = features.shape[0]
        edges = knn_graph(features, min(knn_k, n - 1)) if n > 1 else []
    return WSIGraph(
        features=features,
        edges=edges,
        time_bin=record.get("time_bin"),
        censor=record.get("censor"),
        domain=record.get("domain", "source"),
    )


def save_graphs(path: str | Path, graphs: Iterable[WSIGraph]) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        for g in graphs:
            fh.write(json.dumps(graph_to_dict(g)) + "\n")


def load_graphs(path: str | Path, knn_k: int = 8) -> list[WSIGraph]:
    graphs = []
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, 1):
            if not line.strip():
                continue
            try:
                graphs.append(graph_from_dict(json.loads(line), knn_k))
            except (KeyError, ValueError, TypeError) as exc:
                raise ValueError(f"{path}:{lineno}: {exc}") from exc
    return graphs
