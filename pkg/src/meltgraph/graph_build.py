"""k-NN scan graphs, edge labelling and the symmetric-normalised smoother."""
from __future__ import annotations

import csv
import io
from dataclasses import dataclass, field

import numpy as np
import scipy.sparse as sp

from . import kernels
from .errors import ConfigError, DataContractError
from .scan_synth import LayerScan

SAME_TRACK, ADJACENT_TRACK = 0, 1


def knn_edges(positions, k):
    """Undirected edges of the union-symmetrised k-nearest-neighbour graph.

    Returns an (E, 2) array of pairs ``u < v`` in lexicographic order.
    Distance ties go to the lower node index.
    """
    positions = np.asarray(positions, dtype=np.float64)
    n = positions.shape[0]
    if n < 2:
        raise ConfigError(f"knn_edges needs at least 2 nodes, got {n}")
    if not 1 <= k < n:
        raise ConfigError(f"k must satisfy 1 <= k < N={n}, got {k}")
    nbrs = kernels.knn(positions, k)
    src = np.repeat(np.arange(n), k)
    dst = nbrs.reshape(-1)
    pairs = np.column_stack([np.minimum(src, dst), np.maximum(src, dst)])
    return np.unique(pairs, axis=0)


def label_edges(edges, track_id):
    """0 for edges inside one track (temporal), 1 across tracks (spatial)."""
    edges = np.asarray(edges, dtype=np.int64).reshape(-1, 2)
    track_id = np.asarray(track_id)
    return (track_id[edges[:, 0]] != track_id[edges[:, 1]]).astype(np.int64)


@dataclass(frozen=True)
class SmoothingOperator:
    matrix: sp.csr_matrix
    self_loops: bool

    def __matmul__(self, z):
        return self.matrix @ z


@dataclass
class ScanGraph:
    scan: LayerScan
    edges: np.ndarray       # (E, 2) directed, both directions present
    edge_class: np.ndarray  # (E,)
    k: int = 6
    _ops: dict = field(default_factory=dict, repr=False)

    @property
    def n_nodes(self):
        return self.scan.n_nodes

    @property
    def src(self):
        return self.edges[:, 0]

    @property
    def dst(self):
        return self.edges[:, 1]

    @property
    def edge_onehot(self):
        return np.eye(2)[self.edge_class]

    @property
    def adjacency(self):
        n = self.n_nodes
        return sp.csr_matrix((np.ones(len(self.edges)), (self.src, self.dst)), shape=(n, n))

    @property
    def degree(self):
        return np.bincount(self.src, minlength=self.n_nodes)

    def operator(self, self_loops=True):
        if self_loops not in self._ops:
            self._ops[self_loops] = smoothing_operator(self, self_loops)
        return self._ops[self_loops]

    def with_scan(self, scan):
        """Same topology, different node data (e.g. permuted features)."""
        g = ScanGraph(scan, self.edges, self.edge_class, self.k)
        g._ops = self._ops
        return g


def _directed(pairs):
    both = np.concatenate([pairs, pairs[:, ::-1]], axis=0)
    order = np.lexsort((both[:, 1], both[:, 0]))
    return both[order]


def graph_from_edges(scan, pairs, k=0):
    """ScanGraph from undirected pairs (either orientation, duplicates merged)."""
    pairs = np.asarray(pairs, dtype=np.int64).reshape(-1, 2)
    pairs = pairs[pairs[:, 0] != pairs[:, 1]]
    pairs = np.unique(np.sort(pairs, axis=1), axis=0)
    edges = _directed(pairs)
    return ScanGraph(scan, edges, label_edges(edges, scan.track_id), k)


def build_graph(scan: LayerScan, k: int = 6) -> ScanGraph:
    return graph_from_edges(scan, knn_edges(scan.positions, k), k)


def smoothing_operator(graph: ScanGraph, self_loops: bool = True) -> SmoothingOperator:
    """``D^-1/2 A D^-1/2`` over the graph, with A optionally given self-loops."""
    A = graph.adjacency
    if self_loops:
        A = A + sp.identity(graph.n_nodes, format="csr")
    deg = np.asarray(A.sum(axis=1)).reshape(-1)
    if (deg == 0).any():
        isolated = np.flatnonzero(deg == 0)[:5].tolist()
        raise DataContractError(f"isolated nodes {isolated} make D^-1/2 undefined; "
                                "use self_loops=True")
    inv_sqrt = 1.0 / np.sqrt(deg)
    S = sp.diags(inv_sqrt) @ A @ sp.diags(inv_sqrt)
    S = sp.csr_matrix(S)
    S.sort_indices()
    return SmoothingOperator(S, self_loops)


def apply_smoothing(op: SmoothingOperator, z, passes: int = 1):
    z = np.asarray(z, dtype=np.float64)
    if z.shape[0] != op.matrix.shape[0]:
        raise ConfigError(f"score vector has {z.shape[0]} entries, operator is "
                          f"{op.matrix.shape[0]}x{op.matrix.shape[1]}")
    for _ in range(passes):
        z = op.matrix @ z
    return z


def edges_to_csv(graph: ScanGraph) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(("src", "dst", "class"))
    for (s, d), c in zip(graph.edges.tolist(), graph.edge_class.tolist()):
        w.writerow((s, d, c))
    return buf.getvalue()


def edges_from_csv(text: str, scan: LayerScan) -> ScanGraph:
    rows = list(csv.reader(io.StringIO(text)))
    if not rows or tuple(rows[0]) != ("src", "dst", "class"):
        raise ConfigError("edge CSV header must be src,dst,class")
    data = np.array(rows[1:], dtype=np.int64).reshape(-1, 3)
    graph = graph_from_edges(scan, data[:, :2])
    return graph
