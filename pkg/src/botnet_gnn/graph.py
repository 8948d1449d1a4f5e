"""Exact kNN graphs over latent embeddings, stored in CSR form."""
from __future__ import annotations

import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np
import scipy.sparse as sp

from .params import FormatError

GRAPH_MAGIC = b"NBGR1"
FLAG_SYMMETRIZED = 1
FLAG_SELF_LOOPS = 2
FLAG_COEFFICIENTS = 4

# bound on the (query block x N) distance buffer, in float64 entries
_BLOCK_ENTRIES = 1 << 17


@dataclass
class Graph:
    n_nodes: int
    offsets: np.ndarray  # (N+1,) uint64
    indices: np.ndarray  # (E,) uint64, ascending within each row
    symmetrized: bool = False
    self_loops: bool = False
    coefficients: np.ndarray | None = None  # (E,) float32

    @property
    def n_edges(self) -> int:
        return int(self.indices.size)

    def rows(self) -> np.ndarray:
        """Source node of every edge, aligned with ``indices``."""
        return np.repeat(np.arange(self.n_nodes, dtype=np.int64), np.diff(self.offsets).astype(np.int64))

    def degrees(self) -> np.ndarray:
        return np.diff(self.offsets).astype(np.int64)

    def neighbors(self, i: int) -> np.ndarray:
        return self.indices[self.offsets[i]:self.offsets[i + 1]].astype(np.int64)

    def edge_set(self) -> set:
        return set(zip(self.rows().tolist(), self.indices.astype(np.int64).tolist()))

    def to_scipy(self, weights: np.ndarray | None = None) -> sp.csr_matrix:
        data = np.ones(self.n_edges) if weights is None else np.asarray(weights, dtype=np.float64)
        return sp.csr_matrix((data, self.indices.astype(np.int64), self.offsets.astype(np.int64)),
                             shape=(self.n_nodes, self.n_nodes))

    def validate(self) -> None:
        """Assert CSR well-formedness and the flag invariants."""
        off = self.offsets.astype(np.int64)
        assert off.shape == (self.n_nodes + 1,) and off[0] == 0, "bad offsets header"
        assert np.all(np.diff(off) >= 0), "offsets decrease"
        assert off[-1] == self.n_edges, "last offset != E"
        idx = self.indices.astype(np.int64)
        if idx.size:
            assert idx.min() >= 0 and idx.max() < self.n_nodes, "column index out of range"
        rows = self.rows()
        same_row = rows[1:] == rows[:-1]
        assert np.all(idx[1:][same_row] > idx[:-1][same_row]), "row not strictly ascending"
        if self.symmetrized:
            codes = rows * self.n_nodes + idx
            rev = idx * self.n_nodes + rows
            assert np.array_equal(np.sort(codes), np.sort(rev)), "not symmetric"
        if self.self_loops:
            assert np.isin(np.arange(self.n_nodes) * (self.n_nodes + 1), rows * self.n_nodes + idx).all(), \
                "missing self-loop"
        if self.coefficients is not None:
            assert self.coefficients.shape == (self.n_edges,), "coefficient count != E"


def from_edges(n_nodes: int, src: np.ndarray, dst: np.ndarray, **flags) -> Graph:
    """Build a CSR graph from an edge list, dropping duplicates."""
    src = np.asarray(src, dtype=np.int64)
    dst = np.asarray(dst, dtype=np.int64)
    codes = np.unique(src * n_nodes + dst)
    rows, cols = np.divmod(codes, n_nodes)
    counts = np.bincount(rows, minlength=n_nodes)
    offsets = np.concatenate([[0], np.cumsum(counts)]).astype(np.uint64)
    return Graph(n_nodes, offsets, cols.astype(np.uint64), **flags)


def _sq_distances(queries: np.ndarray, points_t: np.ndarray, out: np.ndarray,
                  buf: np.ndarray) -> np.ndarray:
    # accumulate dimension by dimension in float64 so every block sums in the same order
    for j in range(points_t.shape[0]):
        np.subtract(queries[:, j, None], points_t[j][None, :], out=buf)
        np.multiply(buf, buf, out=buf)
        if j == 0:
            out[...] = buf
        else:
            np.add(out, buf, out=out)
    return out


def knn_indices(points: np.ndarray, k: int = 3) -> np.ndarray:
    """(N, k) neighbor ids per node, ascending by id, excluding the node itself.

    The k nearest by Euclidean distance are chosen with ties going to the
    smaller index.
    """
    pts = np.asarray(points, dtype=np.float64)
    n = len(pts)
    if n <= k:
        raise ValueError(f"kNN needs more than k={k} points, got {n}")
    if not np.isfinite(pts).all():
        raise ValueError("kNN input contains non-finite values")
    pts_t = np.ascontiguousarray(pts.T)
    block = max(1, _BLOCK_ENTRIES // n)
    out = np.empty((block, n))
    buf = np.empty((block, n))
    result = np.empty((n, k), dtype=np.int64)
    for lo in range(0, n, block):
        hi = min(n, lo + block)
        m = hi - lo
        d = _sq_distances(pts[lo:hi], pts_t, out[:m], buf[:m])
        d[np.arange(m), np.arange(lo, hi)] = np.inf
        kth = np.partition(d, k - 1, axis=1)[:, k - 1:k]
        # every row has at least k candidates; rank them by (distance, index)
        rows, cols = np.nonzero(d <= kth)
        order = np.lexsort((cols, d[rows, cols], rows))
        rows, cols = rows[order], cols[order]
        first = np.searchsorted(rows, np.arange(m))
        picked = cols[first[:, None] + np.arange(k)]
        result[lo:hi] = np.sort(picked, axis=1)
    return result


def build_knn(embeddings: np.ndarray, k: int = 3) -> Graph:
    """Directed graph with an edge from each node to its k nearest neighbors."""
    nbrs = knn_indices(embeddings, k)
    n = len(nbrs)
    offsets = (np.arange(n + 1, dtype=np.uint64) * np.uint64(k))
    return Graph(n, offsets, nbrs.reshape(-1).astype(np.uint64))


def symmetrize(g: Graph) -> Graph:
    rows = g.rows()
    cols = g.indices.astype(np.int64)
    return from_edges(g.n_nodes, np.concatenate([rows, cols]), np.concatenate([cols, rows]),
                      symmetrized=True, self_loops=g.self_loops)


def add_self_loops(g: Graph) -> Graph:
    loops = np.arange(g.n_nodes, dtype=np.int64)
    return from_edges(g.n_nodes, np.concatenate([g.rows(), loops]),
                      np.concatenate([g.indices.astype(np.int64), loops]),
                      symmetrized=g.symmetrized, self_loops=True)


def gcn_coefficients(g: Graph) -> Graph:
    """Attach c_ij = 1 / sqrt(deg_i * deg_j), degrees counted on ``g`` as given."""
    deg = g.degrees().astype(np.float64)
    rows = g.rows()
    cols = g.indices.astype(np.int64)
    with np.errstate(divide="ignore"):
        coef = 1.0 / np.sqrt(deg[rows] * deg[cols])
    return Graph(g.n_nodes, g.offsets, g.indices, g.symmetrized, g.self_loops,
                 coef.astype(np.float32))


def prepare_for_gnn(g: Graph) -> Graph:
    return gcn_coefficients(add_self_loops(symmetrize(g)))


def khop_nodes(g: Graph, seeds: np.ndarray, hops: int) -> np.ndarray:
    """Sorted ids of every node within ``hops`` edges of ``seeds`` (following out-edges)."""
    mask = np.zeros(g.n_nodes, dtype=bool)
    mask[np.asarray(seeds, dtype=np.int64)] = True
    adj = g.__dict__.get("_pattern")
    if adj is None:
        adj = g.to_scipy().astype(bool)
        g.__dict__["_pattern"] = adj
    for _ in range(hops):
        reached = adj[np.flatnonzero(mask)].indices
        if np.all(mask[reached]):
            break
        mask[reached] = True
    return np.flatnonzero(mask)


def induced_subgraph(g: Graph, nodes: np.ndarray) -> Graph:
    """Edges of ``g`` among ``nodes`` (sorted), relabelled 0..len-1, coefficients kept.

    Boundary nodes lose the edges that leave the set, so only rows whose full
    neighbourhood lies inside ``nodes`` keep their original aggregation.
    """
    nodes = np.asarray(nodes, dtype=np.int64)
    edge_ids = sp.csr_matrix((np.arange(1, g.n_edges + 1, dtype=np.float64),
                              g.indices.astype(np.int64), g.offsets.astype(np.int64)),
                             shape=(g.n_nodes, g.n_nodes))
    sub = edge_ids[nodes][:, nodes].tocsr()
    sub.sort_indices()
    picked = sub.data.astype(np.int64) - 1
    coef = None if g.coefficients is None else g.coefficients[picked]
    return Graph(len(nodes), sub.indptr.astype(np.uint64), sub.indices.astype(np.uint64),
                 symmetrized=False, self_loops=g.self_loops, coefficients=coef)


def edgeless_graph(n_nodes: int) -> Graph:
    """Self-loops only; GCN propagation through it is the identity."""
    g = from_edges(n_nodes, np.empty(0), np.empty(0), symmetrized=True)
    return gcn_coefficients(add_self_loops(g))


@dataclass
class TransductiveGraph:
    graph: Graph
    train_mask: np.ndarray
    test_mask: np.ndarray


def assemble_transductive(train_embeds: np.ndarray, test_embeds: np.ndarray,
                          k: int = 3) -> TransductiveGraph:
    """One kNN graph over train rows followed by test rows."""
    z = np.concatenate([train_embeds, test_embeds])
    n_train = len(train_embeds)
    train_mask = np.zeros(len(z), dtype=bool)
    train_mask[:n_train] = True
    return TransductiveGraph(prepare_for_gnn(build_knn(z, k)), train_mask, ~train_mask)


def save_graph(path, g: Graph) -> None:
    flags = (FLAG_SYMMETRIZED * g.symmetrized) | (FLAG_SELF_LOOPS * g.self_loops) \
        | (FLAG_COEFFICIENTS * (g.coefficients is not None))
    with open(path, "wb") as fh:
        fh.write(GRAPH_MAGIC)
        fh.write(struct.pack("<QQB", g.n_nodes, g.n_edges, flags))
        fh.write(np.ascontiguousarray(g.offsets, dtype="<u8").tobytes())
        fh.write(np.ascontiguousarray(g.indices, dtype="<u8").tobytes())
        if g.coefficients is not None:
            fh.write(np.ascontiguousarray(g.coefficients, dtype="<f4").tobytes())


def load_graph(path) -> Graph:
    raw = Path(path).read_bytes()
    if raw[:5] != GRAPH_MAGIC:
        raise FormatError(f"{path}: not an NBGR1 graph file")
    n, e, flags = struct.unpack_from("<QQB", raw, 5)
    pos = 5 + 17
    offsets = np.frombuffer(raw, dtype="<u8", count=n + 1, offset=pos).astype(np.uint64)
    pos += 8 * (n + 1)
    indices = np.frombuffer(raw, dtype="<u8", count=e, offset=pos).astype(np.uint64)
    pos += 8 * e
    coef = None
    if flags & FLAG_COEFFICIENTS:
        coef = np.frombuffer(raw, dtype="<f4", count=e, offset=pos).astype(np.float32)
        pos += 4 * e
    if pos != len(raw):
        raise FormatError(f"{path}: size does not match header")
    return Graph(int(n), offsets, indices, bool(flags & FLAG_SYMMETRIZED),
                 bool(flags & FLAG_SELF_LOOPS), coef)
