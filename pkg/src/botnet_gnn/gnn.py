"""GCN and GAT layers over CSR graphs."""
from __future__ import annotations

from dataclasses import asdict, dataclass

import numpy as np
import scipy.sparse as sp

from . import autodiff as ad
from .autodiff import ACC, ShapeError, Tensor
from .graph import Graph
from .params import ParamStore, glorot


# sparse ops

def propagate(g: Graph, x, weights: np.ndarray | None = None) -> Tensor:
    """out_i = sum_j w_ij x_j over the CSR edges of ``g`` (w defaults to g.coefficients)."""
    x = ad.as_tensor(x)
    if weights is None:
        weights = g.coefficients
    if weights is None:
        raise ValueError("propagate: graph has no coefficients")
    if x.shape[0] != g.n_nodes:
        raise ShapeError(f"propagate: {x.shape[0]} feature rows for {g.n_nodes} nodes")
    mat = _matrix(g, weights)
    out = mat @ x.data.astype(ACC)
    return ad.make_op(out, (x,), lambda grad: x._send(mat.T @ grad))


def _matrix(g: Graph, weights: np.ndarray):
    cache = g.__dict__.setdefault("_csr_cache", {})
    key = id(weights)
    if key not in cache or cache[key][0] is not weights:
        cache[key] = (weights, g.to_scipy(weights))
    return cache[key][1]


def gather_rows(x, idx: np.ndarray) -> Tensor:
    """x[idx] along axis 0 with scatter-add backward."""
    x = ad.as_tensor(x)
    idx = np.asarray(idx, dtype=np.int64)

    def backward(grad):
        x._send(scatter_add_rows(grad, idx, x.shape[0]))

    return ad.make_op(x.data[idx], (x,), backward)


def scatter_add_rows(values: np.ndarray, idx: np.ndarray, n_rows: int) -> np.ndarray:
    """out[r] = sum of values[i] over i with idx[i] == r."""
    flat = np.asarray(values, dtype=ACC).reshape(len(idx), -1)
    sel = sp.csr_matrix((np.ones(len(idx)), (idx, np.arange(len(idx)))), shape=(n_rows, len(idx)))
    return np.asarray(sel @ flat).reshape((n_rows,) + np.shape(values)[1:])


def segment_sum(x, offsets: np.ndarray) -> Tensor:
    """Sum consecutive row segments [offsets[i], offsets[i+1]) of ``x``; empty segments give 0."""
    x = ad.as_tensor(x)
    off = np.asarray(offsets, dtype=np.int64)
    counts = np.diff(off)
    out = np.zeros((len(counts),) + x.shape[1:], dtype=ACC)
    nonempty = counts > 0
    if x.shape[0]:
        out[nonempty] = np.add.reduceat(x.data.astype(ACC), off[:-1][nonempty], axis=0)
    return ad.make_op(out, (x,), lambda grad: x._send(np.repeat(grad, counts, axis=0)))


def segment_softmax(scores, offsets: np.ndarray) -> Tensor:
    """Softmax of edge scores within each CSR row segment (per trailing column)."""
    scores = ad.as_tensor(scores)
    off = np.asarray(offsets, dtype=np.int64)
    counts = np.diff(off)
    if np.any(counts == 0):
        raise ValueError("segment_softmax: every node needs at least one edge (add self-loops)")
    s = scores.data.astype(ACC)
    seg_max = np.maximum.reduceat(s, off[:-1], axis=0)
    e = np.exp(s - np.repeat(seg_max, counts, axis=0))
    denom = np.add.reduceat(e, off[:-1], axis=0)
    alpha = e / np.repeat(denom, counts, axis=0)

    def backward(grad):
        dot = np.add.reduceat(grad * alpha, off[:-1], axis=0)
        scores._send(alpha * (grad - np.repeat(dot, counts, axis=0)))

    return ad.make_op(alpha, (scores,), backward)


# layers

def gcn_layer(x, g: Graph, w, b=None) -> Tensor:
    """out_i = sum_{j in N(i)} c_ij (x_j W) (+ b)."""
    x, w = ad.as_tensor(x), ad.as_tensor(w)
    if x.shape[1] != w.shape[0]:
        raise ShapeError(f"gcn_layer: features {x.shape} vs weight {w.shape}")
    out = propagate(g, ad.matmul(x, w))
    return out if b is None else ad.add_bias(out, b)


def gat_layer(x, g: Graph, w, a_src, a_dst, heads: int, concat: bool = True,
              slope: float = 0.2, b=None, return_attention: bool = False):
    """Multi-head graph attention.

    ``w`` is (d_in, heads*K); ``a_src``/``a_dst`` are (heads, K) halves of each
    head's attention vector, scoring the receiving node and the neighbor. Per
    head, e_ij = LeakyReLU(a_src.Wx_i + a_dst.Wx_j), alpha_ij is the softmax of
    e_ij over N(i), and out_i = sum_j alpha_ij Wx_j. Heads are concatenated or
    averaged.
    """
    x, w = ad.as_tensor(x), ad.as_tensor(w)
    a_src, a_dst = ad.as_tensor(a_src), ad.as_tensor(a_dst)
    if x.shape[1] != w.shape[0] or w.shape[1] % heads:
        raise ShapeError(f"gat_layer: features {x.shape} vs weight {w.shape} with {heads} heads")
    k = w.shape[1] // heads
    if a_src.shape != (heads, k) or a_dst.shape != (heads, k):
        raise ShapeError(f"gat_layer: attention vectors {a_src.shape}/{a_dst.shape}, expected {(heads, k)}")
    n = x.shape[0]
    if n != g.n_nodes:
        raise ShapeError(f"gat_layer: {n} feature rows for {g.n_nodes} nodes")
    h = ad.reshape(ad.matmul(x, w), (n, heads, k))
    score_src = ad.sum_(h * a_src, axis=2)  # (N, H)
    score_dst = ad.sum_(h * a_dst, axis=2)
    rows = g.rows()
    cols = g.indices.astype(np.int64)
    e = ad.leaky_relu(gather_rows(score_src, rows) + gather_rows(score_dst, cols), slope)
    alpha = segment_softmax(e, g.offsets)  # (E, H)
    msg = ad.reshape(alpha, (len(cols), heads, 1)) * gather_rows(h, cols)
    out = segment_sum(msg, g.offsets)  # (N, H, K)
    if concat:
        out = ad.reshape(out, (n, heads * k))
    else:
        out = ad.mean(out, axis=1)
    if b is not None:
        out = ad.add_bias(out, b)
    return (out, alpha.data) if return_attention else out


# models

@dataclass
class GcnConfig:
    in_dim: int = 8
    hidden: int = 16
    num_classes: int = 10
    seed: int = 0

    @property
    def dims(self) -> tuple:
        return (self.in_dim, self.hidden, self.num_classes)

    def to_dict(self) -> dict:
        return asdict(self)


@dataclass
class GatConfig:
    in_dim: int = 8
    heads: int = 2
    head_dim: int = 8
    num_classes: int = 10
    output_heads: int = 2
    slope: float = 0.2
    seed: int = 0

    @property
    def hidden(self) -> int:
        return self.heads * self.head_dim

    def to_dict(self) -> dict:
        return asdict(self)


class GcnModel:
    """Two GCN layers with ReLU between; parameters are drawn in MLP order (W1, b1, W2, b2)."""

    kind = "gcn"

    def __init__(self, config: GcnConfig, store: ParamStore | None = None):
        self.config = config
        if store is None:
            store = ParamStore()
            rng = np.random.default_rng(config.seed)
            dims = config.dims
            for i, (d_in, d_out) in enumerate(zip(dims[:-1], dims[1:])):
                store.add(f"gcn{i}.W", glorot(rng, d_in, d_out))
                store.add(f"gcn{i}.b", np.zeros(d_out))
        self.store = store

    @property
    def depth(self) -> int:
        return len(self.config.dims) - 1

    def forward(self, x, g: Graph) -> Tensor:
        h = ad.as_tensor(x)
        n_layers = len(self.config.dims) - 1
        for i in range(n_layers):
            h = gcn_layer(h, g, self.store[f"gcn{i}.W"], self.store[f"gcn{i}.b"])
            if i < n_layers - 1:
                h = ad.relu(h)
        return h


class GatModel:
    """Hidden GAT layer with concatenated heads, output layer with averaged heads."""

    kind = "gat"

    def __init__(self, config: GatConfig, store: ParamStore | None = None):
        self.config = config
        if store is None:
            store = ParamStore()
            rng = np.random.default_rng(config.seed)
            c = config
            store.add("gat0.W", glorot(rng, c.in_dim, c.heads * c.head_dim))
            store.add("gat0.a_src", glorot(rng, c.heads, c.head_dim))
            store.add("gat0.a_dst", glorot(rng, c.heads, c.head_dim))
            store.add("gat0.b", np.zeros(c.heads * c.head_dim))
            store.add("gat1.W", glorot(rng, c.hidden, c.output_heads * c.num_classes))
            store.add("gat1.a_src", glorot(rng, c.output_heads, c.num_classes))
            store.add("gat1.a_dst", glorot(rng, c.output_heads, c.num_classes))
            store.add("gat1.b", np.zeros(c.num_classes))
        self.store = store

    depth = 2

    def forward(self, x, g: Graph) -> Tensor:
        c, s = self.config, self.store
        h = gat_layer(x, g, s["gat0.W"], s["gat0.a_src"], s["gat0.a_dst"], c.heads,
                      concat=True, slope=c.slope, b=s["gat0.b"])
        h = ad.relu(h)
        return gat_layer(h, g, s["gat1.W"], s["gat1.a_src"], s["gat1.a_dst"], c.output_heads,
                         concat=False, slope=c.slope, b=s["gat1.b"])


def gnn_forward(model, x, g: Graph) -> Tensor:
    return model.forward(x, g)


def masked_cross_entropy(logits: Tensor, labels: np.ndarray, node_ids: np.ndarray) -> Tensor:
    """Cross-entropy over the listed nodes only; other labels are never read."""
    node_ids = np.asarray(node_ids, dtype=np.int64)
    return ad.cross_entropy_loss(gather_rows(logits, node_ids), np.asarray(labels)[node_ids])
