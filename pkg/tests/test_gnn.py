import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from botnet_gnn import autodiff as ad
from botnet_gnn.autodiff import Tensor, grad_check
from botnet_gnn.gnn import (GatConfig, GatModel, GcnConfig, GcnModel, gat_layer, gcn_layer,
                            gnn_forward, masked_cross_entropy, segment_softmax)
from botnet_gnn.graph import (build_knn, edgeless_graph, from_edges, induced_subgraph, khop_nodes,
                              prepare_for_gnn)
from botnet_gnn.training import MlpHead

from oracles import gat_dense, normalized_adjacency


def random_graph(n, p, rng):
    a = rng.random((n, n)) < p
    np.fill_diagonal(a, False)
    src, dst = np.nonzero(a)
    return prepare_for_gnn(from_edges(n, src, dst)), a.astype(float)


def loops_mask(a):
    m = np.minimum(a + a.T, 1.0)
    np.fill_diagonal(m, 1.0)
    return m


def test_gcn_edgeless_is_dense_layer(rng):
    x = rng.standard_normal((5, 4)).astype(np.float32)
    w = rng.standard_normal((4, 3)).astype(np.float32)
    out = gcn_layer(x, edgeless_graph(5), w).data
    np.testing.assert_allclose(out, x.astype(np.float64) @ w, atol=1e-6)


def test_gcn_path_graph_identity_weight(rng):
    g = prepare_for_gnn(from_edges(3, [0, 1], [1, 2]))
    x = rng.standard_normal((3, 3)).astype(np.float32)
    a = np.array([[0, 1, 0], [1, 0, 1], [0, 1, 0]], float)
    np.testing.assert_allclose(gcn_layer(x, g, np.eye(3)).data, normalized_adjacency(a) @ x,
                               atol=1e-5)


def test_gcn_zero_weight(rng):
    g, _ = random_graph(6, 0.3, rng)
    assert not gcn_layer(rng.standard_normal((6, 4)), g, np.zeros((4, 2))).data.any()


def test_gcn_dimension_mismatch(rng):
    with pytest.raises(ad.ShapeError):
        gcn_layer(np.zeros((3, 4)), edgeless_graph(3), np.zeros((5, 2)))


@settings(max_examples=40, deadline=None)
@given(n=st.integers(1, 64), p=st.floats(0, 0.3), seed=st.integers(0, 2**31))
def test_gcn_matches_dense_oracle(n, p, seed):
    rng = np.random.default_rng(seed)
    g, a = random_graph(n, p, rng)
    x = rng.standard_normal((n, 8)).astype(np.float32)
    w = rng.standard_normal((8, 5)).astype(np.float32)
    expected = normalized_adjacency(a) @ x.astype(np.float64) @ w
    np.testing.assert_allclose(gcn_layer(x, g, w).data, expected, atol=1e-5)


def test_gat_isolated_node_returns_projection(rng):
    g = edgeless_graph(3)
    x = rng.standard_normal((3, 4)).astype(np.float32)
    w = rng.standard_normal((4, 6)).astype(np.float32)
    a = rng.standard_normal((2, 3))
    out, alpha = gat_layer(x, g, w, a, a, heads=2, concat=True, return_attention=True)
    np.testing.assert_array_equal(alpha, np.ones((3, 2)))
    np.testing.assert_array_equal(out.data, ad.matmul(x, w).data)


def test_gat_uniform_features_give_uniform_attention(rng):
    g, _ = random_graph(8, 0.4, rng)
    x = np.tile(rng.standard_normal((1, 4)), (8, 1))
    w = rng.standard_normal((4, 6))
    _, alpha = gat_layer(x, g, w, rng.standard_normal((2, 3)), rng.standard_normal((2, 3)),
                         heads=2, return_attention=True)
    deg = g.degrees()
    expected = np.repeat(1.0 / deg, deg)[:, None]
    np.testing.assert_allclose(alpha, np.broadcast_to(expected, alpha.shape), atol=1e-6)


def test_gat_two_node_toy_by_hand():
    g = prepare_for_gnn(from_edges(2, [0], [1]))
    x = np.array([[1.0, 0.0], [0.0, 1.0]])
    w = np.array([[1.0], [2.0]])
    a_src, a_dst = np.array([[0.5]]), np.array([[-1.0]])
    out, alpha = gat_layer(x, g, w, a_src, a_dst, heads=1, return_attention=True)
    # Wx = (1, 2); e_ij = LeakyReLU(0.5*Wx_i - Wx_j)
    def lrelu(v):
        return v if v > 0 else 0.2 * v
    e = {(i, j): lrelu(0.5 * [1, 2][i] - [1, 2][j]) for i in range(2) for j in range(2)}
    a0 = np.exp([e[0, 0], e[0, 1]]) / np.exp([e[0, 0], e[0, 1]]).sum()
    a1 = np.exp([e[1, 0], e[1, 1]]) / np.exp([e[1, 0], e[1, 1]]).sum()
    np.testing.assert_allclose(alpha[:, 0], np.concatenate([a0, a1]), atol=1e-7)
    np.testing.assert_allclose(out.data[:, 0], [a0 @ [1, 2], a1 @ [1, 2]], atol=1e-6)


@settings(max_examples=30, deadline=None)
@given(n=st.integers(1, 40), p=st.floats(0, 0.4), heads=st.integers(1, 3),
       concat=st.booleans(), seed=st.integers(0, 2**31))
def test_gat_matches_dense_oracle(n, p, heads, concat, seed):
    rng = np.random.default_rng(seed)
    g, a = random_graph(n, p, rng)
    x = rng.standard_normal((n, 5)).astype(np.float32)
    w = rng.standard_normal((5, heads * 4)).astype(np.float32)
    a_src = rng.standard_normal((heads, 4)).astype(np.float32)
    a_dst = rng.standard_normal((heads, 4)).astype(np.float32)
    out, alpha = gat_layer(x, g, w, a_src, a_dst, heads, concat=concat, return_attention=True)
    ref_out, ref_alpha = gat_dense(x, w.astype(np.float64), a_src.astype(np.float64),
                                   a_dst.astype(np.float64), loops_mask(a), heads, concat)
    rows, cols = g.rows(), g.indices.astype(np.int64)
    np.testing.assert_allclose(alpha, ref_alpha[:, rows, cols].T, atol=1e-6)
    np.testing.assert_allclose(out.data, ref_out, atol=1e-5)
    sums = np.add.reduceat(alpha, g.offsets[:-1].astype(np.int64), axis=0)
    np.testing.assert_allclose(sums, 1.0, atol=1e-6)


def test_segment_softmax_requires_nonempty_rows():
    with pytest.raises(ValueError):
        segment_softmax(np.zeros((2, 1)), np.array([0, 2, 2]))


def permuted_graph(g, a, perm):
    inv = np.argsort(perm)
    n = len(perm)
    src, dst = np.nonzero(a)
    return prepare_for_gnn(from_edges(n, inv[src], inv[dst]))


@settings(max_examples=20, deadline=None)
@given(n=st.integers(2, 32), seed=st.integers(0, 2**31))
def test_permutation_equivariance(n, seed):
    rng = np.random.default_rng(seed)
    g, a = random_graph(n, 0.2, rng)
    perm = rng.permutation(n)  # new node i is old node perm[i]
    gp = permuted_graph(g, a, perm)
    x = rng.standard_normal((n, 8)).astype(np.float32)
    gcn = GcnModel(GcnConfig(num_classes=4, seed=seed % 1000))
    gat = GatModel(GatConfig(num_classes=4, seed=seed % 1000))
    for model in (gcn, gat):
        out = gnn_forward(model, x, g).data
        out_p = gnn_forward(model, x[perm], gp).data
        np.testing.assert_allclose(out_p, out[perm], atol=1e-5)


def test_gnn_logits_shape(rng):
    g, _ = random_graph(12, 0.2, rng)
    x = rng.standard_normal((12, 8))
    assert GcnModel(GcnConfig()).forward(x, g).shape == (12, 10)
    assert GatModel(GatConfig()).forward(x, g).shape == (12, 10)
    assert GatModel(GatConfig()).store["gat0.W"].shape == (8, 16)


def test_grad_check_two_layer_gcn(rng):
    g, _ = random_graph(16, 0.2, rng)
    model = GcnModel(GcnConfig(num_classes=3, seed=1))
    x = rng.standard_normal((16, 8))
    y = rng.integers(0, 3, 16)
    ids = np.arange(10)
    err = grad_check(lambda: masked_cross_entropy(model.forward(x, g), y, ids), list(model.store))
    assert err < 1e-2


def test_grad_check_one_layer_gat(rng):
    g, _ = random_graph(16, 0.2, rng)
    w = Tensor(rng.standard_normal((8, 6)) * 0.5, requires_grad=True)
    a_src = Tensor(rng.standard_normal((2, 3)), requires_grad=True)
    a_dst = Tensor(rng.standard_normal((2, 3)), requires_grad=True)
    x = Tensor(rng.standard_normal((16, 8)), requires_grad=True)
    y = rng.integers(0, 3, 16)

    def f():
        return ad.cross_entropy_loss(gat_layer(x, g, w, a_src, a_dst, 2, concat=False), y)

    assert grad_check(f, [w, a_src, a_dst, x]) < 1e-2


def test_edgeless_gcn_equals_mlp(rng):
    x = rng.standard_normal((20, 8)).astype(np.float32)
    gcn = GcnModel(GcnConfig(hidden=32, num_classes=10, seed=[4, 3]))
    mlp = MlpHead(8, 32, 10, seed=[4, 3])
    for (gn, gp), (mn, mp) in zip(gcn.store.params.items(), mlp.store.params.items()):
        np.testing.assert_array_equal(gp.data, mp.data)
    np.testing.assert_allclose(gcn.forward(x, edgeless_graph(20)).data, mlp.forward(x).data,
                               atol=1e-5)


def test_masked_loss_ignores_unlisted_labels(rng):
    g, _ = random_graph(10, 0.3, rng)
    logits = GcnModel(GcnConfig(num_classes=3)).forward(rng.standard_normal((10, 8)), g)
    y = rng.integers(0, 3, 10)
    ids = np.arange(6)
    y2 = y.copy()
    y2[6:] = rng.permutation(y[6:])
    y3 = y.copy()
    y3[6:] = -5
    base = masked_cross_entropy(logits, y, ids).item()
    assert masked_cross_entropy(logits, y2, ids).item() == base
    assert masked_cross_entropy(logits, y3, ids).item() == base


@pytest.mark.parametrize("model", [GcnModel(GcnConfig(in_dim=8, num_classes=4, seed=1)),
                                   GatModel(GatConfig(in_dim=8, num_classes=4, seed=1))])
def test_receptive_field_subgraph_gives_same_logits(model):
    rng = np.random.default_rng(3)
    z = rng.standard_normal((300, 8)).astype(np.float32)
    g = prepare_for_gnn(build_knn(z, 3))
    full = model.forward(z, g).data
    ids = rng.choice(300, 20, replace=False)
    nodes = khop_nodes(g, ids, model.depth)
    assert len(nodes) < 300
    sub = induced_subgraph(g, nodes)
    sub.validate()
    out = model.forward(z[nodes], sub).data[np.searchsorted(nodes, ids)]
    np.testing.assert_allclose(out, full[ids], rtol=0, atol=1e-6)


def test_khop_nodes_on_a_path():
    g = prepare_for_gnn(from_edges(6, [0, 1, 2, 3, 4], [1, 2, 3, 4, 5]))
    np.testing.assert_array_equal(khop_nodes(g, [0], 2), [0, 1, 2])
    np.testing.assert_array_equal(khop_nodes(g, [3], 1), [2, 3, 4])
    np.testing.assert_array_equal(khop_nodes(g, [0], 10), np.arange(6))
