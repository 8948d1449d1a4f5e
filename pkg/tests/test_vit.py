import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from botnet_gnn import autodiff as ad
from botnet_gnn.autodiff import Tensor, grad_check
from botnet_gnn.dataset import Standardizer, split, synthetic_blobs
from botnet_gnn.training import argmax_labels
from botnet_gnn.vit import VitConfig, VitEncoder, VitMlp, patchify, scaled_dot_attention, train_vit_mlp

from oracles import unpatchify


def test_patchify_index_layout():
    patches = patchify(np.arange(115))
    assert patches.shape == (23, 5)
    np.testing.assert_array_equal(patches[0], [0, 23, 46, 69, 92])
    for j in range(23):
        np.testing.assert_array_equal(patches[j], [j, 23 + j, 46 + j, 69 + j, 92 + j])


def test_patchify_constant_input():
    np.testing.assert_array_equal(patchify(np.full(115, 3.5)), np.full((23, 5), 3.5))


def test_patchify_rejects_wrong_length():
    with pytest.raises(ValueError):
        patchify(np.zeros(114))


@settings(max_examples=50, deadline=None)
@given(arrays(np.float32, (3, 115), elements=st.floats(-1e6, 1e6, width=32)))
def test_patchify_roundtrip(x):
    np.testing.assert_array_equal(unpatchify(patchify(x)), x)
    np.testing.assert_array_equal(patchify(unpatchify(patchify(x))), patchify(x))


def test_two_patch_attention_by_hand():
    q = np.array([[1.0, 0.0], [0.0, 2.0]])
    k = np.array([[1.0, 1.0], [2.0, -1.0]])
    v = np.array([[1.0, 0.0], [0.0, 1.0]])
    out, w = scaled_dot_attention(Tensor(q), Tensor(k), Tensor(v))
    # independent evaluation of softmax(q k^T / sqrt(2))
    scores = [[1.0 / math.sqrt(2), 2.0 / math.sqrt(2)], [2.0 / math.sqrt(2), -2.0 / math.sqrt(2)]]
    expected = []
    for row in scores:
        e = [math.exp(s) for s in row]
        expected.append([x / sum(e) for x in e])
    np.testing.assert_allclose(w.data, expected, atol=1e-7)
    np.testing.assert_allclose(out.data, expected, atol=1e-7)


def test_zero_value_path_leaves_class_token():
    cfg = VitConfig(heads=1, layers=1, seed=3)
    enc = VitEncoder(cfg)
    s = enc.store
    for name in ("block0.v.W", "block0.v.b", "block0.o.W", "block0.o.b",
                 "block0.ffn2.W", "block0.ffn2.b"):
        s[name].data[...] = 0
    x = np.random.default_rng(0).standard_normal((4, 115))
    out = enc.forward(x).data
    cls_state = s["cls"].data[0, 0].astype(np.float64) + s["pos"].data[0, 0]
    expected = cls_state @ s["out.W"].data.astype(np.float64) + s["out.b"].data
    np.testing.assert_allclose(out, np.tile(expected, (4, 1)), atol=1e-6)


def test_attention_rows_sum_to_one():
    enc = VitEncoder(VitConfig(seed=1))
    enc.forward(np.random.default_rng(1).standard_normal((3, 115)) * 5)
    assert len(enc.last_attention) == 2
    for w in enc.last_attention:
        assert w.shape == (3, 2, 24, 24)
        np.testing.assert_allclose(w.astype(np.float64).sum(axis=-1), 1.0, atol=1e-6)


def test_scores_scaled_by_head_dim():
    # d=16, h=2: head width 8, so a unit dot product scores 1/sqrt(8)
    q = np.zeros((1, 2, 8))
    q[0, 0, 0] = 1.0
    k = np.zeros((1, 2, 8))
    k[0, 0, 0] = 1.0
    _, w = scaled_dot_attention(Tensor(q), Tensor(k), Tensor(np.zeros((1, 2, 8))))
    s = 1.0 / math.sqrt(8)
    e = math.exp(s) / (math.exp(s) + 1.0)
    np.testing.assert_allclose(w.data[0, 0], [e, 1 - e], atol=1e-7)


@pytest.mark.parametrize("batch", [1, 5, 17])
def test_output_shapes(batch):
    cfg = VitConfig()
    x = np.random.default_rng(batch).standard_normal((batch, 115))
    assert VitEncoder(cfg).forward(x).shape == (batch, 8)
    assert VitMlp(cfg, 10).forward(x).shape == (batch, 10)


def test_parameter_layout():
    s = VitEncoder(VitConfig()).store
    assert s["patch.W"].shape == (5, 16)
    assert s["cls"].shape == (1, 1, 16)
    assert s["pos"].shape == (1, 24, 16)
    assert s["out.W"].shape == (16, 8)


def test_grad_check_encoder_layer_and_head():
    cfg = VitConfig(layers=1, seed=4)
    model = VitMlp(cfg, 3)
    rng = np.random.default_rng(4)
    x = rng.standard_normal((4, 115))
    y = rng.integers(0, 3, 4)
    err = grad_check(lambda: ad.cross_entropy_loss(model.forward(x), y), list(model.store))
    assert err < 1e-2


def test_training_reruns_identical_loss_curve():
    data = synthetic_blobs(40, seed=2)
    x = Standardizer.fit(data.features).transform(data.features)
    cfg = VitConfig(epochs=2, seed=6)
    _, h1 = train_vit_mlp(x, data.labels.astype(np.int64), cfg, 3)
    _, h2 = train_vit_mlp(x, data.labels.astype(np.int64), cfg, 3)
    assert h1.train_loss == h2.train_loss
    assert h1.val_loss == h2.val_loss


@pytest.mark.slow
def test_vit_mlp_separates_blobs():
    data = synthetic_blobs(250, seed=11)
    s = split(len(data), seed=1)
    std = Standardizer.fit(data.features[s.train_idx])
    x = std.transform(data.features)
    y = data.labels.astype(np.int64)
    model, _ = train_vit_mlp(x, y, VitConfig(seed=0), 3, train_ids=s.train_idx)
    with ad.no_grad():
        pred = argmax_labels(model.forward(x[s.test_idx]).data)
    assert np.mean(pred == y[s.test_idx]) >= 0.95
