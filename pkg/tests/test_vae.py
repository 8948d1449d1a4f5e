import numpy as np
import pytest

from botnet_gnn import autodiff as ad
from botnet_gnn.autodiff import Tensor, grad_check
from botnet_gnn.dataset import Standardizer, synthetic_blobs
from botnet_gnn.params import FormatError, save_checkpoint
from botnet_gnn.vae import (VaeConfig, VaeModel, kl_divergence, load_embeddings,
                            reconstruction_loss, reparameterize, save_embeddings, train_vae)


def kl_oracle(mu, lv):
    mu, lv = np.asarray(mu, np.float64), np.asarray(lv, np.float64)
    return float(np.mean(0.5 * np.sum(mu ** 2 + np.exp(lv) - lv - 1.0, axis=1)))


@pytest.fixture(scope="module")
def blobs():
    data = synthetic_blobs(100, seed=5)
    return Standardizer.fit(data.features).transform(data.features)


def test_kl_zero_at_standard_normal():
    assert kl_divergence(np.zeros((3, 8)), np.zeros((3, 8))).item() == 0.0


def test_kl_unit_mean_is_four():
    assert kl_divergence(np.ones((1, 8)), np.zeros((1, 8))).item() == pytest.approx(4.0, abs=1e-12)


def test_kl_matches_closed_form(rng):
    for _ in range(20):
        mu = rng.uniform(-3, 3, (5, 8)).astype(np.float32)
        lv = rng.uniform(-3, 3, (5, 8)).astype(np.float32)
        assert kl_divergence(mu, lv).item() == pytest.approx(kl_oracle(mu, lv), abs=1e-5)


def test_reparameterize_examples():
    z = reparameterize(np.zeros((1, 2)), np.zeros((1, 2)), np.array([[1.0, -1.0]]))
    np.testing.assert_array_equal(z.data, [[1.0, -1.0]])
    mu = np.array([[0.3, -2.0]])
    z = reparameterize(mu, np.full((1, 2), -30.0), np.array([[1.0, 1.0]]))
    np.testing.assert_allclose(z.data, mu, atol=1e-6)


def test_reparameterize_monte_carlo_mean():
    eps = np.random.default_rng(0).standard_normal((100_000, 1))
    z = reparameterize(np.full((100_000, 1), 2.0), np.zeros((100_000, 1)), eps)
    assert abs(z.data.astype(np.float64).mean() - 2.0) < 0.02


def test_reparameterize_gradient_reaches_mu_and_logvar_only():
    mu = Tensor(np.array([[0.5]]), requires_grad=True)
    lv = Tensor(np.array([[0.2]]), requires_grad=True)
    eps = np.array([[1.5]])
    ad.sum_(reparameterize(mu, lv, eps)).backward()
    assert mu.grad[0, 0] == pytest.approx(1.0)
    assert lv.grad[0, 0] == pytest.approx(0.5 * np.exp(0.1) * 1.5, rel=1e-6)


def test_reconstruction_zero_for_perfect_output(rng):
    x = rng.standard_normal((4, 115))
    assert reconstruction_loss(x, x).item() == 0.0


def test_reconstruction_is_per_sample_squared_error(rng):
    x = rng.standard_normal((4, 115)).astype(np.float32)
    y = rng.standard_normal((4, 115)).astype(np.float32)
    expected = np.mean(np.sum((x.astype(np.float64) - y) ** 2, axis=1))
    assert reconstruction_loss(x, y).item() == pytest.approx(expected, rel=1e-9)


def test_zero_network_encodes_to_zero(rng):
    model = VaeModel(VaeConfig())
    for p in model.store:
        p.data[...] = 0
    mu, lv = model.encode(rng.standard_normal((3, 115)))
    assert not mu.data.any() and not lv.data.any()
    assert mu.shape == (3, 8) and lv.shape == (3, 8)


def test_hand_set_2_2_2_network():
    cfg = VaeConfig(input_dim=2, hidden=(2,), latent_dim=2)
    model = VaeModel(cfg)
    s = model.store
    s["enc0.W"].data[...] = [[1.0, -1.0], [2.0, 0.5]]
    s["enc0.b"].data[...] = [0.5, -3.0]
    s["mu.W"].data[...] = [[1.0, 2.0], [-1.0, 0.25]]
    s["mu.b"].data[...] = [0.1, -0.2]
    x = np.array([[1.0, 2.0]])
    # independent evaluation: h = relu(xW + b), mu = hW' + b'
    h = np.maximum(x @ np.array([[1.0, -1.0], [2.0, 0.5]]) + [0.5, -3.0], 0)
    mu_expected = h @ np.array([[1.0, 2.0], [-1.0, 0.25]]) + [0.1, -0.2]
    mu, _ = model.encode(x)
    np.testing.assert_allclose(mu.data, mu_expected, atol=1e-6)
    np.testing.assert_allclose(mu_expected, [[5.6, 10.8]], atol=1e-12)


def test_model_shapes():
    model = VaeModel(VaeConfig())
    names = model.store.names()
    assert model.store["enc0.W"].shape == (115, 64)
    assert model.store["enc1.W"].shape == (64, 32)
    assert model.store["mu.W"].shape == (32, 8)
    assert model.store["logvar.W"].shape == (32, 8)
    assert model.store[names[-2]].shape == (64, 115)
    assert model.decode(np.zeros((5, 8))).shape == (5, 115)


def test_elbo_terms_and_kl_nonnegative(rng):
    model = VaeModel(VaeConfig(seed=2))
    x = rng.standard_normal((8, 115))
    terms = model.elbo_loss(x, rng.standard_normal((8, 8)))
    assert terms.kl.item() >= 0
    assert terms.total.item() == pytest.approx(terms.recon.item() + terms.kl.item(), rel=1e-12)


def test_elbo_gradient_check(rng):
    model = VaeModel(VaeConfig(seed=1))
    x = rng.standard_normal((8, 115))
    noise = rng.standard_normal((8, 8))
    err = grad_check(lambda: model.elbo_loss(x, noise).total, list(model.store), max_coords=200)
    assert err < 1e-2


def test_training_reduces_loss(blobs):
    _, hist = train_vae(blobs, VaeConfig(epochs=20, seed=0))
    assert hist.epoch_loss[-1] < hist.epoch_loss[0]
    assert hist.epoch_recon[-1] < hist.epoch_recon[0]
    assert min(hist.epoch_kl) >= 0


def test_embed_shape_and_purity(blobs):
    model, _ = train_vae(blobs, VaeConfig(epochs=1, seed=0))
    z1 = model.embed(blobs)
    z2 = model.embed(blobs)
    assert z1.shape == (len(blobs), 8)
    np.testing.assert_array_equal(z1, z2)
    mu, _ = model.encode(blobs[:7])
    np.testing.assert_array_equal(z1[:7], mu.data)


def test_same_seed_gives_identical_checkpoints(blobs, tmp_path):
    paths = []
    for i in range(2):
        model, _ = train_vae(blobs, VaeConfig(epochs=2, seed=9))
        path = tmp_path / f"{i}.nbck"
        save_checkpoint(path, model.store, model.config.to_dict())
        paths.append(path)
    assert paths[0].read_bytes() == paths[1].read_bytes()


def test_embeddings_file_roundtrip(tmp_path, rng):
    z = rng.standard_normal((6, 8)).astype(np.float32)
    path = tmp_path / "z.nbem"
    save_embeddings(path, z)
    raw = path.read_bytes()
    assert raw[:5] == b"NBEM1" and len(raw) == 17 + 6 * 8 * 4
    np.testing.assert_array_equal(load_embeddings(path), z)
    path.write_bytes(raw[:-2])
    with pytest.raises(FormatError):
        load_embeddings(path)
