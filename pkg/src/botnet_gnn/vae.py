"""Variational autoencoder projecting standardized flows to an 8-dim latent space."""
from __future__ import annotations

import logging
import struct
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .params import FormatError, ParamStore, adam_step, dense, init_dense

log = logging.getLogger(__name__)


@dataclass
class VaeConfig:
    input_dim: int = 115
    hidden: tuple = (64, 32)
    latent_dim: int = 8
    beta: float = 1.0
    epochs: int = 20
    batch_size: int = 128
    lr: float = 0.001
    seed: int = 0

    def __post_init__(self):
        self.hidden = tuple(int(h) for h in self.hidden)
        if min((self.input_dim, self.latent_dim) + self.hidden) <= 0:
            raise ValueError("layer widths must be positive")

    def to_dict(self) -> dict:
        d = asdict(self)
        d["hidden"] = list(self.hidden)
        return d


@dataclass
class ElboTerms:
    recon: Tensor
    kl: Tensor
    total: Tensor


class VaeModel:
    """Shared ReLU trunk with mu / logvar heads and a mirrored decoder."""

    def __init__(self, config: VaeConfig, store: ParamStore | None = None):
        self.config = config
        if store is None:
            store = ParamStore()
            rng = np.random.default_rng(config.seed)
            widths = (config.input_dim,) + config.hidden
            for i, (d_in, d_out) in enumerate(zip(widths[:-1], widths[1:])):
                init_dense(store, f"enc{i}", d_in, d_out, rng)
            init_dense(store, "mu", widths[-1], config.latent_dim, rng)
            init_dense(store, "logvar", widths[-1], config.latent_dim, rng)
            dec = (config.latent_dim,) + tuple(reversed(config.hidden)) + (config.input_dim,)
            for i, (d_in, d_out) in enumerate(zip(dec[:-1], dec[1:])):
                init_dense(store, f"dec{i}", d_in, d_out, rng)
        self.store = store

    def encode(self, x) -> tuple[Tensor, Tensor]:
        h = ad.as_tensor(x)
        for i in range(len(self.config.hidden)):
            h = ad.relu(dense(self.store, f"enc{i}", h))
        return dense(self.store, "mu", h), dense(self.store, "logvar", h)

    def decode(self, z) -> Tensor:
        h = ad.as_tensor(z)
        n = len(self.config.hidden) + 1
        for i in range(n):
            h = dense(self.store, f"dec{i}", h)
            if i < n - 1:
                h = ad.relu(h)
        return h

    def elbo_loss(self, x, noise: np.ndarray) -> ElboTerms:
        """Negative ELBO pieces for a batch, with the Gaussian noise supplied."""
        x = ad.as_tensor(x)
        mu, logvar = self.encode(x)
        z = reparameterize(mu, logvar, noise)
        recon = reconstruction_loss(self.decode(z), x)
        kl = kl_divergence(mu, logvar)
        total = recon + ad.scale(kl, self.config.beta)
        return ElboTerms(recon, kl, total)

    def embed(self, rows: np.ndarray, batch_size: int = 4096) -> np.ndarray:
        """Posterior means (no sampling) for every row."""
        out = np.empty((len(rows), self.config.latent_dim), dtype=np.float32)
        with ad.no_grad():
            for lo in range(0, len(rows), batch_size):
                mu, _ = self.encode(rows[lo:lo + batch_size])
                out[lo:lo + batch_size] = mu.data
        return out


def reparameterize(mu, logvar, noise) -> Tensor:
    """z = mu + exp(logvar / 2) * noise; noise is a constant, so no gradient reaches it."""
    mu, logvar = ad.as_tensor(mu), ad.as_tensor(logvar)
    noise = np.asarray(noise)
    if not (mu.shape == logvar.shape == noise.shape):
        raise ad.ShapeError(f"reparameterize: shapes {mu.shape}, {logvar.shape}, {noise.shape}")
    return mu + ad.exp(ad.scale(logvar, 0.5)) * ad.Tensor(noise)


def kl_divergence(mu, logvar) -> Tensor:
    """Batch mean of KL(N(mu, e^logvar) || N(0, I)), summed over latent dims."""
    mu, logvar = ad.as_tensor(mu), ad.as_tensor(logvar)
    per = mu * mu + ad.exp(logvar) - logvar
    n = mu.shape[0]
    return ad.scale(ad.sum_(per) - float(per.data.size), 0.5 / n)


def reconstruction_loss(x_hat, x) -> Tensor:
    """Squared error summed over features, averaged over the batch."""
    x_hat, x = ad.as_tensor(x_hat), ad.as_tensor(x)
    return ad.scale(ad.mse_loss(x_hat, x), float(x.shape[-1]))


@dataclass
class VaeHistory:
    epoch_loss: list = field(default_factory=list)
    epoch_recon: list = field(default_factory=list)
    epoch_kl: list = field(default_factory=list)


def train_vae(rows: np.ndarray, config: VaeConfig) -> tuple[VaeModel, VaeHistory]:
    """Mini-batch Adam on the negative ELBO; labels are never seen."""
    model = VaeModel(config)
    rng = np.random.default_rng([config.seed, 1])
    history = VaeHistory()
    n = len(rows)
    for epoch in range(config.epochs):
        perm = rng.permutation(n)
        tot = rec = kl = 0.0
        for lo in range(0, n, config.batch_size):
            idx = perm[lo:lo + config.batch_size]
            noise = rng.standard_normal((len(idx), config.latent_dim))
            terms = model.elbo_loss(rows[idx], noise)
            if terms.kl.item() < -1e-9:
                raise FloatingPointError(f"negative KL {terms.kl.item()} at epoch {epoch}")
            if not np.isfinite(terms.total.item()):
                raise FloatingPointError(f"non-finite VAE loss at epoch {epoch}")
            terms.total.backward()
            adam_step(model.store, lr=config.lr)
            w = len(idx) / n
            tot += w * terms.total.item()
            rec += w * terms.recon.item()
            kl += w * terms.kl.item()
        history.epoch_loss.append(tot)
        history.epoch_recon.append(rec)
        history.epoch_kl.append(kl)
        log.info("vae epoch %d/%d loss %.5f recon %.5f kl %.5f",
                 epoch + 1, config.epochs, tot, rec, kl)
    return model, history


EMBED_MAGIC = b"NBEM1"


def save_embeddings(path, z: np.ndarray) -> None:
    z = np.ascontiguousarray(z, dtype="<f4")
    with open(path, "wb") as fh:
        fh.write(EMBED_MAGIC)
        fh.write(struct.pack("<QI", z.shape[0], z.shape[1]))
        fh.write(z.tobytes())


def load_embeddings(path) -> np.ndarray:
    raw = Path(path).read_bytes()
    if raw[:5] != EMBED_MAGIC:
        raise FormatError(f"{path}: not an NBEM1 embeddings file")
    n, dim = struct.unpack_from("<QI", raw, 5)
    if len(raw) != 17 + 4 * n * dim:
        raise FormatError(f"{path}: size does not match header ({n} x {dim})")
    return np.frombuffer(raw, dtype="<f4", count=n * dim, offset=17).reshape(n, dim).astype(np.float32)
