"""Vision-Transformer encoder over flows reshaped as 5x23 single-channel images.

Each 115-vector is laid out row-major as a 5x23 image and cut into 23 column
patches of 5 values. Blocks are residual-only (no layer normalization).
"""
from __future__ import annotations

import math
from dataclasses import asdict, dataclass

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .params import ParamStore, dense, init_dense
from .training import MlpHead, TrainHistory, TrainHyper, fit_classifier


@dataclass
class VitConfig:
    image_rows: int = 5
    image_cols: int = 23
    embed_dim: int = 16
    heads: int = 2
    layers: int = 2
    ffn_hidden: int = 32
    output_dim: int = 8
    epochs: int = 20
    batch_size: int = 128
    lr: float = 0.001
    seed: int = 0

    def __post_init__(self):
        if self.embed_dim % self.heads:
            raise ValueError(f"embed_dim {self.embed_dim} not divisible by heads {self.heads}")

    @property
    def n_features(self) -> int:
        return self.image_rows * self.image_cols

    @property
    def n_patches(self) -> int:
        return self.image_cols

    @property
    def patch_dim(self) -> int:
        return self.image_rows

    def to_dict(self) -> dict:
        return asdict(self)


def patchify(x: np.ndarray, rows: int = 5, cols: int = 23) -> np.ndarray:
    """(..., rows*cols) -> (..., cols, rows); patch j is image column j."""
    x = np.asarray(x)
    if x.shape[-1] != rows * cols:
        raise ValueError(f"patchify: expected {rows * cols} features, got {x.shape[-1]}")
    img = x.reshape(x.shape[:-1] + (rows, cols))
    return np.swapaxes(img, -1, -2)


def scaled_dot_attention(q: Tensor, k: Tensor, v: Tensor) -> tuple[Tensor, Tensor]:
    """softmax(q k^T / sqrt(d_head)) v over the last two axes; returns (out, weights)."""
    d_head = q.shape[-1]
    scores = ad.scale(ad.matmul(q, ad.transpose(k, _swap_last(k.ndim))), 1.0 / math.sqrt(d_head))
    weights = ad.softmax_rows(scores)
    return ad.matmul(weights, v), weights


def _swap_last(ndim: int) -> tuple:
    axes = list(range(ndim))
    axes[-1], axes[-2] = axes[-2], axes[-1]
    return tuple(axes)


class VitEncoder:
    def __init__(self, config: VitConfig, store: ParamStore | None = None):
        self.config = config
        if store is None:
            store = ParamStore()
            rng = np.random.default_rng(config.seed)
            d = config.embed_dim
            init_dense(store, "patch", config.patch_dim, d, rng)
            store.add("cls", 0.02 * rng.standard_normal((1, 1, d)))
            store.add("pos", 0.02 * rng.standard_normal((1, config.n_patches + 1, d)))
            for i in range(config.layers):
                for name in ("q", "k", "v", "o"):
                    init_dense(store, f"block{i}.{name}", d, d, rng)
                init_dense(store, f"block{i}.ffn1", d, config.ffn_hidden, rng)
                init_dense(store, f"block{i}.ffn2", config.ffn_hidden, d, rng)
            init_dense(store, "out", d, config.output_dim, rng)
        self.store = store
        self.last_attention: list[np.ndarray] = []

    def tokens(self, x) -> Tensor:
        """Patch embeddings with the class token prepended and positions added."""
        cfg = self.config
        x = np.asarray(x.data if isinstance(x, Tensor) else x, dtype=np.float32)
        patches = patchify(x, cfg.image_rows, cfg.image_cols)
        emb = dense(self.store, "patch", patches)
        batch = x.shape[0]
        cls = ad.broadcast_to(self.store["cls"], (batch, 1, cfg.embed_dim))
        return ad.concat([cls, emb], axis=1) + self.store["pos"]

    def attention(self, t: Tensor, i: int) -> Tensor:
        cfg = self.config
        b, n, d = t.shape
        h, dh = cfg.heads, d // cfg.heads

        def split_heads(u):
            return ad.transpose(ad.reshape(u, (b, n, h, dh)), (0, 2, 1, 3))

        q = split_heads(dense(self.store, f"block{i}.q", t))
        k = split_heads(dense(self.store, f"block{i}.k", t))
        v = split_heads(dense(self.store, f"block{i}.v", t))
        out, weights = scaled_dot_attention(q, k, v)
        self.last_attention.append(weights.data)
        merged = ad.reshape(ad.transpose(out, (0, 2, 1, 3)), (b, n, d))
        return dense(self.store, f"block{i}.o", merged)

    def forward(self, x) -> Tensor:
        """Encode a (B, 115) batch to (B, output_dim)."""
        self.last_attention = []
        t = self.tokens(x)
        for i in range(self.config.layers):
            t = t + self.attention(t, i)
            hidden = ad.relu(dense(self.store, f"block{i}.ffn1", t))
            t = t + dense(self.store, f"block{i}.ffn2", hidden)
        return dense(self.store, "out", t[:, 0, :])

    encoder_forward = forward


class VitMlp:
    """ViT encoder with an MLP classifier stacked on its 8-dim output."""

    def __init__(self, config: VitConfig, num_classes: int, head_hidden: int = 32,
                 store: ParamStore | None = None):
        self.config = config
        if store is None:
            self.encoder = VitEncoder(config)
            self.head = MlpHead(config.output_dim, head_hidden, num_classes, seed=[config.seed, 3])
            store = ParamStore()
            store.merge(self.encoder.store, "vit.")
            store.merge(self.head.store, "head.")
        else:
            self.encoder = VitEncoder(config, store.subset("vit."))
            self.head = MlpHead(config.output_dim, head_hidden, num_classes,
                                store=store.subset("head."))
        self.store = store

    def forward(self, x) -> Tensor:
        return self.head.forward(self.encoder.forward(x))


def train_vit_mlp(rows: np.ndarray, labels: np.ndarray, config: VitConfig, num_classes: int,
                  val_fraction: float = 0.10, train_ids: np.ndarray | None = None
                  ) -> tuple[VitMlp, TrainHistory]:
    """Joint supervised training of encoder and head under one cross-entropy loss."""
    model = VitMlp(config, num_classes)
    rows = np.asarray(rows, dtype=np.float32)
    ids = np.arange(len(rows)) if train_ids is None else np.asarray(train_ids)
    hyper = TrainHyper(lr=config.lr, epochs=config.epochs, batch=config.batch_size,
                       val_fraction=val_fraction, seed=config.seed)
    history = fit_classifier(model.store, lambda b: model.forward(rows[b]), ids, labels, hyper,
                             name="vit-mlp")
    return model, history
