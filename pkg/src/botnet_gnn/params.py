"""Named trainable parameters, Adam, and the NBCK1 checkpoint format."""
from __future__ import annotations

import json
import struct
from pathlib import Path

import numpy as np

from .autodiff import ACC, DTYPE, Tensor, add_bias, matmul

CKPT_MAGIC = b"NBCK1"


class FormatError(ValueError):
    """A binary file does not match its declared layout."""


class ParamStore:
    """Ordered collection of trainable tensors with Adam moment buffers."""

    def __init__(self):
        self.params: dict[str, Tensor] = {}
        self.m: dict[str, np.ndarray] = {}
        self.v: dict[str, np.ndarray] = {}
        self.t = 0

    def add(self, name: str, value) -> Tensor:
        if name in self.params:
            raise KeyError(f"parameter {name!r} already defined")
        tensor = Tensor(np.array(value, dtype=DTYPE), requires_grad=True, name=name)
        self.params[name] = tensor
        self.m[name] = np.zeros(tensor.shape, dtype=ACC)
        self.v[name] = np.zeros(tensor.shape, dtype=ACC)
        return tensor

    def __getitem__(self, name: str) -> Tensor:
        return self.params[name]

    def __contains__(self, name: str) -> bool:
        return name in self.params

    def __iter__(self):
        return iter(self.params.values())

    def __len__(self):
        return len(self.params)

    def names(self) -> list[str]:
        return list(self.params)

    def zero_grad(self) -> None:
        for p in self.params.values():
            p.zero_grad()

    def merge(self, other: "ParamStore", prefix: str = "") -> None:
        for name, p in other.params.items():
            self.params[prefix + name] = p
            self.m[prefix + name] = other.m[name]
            self.v[prefix + name] = other.v[name]

    def subset(self, prefix: str) -> "ParamStore":
        """View of the parameters under ``prefix`` with the prefix stripped (tensors shared)."""
        sub = ParamStore()
        for name, p in self.params.items():
            if name.startswith(prefix):
                short = name[len(prefix):]
                sub.params[short] = p
                sub.m[short] = self.m[name]
                sub.v[short] = self.v[name]
        return sub

    def num_values(self) -> int:
        return int(sum(p.data.size for p in self.params.values()))


def adam_step(store: ParamStore, lr: float = 0.001, beta1: float = 0.9,
              beta2: float = 0.999, eps: float = 1e-8) -> None:
    """One bias-corrected Adam update on every parameter, then zero the gradients."""
    store.t += 1
    t = store.t
    c1 = 1.0 - beta1 ** t
    c2 = 1.0 - beta2 ** t
    for name, p in store.params.items():
        g = np.zeros(p.shape, dtype=ACC) if p.grad is None else p.grad
        m = store.m[name]
        v = store.v[name]
        m *= beta1
        m += (1.0 - beta1) * g
        v *= beta2
        v += (1.0 - beta2) * g * g
        step = lr * (m / c1) / (np.sqrt(v / c2) + eps)
        p.data[...] = (p.data.astype(ACC) - step).astype(DTYPE)
        p.grad = None


def glorot(rng: np.random.Generator, fan_in: int, fan_out: int) -> np.ndarray:
    limit = np.sqrt(6.0 / (fan_in + fan_out))
    return rng.uniform(-limit, limit, size=(fan_in, fan_out))


def init_dense(store: ParamStore, name: str, d_in: int, d_out: int,
               rng: np.random.Generator) -> None:
    store.add(f"{name}.W", glorot(rng, d_in, d_out))
    store.add(f"{name}.b", np.zeros(d_out))


def dense(store: ParamStore, name: str, x) -> Tensor:
    return add_bias(matmul(x, store[f"{name}.W"]), store[f"{name}.b"])


# checkpoint I/O

def save_checkpoint(path, store: ParamStore, config: dict, extra: dict | None = None) -> None:
    """Write ``store`` as NBCK1: magic, u32 JSON length, JSON, f32 LE payload."""
    meta = {
        "config": config,
        "params": [{"name": n, "shape": list(p.shape)} for n, p in store.params.items()],
    }
    if extra:
        meta["extra"] = extra
    blob = json.dumps(meta, sort_keys=True, separators=(",", ":")).encode("utf-8")
    with open(path, "wb") as fh:
        fh.write(CKPT_MAGIC)
        fh.write(struct.pack("<I", len(blob)))
        fh.write(blob)
        for p in store.params.values():
            fh.write(np.ascontiguousarray(p.data, dtype="<f4").tobytes())


def load_checkpoint(path) -> tuple[ParamStore, dict]:
    """Read an NBCK1 file; returns the store and the full metadata dict."""
    raw = Path(path).read_bytes()
    if raw[:5] != CKPT_MAGIC:
        raise FormatError(f"{path}: not an NBCK1 checkpoint")
    (meta_len,) = struct.unpack_from("<I", raw, 5)
    meta = json.loads(raw[9:9 + meta_len].decode("utf-8"))
    offset = 9 + meta_len
    store = ParamStore()
    for entry in meta["params"]:
        shape = tuple(entry["shape"])
        count = int(np.prod(shape)) if shape else 1
        end = offset + 4 * count
        if end > len(raw):
            raise FormatError(f"{path}: truncated payload at {entry['name']}")
        store.add(entry["name"], np.frombuffer(raw, dtype="<f4", count=count, offset=offset).reshape(shape))
        offset = end
    if offset != len(raw):
        raise FormatError(f"{path}: {len(raw) - offset} trailing bytes")
    return store, meta
