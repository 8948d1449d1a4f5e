"""Asymptotic cost expressions for the four pipelines, evaluated as exact integers.

Expressions are kept literally, including the constant +1 in the VAE-MLP row;
they are bookkeeping for big-O terms, not FLOP counts.
"""
from __future__ import annotations

import json
from dataclasses import asdict, dataclass, fields

from .pipelines import PipelineKind

# results are carried as unsigned 128-bit values in exported tables
MAX_COST = (1 << 128) - 1


class CostOverflow(ArithmeticError):
    pass


def _check(value: int) -> int:
    if value > MAX_COST:
        raise CostOverflow(f"cost {value} exceeds the 128-bit range")
    return value


@dataclass(frozen=True)
class CostInputs:
    N: int = 1  # graph nodes
    E: int = 1  # graph edges
    D: int = 1  # node feature dim
    K: int = 1  # GAT output size per head
    H: int = 1  # GAT heads
    n: int = 1  # layers
    p: int = 1  # ViT patches
    d: int = 1  # ViT embed dim
    d_in: int = 1
    d_out: int = 1
    a: int = 1  # VAE encoder layers
    b: int = 1  # VAE decoder layers
    c: int | None = None  # = a + b

    def __post_init__(self):
        if self.c is None:
            object.__setattr__(self, "c", self.a + self.b)
        for f in fields(self):
            v = getattr(self, f.name)
            if not isinstance(v, int) or isinstance(v, bool):
                raise TypeError(f"{f.name} must be an integer, got {v!r}")
            # an edgeless graph is a legitimate input, every other symbol is a size
            if v < 0 or (v == 0 and f.name != "E"):
                raise ValueError(f"{f.name} must be positive, got {v}")
        if self.c != self.a + self.b:
            raise ValueError(f"c must equal a + b ({self.a} + {self.b}), got {self.c}")

    @classmethod
    def from_json(cls, text: str) -> "CostInputs":
        return cls(**json.loads(text))

    def to_dict(self) -> dict:
        return asdict(self)


def cost_vae(c: int, d_in: int, d_out: int) -> int:
    return _check(c * d_in * d_out)


def cost_vit(n: int, p: int, d: int) -> int:
    return _check(n * (p * p * d + p * d * d))


def cost_graph_build(N: int, D: int, E: int) -> int:
    return _check(N * D * D + E * D)


def cost_gcn(n: int, E: int, d_in: int, N: int, d_out: int) -> int:
    return _check(n * (E * d_in + N * d_in * d_out))


def cost_gat(n: int, N: int, D: int, K: int, H: int, E: int) -> int:
    return _check(n * (N * D * K + H * E * K))


def cost_mlp(n: int, d_in: int, d_out: int) -> int:
    return _check(n * d_in * d_out)


def cost_terms(kind, x: CostInputs) -> dict:
    """Named Table-I terms making up one pipeline's cost."""
    kind = PipelineKind(kind)
    vae = cost_vae(x.c, x.d_in, x.d_out)
    if kind is PipelineKind.VAE_GCN:
        return {"vae": vae, "graph_build": cost_graph_build(x.N, x.D, x.E),
                "gcn": cost_gcn(x.n, x.E, x.d_in, x.N, x.d_out)}
    if kind is PipelineKind.VAE_GAT:
        return {"vae": vae, "graph_build": cost_graph_build(x.N, x.D, x.E),
                "gat": cost_gat(x.n, x.N, x.D, x.K, x.H, x.E)}
    if kind is PipelineKind.VAE_MLP:
        return {"vae": vae, "sampling": 1, "mlp": cost_mlp(x.n, x.d_in, x.d_out)}
    return {"vit": cost_vit(x.n, x.p, x.d), "mlp": cost_mlp(x.n, x.d_in, x.d_out)}


def cost_pipeline(kind, x: CostInputs) -> int:
    return _check(sum(cost_terms(kind, x).values()))


def crossover(kind_a, kind_b, inputs: CostInputs, symbol: str, values) -> int | None:
    """First value of ``symbol`` (scanning ``values`` in order) where cost(a) > cost(b)."""
    values = list(values)
    if not values:
        raise ValueError("crossover: empty range")
    if symbol not in {f.name for f in fields(CostInputs)} or symbol == "c":
        raise ValueError(f"crossover: unknown symbol {symbol!r}")
    for v in values:
        point = replace_inputs(inputs, **{symbol: v})
        if cost_pipeline(kind_a, point) > cost_pipeline(kind_b, point):
            return v
    return None


def replace_inputs(x: CostInputs, **changes) -> CostInputs:
    d = x.to_dict()
    d.update(changes)
    if "a" in changes or "b" in changes:
        d["c"] = None
    return CostInputs(**d)


def cost_table(x: CostInputs) -> str:
    """Plain-text table of every pipeline's terms and total."""
    lines = []
    rows = []
    for kind in PipelineKind:
        terms = cost_terms(kind, x)
        rows.append((kind.value, " + ".join(f"{k}={v}" for k, v in terms.items()),
                     str(sum(terms.values()))))
    w0 = max(len(r[0]) for r in rows + [("pipeline", "", "")])
    w1 = max(len(r[1]) for r in rows + [("", "terms", "")])
    lines.append(f"{'pipeline'.ljust(w0)}  {'terms'.ljust(w1)}  total")
    for name, terms, total in rows:
        lines.append(f"{name.ljust(w0)}  {terms.ljust(w1)}  {total}")
    return "\n".join(lines) + "\n"
