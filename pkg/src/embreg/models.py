"""Hybrid global-local forecasting template.

encoder (linear over ``[x || e, u]``) -> shared GRU over the window -> optional
spatial layers on the last hidden state -> decoder (``elu`` MLP over
``[h || e, u_future]`` followed by one linear head per horizon step).
"""
from __future__ import annotations

import json
import math
from dataclasses import asdict, dataclass
from pathlib import Path

import numpy as np

from . import tensor as T
from .errors import HeadsDivisibility, MissingAdjacency, ShapeMismatch
from .tensor import Value

FAMILIES = ("RNN", "STGNN", "STATT", "STGNN-MEAN")


def uniform_init(rng: np.random.Generator, shape, fan_in: int) -> np.ndarray:
    bound = 1.0 / math.sqrt(fan_in) if fan_in > 0 else 0.0
    return rng.uniform(-bound, bound, size=shape)


def _param(data, name):
    return Value(np.array(data, dtype=np.float64), requires_grad=True, name=name)


def _dropout(x: Value, p: float, rng: np.random.Generator) -> Value:
    keep = (rng.random(x.shape) >= p).astype(np.float64) / (1.0 - p)
    return x * keep


class Module:
    """Minimal parameter container; subclasses list their children in ``_children``."""

    _children: tuple[str, ...] = ()

    def named_parameters(self, prefix: str = ""):
        for key, item in vars(self).items():
            if isinstance(item, Value) and item.requires_grad:
                yield prefix + key, item
        for child in self._children:
            mod = getattr(self, child)
            mods = mod if isinstance(mod, list) else [mod]
            for k, m in enumerate(mods):
                tag = f"{child}.{k}." if isinstance(mod, list) else f"{child}."
                yield from m.named_parameters(prefix + tag)


class Linear(Module):
    """``y = x @ weight + bias`` with ``weight`` stored as (in, out)."""

    def __init__(self, n_in: int, n_out: int, rng, bias: bool = True):
        self.n_in, self.n_out = n_in, n_out
        self.weight = _param(uniform_init(rng, (n_in, n_out), n_in), "weight")
        self.bias = _param(uniform_init(rng, (n_out,), n_in), "bias") if bias else None

    def __call__(self, x):
        y = T.matmul(x, self.weight)
        return y + self.bias if self.bias is not None else y

    def reinit_rows(self, rows, rng) -> None:
        """Redraw the weights multiplying input features ``rows`` from the init law."""
        rows = np.asarray(rows, dtype=np.int64)
        self.weight.data[rows] = uniform_init(rng, (rows.size, self.n_out), self.n_in)


class GRUCell(Module):
    def __init__(self, n_in: int, d_h: int, rng):
        self.d_h = d_h
        self.x_z = Linear(n_in, d_h, rng)
        self.x_r = Linear(n_in, d_h, rng)
        self.x_c = Linear(n_in, d_h, rng)
        self.h_z = Linear(d_h, d_h, rng, bias=False)
        self.h_r = Linear(d_h, d_h, rng, bias=False)
        self.h_c = Linear(d_h, d_h, rng, bias=False)

    _children = ("x_z", "x_r", "x_c", "h_z", "h_r", "h_c")

    def project(self, inp):
        return self.x_z(inp), self.x_r(inp), self.x_c(inp)

    def core(self, h, xz, xr, xc):
        z = T.sigmoid(xz + self.h_z(h))
        r = T.sigmoid(xr + self.h_r(h))
        cand = T.tanh(xc + self.h_c(r * h))
        return (1.0 - z) * h + z * cand

    def step(self, h, inp):
        return self.core(h, *self.project(inp))


def edges_from_adjacency(A: np.ndarray):
    """Edge list ``(src, dst, weight)`` of every ``a_ji > 0`` (``j`` sends to ``i``)."""
    src, dst = np.nonzero(A > 0)
    return src, dst, A[src, dst]


class AnisotropicMP(Module):
    """Gated edge-wise messages ``alpha * m`` summed over in-neighbours."""

    def __init__(self, d_h: int, rng):
        self.l1 = Linear(2 * d_h + 1, d_h, rng, bias=False)
        self.l2 = Linear(d_h, d_h, rng, bias=False)
        self.l0 = Linear(d_h, d_h, rng, bias=False)
        self.l3 = Linear(d_h, d_h, rng, bias=False)

    _children = ("l0", "l1", "l2", "l3")

    def __call__(self, H, A):
        if A is None:
            raise MissingAdjacency("anisotropic message passing needs an adjacency matrix")
        H = T.as_value(H)
        src, dst, w = edges_from_adjacency(np.asarray(A))
        root = self.l3(H)
        if src.size == 0:
            return T.elu(root)
        n = H.shape[-2]
        h_i = T.gather_rows(H, dst, axis=-2)
        h_j = T.gather_rows(H, src, axis=-2)
        a = np.broadcast_to(w[:, None], h_i.shape[:-1] + (1,))
        m = self.l2(T.elu(self.l1(T.concat([h_i, h_j, a], axis=-1))))
        alpha = T.sigmoid(self.l0(m))
        agg = T.scatter_add_rows(alpha * m, dst, n, axis=-2)
        return T.elu(root + agg)


class MeanAggMP(Module):
    """``elu(W4 h_i + mean_{j in N(i)} W5 h_j)``; isolated nodes get no neighbour term."""

    def __init__(self, d_h: int, rng):
        self.l4 = Linear(d_h, d_h, rng, bias=False)
        self.l5 = Linear(d_h, d_h, rng, bias=False)

    _children = ("l4", "l5")

    @staticmethod
    def mean_operator(A: np.ndarray) -> np.ndarray:
        nbr = (np.asarray(A) > 0).T.astype(np.float64)  # nbr[i, j] = 1 iff j -> i
        deg = nbr.sum(axis=1, keepdims=True)
        return np.divide(nbr, deg, out=np.zeros_like(nbr), where=deg > 0)

    def __call__(self, H, A):
        if A is None:
            raise MissingAdjacency("mean-aggregation message passing needs an adjacency matrix")
        P = Value(self.mean_operator(A))
        return T.elu(self.l4(H) + T.matmul(P, self.l5(H)))


class CrossSeriesAttention(Module):
    """Multi-head scaled dot-product attention whose tokens are the N series, plus residual."""

    def __init__(self, d_h: int, heads: int, rng):
        if heads < 1 or d_h % heads:
            raise HeadsDivisibility(f"d_h={d_h} is not divisible by heads={heads}")
        self.heads = heads
        self.q = Linear(d_h, d_h, rng, bias=False)
        self.k = Linear(d_h, d_h, rng, bias=False)
        self.v = Linear(d_h, d_h, rng, bias=False)
        self.out = Linear(d_h, d_h, rng)

    _children = ("q", "k", "v", "out")

    def __call__(self, H, A=None):
        H = T.as_value(H)
        squeeze = H.ndim == 2
        if squeeze:
            H = H.reshape((1,) + H.shape)
        B, N, d = H.shape
        dk = d // self.heads

        def split(x):
            return x.reshape(B, N, self.heads, dk).transpose(0, 2, 1, 3)

        q, k, v = split(self.q(H)), split(self.k(H)), split(self.v(H))
        scores = T.matmul(q, k.transpose(0, 1, 3, 2)) * (1.0 / math.sqrt(dk))
        att = T.softmax(scores, axis=-1)
        ctx = T.matmul(att, v).transpose(0, 2, 1, 3).reshape(B, N, d)
        out = self.out(ctx) + H
        return out.reshape(N, d) if squeeze else out


class Decoder(Module):
    def __init__(self, d_h: int, d_e: int, d_u: int, d_x: int, horizon: int, rng):
        self.horizon, self.d_x = horizon, d_x
        self.mlp = Linear(d_h + d_e + horizon * d_u, d_h, rng)
        self.heads_weight = _param(uniform_init(rng, (horizon, d_h, d_x), d_h), "heads_weight")
        self.heads_bias = _param(uniform_init(rng, (horizon, 1, d_x), d_h), "heads_bias")

    _children = ("mlp",)

    def __call__(self, h, e, u_future):
        """``h``: (..., N, d_h); ``e``: (N, d_e) or None; ``u_future``: (..., H, N, d_u)."""
        h = T.as_value(h)
        lead = h.shape[:-1]
        u_future = T.as_value(u_future)
        nd = u_future.ndim
        perm = tuple(range(nd - 3)) + (nd - 2, nd - 3, nd - 1)
        u_flat = u_future.transpose(perm).reshape(lead + (-1,))
        parts = [h]
        if e is not None:
            parts.append(T.broadcast(e, lead + (e.shape[-1],)))
        parts.append(u_flat)
        z = T.elu(self.mlp(T.concat(parts, axis=-1)))
        z = z.reshape(z.shape[:-2] + (1,) + z.shape[-2:])
        return T.matmul(z, self.heads_weight) + self.heads_bias


@dataclass(frozen=True)
class ModelConfig:
    family: str = "RNN"
    d_in: int = 1          # observation channels fed to the encoder (incl. mask flag)
    d_u: int = 0
    d_x: int = 1
    d_h: int = 16
    d_e: int = 8
    window: int = 12
    horizon: int = 3
    heads: int = 2
    spatial_layers: int = 2
    hidden_dropout: float = 0.0   # whole-network dropout baseline, off by default

    def __post_init__(self):
        if self.family not in FAMILIES:
            raise ValueError(f"unknown family {self.family!r}; expected one of {FAMILIES}")
        if min(self.d_in, self.d_x, self.d_h, self.window, self.horizon) < 1 or self.d_e < 0:
            raise ValueError("sizes must be positive (d_e may be 0)")
        if self.family == "STATT" and self.d_h % self.heads:
            raise HeadsDivisibility(f"d_h={self.d_h} is not divisible by heads={self.heads}")
        if not 0.0 <= self.hidden_dropout < 1.0:
            raise ValueError("hidden_dropout must lie in [0, 1)")


class ForecastModel(Module):
    def __init__(self, config: ModelConfig, rng: np.random.Generator):
        c = self.config = config
        self.encoder = Linear(c.d_in + c.d_e + c.d_u, c.d_h, rng)
        self.gru = GRUCell(c.d_h, c.d_h, rng)
        layer = {"RNN": None, "STGNN": AnisotropicMP, "STGNN-MEAN": MeanAggMP,
                 "STATT": lambda d, r: CrossSeriesAttention(d, c.heads, r)}[c.family]
        self.spatial = [] if layer is None else [layer(c.d_h, rng) for _ in range(c.spatial_layers)]
        self.decoder = Decoder(c.d_h, c.d_e, c.d_u, c.d_x, c.horizon, rng)

    _children = ("encoder", "gru", "spatial", "decoder")

    def parameters(self) -> dict[str, Value]:
        return dict(self.named_parameters())

    def embedding_rows(self) -> dict[str, np.ndarray]:
        """Weight rows (input features) that multiply embedding channels."""
        c = self.config
        return {"encoder.weight": np.arange(c.d_in, c.d_in + c.d_e),
                "decoder.mlp.weight": np.arange(c.d_h, c.d_h + c.d_e)}

    def reset_embedding_columns(self, rng: np.random.Generator) -> None:
        rows = self.embedding_rows()
        self.encoder.reinit_rows(rows["encoder.weight"], rng)
        self.decoder.mlp.reinit_rows(rows["decoder.mlp.weight"], rng)

    # -- pipeline pieces

    def encode(self, x, u, e=None):
        x, u = T.as_value(x), T.as_value(u)
        lead = x.shape[:-1]
        parts = [x]
        if self.config.d_e:
            if e is None:
                raise ShapeMismatch("model was built with embeddings but none were given")
            parts.append(e if e.shape[:-1] == lead else T.broadcast(e, lead + (self.config.d_e,)))
        parts.append(u)
        inp = T.concat(parts, axis=-1)
        if inp.shape[-1] != self.encoder.n_in:
            raise ShapeMismatch(f"encoder expects {self.encoder.n_in} features, got {inp.shape[-1]}")
        return self.encoder(inp)

    def propagate_space(self, h, A, mode="eval", rng=None):
        drop = self.config.hidden_dropout if mode == "train" else 0.0
        for layer in self.spatial:
            h = layer(h, A)
            if drop:
                h = _dropout(h, drop, rng)
        return h

    def decode(self, h, e, u_future):
        if self.config.d_e == 0:
            e = None
        return self.decoder(h, e, u_future)

    def forecast(self, batch, embeddings=None, mode: str = "eval", rng=None, adjacency=None):
        """Predict (B, H, N_batch, d_x) for a :class:`~embreg.data.Batch`.

        ``embeddings`` is the full (N, d_e) view after regularizer transforms; only
        rows of ``batch.series`` are used.  ``adjacency`` is the full (N, N) matrix.
        """
        c = self.config
        S = np.asarray(batch.series)
        e = None
        if c.d_e:
            if embeddings is None:
                raise ShapeMismatch("embeddings required for a model with d_e > 0")
            e = T.gather_rows(embeddings, S, axis=0)
        A = None
        if adjacency is not None:
            A = np.asarray(adjacency)[np.ix_(S, S)]
        drop = c.hidden_dropout if mode == "train" else 0.0

        x = np.asarray(batch.x)
        u = np.asarray(batch.u)
        B, W, N = x.shape[:3]
        e_b = T.broadcast(e, (B, N, c.d_e)) if e is not None else None
        h = Value(np.zeros((B, N, c.d_h)))
        for t in range(W):
            enc = self.encode(x[:, t], u[:, t], e_b)      # (B, N, d_h)
            if drop:
                enc = _dropout(enc, drop, rng)
            h = self.gru.step(h, enc)
        if drop:
            h = _dropout(h, drop, rng)
        if self.spatial:
            h = self.propagate_space(h, A, mode, rng)
        return self.decode(h, e, batch.u_future)


class EmbeddingTable(Module):
    """Per-series learnable rows, plus optional variational / clustering parameters."""

    def __init__(self, n_series: int, d_e: int, rng: np.random.Generator,
                 variational: bool = False, n_centroids: int = 0, log_sigma_init: float = -2.0):
        self.n_series, self.d_e = n_series, d_e
        self.log_sigma_init = log_sigma_init
        self.E = _param(self.sample_init(rng, (n_series, d_e)), "E")
        self.log_sigma = _param(np.full((n_series, d_e), log_sigma_init), "log_sigma") \
            if variational else None
        self.centroids = _param(self.sample_init(rng, (n_centroids, d_e)), "centroids") \
            if n_centroids else None
        self.assign_logits = _param(np.zeros((n_series, n_centroids)), "assign_logits") \
            if n_centroids else None

    @property
    def variational(self) -> bool:
        return self.log_sigma is not None

    def sample_init(self, rng, shape) -> np.ndarray:
        bound = 1.0 / math.sqrt(self.d_e) if self.d_e else 0.0
        return rng.uniform(-bound, bound, size=shape)

    def reset(self, rng) -> None:
        self.E.data[...] = self.sample_init(rng, self.E.shape)
        if self.log_sigma is not None:
            self.log_sigma.data[...] = self.log_sigma_init

    def parameters(self, prefix: str = "embedding.") -> dict[str, Value]:
        return dict(self.named_parameters(prefix))

    def snapshot(self) -> dict[str, np.ndarray]:
        return {k: v.data.copy() for k, v in self.parameters("").items()}

    def load(self, arrays: dict[str, np.ndarray]) -> None:
        for k, v in self.parameters("").items():
            v.data[...] = arrays[k]


def build_table(n_series: int, d_e: int, rng, specs=()) -> EmbeddingTable:
    kinds = {s.kind: s for s in specs}
    clst = kinds.get("clustering")
    return EmbeddingTable(n_series, d_e, rng, variational="variational" in kinds,
                          n_centroids=clst.n_centroids if clst else 0)


# ---------------------------------------------------------------- checkpoints

def _encode_array(a: np.ndarray) -> dict:
    return {"shape": list(a.shape), "values": [float(v) for v in a.reshape(-1)]}


def _decode_array(obj) -> np.ndarray:
    return np.array(obj["values"], dtype=np.float64).reshape(obj["shape"])


def _jsonable_state(state):
    if isinstance(state, dict):
        return {k: _jsonable_state(v) for k, v in state.items()}
    if isinstance(state, np.integer):
        return int(state)
    return state


def checkpoint_dict(model: ForecastModel, tables: list[EmbeddingTable], rng_states=None, extra=None):
    return {
        "format": "embreg-checkpoint/1",
        "model": {"config": asdict(model.config),
                  "weights": {k: _encode_array(v.data) for k, v in model.parameters().items()}},
        "tables": [{"n_series": t.n_series, "d_e": t.d_e, "log_sigma_init": t.log_sigma_init,
                    "variational": t.variational,
                    "n_centroids": 0 if t.centroids is None else t.centroids.shape[0],
                    "weights": {k: _encode_array(v) for k, v in t.snapshot().items()}}
                   for t in tables],
        "rng_states": _jsonable_state(rng_states or {}),
        "extra": extra or {},
    }


def dumps_checkpoint(model, tables, rng_states=None, extra=None) -> bytes:
    return json.dumps(checkpoint_dict(model, tables, rng_states, extra),
                      sort_keys=True, separators=(",", ":")).encode()


def save_checkpoint(path, model, tables, rng_states=None, extra=None) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_bytes(dumps_checkpoint(model, tables, rng_states, extra))
    return path


def loads_checkpoint(raw: bytes | str):
    obj = json.loads(raw)
    model = ForecastModel(ModelConfig(**obj["model"]["config"]), np.random.default_rng(0))
    for k, v in model.parameters().items():
        v.data[...] = _decode_array(obj["model"]["weights"][k])
    tables = []
    for t in obj["tables"]:
        table = EmbeddingTable(t["n_series"], t["d_e"], np.random.default_rng(0),
                               variational=t["variational"], n_centroids=t["n_centroids"],
                               log_sigma_init=t["log_sigma_init"])
        table.load({k: _decode_array(v) for k, v in t["weights"].items()})
        tables.append(table)
    return model, tables, obj["rng_states"], obj["extra"]


def load_checkpoint(path):
    return loads_checkpoint(Path(path).read_bytes())
