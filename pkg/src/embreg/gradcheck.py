"""Finite-difference checks of every primitive and of a full forward+loss per model family."""
from __future__ import annotations

import numpy as np

from . import tensor as T
from .data import generate_synthetic_collection, prepare
from .models import FAMILIES, ForecastModel, ModelConfig, build_table
from .tensor import Value
from .training import masked_mae

TOLERANCE = 1e-4
FLOOR = 1e-7
# roundoff ~ 1e-16 * |loss| / h must stay well under FLOOR * TOLERANCE for exact-zero gradients
STEP = 1e-4


def _check(build_loss, leaves: dict[str, Value], h=STEP, max_coords=None, rng=None) -> float:
    """Max relative error between backward and central differences over all ``leaves``.

    Each leaf's ``data`` is perturbed in place while differencing and restored afterwards.
    """
    for leaf in leaves.values():
        leaf.zero_grad()
    T.backward(build_loss())
    worst = 0.0
    for leaf in leaves.values():
        original = leaf.data

        def f(x, leaf=leaf):
            leaf.data = x
            return float(build_loss().data)

        coords = None
        if max_coords is not None and original.size > max_coords:
            coords = np.sort(rng.choice(original.size, max_coords, replace=False))
        try:
            fd = T.finite_difference_gradient(f, original, h, coords)
        finally:
            leaf.data = original
        sel = slice(None) if coords is None else coords
        got = np.zeros(original.size) if leaf.grad is None else leaf.grad.reshape(-1)
        worst = max(worst, float(np.max(T.relative_error(got[sel], fd.reshape(-1)[sel], FLOOR))))
    return worst


def _weighted(out: Value, w: np.ndarray) -> Value:
    return T.sum_(out * w)


def primitive_cases(rng: np.random.Generator):
    """(name, inputs, fn) triples; ``fn`` maps the dict of leaves to the primitive output."""
    a = lambda *s: rng.normal(size=s)
    pos = lambda *s: rng.uniform(0.5, 2.0, size=s)
    away = lambda *s: rng.choice([-1.0, 1.0], size=s) * rng.uniform(0.2, 1.0, size=s)
    idx = np.array([2, 0, 2, 1])
    return [
        ("matmul", {"a": a(2, 3, 4), "b": a(4, 5)}, lambda v: T.matmul(v["a"], v["b"])),
        ("matmul_batched", {"a": a(2, 3, 4), "b": a(2, 4, 2)}, lambda v: T.matmul(v["a"], v["b"])),
        ("add", {"a": a(3, 4), "b": a(4)}, lambda v: T.add(v["a"], v["b"])),
        ("sub", {"a": a(3, 1), "b": a(3, 4)}, lambda v: T.sub(v["a"], v["b"])),
        ("mul", {"a": a(2, 3), "b": a(2, 1)}, lambda v: T.mul(v["a"], v["b"])),
        ("concat", {"a": a(2, 3), "b": a(2, 2)}, lambda v: T.concat([v["a"], v["b"]], axis=-1)),
        ("slice", {"x": a(4, 5)}, lambda v: T.slice_(v["x"], (slice(1, 3), slice(None, None, 2)))),
        ("slice_fancy", {"x": a(4, 3)}, lambda v: T.slice_(v["x"], np.array([0, 0, 3]))),
        ("sum", {"x": a(3, 4)}, lambda v: T.sum_(v["x"], axis=0, keepdims=True)),
        ("mean", {"x": a(3, 4)}, lambda v: T.mean(v["x"], axis=1)),
        ("abs", {"x": away(3, 4)}, lambda v: T.abs_(v["x"])),
        ("square", {"x": a(3, 4)}, lambda v: T.square(v["x"])),
        ("exp", {"x": a(3, 4)}, lambda v: T.exp(v["x"])),
        ("log", {"x": pos(3, 4)}, lambda v: T.log(v["x"])),
        ("sigmoid", {"x": a(3, 4)}, lambda v: T.sigmoid(v["x"])),
        ("tanh", {"x": a(3, 4)}, lambda v: T.tanh(v["x"])),
        ("elu", {"x": away(3, 4)}, lambda v: T.elu(v["x"])),
        ("softplus", {"x": a(3, 4)}, lambda v: T.softplus(v["x"])),
        ("softmax", {"x": a(3, 4)}, lambda v: T.softmax(v["x"], axis=-1)),
        ("broadcast", {"x": a(1, 4)}, lambda v: T.broadcast(v["x"], (3, 4))),
        ("transpose", {"x": a(2, 3, 4)}, lambda v: T.transpose(v["x"], (2, 0, 1))),
        ("reshape", {"x": a(2, 6)}, lambda v: T.reshape(v["x"], (3, 4))),
        ("gather_rows", {"x": a(3, 2)}, lambda v: T.gather_rows(v["x"], idx, axis=0)),
        ("scatter_add_rows", {"x": a(4, 2)}, lambda v: T.scatter_add_rows(v["x"], idx, 3, axis=0)),
    ]


def check_primitives(seed: int = 0) -> dict[str, float]:
    rng = np.random.default_rng(seed)
    out = {}
    for name, inputs, fn in primitive_cases(rng):
        leaves = {k: Value(v, requires_grad=True) for k, v in inputs.items()}
        w = rng.normal(size=fn(leaves).shape)
        out[name] = _check(lambda fn=fn, w=w, leaves=leaves: _weighted(fn(leaves), w), leaves)
    return out


def check_family(family: str, seed: int = 0, N=4, d_h=8, d_e=4, W=3, H=2, max_coords=None) -> float:
    """Relative error of d(masked MAE)/d(every parameter) for one small model."""
    coll = generate_synthetic_collection(N, 60, seed, "graph_diffusion")
    data = prepare(coll, W, H)
    rng = np.random.default_rng([seed, 9])
    cfg = ModelConfig(family=family, d_in=coll.input_channels, d_u=data.collection.d_u, d_x=coll.d_x,
                      d_h=d_h, d_e=d_e, window=W, horizon=H, heads=2)
    model = ForecastModel(cfg, rng)
    table = build_table(N, d_e, rng, ())
    batch = data.batch(data.train[:3])
    leaves = {**model.parameters(), **table.parameters()}

    def loss():
        pred = model.forecast(batch, table.E, mode="eval", adjacency=data.adjacency)
        return masked_mae(pred, batch.y, batch.mask)

    return _check(loss, leaves, max_coords=max_coords, rng=np.random.default_rng(seed))


def run_all(seed: int = 0) -> dict[str, float]:
    report = {f"primitive:{k}": v for k, v in check_primitives(seed).items()}
    for family in FAMILIES:
        report[f"family:{family}"] = check_family(family, seed)
    return report
