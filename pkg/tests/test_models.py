"""Model components against naive re-implementations."""
import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from embreg import tensor as T
from embreg.data import Batch, generate_synthetic_collection, prepare
from embreg.errors import HeadsDivisibility, MissingAdjacency
from embreg.models import (FAMILIES, AnisotropicMP, CrossSeriesAttention, Decoder, EmbeddingTable,
                           ForecastModel, GRUCell, MeanAggMP, ModelConfig, dumps_checkpoint, load_checkpoint,
                           loads_checkpoint, save_checkpoint)
from embreg.tensor import Value
from embreg.training import masked_mae

elu = lambda x: np.where(x > 0, x, np.expm1(np.minimum(x, 0)))
sig = lambda x: 1 / (1 + np.exp(-x))


def _zero(module):
    for p in module.named_parameters():
        p[1].data[...] = 0.0


def _model(family="STGNN", d_e=3, N=5, seed=0, **kw):
    coll = generate_synthetic_collection(N, 120, seed, "graph_diffusion")
    data = prepare(coll, 4, 2)
    cfg = ModelConfig(family=family, d_in=1, d_u=data.collection.d_u, d_h=6, d_e=d_e,
                      window=4, horizon=2, heads=2, **kw)
    rng = np.random.default_rng(seed)
    return ForecastModel(cfg, rng), EmbeddingTable(N, d_e, rng), data


# ---------------------------------------------------------------- encoder

def test_encode_zero_weights():
    m, tab, _ = _model()
    _zero(m.encoder)
    out = m.encode(np.ones((5, 1)), np.ones((5, 9)), tab.E)
    assert np.all(out.data == 0)


def test_encode_identity():
    cfg = ModelConfig(d_in=1, d_u=2, d_e=2, d_h=5, window=1, horizon=1)
    m = ForecastModel(cfg, np.random.default_rng(0))
    m.encoder.weight.data[...] = np.eye(5)
    m.encoder.bias.data[...] = 0
    x, e, u = np.array([[1.0]]), Value(np.array([[2.0, 3.0]])), np.array([[4.0, 5.0]])
    np.testing.assert_array_equal(m.encode(x, u, e).data, [[1, 2, 3, 4, 5]])


def test_encode_embedding_difference():
    m, tab, _ = _model(N=2)
    x, u = np.zeros((2, 1)), np.zeros((2, 9))
    u[:] = 0.3
    h = m.encode(x, u, tab.E).data
    W = m.encoder.weight.data[1:1 + 3]
    np.testing.assert_allclose(h[0] - h[1], (tab.E.data[0] - tab.E.data[1]) @ W, atol=1e-14)


# ---------------------------------------------------------------- GRU

def test_gru_zero_weights():
    g = GRUCell(4, 4, np.random.default_rng(0))
    _zero(g)
    h = np.random.default_rng(1).normal(size=(3, 4))
    np.testing.assert_allclose(g.step(Value(h), Value(np.ones((3, 4)))).data, h / 2, atol=1e-15)
    assert np.all(g.step(Value(np.zeros((3, 4))), Value(np.ones((3, 4)))).data == 0)


def test_gru_matches_hand_coded():
    rng = np.random.default_rng(5)
    g = GRUCell(3, 4, rng)
    h, x = rng.normal(size=(6, 4)), rng.normal(size=(6, 3))
    P = {k: v.data for k, v in g.named_parameters()}
    z = sig(x @ P["x_z.weight"] + P["x_z.bias"] + h @ P["h_z.weight"])
    r = sig(x @ P["x_r.weight"] + P["x_r.bias"] + h @ P["h_r.weight"])
    c = np.tanh(x @ P["x_c.weight"] + P["x_c.bias"] + (r * h) @ P["h_c.weight"])
    np.testing.assert_allclose(g.step(Value(h), Value(x)).data, (1 - z) * h + z * c, atol=1e-12)


# ---------------------------------------------------------------- message passing

def _naive_aniso(layer, H, A):
    W = {k: v.data for k, v in layer.named_parameters()}
    out = H @ W["l3.weight"]
    for i in range(len(H)):
        for j in range(len(H)):
            if A[j, i] > 0:
                m = elu(np.concatenate([H[i], H[j], [A[j, i]]]) @ W["l1.weight"]) @ W["l2.weight"]
                out[i] += sig(m @ W["l0.weight"]) * m
    return elu(out)


def test_aniso_no_edges_and_zero_weights():
    rng = np.random.default_rng(0)
    layer = AnisotropicMP(4, rng)
    H = rng.normal(size=(3, 4))
    np.testing.assert_allclose(layer(Value(H), np.zeros((3, 3))).data,
                               elu(H @ layer.l3.weight.data), atol=1e-15)
    _zero(layer)
    A = np.zeros((2, 2))
    A[0, 1] = 1.0
    assert np.all(layer(Value(rng.normal(size=(2, 4))), A).data == 0)
    with pytest.raises(MissingAdjacency):
        layer(Value(H), None)


def test_aniso_line_graph_oracle():
    rng = np.random.default_rng(1)
    layer = AnisotropicMP(4, rng)
    A = np.array([[0, 0.7, 0], [0.7, 0, 0.3], [0, 0.3, 0]])
    H = rng.normal(size=(3, 4))
    np.testing.assert_allclose(layer(Value(H), A).data, _naive_aniso(layer, H, A), atol=1e-12)


def _naive_mean(layer, H, A):
    W4, W5 = layer.l4.weight.data, layer.l5.weight.data
    out = H @ W4
    for i in range(len(H)):
        nb = [j for j in range(len(H)) if A[j, i] > 0]
        if nb:
            out[i] += np.mean([H[j] @ W5 for j in nb], axis=0)
    return elu(out)


def test_mean_agg_closed_forms_and_oracle():
    rng = np.random.default_rng(2)
    layer = MeanAggMP(3, rng)
    H = rng.normal(size=(4, 3))
    np.testing.assert_allclose(layer(Value(H), np.zeros((4, 4))).data, elu(H @ layer.l4.weight.data), atol=1e-15)
    A = (rng.random((4, 4)) > 0.5) * rng.uniform(0.1, 1, (4, 4))
    np.fill_diagonal(A, 0)
    np.testing.assert_allclose(layer(Value(H), A).data, _naive_mean(layer, H, A), atol=1e-12)
    layer.l4.weight.data[...] = 0
    layer.l5.weight.data[...] = np.eye(3)
    A = np.zeros((4, 4))
    A[2, 0] = 1
    np.testing.assert_allclose(layer(Value(H), A).data[0], elu(H[2]), atol=1e-15)


# ---------------------------------------------------------------- attention

def test_attention_single_token():
    rng = np.random.default_rng(3)
    att = CrossSeriesAttention(4, 2, rng)
    h = rng.normal(size=(1, 4))
    expect = (h @ att.v.weight.data) @ att.out.weight.data + att.out.bias.data + h
    np.testing.assert_allclose(att(Value(h)).data, expect, atol=1e-14)


def test_attention_zero_queries_uniform():
    rng = np.random.default_rng(4)
    att = CrossSeriesAttention(4, 1, rng)
    att.q.weight.data[...] = 0
    H = rng.normal(size=(3, 4))
    ctx = np.full((3, 3), 1 / 3) @ (H @ att.v.weight.data)
    np.testing.assert_allclose(att(Value(H)).data, ctx @ att.out.weight.data + att.out.bias.data + H, atol=1e-14)


def test_attention_hand_loop():
    rng = np.random.default_rng(5)
    att = CrossSeriesAttention(4, 1, rng)
    H = rng.normal(size=(3, 4))
    Q, K, V = (H @ l.weight.data for l in (att.q, att.k, att.v))
    ctx = np.zeros_like(H)
    for i in range(3):
        s = np.array([Q[i] @ K[j] / 2.0 for j in range(3)])
        w = np.exp(s - s.max())
        w /= w.sum()
        ctx[i] = sum(w[j] * V[j] for j in range(3))
    np.testing.assert_allclose(att(Value(H)).data, ctx @ att.out.weight.data + att.out.bias.data + H, atol=1e-12)
    with pytest.raises(HeadsDivisibility):
        CrossSeriesAttention(5, 2, rng)


# ---------------------------------------------------------------- decoder and forecast

def test_decoder_zero_weights_gives_head_bias():
    rng = np.random.default_rng(6)
    dec = Decoder(4, 2, 3, 1, 2, rng)
    dec.mlp.weight.data[...] = 0
    dec.mlp.bias.data[...] = 0
    out = dec(Value(rng.normal(size=(5, 4))), Value(rng.normal(size=(5, 2))), rng.normal(size=(2, 5, 3)))
    np.testing.assert_array_equal(out.data, np.broadcast_to(dec.heads_bias.data, (2, 5, 1)))


def test_decoder_single_step_composition():
    rng = np.random.default_rng(7)
    dec = Decoder(4, 2, 3, 2, 1, rng)
    h, e, u = rng.normal(size=(5, 4)), rng.normal(size=(5, 2)), rng.normal(size=(1, 5, 3))
    z = elu(np.concatenate([h, e, u[0]], axis=1) @ dec.mlp.weight.data + dec.mlp.bias.data)
    expect = z @ dec.heads_weight.data[0] + dec.heads_bias.data[0]
    np.testing.assert_allclose(dec(Value(h), Value(e), u).data[0], expect, atol=1e-13)


def test_zero_model_outputs_head_bias():
    m, tab, data = _model("STATT")
    for name, p in m.parameters().items():
        if name != "decoder.heads_bias":
            p.data[...] = 0
    b = data.batch(data.train[:3])
    out = m.forecast(b, tab.E, adjacency=data.adjacency).data
    np.testing.assert_array_equal(out, np.broadcast_to(m.decoder.heads_bias.data, out.shape))


def test_rnn_ignores_adjacency():
    m, tab, data = _model("RNN")
    b = data.batch(data.train[:3])
    a = m.forecast(b, tab.E, adjacency=data.adjacency).data
    assert a.tobytes() == m.forecast(b, tab.E).data.tobytes()


def test_weight_surgery_matches_global_model():
    m, tab, data = _model("STGNN-MEAN", d_e=3)
    g = ForecastModel(ModelConfig(**{**m.config.__dict__, "d_e": 0}), np.random.default_rng(1))
    rows = m.embedding_rows()
    for name, p in m.parameters().items():
        q = g.parameters()[name]
        if name in rows:
            p.data[rows[name]] = 0
            keep = np.setdiff1d(np.arange(p.shape[0]), rows[name])
            q.data[...] = p.data[keep]
        else:
            q.data[...] = p.data
    b = data.batch(data.train[:4])
    np.testing.assert_allclose(m.forecast(b, tab.E, adjacency=data.adjacency).data,
                               g.forecast(b, adjacency=data.adjacency).data, atol=1e-12)


def test_global_model_ignores_table():
    m, _, data = _model("RNN", d_e=0)
    b = data.batch(data.train[:2])
    other = EmbeddingTable(5, 4, np.random.default_rng(3))
    assert m.forecast(b, None).data.tobytes() == m.forecast(b, other.E).data.tobytes()


def test_embedding_locality():
    m, tab, data = _model("STGNN", N=5)
    S = np.array([0, 3])
    b = data.batch(data.train[:3], series=S)
    T.backward(masked_mae(m.forecast(b, tab.E, adjacency=data.adjacency), b.y, b.mask))
    assert np.all(tab.E.grad[[1, 2, 4]] == 0)
    assert np.any(tab.E.grad[S] != 0)


def _permute(batch, pi):
    return Batch(x=batch.x[:, :, pi], u=batch.u[:, :, pi], u_future=batch.u_future[:, :, pi],
                 y=batch.y[:, :, pi], mask=batch.mask[:, :, pi], series=batch.series)


@pytest.mark.parametrize("family", FAMILIES)
@settings(max_examples=5, deadline=None)
@given(seed=st.integers(0, 10_000))
def test_permutation_equivariance(family, seed):
    m, tab, data = _model(family, seed=1)
    pi = np.random.default_rng(seed).permutation(5)
    b = data.batch(data.train[:2])
    base = m.forecast(b, tab.E, adjacency=data.adjacency).data
    out = m.forecast(_permute(b, pi), Value(tab.E.data[pi]), adjacency=data.adjacency[np.ix_(pi, pi)]).data
    np.testing.assert_allclose(out, base[:, :, pi], atol=1e-9)


def test_hidden_dropout_only_in_train():
    m, tab, data = _model("RNN", hidden_dropout=0.5)
    b = data.batch(data.train[:2])
    ev = m.forecast(b, tab.E).data
    tr = m.forecast(b, tab.E, mode="train", rng=np.random.default_rng(0)).data
    assert ev.tobytes() == m.forecast(b, tab.E).data.tobytes() and not np.allclose(ev, tr)


# ---------------------------------------------------------------- checkpoints

def test_checkpoint_roundtrip_byte_stable(tmp_path):
    m, tab, data = _model("STATT")
    raw = dumps_checkpoint(m, [tab], {"x": {"state": 1}}, {"epoch": 3})
    m2, tabs, states, extra = loads_checkpoint(raw)
    assert dumps_checkpoint(m2, tabs, states, extra) == raw
    path = save_checkpoint(tmp_path / "best.ckpt", m, [tab])
    m3, (t3,), _, _ = load_checkpoint(path)
    b = data.batch(data.train[:2])
    assert m3.forecast(b, t3.E, adjacency=data.adjacency).data.tobytes() == \
        m.forecast(b, tab.E, adjacency=data.adjacency).data.tobytes()


def test_embedding_init_law():
    tab = EmbeddingTable(200, 4, np.random.default_rng(0))
    assert np.abs(tab.E.data).max() <= 1 / math.sqrt(4)
