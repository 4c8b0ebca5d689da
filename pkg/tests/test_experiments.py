"""Experiment harnesses and the embedding perturbation kernels."""
from datetime import timedelta

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st
from hypothesis.extra.numpy import arrays

from embreg.errors import IncompatibleChannels, TooFewSeries, TooShort
from embreg.experiments import (CURVE_FIELDS, CurveVariant, DatasetSpec, ModelSpec, PerturbationKind,
                                TransferPlan, budget_label, build, perturb_embeddings, run_learning_curves,
                                run_perturbation_analysis, run_transductive, run_transfer)
from embreg.regularizers import L2, Forgetting
from embreg.training import TrainConfig, evaluate, fit

SMALL = DatasetSpec(profile="local_offsets", n_series=5, n_steps=240, seed=0, window=4, horizon=2)
DIFF = DatasetSpec(profile="graph_diffusion", n_series=5, n_steps=240, seed=3, window=4, horizon=2)
TINY = ModelSpec(d_h=6, d_e=3)
QUICK = TrainConfig(learning_rate=0.01, batch_size=16, max_batches_per_epoch=4, max_epochs=3)


@pytest.fixture(scope="module")
def small():
    return SMALL.prepare()


# ------------------------------------------------------------ transductive

def test_zero_epochs_reports_untrained_mae(small):
    res = run_transductive(SMALL, TINY, (), (0,), TrainConfig(max_epochs=0), data=small)
    net, table = build(TINY, small, 0)
    expect = evaluate(net, table, small, small.test).mae
    test_mae = [r["value"] for r in res.rows if r["metric"] == "test_mae"]
    assert test_mae == [expect]


def test_repeated_seed_gives_identical_rows(small):
    res = run_transductive(SMALL, TINY, (L2(),), (7, 7), QUICK, data=small)
    vals = [r["value"] for r in res.rows if r["metric"] == "test_mae"]
    assert vals[0] == vals[1] and res.summary["test_mae"]["std"] == 0.0
    assert {r["regularizer"] for r in res.rows} == {"l2"} and res.rows[0]["model"] == "RNN+Emb"


def test_transductive_rejects_bad_inputs(small):
    with pytest.raises(ValueError):
        run_transductive(SMALL, TINY, (), (), QUICK, data=small)
    with pytest.raises(ValueError):
        run_transductive(SMALL, ModelSpec(d_e=0), (L2(),), (0,), QUICK, data=small)


# ------------------------------------------------------------ perturbation kernels

def test_noise_zero_is_identity():
    E = np.arange(6.0).reshape(3, 2)
    out = perturb_embeddings(PerturbationKind("noise", 0.0), E, np.random.default_rng(0))
    assert out.tobytes() == E.tobytes() and out is not E


def test_mean_fixed_point():
    E = np.tile([1.0, -2.0, 0.5], (4, 1))
    out = perturb_embeddings(PerturbationKind("mean"), E, np.random.default_rng(0))
    np.testing.assert_array_equal(out, E)


def test_rearranged_two_series_swap_rate():
    E = np.array([[0.0], [1.0]])
    rng = np.random.default_rng(0)
    swaps = sum(perturb_embeddings(PerturbationKind("rearranged"), E, rng)[0, 0] == 1.0 for _ in range(4000))
    assert abs(swaps / 4000 - 0.5) < 0.03


def test_sampled_variance_uses_n_minus_one():
    # rows 0, 1, 2 in one column: mean 1, sample variance 1
    E = np.array([[0.0], [1.0], [2.0]])
    rng = np.random.default_rng(3)
    draws = np.concatenate([perturb_embeddings(PerturbationKind("sampled"), E, rng)[:, 0] for _ in range(20_000)])
    assert abs(draws.mean() - 1.0) < 0.02 and abs(draws.var() - 1.0) < 0.03


def test_too_few_series():
    for kind in ("rearranged", "sampled"):
        with pytest.raises(TooFewSeries):
            perturb_embeddings(PerturbationKind(kind), np.ones((1, 3)), np.random.default_rng(0))
    with pytest.raises(ValueError):
        PerturbationKind("shuffle")


@settings(max_examples=40, deadline=None)
@given(E=arrays(np.float64, st.tuples(st.integers(2, 6), st.integers(1, 4)), elements=st.floats(-5, 5)),
       seed=st.integers(0, 2**16))
def test_perturbations_preserve_scale(E, seed):
    rng = np.random.default_rng(seed)
    rows = lambda X: sorted(map(tuple, X))
    assert rows(perturb_embeddings(PerturbationKind("rearranged"), E, rng)) == rows(E)
    mean = perturb_embeddings(PerturbationKind("mean"), E, rng)
    np.testing.assert_allclose(mean.mean(axis=0), E.mean(axis=0), atol=1e-12)
    assert np.all(mean.std(axis=0) <= E.std(axis=0) + 1e-12)


# ------------------------------------------------------------ perturbation analysis

@pytest.fixture(scope="module")
def trained(small):
    net, table = build(TINY, small, 0)
    fit(net, table, small, QUICK)
    return net, table


def test_noise_zero_equals_baseline(trained, small):
    E = trained[1].E.data.copy()
    res = run_perturbation_analysis(trained, small, ["noise", "rearranged"], noise_sigmas=(0.0,), seeds=(0, 1))
    assert res.summary["noise(0)"]["mean"] == res.baseline and res.summary["noise(0)"]["std"] == 0
    assert trained[1].E.data.tobytes() == E.tobytes()      # checkpoint untouched
    assert {r["perturbation"] for r in res.rows} == {"noise(0)", "rearranged"}


def test_mean_without_embeddings_equals_baseline(small):
    spec = ModelSpec(d_h=6, d_e=0)
    net, table = build(spec, small, 0)
    res = run_perturbation_analysis((net, table), small, ["mean"], seeds=(0,))
    assert res.summary["mean"]["mean"] == res.baseline


# ------------------------------------------------------------ transfer

def _plan(**kw):
    base = dict(sources=(DatasetSpec(profile="graph_diffusion", n_series=5, n_steps=240, seed=1, window=4,
                                     horizon=2),), target=DIFF, budgets=(None, timedelta(days=2)),
                model=ModelSpec(family="STGNN-MEAN", d_h=6, d_e=3), source_train=QUICK,
                finetune_train=TrainConfig(learning_rate=0.01, batch_size=16, max_batches_per_epoch=2,
                                           max_epochs=3))
    base.update(kw)
    return TransferPlan(**base)


def test_transfer_freezes_global_and_zero_shot_is_stable(tmp_path):
    a = run_transfer(_plan(), tmp_path / "a")
    b = run_transfer(_plan(budgets=(timedelta(days=2), None)))
    assert a.frozen and b.frozen
    assert a.table["zero-shot"] == b.table["zero-shot"]       # zero-shot does not depend on budget order
    assert a.table["2d"] == b.table["2d"]
    assert (tmp_path / "a" / "finetune_2d" / "best.ckpt").exists()


def test_transfer_errors():
    with pytest.raises(IncompatibleChannels):
        run_transfer(_plan(target=DatasetSpec(profile="graph_diffusion", n_series=5, n_steps=240, seed=3,
                                              window=4, horizon=2, temporal_encodings=False)))
    with pytest.raises(TooShort):
        run_transfer(_plan(budgets=(timedelta(hours=3),)))
    with pytest.raises(ValueError):
        _plan(sources=(DIFF,))


def test_budget_labels():
    assert [budget_label(b) for b in (None, timedelta(days=1), timedelta(weeks=2))] == ["zero-shot", "1d", "14d"]


# ------------------------------------------------------------ curves

def test_no_variants_writes_header_only(tmp_path):
    rows, bands = run_learning_curves(SMALL, TINY, [], out_path=tmp_path / "c.csv")
    assert rows == [] and bands == []
    assert (tmp_path / "c.csv").read_text().strip() == ",".join(CURVE_FIELDS)


def test_zero_strength_curve_matches_plain(small):
    rows, bands = run_learning_curves(SMALL, TINY, [CurveVariant("plain"), CurveVariant("l2", (L2(0.0),))],
                                      (0, 1), QUICK, data=small)
    curve = lambda name: [r["val_mae"] for r in rows if r["variant"] == name]
    assert curve("plain") == curve("l2")
    assert [b["variant"] for b in bands][:1] == ["plain"] and bands[0]["n_seeds"] == 2


def test_forgetting_spikes_at_resets(small):
    cfg = TrainConfig(learning_rate=0.02, batch_size=16, max_batches_per_epoch=8, max_epochs=12)
    f = Forgetting(period=4, warm_up=6, halt_epoch=11)
    rows, _ = run_learning_curves(SMALL, TINY, [CurveVariant("forget", (f,))], (0,), cfg, data=small)
    v = [r["val_mae"] for r in rows]
    for e in (6, 10):                      # reset happens after epoch e's updates, before its evaluation
        assert v[e] > v[e - 1], (e, v)
