"""Optimization loop, metrics and run artifacts."""
from __future__ import annotations

import json
import re
import time
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import tensor as T
from .errors import EmptyMask, NonFinite, ShapeMismatch, ZeroDenominator
from .models import save_checkpoint
from .regularizers import (combine, forgetting_active, forgetting_step, penalties_by_kind,
                           validate_specs)
from .tensor import Value


# ---------------------------------------------------------------- metrics

def _full_mask(mask, shape):
    mask = np.asarray(mask, dtype=np.float64)
    if mask.shape != shape:
        if mask.shape == shape[:-1]:
            mask = mask[..., None]
        mask = np.broadcast_to(mask, shape)
    return mask


def masked_mae(pred, target, mask):
    """``sum(|pred - target| * mask) / sum(mask)``; differentiable when ``pred`` is a Value."""
    if isinstance(pred, Value):
        target = np.asarray(target, dtype=np.float64)
        if pred.shape != target.shape:
            raise ShapeMismatch(f"pred {pred.shape} vs target {target.shape}")
        m = _full_mask(mask, pred.shape)
        total = m.sum()
        if total == 0:
            raise EmptyMask("mask has no observed entries")
        return T.sum_(T.abs_(pred - target) * m) * (1.0 / total)
    pred = np.asarray(pred, dtype=np.float64)
    target = np.asarray(target, dtype=np.float64)
    if pred.shape != target.shape:
        raise ShapeMismatch(f"pred {pred.shape} vs target {target.shape}")
    m = _full_mask(mask, pred.shape)
    total = m.sum()
    if total == 0:
        raise EmptyMask("mask has no observed entries")
    return float((np.abs(pred - target) * m).sum() / total)


def mmre(pred, target, mask):
    """Per-channel relative error and their mean, both in percent.

    The last axis indexes channels.
    """
    pred = np.asarray(pred, dtype=np.float64)
    target = np.asarray(target, dtype=np.float64)
    if pred.shape != target.shape:
        raise ShapeMismatch(f"pred {pred.shape} vs target {target.shape}")
    m = _full_mask(mask, pred.shape)
    if m.sum() == 0:
        raise EmptyMask("mask has no observed entries")
    axes = tuple(range(pred.ndim - 1))
    num = (np.abs(pred - target) * m).sum(axis=axes)
    den = (np.abs(target) * m).sum(axis=axes)
    if np.any(den == 0):
        raise ZeroDenominator(f"channels {np.nonzero(den == 0)[0].tolist()} have zero masked |target|")
    mre = 100.0 * num / den
    return [float(v) for v in mre], float(mre.mean())


# ---------------------------------------------------------------- Adam

@dataclass
class AdamState:
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    t: int = 0
    m: dict = field(default_factory=dict)
    v: dict = field(default_factory=dict)


def adam_step(state: AdamState, params: dict, grads: dict, lr: float) -> None:
    """In-place bias-corrected Adam update of every array in ``params`` that has a gradient."""
    for name, g in grads.items():
        if not np.all(np.isfinite(g)):
            raise NonFinite(f"non-finite gradient for {name}")
    state.t += 1
    bc1 = 1.0 - state.beta1 ** state.t
    bc2 = 1.0 - state.beta2 ** state.t
    for name, g in grads.items():
        p = params[name]
        if name not in state.m:
            state.m[name] = np.zeros_like(p)
            state.v[name] = np.zeros_like(p)
        m, v = state.m[name], state.v[name]
        m *= state.beta1
        m += (1.0 - state.beta1) * g
        v *= state.beta2
        v += (1.0 - state.beta2) * (g * g)
        p -= lr * (m / bc1) / (np.sqrt(v / bc2) + state.eps)


class Adam:
    """Adam over a subset of named :class:`Value` parameters."""

    def __init__(self, params: dict[str, Value], lr: float, trainable=None, **kw):
        self.params = params
        self.lr = lr
        self.trainable = list(params) if trainable is None else list(trainable)
        self.state = AdamState(**kw)

    def step(self) -> None:
        grads = {n: self.params[n].grad for n in self.trainable}
        adam_step(self.state, {n: self.params[n].data for n in self.trainable}, grads, self.lr)

    def zero_grad(self) -> None:
        for p in self.params.values():
            p.zero_grad()

    def reset_state(self, name: str, rows=None) -> None:
        """Zero the moments of ``name`` (only ``rows`` when given)."""
        if name not in self.state.m:
            return
        if rows is None:
            self.state.m[name][...] = 0.0
            self.state.v[name][...] = 0.0
        else:
            self.state.m[name][rows] = 0.0
            self.state.v[name][rows] = 0.0


# ---------------------------------------------------------------- configuration

@dataclass(frozen=True)
class TrainConfig:
    learning_rate: float = 1e-3
    batch_size: int = 64
    max_batches_per_epoch: int = 300
    max_epochs: int = 100
    early_stop_patience: int | None = None
    regularizers: tuple = ()
    seed: int = 0
    freeze_global: bool = False
    trainable_parameter_filter: str | None = None
    eval_batch_size: int = 256
    log_wall_time: bool = False

    def __post_init__(self):
        if self.batch_size < 1 or self.max_batches_per_epoch < 1:
            raise ValueError("batch_size and max_batches_per_epoch must be >= 1")
        if self.max_epochs < 0 or self.learning_rate < 0:
            raise ValueError("max_epochs and learning_rate must be >= 0")
        if self.early_stop_patience is not None and not 0 < self.early_stop_patience <= max(self.max_epochs, 1):
            raise ValueError("early_stop_patience must lie in [1, max_epochs]")
        object.__setattr__(self, "regularizers", tuple(self.regularizers))
        validate_specs(self.regularizers)

    def trainable(self, names) -> list[str]:
        if self.freeze_global:
            return [n for n in names if n.startswith("embedding")]
        if self.trainable_parameter_filter:
            pat = re.compile(self.trainable_parameter_filter)
            return [n for n in names if pat.search(n)]
        return list(names)


@dataclass
class MetricReport:
    mae: float = float("nan")
    mre: list = field(default_factory=list)
    mmre: float = float("nan")
    train_curve: list = field(default_factory=list)
    val_curve: list = field(default_factory=list)
    best_epoch: int | None = None
    resets: list = field(default_factory=list)


class Checkpoint:
    """In-memory snapshot of model and table parameters."""

    def __init__(self, model, tables, epoch=None, val_mae=None):
        self.arrays = {n: v.data.copy() for n, v in _named(model, tables).items()}
        self.epoch = epoch
        self.val_mae = val_mae

    def restore(self, model, tables) -> None:
        for n, v in _named(model, tables).items():
            v.data[...] = self.arrays[n]


def _table_prefix(k: int, n_tables: int) -> str:
    return "embedding." if n_tables == 1 else f"embedding.{k}."


def _named(model, tables) -> dict[str, Value]:
    out = dict(model.parameters())
    for k, t in enumerate(tables):
        out.update(t.parameters(_table_prefix(k, len(tables))))
    return out


class _PrefixedOptimizer:
    """Routes forgetting's moment resets to the names a table has inside ``fit``."""

    def __init__(self, opt: Adam, prefix: str):
        self.opt, self.prefix = opt, prefix

    def reset_state(self, name, rows=None):
        if name.startswith("embedding."):
            name = self.prefix + name[len("embedding."):]
        self.opt.reset_state(name, rows)


# ---------------------------------------------------------------- evaluation

def predict(model, table, data, starts, specs=(), batch_size: int = 256):
    """De-standardized predictions and targets for windows ``starts`` (eval mode)."""
    view, _, _ = combine(specs, table, mode="eval")
    preds, ys, masks = [], [], []
    for i in range(0, len(starts), batch_size):
        b = data.batch(starts[i:i + batch_size])
        out = model.forecast(b, view, mode="eval", adjacency=data.adjacency).data
        preds.append(data.scaler.inverse(out))
        ys.append(data.scaler.inverse(b.y))
        masks.append(b.mask)
    return np.concatenate(preds), np.concatenate(ys), np.concatenate(masks)


def evaluate(model, table, data, starts, specs=(), batch_size: int = 256) -> MetricReport:
    starts = np.asarray(starts)
    if starts.size == 0:
        return MetricReport()
    pred, y, mask = predict(model, table, data, starts, specs, batch_size)
    report = MetricReport(mae=masked_mae(pred, y, mask))
    try:
        report.mre, report.mmre = mmre(pred, y, mask)
    except ZeroDenominator:
        pass
    return report


def _pooled_mae(model, tables, datasets, split, specs, batch_size):
    num = den = 0.0
    for table, data in zip(tables, datasets):
        starts = getattr(data, split)
        if len(starts) == 0:
            continue
        pred, y, mask = predict(model, table, data, starts, specs, batch_size)
        m = _full_mask(mask, pred.shape)
        num += float((np.abs(pred - y) * m).sum())
        den += float(m.sum())
    return num / den if den else None


# ---------------------------------------------------------------- training

@dataclass
class StepResult:
    loss: Value
    mae: Value
    penalty: Value
    pred: Value
    batch: object


def train_step(model, table, data, starts, specs, rng_reg, rng_model) -> StepResult:
    """Build the training graph for one batch (loss = masked MAE + penalties)."""
    batch = data.batch(starts)
    view, pen, _ = combine(specs, table, mode="train", rng=rng_reg)
    pred = model.forecast(batch, view, mode="train", rng=rng_model, adjacency=data.adjacency)
    mae = masked_mae(pred, batch.y, batch.mask)
    return StepResult(mae + pen, mae, pen, pred, batch)


def _epoch_batches(datasets, config, rng):
    per_source = []
    for data in datasets:
        order = rng.permutation(data.train)
        per_source.append([order[i:i + config.batch_size]
                           for i in range(0, len(order), config.batch_size)])
    schedule = []
    longest = max(len(b) for b in per_source)
    for i in range(longest):
        for k, batches in enumerate(per_source):
            if i < len(batches):
                schedule.append((k, batches[i]))
    return schedule[:config.max_batches_per_epoch]


def fit(model, tables, datasets, config: TrainConfig, run_dir=None):
    """Train ``model`` (and the per-dataset embedding ``tables``); return the best checkpoint.

    ``tables`` / ``datasets`` may be single objects or aligned lists; with several
    sources, batches alternate between them.
    """
    if not isinstance(tables, (list, tuple)):
        tables = [tables]
    if not isinstance(datasets, (list, tuple)):
        datasets = [datasets]
    specs = config.regularizers
    seed = config.seed
    rng_shuffle = np.random.default_rng([seed, 1])
    rng_reg = np.random.default_rng([seed, 2])
    rng_model = np.random.default_rng([seed, 3])
    rng_forget = np.random.default_rng([seed, 4])

    params = _named(model, tables)
    opt = Adam(params, config.learning_rate, trainable=config.trainable(params))
    report = MetricReport()
    best = Checkpoint(model, tables)
    has_val = any(len(d.val) for d in datasets)
    since_best = 0
    forget_state: dict = {}
    metrics_fh = None
    if run_dir is not None:
        run_dir = Path(run_dir)
        run_dir.mkdir(parents=True, exist_ok=True)
        metrics_fh = open(run_dir / "metrics.jsonl", "w")

    try:
        for epoch in range(config.max_epochs):
            t0 = time.perf_counter()
            losses, maes, pens = [], [], {}
            for k, starts in _epoch_batches(datasets, config, rng_shuffle):
                opt.zero_grad()
                step = train_step(model, tables[k], datasets[k], starts, specs, rng_reg, rng_model)
                for kind, value in penalties_by_kind(specs, tables[k]).items():
                    pens.setdefault(kind, []).append(value)
                T.backward(step.loss)
                opt.step()
                losses.append(float(step.loss.data))
                scale = datasets[k].scaler.std
                maes.append(masked_mae(step.pred.data * scale, step.batch.y * scale, step.batch.mask))
            did_reset = False
            for k, table in enumerate(tables):
                for s in specs:
                    did_reset |= forgetting_step(
                        s, epoch, table, model if k == 0 else _NoModel(), rng_forget,
                        _PrefixedOptimizer(opt, _table_prefix(k, len(tables))),
                        report.val_curve, forget_state)
            if did_reset:
                report.resets.append(epoch)

            val_mae = _pooled_mae(model, tables, datasets, "val", specs, config.eval_batch_size) \
                if has_val else None
            train_loss = float(np.mean(losses)) if losses else float("nan")
            report.train_curve.append(train_loss)
            if val_mae is not None:
                report.val_curve.append(val_mae)
                if best.val_mae is None or val_mae < best.val_mae:
                    best = Checkpoint(model, tables, epoch, val_mae)
                    report.best_epoch = epoch
                    since_best = 0
                else:
                    since_best += 1
            else:
                best = Checkpoint(model, tables, epoch, None)
                report.best_epoch = epoch

            if metrics_fh is not None:
                rec = {"epoch": epoch, "train_loss": train_loss,
                       "train_mae": float(np.mean(maes)) if maes else None,
                       "val_mae": val_mae,
                       "penalties": {k: float(np.mean(v)) for k, v in pens.items()},
                       "reset_fired": did_reset,
                       "wall_time_s": time.perf_counter() - t0 if config.log_wall_time else None}
                metrics_fh.write(json.dumps(rec, sort_keys=True) + "\n")

            patience = config.early_stop_patience
            if patience is not None and has_val and since_best >= patience \
                    and not forgetting_active(specs, epoch + 1, forget_state):
                break
    finally:
        if metrics_fh is not None:
            metrics_fh.close()

    if run_dir is not None:
        states = {"shuffle": rng_shuffle.bit_generator.state, "reg": rng_reg.bit_generator.state,
                  "model": rng_model.bit_generator.state, "forget": rng_forget.bit_generator.state}
        save_checkpoint(run_dir / "last.ckpt", model, list(tables), states,
                        {"epoch": config.max_epochs - 1})
    best.restore(model, tables)
    if run_dir is not None:
        save_checkpoint(run_dir / "best.ckpt", model, list(tables), None,
                        {"epoch": best.epoch, "val_mae": best.val_mae})
    if best.val_mae is not None:
        report.mae = best.val_mae
    return best, report


class _NoModel:
    """Stand-in so secondary tables reset only their own rows."""

    def reset_embedding_columns(self, rng):
        pass

    def embedding_rows(self):
        return {}
