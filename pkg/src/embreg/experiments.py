"""Study harnesses: transductive benchmark, transfer, embedding perturbation, learning curves."""
from __future__ import annotations

import copy
import csv
import logging
from dataclasses import dataclass, field, replace
from datetime import timedelta
from pathlib import Path

import numpy as np

from .data import PreparedData, SplitSpec, generate_synthetic_collection, ingest_csv, prepare
from .errors import IncompatibleChannels, TooFewSeries, TooShort
from .models import EmbeddingTable, ForecastModel, ModelConfig, build_table
from .regularizers import RegularizerSpec
from .training import TrainConfig, evaluate, fit

log = logging.getLogger(__name__)

RESULT_FIELDS = ("dataset", "model", "regularizer", "seed", "metric", "value")
CURVE_FIELDS = ("epoch", "variant", "seed", "val_mae")
BAND_FIELDS = ("epoch", "variant", "n_seeds", "mean", "std")


@dataclass(frozen=True)
class DatasetSpec:
    kind: str = "synthetic"
    name: str | None = None
    profile: str = "local_offsets"
    n_series: int = 20
    n_steps: int = 2000
    noise: float = 0.3
    seed: int = 0
    observations: str | None = None
    covariates: str | None = None
    adjacency: str | None = None
    window: int = 12
    horizon: int = 3
    temporal_encodings: bool = True
    train_fraction: float = 0.7
    val_fraction: float = 0.1
    test_fraction: float = 0.2

    @property
    def label(self) -> str:
        if self.name:
            return self.name
        if self.kind == "synthetic":
            return f"synthetic-{self.profile}"
        return Path(self.observations).stem

    def load(self):
        if self.kind == "synthetic":
            return generate_synthetic_collection(self.n_series, self.n_steps, self.seed,
                                                 self.profile, noise=self.noise)
        if self.kind == "csv":
            return ingest_csv(self.observations, self.covariates, self.adjacency)
        raise ValueError(f"unknown dataset kind {self.kind!r}")

    def prepare(self) -> PreparedData:
        split = SplitSpec(self.train_fraction, self.val_fraction, self.test_fraction)
        return prepare(self.load(), self.window, self.horizon, split,
                       encodings=self.temporal_encodings, name=self.label)


@dataclass(frozen=True)
class ModelSpec:
    family: str = "RNN"
    d_h: int = 16
    d_e: int = 8
    heads: int = 2
    spatial_layers: int = 2
    hidden_dropout: float = 0.0

    @property
    def label(self) -> str:
        return self.family + ("+Emb" if self.d_e else "")

    def config_for(self, data: PreparedData) -> ModelConfig:
        c = data.collection
        return ModelConfig(family=self.family, d_in=c.input_channels, d_u=c.d_u, d_x=c.d_x,
                           d_h=self.d_h, d_e=self.d_e, window=data.W, horizon=data.H,
                           heads=self.heads, spatial_layers=self.spatial_layers,
                           hidden_dropout=self.hidden_dropout)


def build(model_spec: ModelSpec, data: PreparedData, seed: int, specs=()):
    """Fresh model and embedding table; initialization depends only on ``seed``."""
    rng = np.random.default_rng([seed, 0])
    model = ForecastModel(model_spec.config_for(data), rng)
    table = build_table(data.collection.n_series, model_spec.d_e, rng, specs)
    return model, table


def regularizer_label(specs) -> str:
    return "+".join(s.kind for s in specs) if specs else "none"


def _summary(values):
    arr = np.asarray(values, dtype=np.float64)
    return {"mean": float(arr.mean()), "std": float(arr.std()), "n": int(arr.size)}


# ---------------------------------------------------------------- transductive

@dataclass
class TransductiveResult:
    reports: dict = field(default_factory=dict)   # seed -> (val report, test report)
    rows: list = field(default_factory=list)
    summary: dict = field(default_factory=dict)


def run_transductive(dataset: DatasetSpec, model: ModelSpec, regularizers=(), seeds=(0,),
                     train: TrainConfig = TrainConfig(), out_dir=None, data=None) -> TransductiveResult:
    if not seeds:
        raise ValueError("need at least one seed")
    data = data if data is not None else dataset.prepare()
    regularizers = tuple(regularizers)
    if model.d_e == 0 and regularizers:
        raise ValueError("embedding regularizers need d_e > 0")
    result = TransductiveResult()
    reg_label = regularizer_label(regularizers)
    for seed in seeds:
        net, table = build(model, data, seed, regularizers)
        cfg = replace(train, seed=seed, regularizers=regularizers)
        run_dir = None if out_dir is None else Path(out_dir) / f"seed_{seed}"
        _, fit_report = fit(net, table, data, cfg, run_dir)
        test = evaluate(net, table, data, data.test, regularizers, cfg.eval_batch_size)
        result.reports[seed] = (fit_report, test)
        for metric, value in (("test_mae", test.mae), ("test_mmre", test.mmre),
                              ("val_mae", fit_report.mae)):
            result.rows.append({"dataset": dataset.label, "model": model.label,
                                "regularizer": reg_label, "seed": seed,
                                "metric": metric, "value": value})
    for metric in ("test_mae", "test_mmre"):
        result.summary[metric] = _summary([r["value"] for r in result.rows if r["metric"] == metric])
    return result


# ---------------------------------------------------------------- transfer

@dataclass(frozen=True)
class TransferPlan:
    sources: tuple
    target: DatasetSpec
    budgets: tuple = (None, timedelta(days=1), timedelta(weeks=1))   # None = zero-shot
    model: ModelSpec = ModelSpec(family="STGNN-MEAN")
    regularizers: tuple = ()
    source_train: TrainConfig = TrainConfig(learning_rate=0.005, max_epochs=150, early_stop_patience=50)
    finetune_train: TrainConfig = TrainConfig(learning_rate=0.001, max_epochs=1000,
                                              early_stop_patience=100)
    seed: int = 0
    allow_target_in_sources: bool = False

    def __post_init__(self):
        if not self.allow_target_in_sources and self.target in self.sources:
            raise ValueError("target collection must not be one of the sources")


def budget_label(budget) -> str:
    if budget is None:
        return "zero-shot"
    days = budget / timedelta(days=1)
    return f"{days:g}d"


@dataclass
class TransferResult:
    table: dict            # budget label -> test MAE
    frozen: bool           # global parameters bitwise unchanged during every fine-tune
    rows: list = field(default_factory=list)


def run_transfer(plan: TransferPlan, out_dir=None) -> TransferResult:
    sources = [s.prepare() for s in plan.sources]
    target = plan.target.prepare()
    shape = lambda d: (d.collection.d_x, d.collection.d_u, d.collection.input_channels)
    if any(shape(s) != shape(target) for s in sources):
        raise IncompatibleChannels(f"sources {[shape(s) for s in sources]} vs target {shape(target)}")

    specs = tuple(plan.regularizers)
    rng = np.random.default_rng([plan.seed, 0])
    net = ForecastModel(plan.model.config_for(target), rng)
    tables = [build_table(s.collection.n_series, plan.model.d_e, rng, specs) for s in sources]
    src_cfg = replace(plan.source_train, seed=plan.seed, regularizers=specs)
    fit(net, tables, sources, src_cfg, None if out_dir is None else Path(out_dir) / "source")

    frozen_ref = {k: v.data.copy() for k, v in net.parameters().items()}
    fresh = EmbeddingTable(target.collection.n_series, plan.model.d_e,
                           np.random.default_rng([plan.seed, 5]))
    fresh_ref = fresh.snapshot()
    ft_cfg = replace(plan.finetune_train, seed=plan.seed, regularizers=(), freeze_global=True)

    result = TransferResult(table={}, frozen=True)
    for budget in plan.budgets:
        table = copy.deepcopy(fresh)
        table.load(fresh_ref)
        if budget is not None:
            steps = int(budget / target.collection.sampling_period)
            head = target.head(steps)
            if head.size == 0:
                raise TooShort(f"budget {budget} holds no complete training window")
            sub = replace(target, train=head)
            run_dir = None if out_dir is None else Path(out_dir) / f"finetune_{budget_label(budget)}"
            fit(net, table, sub, ft_cfg, run_dir)
        same = all(np.array_equal(frozen_ref[k], v.data) for k, v in net.parameters().items())
        result.frozen &= same
        mae = evaluate(net, table, target, target.test, (), ft_cfg.eval_batch_size).mae
        label = budget_label(budget)
        result.table[label] = mae
        result.rows.append({"dataset": target.name, "model": plan.model.label,
                            "regularizer": regularizer_label(specs), "seed": plan.seed,
                            "metric": f"test_mae@{label}", "value": mae})
    return result


# ---------------------------------------------------------------- perturbations

@dataclass(frozen=True)
class PerturbationKind:
    kind: str              # noise | rearranged | mean | sampled
    sigma: float = 0.0

    def __post_init__(self):
        if self.kind not in ("noise", "rearranged", "mean", "sampled"):
            raise ValueError(f"unknown perturbation {self.kind!r}")

    @property
    def label(self) -> str:
        return f"noise({self.sigma:g})" if self.kind == "noise" else self.kind


def perturb_embeddings(kind: PerturbationKind, E: np.ndarray, rng: np.random.Generator) -> np.ndarray:
    E = np.asarray(E, dtype=np.float64)
    n = E.shape[0]
    if kind.kind == "noise":
        if kind.sigma == 0:
            return E.copy()
        return E + rng.normal(0.0, kind.sigma, size=E.shape)
    if kind.kind == "rearranged":
        if n < 2:
            raise TooFewSeries("rearranging needs at least two embeddings")
        return E[rng.permutation(n)]
    if kind.kind == "mean":
        return np.broadcast_to(E.mean(axis=0), E.shape).copy()
    if n < 2:
        raise TooFewSeries("sample variance needs at least two embeddings")
    mu = E.mean(axis=0)
    var = ((E - mu) ** 2).sum(axis=0) / (n - 1)
    return mu + rng.standard_normal(E.shape) * np.sqrt(var)


@dataclass
class PerturbationResult:
    rows: list = field(default_factory=list)     # perturbation, seed, test_mae
    summary: dict = field(default_factory=dict)  # perturbation label -> mean/std
    baseline: float = float("nan")


def run_perturbation_analysis(checkpoint, data: PreparedData, kinds, noise_sigmas=(), seeds=(0,),
                              specs=(), method: str = "model") -> PerturbationResult:
    """Test MAE of a trained ``(model, table)`` after perturbing a copy of its embeddings."""
    model, table = checkpoint
    result = PerturbationResult()
    result.baseline = evaluate(model, table, data, data.test, specs).mae
    result.summary["baseline"] = {"mean": result.baseline, "std": 0.0, "n": 1}
    expanded = []
    for k in kinds:
        k = k if isinstance(k, PerturbationKind) else PerturbationKind(k)
        if k.kind == "noise" and noise_sigmas:
            expanded.extend(PerturbationKind("noise", s) for s in noise_sigmas)
        else:
            expanded.append(k)
    for kind in expanded:
        values = []
        for seed in seeds:
            work = copy.deepcopy(table)
            if work.d_e:
                work.E.data[...] = perturb_embeddings(kind, table.E.data,
                                                      np.random.default_rng([seed, 7]))
            mae = evaluate(model, work, data, data.test, specs).mae
            values.append(mae)
            result.rows.append({"method": method, "perturbation": kind.label, "seed": seed,
                                "test_mae": mae})
        result.summary[kind.label] = _summary(values)
    return result


# ---------------------------------------------------------------- learning curves

@dataclass(frozen=True)
class CurveVariant:
    name: str
    regularizers: tuple = ()
    d_e: int | None = None


def run_learning_curves(dataset: DatasetSpec, model: ModelSpec, variants, seeds=(0,),
                        train: TrainConfig = TrainConfig(), out_path=None, data=None):
    """Per-epoch validation MAE for each variant and seed; optional CSV with bands."""
    rows = []
    variants = list(variants)
    if variants:
        data = data if data is not None else dataset.prepare()
    for v in variants:
        spec = model if v.d_e is None else replace(model, d_e=v.d_e)
        for seed in seeds:
            net, table = build(spec, data, seed, v.regularizers)
            cfg = replace(train, seed=seed, regularizers=tuple(v.regularizers), early_stop_patience=None)
            _, rep = fit(net, table, data, cfg)
            rows.extend({"epoch": e, "variant": v.name, "seed": seed, "val_mae": m}
                        for e, m in enumerate(rep.val_curve))
    bands = curve_bands(rows)
    if out_path is not None:
        write_csv(rows, out_path, CURVE_FIELDS)
        write_csv(bands, Path(out_path).with_name(Path(out_path).stem + "_bands.csv"), BAND_FIELDS)
    return rows, bands


def curve_bands(rows):
    grouped: dict = {}
    for r in rows:
        grouped.setdefault((r["variant"], r["epoch"]), []).append(r["val_mae"])
    order = {v: i for i, v in enumerate(dict.fromkeys(r["variant"] for r in rows))}
    out = []
    for (variant, epoch), vals in sorted(grouped.items(), key=lambda kv: (order[kv[0][0]], kv[0][1])):
        s = _summary(vals)
        out.append({"epoch": epoch, "variant": variant, "n_seeds": s["n"],
                    "mean": s["mean"], "std": s["std"]})
    return out


def write_csv(rows, path, fields=RESULT_FIELDS) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", newline="") as fh:
        w = csv.DictWriter(fh, fieldnames=list(fields), extrasaction="ignore")
        w.writeheader()
        for r in rows:
            w.writerow({k: (repr(v) if isinstance(v, float) else v) for k, v in r.items()})
    return path
