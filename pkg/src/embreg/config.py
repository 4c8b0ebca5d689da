"""Run configuration: YAML tree -> validated, fully resolved ``RunConfig``."""
from __future__ import annotations

import dataclasses
import os
import re
from dataclasses import dataclass, fields
from datetime import timedelta
from pathlib import Path

import yaml

from .errors import ConstraintViolation, ParseError, UnknownKey
from .experiments import CurveVariant, DatasetSpec, ModelSpec, PerturbationKind
from .regularizers import TRANSFER_STRENGTH, RegularizerSpec
from .training import TrainConfig

EXPERIMENTS = ("transductive", "transfer", "perturbation", "curves")
SEED_ENV = "EMBREG_SEED_OVERRIDE"

# config-file key -> dataclass field where the two differ
_MODEL_KEYS = {"family": "family", "d_h": "d_h", "d_e": "d_e", "layers": "spatial_layers",
               "heads": "heads", "hidden_dropout": "hidden_dropout"}
_DATASET_KEYS = {f.name for f in fields(DatasetSpec)} - {"window", "horizon"}
_TRAIN_KEYS = {f.name for f in fields(TrainConfig)} - {"regularizers", "seed", "trainable_parameter_filter"}
_REG_KEYS = {f.name for f in fields(RegularizerSpec)}


@dataclass(frozen=True)
class RunConfig:
    experiment: str = "transductive"
    dataset: DatasetSpec = DatasetSpec()
    model: ModelSpec = ModelSpec()
    regularizers: tuple = ()
    train: TrainConfig = TrainConfig()
    seeds: tuple = (0,)
    output_dir: str = "runs/default"
    # transfer
    sources: tuple = ()
    budgets: tuple = (None, timedelta(days=1), timedelta(weeks=1))
    finetune: TrainConfig = TrainConfig(learning_rate=0.001, max_epochs=1000, early_stop_patience=100)
    # perturbation
    perturbations: tuple = ()
    noise_sigmas: tuple = ()
    perturbation_draws: int = 1
    # curves
    variants: tuple = ()

    def with_seeds(self, seeds) -> "RunConfig":
        return dataclasses.replace(self, seeds=tuple(int(s) for s in seeds))


# ---------------------------------------------------------------- YAML with line numbers

class _Loader(yaml.SafeLoader):
    """Safe loader that also reads exponent floats without a dot (``1e-4``)."""


_Loader.add_implicit_resolver(
    "tag:yaml.org,2002:float",
    re.compile(r"^[-+]?(?:[0-9][0-9_]*)(?:\.[0-9_]*)?[eE][-+]?[0-9]+$"),
    list("-+0123456789"))

def _construct(node, lines: dict, path: str):
    """Plain Python value for ``node``; records the line of every mapping key in ``lines``."""
    if isinstance(node, yaml.MappingNode):
        out = {}
        for k_node, v_node in node.value:
            key = k_node.value
            sub = f"{path}.{key}" if path else key
            if key in out:
                raise ParseError(f"line {k_node.start_mark.line + 1}: duplicate key {sub!r}")
            lines[sub] = k_node.start_mark.line + 1
            out[key] = _construct(v_node, lines, sub)
        return out
    if isinstance(node, yaml.SequenceNode):
        return [_construct(v, lines, f"{path}[{i}]") for i, v in enumerate(node.value)]
    lines.setdefault(path, node.start_mark.line + 1)
    return _scalar(node)


def _scalar(node):
    loader = _Loader("")
    try:
        return loader.construct_object(node)
    finally:
        loader.dispose()


def load_tree(text: str, source: str = "<config>"):
    lines: dict = {}
    try:
        node = yaml.compose(text, Loader=_Loader)
    except yaml.MarkedYAMLError as exc:
        mark = exc.problem_mark
        where = f"line {mark.line + 1}, column {mark.column + 1}" if mark else "unknown position"
        raise ParseError(f"{source}: {where}: {exc.problem}") from None
    if node is None:
        return {}, lines
    tree = _construct(node, lines, "")
    if not isinstance(tree, dict):
        raise ParseError(f"{source}: line 1: top level must be a mapping")
    return tree, lines


# ---------------------------------------------------------------- schema

class _Ctx:
    def __init__(self, lines, source):
        self.lines, self.source = lines, source

    def where(self, path):
        line = self.lines.get(path)
        return f"{self.source}: line {line}: " if line else f"{self.source}: "

    def keys(self, block: dict, allowed, path: str):
        if not isinstance(block, dict):
            raise ParseError(f"{self.where(path)}{path!r} must be a mapping")
        for k in block:
            if k not in allowed:
                sub = f"{path}.{k}" if path else k
                raise UnknownKey(sub, self.lines.get(sub), sorted(allowed))

    def build(self, cls, kwargs, path):
        defaults = {f.name: f.default for f in fields(cls)}
        for k, v in kwargs.items():
            d = defaults.get(k)
            if d is None or d is dataclasses.MISSING:
                continue
            ok = isinstance(v, bool) if isinstance(d, bool) else \
                (isinstance(v, (int, float)) and not isinstance(v, bool)) if isinstance(d, float) else \
                (isinstance(v, int) and not isinstance(v, bool)) if isinstance(d, int) else isinstance(v, type(d))
            if not ok:
                sub = f"{path}.{k}"
                raise ConstraintViolation(f"{self.where(sub)}{sub} expects {type(d).__name__}, got {v!r}")
        try:
            return cls(**kwargs)
        except (TypeError, ValueError) as exc:
            raise ConstraintViolation(f"{self.where(path)}{path}: {exc}") from None


_DURATION = re.compile(r"^\s*(\d+(?:\.\d+)?)\s*([hdw])\s*$")


def parse_budget(value):
    if value in (None, 0, "0", "zero-shot", "zero_shot"):
        return None
    m = _DURATION.match(str(value))
    if not m:
        raise ValueError(f"budget {value!r} is not zero-shot or <number><h|d|w>")
    unit = {"h": "hours", "d": "days", "w": "weeks"}[m.group(2)]
    return timedelta(**{unit: float(m.group(1))})


def format_budget(b) -> str:
    if b is None:
        return "zero-shot"
    hours = b / timedelta(hours=1)
    return f"{hours / 24:g}d" if hours % 24 == 0 else f"{hours:g}h"


def _dataset(ctx, block, path, window, horizon):
    ctx.keys(block, _DATASET_KEYS, path)
    spec = ctx.build(DatasetSpec, {**block, "window": window, "horizon": horizon}, path)
    if spec.kind == "csv":
        for key in ("observations", "covariates", "adjacency"):
            p = getattr(spec, key)
            if key == "observations" and p is None:
                raise ConstraintViolation(f"{ctx.where(path)}{path}.observations is required for csv data")
            if p is not None and not Path(p).is_file():
                raise ConstraintViolation(f"{ctx.where(path + '.' + key)}{path}.{key}: no such file {p!r}")
    elif spec.kind != "synthetic":
        raise ConstraintViolation(f"{ctx.where(path + '.kind')}{path}.kind must be synthetic or csv")
    return spec


def _regularizers(ctx, blocks, path, d_e, defaults=None):
    """``defaults`` fills in strengths the block omits (transfer runs use larger ones)."""
    if blocks is None:
        return ()
    if not isinstance(blocks, list):
        raise ParseError(f"{ctx.where(path)}{path!r} must be a list")
    out = []
    for i, block in enumerate(blocks):
        sub = f"{path}[{i}]"
        ctx.keys(block, _REG_KEYS, sub)
        if defaults and "strength" not in block and block.get("kind") in defaults:
            block = {**block, "strength": defaults[block["kind"]]}
        out.append(ctx.build(RegularizerSpec, block, sub))
    if d_e == 0 and any(s.kind != "none" for s in out):
        raise ConstraintViolation(f"{ctx.where('model.d_e')}d_e = 0 forbids embedding regularizers")
    return tuple(out)


def _train(ctx, block, path, base: TrainConfig):
    block = block or {}
    ctx.keys(block, _TRAIN_KEYS, path)
    ctx.build(TrainConfig, block, path)   # type check
    try:
        return dataclasses.replace(base, **block)
    except (TypeError, ValueError) as exc:
        raise ConstraintViolation(f"{ctx.where(path)}{path}: {exc}") from None


TOP_KEYS = {"experiment", "dataset", "model", "regularizers", "train", "seeds", "output_dir",
            "transfer", "perturbation", "curves"}


def from_tree(tree: dict, lines: dict | None = None, source: str = "<config>") -> RunConfig:
    ctx = _Ctx(lines or {}, source)
    ctx.keys(tree, TOP_KEYS, "")
    experiment = tree.get("experiment", "transductive")
    if experiment not in EXPERIMENTS:
        raise ConstraintViolation(f"{ctx.where('experiment')}experiment must be one of {EXPERIMENTS}")

    mblock = dict(tree.get("model") or {})
    ctx.keys(mblock, set(_MODEL_KEYS) | {"window", "horizon"}, "model")
    window, horizon = mblock.pop("window", 12), mblock.pop("horizon", 3)
    model = ctx.build(ModelSpec, {_MODEL_KEYS[k]: v for k, v in mblock.items()}, "model")
    if model.family == "STATT" and model.d_h % model.heads:
        raise ConstraintViolation(f"{ctx.where('model.heads')}d_h must be divisible by heads")

    dataset = _dataset(ctx, tree.get("dataset") or {}, "dataset", window, horizon)
    regs = _regularizers(ctx, tree.get("regularizers"), "regularizers", model.d_e,
                         TRANSFER_STRENGTH if experiment == "transfer" else None)
    train = _train(ctx, tree.get("train"), "train", TrainConfig())

    seeds = tree.get("seeds", [0])
    if isinstance(seeds, int):
        seeds = [seeds]
    if not isinstance(seeds, list) or not seeds or not all(isinstance(s, int) for s in seeds):
        raise ConstraintViolation(f"{ctx.where('seeds')}seeds must be a non-empty list of integers")
    cfg = dict(experiment=experiment, dataset=dataset, model=model, regularizers=regs, train=train,
               seeds=tuple(seeds), output_dir=str(tree.get("output_dir", "runs/default")))

    if experiment == "transfer":
        tb = tree.get("transfer") or {}
        ctx.keys(tb, {"sources", "budgets", "finetune"}, "transfer")
        srcs = tb.get("sources") or []
        if len(srcs) < 1:
            raise ConstraintViolation(f"{ctx.where('transfer')}transfer needs at least one source")
        cfg["sources"] = tuple(_dataset(ctx, s, f"transfer.sources[{i}]", window, horizon)
                               for i, s in enumerate(srcs))
        if dataset in cfg["sources"]:
            raise ConstraintViolation(f"{ctx.where('dataset')}target dataset must not be a source")
        try:
            cfg["budgets"] = tuple(parse_budget(b) for b in tb.get("budgets", ["zero-shot", "1d", "7d"]))
        except ValueError as exc:
            raise ConstraintViolation(f"{ctx.where('transfer.budgets')}{exc}") from None
        cfg["finetune"] = _train(ctx, tb.get("finetune"), "transfer.finetune", RunConfig.finetune)
    elif experiment == "perturbation":
        pb = tree.get("perturbation") or {}
        ctx.keys(pb, {"kinds", "noise_sigmas", "draws"}, "perturbation")
        try:
            kinds = tuple(PerturbationKind(k) for k in pb.get("kinds", ["noise", "rearranged", "mean", "sampled"]))
        except ValueError as exc:
            raise ConstraintViolation(f"{ctx.where('perturbation.kinds')}{exc}") from None
        cfg.update(perturbations=kinds, noise_sigmas=tuple(float(s) for s in pb.get("noise_sigmas", [0.0])),
                   perturbation_draws=int(pb.get("draws", 1)))
        if cfg["perturbation_draws"] < 1:
            raise ConstraintViolation(f"{ctx.where('perturbation.draws')}draws must be >= 1")
    elif experiment == "curves":
        cb = tree.get("curves") or {}
        ctx.keys(cb, {"variants"}, "curves")
        variants = []
        for i, v in enumerate(cb.get("variants") or []):
            sub = f"curves.variants[{i}]"
            ctx.keys(v, {"name", "regularizers", "d_e"}, sub)
            if "name" not in v:
                raise ConstraintViolation(f"{ctx.where(sub)}{sub} needs a name")
            d_e = v.get("d_e", model.d_e)
            variants.append(CurveVariant(str(v["name"]), _regularizers(ctx, v.get("regularizers"),
                                                                        sub + ".regularizers", d_e), d_e))
        cfg["variants"] = tuple(variants)
    else:
        for key in ("transfer", "perturbation", "curves"):
            if key in tree:
                raise ConstraintViolation(f"{ctx.where(key)}block {key!r} is not used by a {experiment} run")
    return RunConfig(**cfg)


def parse_config(path) -> RunConfig:
    path = Path(path)
    try:
        text = path.read_text()
    except OSError as exc:
        raise ParseError(f"{path}: cannot read: {exc.strerror}") from None
    tree, lines = load_tree(text, str(path))
    return from_tree(tree, lines, str(path))


def seed_override(env=None):
    """Seeds from ``EMBREG_SEED_OVERRIDE`` (comma-separated), or None when unset."""
    raw = (os.environ if env is None else env).get(SEED_ENV, "").strip()
    return parse_seeds(raw) if raw else None


def parse_seeds(raw: str) -> tuple:
    try:
        seeds = tuple(int(s) for s in raw.split(",") if s.strip())
    except ValueError:
        raise ConstraintViolation(f"seeds must be comma-separated integers, got {raw!r}") from None
    if not seeds:
        raise ConstraintViolation("empty seed list")
    return seeds


# ---------------------------------------------------------------- echo

def _plain(obj):
    if dataclasses.is_dataclass(obj):
        return {f.name: _plain(getattr(obj, f.name)) for f in fields(obj)}
    if isinstance(obj, (list, tuple)):
        return [_plain(v) for v in obj]
    if isinstance(obj, timedelta):
        return format_budget(obj)
    return obj


def to_tree(cfg: RunConfig) -> dict:
    """Inverse of ``from_tree``: a tree that parses back to an equal ``RunConfig``."""
    ds = lambda d: {k: v for k, v in _plain(d).items() if k not in ("window", "horizon")}
    regs = lambda rs: [_plain(r) for r in rs]
    train_keys = lambda t: {k: v for k, v in _plain(t).items() if k in _TRAIN_KEYS}
    m = _plain(cfg.model)
    tree = {
        "experiment": cfg.experiment,
        "output_dir": cfg.output_dir,
        "seeds": list(cfg.seeds),
        "dataset": ds(cfg.dataset),
        "model": {**{k: m[v] for k, v in _MODEL_KEYS.items()},
                  "window": cfg.dataset.window, "horizon": cfg.dataset.horizon},
        "regularizers": regs(cfg.regularizers),
        "train": train_keys(cfg.train),
    }
    if cfg.experiment == "transfer":
        tree["transfer"] = {"sources": [ds(s) for s in cfg.sources],
                            "budgets": [format_budget(b) for b in cfg.budgets],
                            "finetune": train_keys(cfg.finetune)}
    elif cfg.experiment == "perturbation":
        tree["perturbation"] = {"kinds": [k.kind for k in cfg.perturbations],
                                "noise_sigmas": list(cfg.noise_sigmas), "draws": cfg.perturbation_draws}
    elif cfg.experiment == "curves":
        tree["curves"] = {"variants": [{"name": v.name, "regularizers": regs(v.regularizers), "d_e": v.d_e}
                                       for v in cfg.variants]}
    return tree


def dump_config(cfg: RunConfig) -> str:
    return yaml.safe_dump(to_tree(cfg), sort_keys=False, default_flow_style=False)
