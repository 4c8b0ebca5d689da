"""Command-line entry point: ``embreg {validate,run,report,gradcheck}``."""
from __future__ import annotations

import argparse
import csv
import dataclasses
import json
import logging
import sys
import traceback
from concurrent.futures import ProcessPoolExecutor
from pathlib import Path

import numpy as np

from . import config as C
from .errors import ConstraintViolation, EmbregError, ParseError
from .experiments import (CURVE_FIELDS, RESULT_FIELDS, BAND_FIELDS, TransferPlan, build, curve_bands,
                          regularizer_label, run_learning_curves, run_perturbation_analysis,
                          run_transductive, run_transfer, write_csv)
from .training import fit

log = logging.getLogger("embreg")

FAILED = "FAILED"
RESOLVED = "resolved_config.yaml"


# ---------------------------------------------------------------- config resolution

def _apply_overrides(tree: dict, assignments) -> dict:
    """``--set a.b=value`` overrides; values are parsed as YAML scalars."""
    for item in assignments or ():
        if "=" not in item:
            raise ConstraintViolation(f"--set expects key=value, got {item!r}")
        key, raw = item.split("=", 1)
        node = tree
        *parents, leaf = key.strip().split(".")
        for p in parents:
            node = node.setdefault(p, {})
            if not isinstance(node, dict):
                raise ConstraintViolation(f"--set {key}: {p!r} is not a mapping")
        node[leaf] = C.load_tree(f"v: {raw}")[0]["v"]
    return tree


def resolve(args) -> C.RunConfig:
    """File < env seed override < command-line flags."""
    try:
        text = Path(args.config).read_text()
    except OSError as exc:
        raise ParseError(f"{args.config}: cannot read: {exc.strerror}") from None
    tree, lines = C.load_tree(text, args.config)
    tree = _apply_overrides(tree, getattr(args, "set", None))
    cfg = C.from_tree(tree, lines, args.config)
    env = C.seed_override()
    if env is not None:
        cfg = cfg.with_seeds(env)
    if getattr(args, "seeds", None):
        cfg = cfg.with_seeds(C.parse_seeds(args.seeds))
    if getattr(args, "output_dir", None):
        cfg = dataclasses.replace(cfg, output_dir=args.output_dir)
    if len(set(cfg.seeds)) != len(cfg.seeds):
        raise ConstraintViolation(f"duplicate seeds {list(cfg.seeds)} would share a run directory")
    return cfg


# ---------------------------------------------------------------- workers

def _run_one(cfg: C.RunConfig, seed: int, run_dir: Path):
    """One seed of the configured harness; returns ``(result rows, curve rows)``."""
    run_dir.mkdir(parents=True, exist_ok=True)
    (run_dir / RESOLVED).write_text(C.dump_config(cfg.with_seeds([seed])))
    curves = []
    if cfg.experiment == "transductive":
        # run_transductive nests per-seed directories under out_dir
        res = run_transductive(cfg.dataset, cfg.model, cfg.regularizers, [seed], cfg.train,
                               out_dir=run_dir.parent)
        rows = res.rows
    elif cfg.experiment == "transfer":
        plan = TransferPlan(sources=cfg.sources, target=cfg.dataset, budgets=cfg.budgets,
                            model=cfg.model, regularizers=cfg.regularizers, source_train=cfg.train,
                            finetune_train=cfg.finetune, seed=seed)
        rows = run_transfer(plan, out_dir=run_dir).rows
    elif cfg.experiment == "perturbation":
        data = cfg.dataset.prepare()
        net, table = build(cfg.model, data, seed, cfg.regularizers)
        train = dataclasses.replace(cfg.train, seed=seed, regularizers=cfg.regularizers)
        fit(net, table, data, train, run_dir)
        draws = tuple(seed * cfg.perturbation_draws + d for d in range(cfg.perturbation_draws))
        res = run_perturbation_analysis((net, table), data, cfg.perturbations, cfg.noise_sigmas,
                                        draws, cfg.regularizers, cfg.model.label)
        base = dict(dataset=cfg.dataset.label, model=cfg.model.label,
                    regularizer=regularizer_label(cfg.regularizers), seed=seed)
        rows = []
        for label, s in res.summary.items():
            rows.append({**base, "metric": f"test_mae@{label}", "value": s["mean"]})
            if label != "baseline":
                rows.append({**base, "metric": f"degradation@{label}", "value": s["mean"] - res.baseline})
    else:
        curves, _ = run_learning_curves(cfg.dataset, cfg.model, cfg.variants, [seed], cfg.train,
                                        out_path=run_dir / "curves.csv")
        rows = []
        for v in cfg.variants:
            vals = [r["val_mae"] for r in curves if r["variant"] == v.name]
            label = cfg.model.label if v.d_e is None else dataclasses.replace(cfg.model, d_e=v.d_e).label
            base = dict(dataset=cfg.dataset.label, model=label, regularizer=v.name, seed=seed)
            if vals:
                rows.append({**base, "metric": "best_val_mae", "value": float(min(vals))})
                rows.append({**base, "metric": "final_val_mae", "value": float(vals[-1])})
    write_csv(rows, run_dir / "results.csv")
    return rows, curves


def _job(args):
    cfg, seed, run_dir = args
    return _run_one(cfg, seed, Path(run_dir))


def execute(cfg: C.RunConfig, parallel: int = 1) -> Path:
    out = Path(cfg.output_dir)
    out.mkdir(parents=True, exist_ok=True)
    (out / FAILED).unlink(missing_ok=True)
    (out / RESOLVED).write_text(C.dump_config(cfg))
    jobs = [(cfg, s, str(out / f"seed_{s}")) for s in cfg.seeds]
    try:
        if parallel > 1 and len(jobs) > 1:
            with ProcessPoolExecutor(max_workers=min(parallel, len(jobs))) as pool:
                results = list(pool.map(_job, jobs))
        else:
            results = [_job(j) for j in jobs]
    except BaseException as exc:
        (out / FAILED).write_text(json.dumps(_error_record(exc), indent=2) + "\n")
        raise
    rows = [r for res, _ in results for r in res]
    curves = [r for _, cur in results for r in cur]
    write_csv(rows, out / "results.csv", RESULT_FIELDS)
    if cfg.experiment == "curves":
        write_csv(curves, out / "curves.csv", CURVE_FIELDS)
        write_csv(curve_bands(curves), out / "curves_bands.csv", BAND_FIELDS)
    summary = summarize(rows)
    write_csv(summary, out / "summary.csv", SUMMARY_FIELDS)
    (out / "summary.txt").write_text(format_summary(summary))
    return out


# ---------------------------------------------------------------- summaries

SUMMARY_FIELDS = ("dataset", "model", "regularizer", "metric", "n", "mean", "std")


def summarize(rows):
    groups: dict = {}
    for r in rows:
        key = (r["dataset"], r["model"], r["regularizer"], r["metric"])
        groups.setdefault(key, []).append(float(r["value"]))
    out = []
    for (d, m, reg, metric), vals in groups.items():
        arr = np.asarray(vals)
        out.append({"dataset": d, "model": m, "regularizer": reg, "metric": metric,
                    "n": arr.size, "mean": float(arr.mean()), "std": float(arr.std())})
    return out


def format_summary(summary) -> str:
    """Aligned text table: one row per method, mean ± std per metric, best (lowest) marked ``*``."""
    if not summary:
        return "(no results)\n"
    metrics = list(dict.fromkeys(s["metric"] for s in summary))
    methods = list(dict.fromkeys((s["dataset"], s["model"], s["regularizer"]) for s in summary))
    cell = {(s["dataset"], s["model"], s["regularizer"], s["metric"]): s for s in summary}
    best = {}
    for metric in metrics:
        vals = [(cell[k + (metric,)]["mean"], k) for k in methods if k + (metric,) in cell]
        if vals:
            best[metric] = min(vals)[1]
    header = ["dataset", "model", "regularizer"] + metrics
    table = [header]
    for k in methods:
        row = list(k)
        for metric in metrics:
            s = cell.get(k + (metric,))
            if s is None:
                row.append("-")
                continue
            mark = "*" if best.get(metric) == k and len(methods) > 1 else " "
            row.append(f"{s['mean']:.4f} ± {s['std']:.4f}{mark}")
        table.append(row)
    widths = [max(len(r[i]) for r in table) for i in range(len(header))]
    lines = ["  ".join(c.ljust(w) for c, w in zip(r, widths)).rstrip() for r in table]
    lines.insert(1, "  ".join("-" * w for w in widths))
    return "\n".join(lines) + "\n" + ("(* = best mean in column)\n" if len(methods) > 1 else "")


def read_results(paths):
    rows = []
    for p in paths:
        p = Path(p)
        f = p / "results.csv" if p.is_dir() else p
        if not f.is_file():
            raise FileNotFoundError(f"no results.csv under {p}")
        with open(f, newline="") as fh:
            rows.extend(csv.DictReader(fh))
    return rows


# ---------------------------------------------------------------- commands

def _error_record(exc: BaseException) -> dict:
    return {"error": type(exc).__name__, "message": str(exc),
            "traceback": traceback.format_exception_only(type(exc), exc)[-1].strip()}


def cmd_validate(args) -> int:
    cfg = resolve(args)
    sys.stdout.write(C.dump_config(cfg))
    return 0


def cmd_run(args) -> int:
    cfg = resolve(args)
    if args.dry_run:
        print(f"# plan: {cfg.experiment} run, {len(cfg.seeds)} seed(s), output under {cfg.output_dir}")
        for s in cfg.seeds:
            print(f"#   seed {s} -> {Path(cfg.output_dir) / f'seed_{s}'}")
        sys.stdout.write(C.dump_config(cfg))
        return 0
    out = execute(cfg, parallel=max(1, args.parallel))
    sys.stdout.write((out / "summary.txt").read_text())
    return 0


def cmd_report(args) -> int:
    summary = summarize(read_results(args.run_dirs))
    text = format_summary(summary)
    sys.stdout.write(text)
    if args.out:
        write_csv(summary, args.out, SUMMARY_FIELDS)
        Path(args.out).with_suffix(".txt").write_text(text)
    return 0


def cmd_gradcheck(args) -> int:
    from .gradcheck import TOLERANCE, run_all
    report = run_all(args.seed)
    width = max(map(len, report))
    bad = 0
    for name, err in report.items():
        ok = err <= TOLERANCE
        bad += not ok
        print(f"{name.ljust(width)}  {err:.3e}  {'ok' if ok else 'FAIL'}")
    print(f"max relative error {max(report.values()):.3e} (tolerance {TOLERANCE:g})")
    return 1 if bad else 0


def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="embreg", description=__doc__)
    ap.add_argument("-v", "--verbose", action="store_true")
    sub = ap.add_subparsers(dest="command", required=True)

    def with_config(p):
        p.add_argument("--config", required=True, help="YAML run configuration")
        p.add_argument("--seeds", help="comma-separated seeds (overrides file and environment)")
        p.add_argument("--output-dir")
        p.add_argument("--set", action="append", metavar="KEY=VALUE",
                       help="override a config key, e.g. train.max_epochs=5")
        return p

    with_config(sub.add_parser("validate", help="parse and echo the resolved config")).set_defaults(fn=cmd_validate)
    run = with_config(sub.add_parser("run", help="execute the configured harness"))
    run.add_argument("--parallel", type=int, default=1, help="worker processes (one per seed)")
    run.add_argument("--dry-run", action="store_true", help="validate and print the plan only")
    run.set_defaults(fn=cmd_run)
    rep = sub.add_parser("report", help="re-aggregate run directories into summary tables")
    rep.add_argument("run_dirs", nargs="+")
    rep.add_argument("--out", help="write the summary CSV (and a .txt table) here")
    rep.set_defaults(fn=cmd_report)
    gc = sub.add_parser("gradcheck", help="finite-difference check of all primitives and families")
    gc.add_argument("--seed", type=int, default=0)
    gc.set_defaults(fn=cmd_gradcheck)
    return ap


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.fn(args)
    except EmbregError as exc:
        sys.stderr.write(json.dumps(_error_record(exc)) + "\n")
        return 2
    except Exception as exc:   # noqa: BLE001 - reported as a structured record
        sys.stderr.write(json.dumps(_error_record(exc)) + "\n")
        return 1


if __name__ == "__main__":
    sys.exit(main())
