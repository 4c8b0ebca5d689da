"""Config parsing, validation errors and the command-line surface."""
import json
from datetime import timedelta
import textwrap

import pytest

from embreg import cli, config as C
from embreg.errors import ConstraintViolation, ParseError, UnknownKey

TINY = """\
experiment: transductive
output_dir: {out}
seeds: [0]
dataset:
  kind: synthetic
  profile: local_offsets
  n_series: 4
  n_steps: 200
model:
  family: RNN
  d_h: 4
  d_e: 2
  window: 4
  horizon: 2
regularizers:
  - kind: l2
    strength: 1e-4
train:
  learning_rate: 0.01
  batch_size: 16
  max_epochs: 2
  max_batches_per_epoch: 2
"""


def _write(tmp_path, text, name="cfg.yaml"):
    p = tmp_path / name
    p.write_text(textwrap.dedent(text))
    return p


def _tiny(tmp_path, **fmt):
    return _write(tmp_path, TINY.format(out=fmt.get("out", tmp_path / "runs")))


def test_minimal_config_defaults(tmp_path):
    cfg = C.parse_config(_write(tmp_path, "experiment: transductive\n"))
    assert cfg.model.family == "RNN" and cfg.dataset.window == 12 and cfg.seeds == (0,)
    assert cfg.regularizers == () and cfg.train.learning_rate == 1e-3


def test_exponent_floats_parse_as_numbers(tmp_path):
    cfg = C.parse_config(_tiny(tmp_path))
    assert cfg.regularizers[0].strength == 1e-4 and isinstance(cfg.regularizers[0].strength, float)


def test_typo_reports_line_and_allowed(tmp_path):
    text = TINY.format(out="x").replace("  - kind: l2\n    strength: 1e-4", "  - kind: dropout\n    droput_p: 0.3")
    with pytest.raises(UnknownKey) as err:
        C.parse_config(_write(tmp_path, text))
    assert err.value.key == "regularizers[0].droput_p" and err.value.line == 17
    assert "p" in err.value.allowed and "line 17" in str(err.value)


def test_regularizer_without_embeddings(tmp_path):
    text = TINY.format(out="x").replace("d_e: 2", "d_e: 0")
    with pytest.raises(ConstraintViolation, match="d_e"):
        C.parse_config(_write(tmp_path, text))


def test_parse_error_has_line(tmp_path):
    with pytest.raises(ParseError) as err:
        C.parse_config(_write(tmp_path, "experiment: transductive\nmodel: [unclosed\n"))
    assert "line" in str(err.value)


def test_wrong_type_rejected(tmp_path):
    with pytest.raises(ConstraintViolation):
        C.parse_config(_write(tmp_path, "experiment: transductive\ntrain:\n  max_epochs: many\n"))


def test_dump_roundtrip(tmp_path):
    for name in ("transductive_synth", "transfer_synth", "perturbation_synth", "curves_synth"):
        cfg = C.parse_config(f"configs/{name}.yaml")
        again = C.parse_config(_write(tmp_path, C.dump_config(cfg), f"{name}.yaml"))
        assert again == cfg, name


def test_budgets():

    assert C.parse_budget("zero-shot") is None and C.parse_budget(0) is None
    assert C.parse_budget("2d") == timedelta(days=2) and C.parse_budget("1w") == timedelta(weeks=1)
    assert C.format_budget(timedelta(hours=6)) == "6h"
    with pytest.raises(ValueError):
        C.parse_budget("soon")


def test_dry_run_writes_nothing(tmp_path, capsys):
    out = tmp_path / "runs"
    assert cli.main(["run", "--config", str(_tiny(tmp_path)), "--dry-run"]) == 0
    assert not out.exists()
    assert "seed 0" in capsys.readouterr().out


def test_rerun_is_bitwise_identical(tmp_path):
    cfg = _tiny(tmp_path)
    blobs = []
    for k in range(2):
        out = tmp_path / f"r{k}"
        assert cli.main(["run", "--config", str(cfg), "--output-dir", str(out)]) == 0
        blobs.append([(out / p).read_bytes() for p in ("results.csv", "seed_0/metrics.jsonl", "summary.csv")])
    assert blobs[0] == blobs[1]


def test_parallel_seeds_make_subdirs(tmp_path):
    out = tmp_path / "runs"
    assert cli.main(["run", "--config", str(_tiny(tmp_path)), "--seeds", "0,1,2", "--parallel", "3"]) == 0
    assert sorted(p.name for p in out.glob("seed_*")) == ["seed_0", "seed_1", "seed_2"]
    assert all((out / f"seed_{s}" / "best.ckpt").exists() for s in range(3))
    assert C.parse_config(out / "seed_1" / cli.RESOLVED).seeds == (1,)


def test_seed_precedence(tmp_path, monkeypatch):
    monkeypatch.setenv("EMBREG_SEED_OVERRIDE", "5,6")
    args = cli.build_parser().parse_args(["validate", "--config", str(_tiny(tmp_path))])
    assert cli.resolve(args).seeds == (5, 6)
    args = cli.build_parser().parse_args(["validate", "--config", str(_tiny(tmp_path)), "--seeds", "9"])
    assert cli.resolve(args).seeds == (9,)
    args = cli.build_parser().parse_args(["validate", "--config", str(_tiny(tmp_path)), "--seeds", "1,1"])
    with pytest.raises(ConstraintViolation):
        cli.resolve(args)


def test_set_override(tmp_path):
    args = cli.build_parser().parse_args(["validate", "--config", str(_tiny(tmp_path)),
                                          "--set", "train.max_epochs=1", "--set", "model.d_h=3"])
    cfg = cli.resolve(args)
    assert cfg.train.max_epochs == 1 and cfg.model.d_h == 3


def test_failed_marker_and_exit_code(tmp_path, capsys):
    out = tmp_path / "runs"
    cfg = _write(tmp_path, f"""\
        experiment: transfer
        output_dir: {out}
        dataset: {{profile: graph_diffusion, n_series: 4, n_steps: 200, seed: 2}}
        model: {{family: STGNN-MEAN, d_h: 4, d_e: 2, window: 4, horizon: 2}}
        transfer:
          sources:
            - {{profile: graph_diffusion, n_series: 4, n_steps: 200, seed: 1}}
          budgets: [1h]
        train: {{max_epochs: 1, max_batches_per_epoch: 1, batch_size: 8}}
        """)
    assert cli.main(["run", "--config", str(cfg)]) == 2
    marker = json.loads((out / cli.FAILED).read_text())
    assert marker["error"] == "TooShort"
    assert json.loads(capsys.readouterr().err)["error"] == "TooShort"


def test_bad_config_exit_code(tmp_path, capsys):
    assert cli.main(["validate", "--config", str(_write(tmp_path, "experiment: nope\n"))]) == 2
    assert "error" in json.loads(capsys.readouterr().err)
    assert cli.main(["validate", "--config", str(tmp_path / "missing.yaml")]) == 2


def test_report_reaggregates(tmp_path, capsys):
    a, b = tmp_path / "a", tmp_path / "b"
    cfg = _tiny(tmp_path)
    cli.main(["run", "--config", str(cfg), "--output-dir", str(a), "--seeds", "0"])
    cli.main(["run", "--config", str(cfg), "--output-dir", str(b), "--seeds", "1"])
    capsys.readouterr()
    assert cli.main(["report", str(a), str(b), "--out", str(tmp_path / "s.csv")]) == 0
    text = capsys.readouterr().out
    assert "test_mae" in text and "±" in text
    rows = (tmp_path / "s.csv").read_text().splitlines()
    assert any(",test_mae,2," in r for r in rows)


def test_gradcheck_exit_code(monkeypatch, capsys):
    import embreg.gradcheck as G
    monkeypatch.setattr(G, "run_all", lambda seed: {"ok_case": 1e-9, "bad_case": 1.0})
    assert cli.main(["gradcheck"]) == 1
    assert "FAIL" in capsys.readouterr().out
    monkeypatch.setattr(G, "run_all", lambda seed: {"ok_case": 1e-9})
    assert cli.main(["gradcheck"]) == 0


def test_transfer_strength_defaults(tmp_path):
    base = "experiment: {kind}\nregularizers:\n  - kind: variational\n  - kind: clustering\n  - kind: l2\n"
    transfer = base + "transfer:\n  sources: [{{profile: graph_diffusion, seed: 7}}]\n"
    t = C.parse_config(_write(tmp_path, transfer.format(kind="transfer")))
    d = C.parse_config(_write(tmp_path, base.format(kind="transductive"), "d.yaml"))
    assert [s.strength for s in t.regularizers] == [0.05, 0.5, 1e-4]
    assert [s.strength for s in d.regularizers] == [5e-5, 5e-4, 1e-4]
