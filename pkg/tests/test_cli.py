from __future__ import annotations

import csv
import hashlib
import json
from pathlib import Path

import pytest

from censorsim.cli import FIGURES, main, read_trace
from censorsim.config import SHIPPED_CONFIGS, ConfigError, load_matrix, validate_config
from censorsim.dgp import builtin_dgp, dag_to_dict

TINY = """
[experiment]
include = {defaults}
name = tiny
dgps = causal, causal_infeasible
policies = censoring, no_censoring, random, rec
replicates = 2

[simulation]
T = 3
n_init = 300
eval_size = 300

[dgp:causal_infeasible]
base = causal
truncation.x1 = -2, 1
"""


@pytest.fixture()
def tiny_cfg(tmp_path):
    p = tmp_path / "tiny.cfg"
    p.write_text(TINY.format(defaults=SHIPPED_CONFIGS / "defaults.cfg"))
    return p


def _sha(path):
    return hashlib.sha256(Path(path).read_bytes()).hexdigest()


def test_shipped_table_has_72_cells():
    m = load_matrix(SHIPPED_CONFIGS / "paper_table.cfg")
    assert len(m.cells) == 72 and m.replicates == 10
    assert {c.dgp for c in m.cells} == {"causal", "causal_blind", "causal_linked", "causal_equal",
                                        "mixed_proxy", "mixed_downstream", "gaming", "german"}
    cfg = m.cells[0].config
    assert (cfg.T, cfg.n_new, cfg.policy.alpha, cfg.rho) == (12, 100, 0.01, 0.5)


def test_every_shipped_config_validates():
    for p in SHIPPED_CONFIGS.glob("*.cfg"):
        assert validate_config(p) == [], p


def test_validation_lists_every_problem(tmp_path, capsys):
    p = tmp_path / "bad.cfg"
    p.write_text("[experiment]\ndgps = causal, nowhere\npolicies = rec, wizard, oracle\n"
                 "[simulation]\nalpha = 3\n")
    probs = validate_config(p)
    text = "\n".join(probs)
    assert "wizard" in text and "oracle" in text and "nowhere" in text and "alpha" in text
    assert "cell */wizard" in text
    assert main(["validate", str(p)]) == 2
    assert "wizard" in capsys.readouterr().err
    with pytest.raises(ConfigError):
        load_matrix(p)


def test_include_is_overridden_by_including_file(tiny_cfg):
    m = load_matrix(tiny_cfg)
    c = m.cells[0].config
    assert c.T == 3 and c.n_new == 100 and c.train.l2_lambda == 2.0
    assert m.cell("causal_infeasible", "rec").config.spec.bounds("x1") == (-2.0, 1.0)
    assert m.cell("causal_infeasible", "rec").config.actions.get("x1").hi == 1.0
    m2 = load_matrix(tiny_cfg, seed=5, replicates=1)
    assert m2.seed == 5 and m2.cells[0].config.replicates == 1


def test_include_cycle(tmp_path):
    a, b = tmp_path / "a.cfg", tmp_path / "b.cfg"
    a.write_text("[experiment]\ninclude = b.cfg\n")
    b.write_text("[experiment]\ninclude = a.cfg\n")
    assert any("cycle" in p for p in validate_config(a))


def test_custom_dgp_file_and_actions(tmp_path):
    spec = builtin_dgp("causal")
    (tmp_path / "mine.json").write_text(json.dumps(dag_to_dict(spec)))
    p = tmp_path / "c.cfg"
    p.write_text("[experiment]\nname = c\ndgps = mine\npolicies = rec\n"
                 "[dgp:mine]\nfile = mine.json\n"
                 "[actions:mine]\nx1 = increase, -2, 1.5, 2.0\nx2 = immutable\n")
    m = load_matrix(p)
    aset = m.cells[0].config.actions
    assert aset.get("x1").direction == "increase" and aset.get("x1").cost_weight == 2.0
    assert not aset.get("x2").actionable
    p.write_text("[experiment]\nname = c\ndgps = mine\npolicies = rec\n[dgp:mine]\nfile = mine.json\n"
                 "[actions:mine]\nx1 = both, -9, 1.5\n")
    assert any("exceed" in e for e in validate_config(p))


def test_empty_matrix_is_noop(tmp_path, capsys):
    p = tmp_path / "empty.cfg"
    p.write_text("[experiment]\nname = empty\ndgps =\npolicies = rec\n")
    out = tmp_path / "out"
    assert main(["run", str(p), "--out", str(out)]) == 0
    assert not out.exists()


def test_run_roundtrip_manifest_and_figures(tiny_cfg, tmp_path, monkeypatch):
    monkeypatch.setenv("CENSORSIM_OUT", str(tmp_path / "root"))
    assert main(["run", str(tiny_cfg)]) == 0
    run = tmp_path / "root" / "tiny"
    man = json.loads((run / "manifest.json").read_text())
    listed = set(man["files"])
    on_disk = {str(p.relative_to(run)) for p in run.rglob("*") if p.is_file() and p.name != "manifest.json"}
    assert listed == on_disk
    for rel, h in man["files"].items():
        assert _sha(run / rel) == h
    assert man["seed"] == 0 and "numpy" in man["versions"]

    # metrics recomputed from traces are bit-identical to the in-run CSV
    before = (run / "metrics.csv").read_bytes()
    alt = tmp_path / "recomputed"
    assert main(["metrics", str(run), "--out", str(alt)]) == 0
    assert (alt / "metrics.csv").read_bytes() == before
    assert (alt / "table.csv").read_bytes() == (run / "table.csv").read_bytes()

    # same config and seeds -> identical hashes
    again = tmp_path / "again"
    assert main(["run", str(tiny_cfg), "--out", str(again), "--jobs", "2"]) == 0
    man2 = json.loads((again / "manifest.json").read_text())
    assert man2["files"] == man["files"]

    # table layout: rows = metrics, columns = policies, blocks = DGPs
    rows = list(csv.reader((run / "table.csv").open()))
    assert rows[0] == ["dgp", "induction", "metric", "censoring", "no_censoring", "random", "rec"]
    gain = [r for r in rows if r[0] == "causal" and r[2] == "gain"][0]
    assert gain[3] == "1.0"

    # traces rebuild the replicate
    _, cfg, rep = read_trace(run / "traces" / "causal__rec" / "rep000.ndjson.gz")
    assert cfg.policy.kind == "rec" and len(rep.traces) == 3
    assert (run / "models" / "causal__rec" / "rep000.txt").read_text().startswith("# period 1")

    for fid in FIGURES:
        out = tmp_path / f"{fid}.csv"
        assert main(["figure", str(run), "--id", fid, "--out", str(out)]) == 0
        recs = list(csv.DictReader(out.open()))
        assert {r["metric"] for r in recs} >= {"approval_pct", "approval_pct_z1", "approval_pct_z1_y1"}
    coef = [r for r in csv.DictReader((tmp_path / "infeasible_recourse.csv").open())
            if r["metric"] == "coef_z" and r["dgp"] == "causal_infeasible"]
    assert len(coef) == 3 and all(float(r["mean"]) < 0 for r in coef)


def test_figure_errors(tiny_cfg, tmp_path, capsys):
    assert main(["figure", str(tmp_path), "--id", "nope"]) == 1
    err = capsys.readouterr().err
    assert all(fid in err for fid in FIGURES)
    p = tmp_path / "one.cfg"
    p.write_text(TINY.format(defaults=SHIPPED_CONFIGS / "defaults.cfg").replace(
        "policies = censoring, no_censoring, random, rec", "policies = censoring"))
    out = tmp_path / "one"
    assert main(["run", str(p), "--out", str(out)]) == 0
    assert main(["figure", str(out), "--id", "exploration_poc"]) == 1
    assert "figures.cfg" in capsys.readouterr().err
    assert main(["metrics", str(tmp_path / "missing")]) == 1


def test_overwrite_false_refuses(tmp_path, capsys):
    p = tmp_path / "o.cfg"
    p.write_text("[experiment]\nname = o\ndgps = causal\npolicies = censoring\nreplicates = 1\n"
                 "overwrite = false\n[simulation]\nT = 2\nn_init = 200\neval_size = 50\n")
    out = tmp_path / "o"
    out.mkdir()
    (out / "keep.txt").write_text("x")
    assert main(["run", str(p), "--out", str(out)]) == 1
    assert "overwrite" in capsys.readouterr().err
