"""Command-line runner: experiment matrices, traces, metrics tables, figure data.

Usage::

    censorsim validate CONFIG
    censorsim run CONFIG [--seed S] [--replicates R] [--jobs J] [--out DIR]
    censorsim metrics TRACE_DIR [--out DIR]
    censorsim figure TRACE_DIR --id FIGURE_ID [--out FILE]

The default output root is ``$CENSORSIM_OUT`` (falling back to ``./runs``);
a run writes into ``<root>/<experiment name>/``::

    manifest.json            config hash, seeds, versions, sha256 of every file
    metrics.csv              long format: cell, dgp, policy, induction, replicate, metric, value
    table.csv / table_std.csv  rows = metrics, columns = policies, blocks = DGPs
    report.json              across-replicate mean/std per cell
    traces/<cell>/rep000.ndjson.gz   header record + one record per period + end record
    models/<cell>/rep000.txt         plain-text model snapshot per period
"""
from __future__ import annotations

import argparse
import csv
import gzip
import hashlib
import io
import json
import logging
import math
import os
import platform
import shutil
import sys
from concurrent.futures import ProcessPoolExecutor
from pathlib import Path
from typing import Any, Iterable, Mapping, Sequence

import numpy as np

from . import __version__
from .config import ConfigError, ExperimentMatrix, load_matrix
from .engine import (PeriodTrace, ReplicateResult, SimulationConfig, config_from_dict, config_to_dict,
                     evaluation_sample, initial_dataset, run_replicate)
from .learner import model_to_text
from .metrics import METRIC_NAMES, approval_rates, replicate_metrics, summarize

__all__ = ["main", "run_matrix", "recompute_metrics", "emit_figure_data", "read_trace", "FIGURES",
           "ENV_OUT", "CliError"]

log = logging.getLogger("censorsim")

ENV_OUT = "CENSORSIM_OUT"
FIGURES = {
    # figure id: (required (dgp, policy) runs, description, config shipping them)
    "infeasible_recourse": ((("causal", "rec"), ("causal_infeasible", "rec")),
                            "recourse with feasible vs infeasible X1 bounds: approvals and coefficients",
                            "figures.cfg"),
    "exploration_poc": ((("causal", "no_censoring"), ("causal", "censoring"), ("causal", "random")),
                        "approval curves without censoring, with censoring, and with random exploration",
                        "figures.cfg"),
    "unrepresentative_training": ((("causal", "no_censoring"), ("causal", "censoring")),
                                  "approval curves for representative vs censored initial training data",
                                  "figures.cfg"),
}
SCHEMA_VERSION = 1


class CliError(RuntimeError):
    pass


# ---------------------------------------------------------------------------
# deterministic file writing

def _sha256(path: Path) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for chunk in iter(lambda: fh.read(1 << 20), b""):
            h.update(chunk)
    return h.hexdigest()


def _write_text(path: Path, text: str) -> None:
    path.parent.mkdir(parents=True, exist_ok=True)
    if path.suffix == ".gz":
        with open(path, "wb") as raw:
            with gzip.GzipFile(filename="", mode="wb", fileobj=raw, mtime=0) as gz:
                gz.write(text.encode())
    else:
        path.write_text(text)


def _read_text(path: Path) -> str:
    if path.suffix == ".gz":
        with gzip.open(path, "rb") as fh:
            return fh.read().decode()
    return path.read_text()


def _fmt(v: Any) -> str:
    if isinstance(v, float):
        return "nan" if math.isnan(v) else repr(v)
    return str(v)


def _csv_text(header: Sequence[str], rows: Iterable[Sequence[Any]]) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(header)
    for r in rows:
        w.writerow([_fmt(v) for v in r])
    return buf.getvalue()


def _json_text(obj: Any) -> str:
    return json.dumps(obj, indent=1, sort_keys=True, allow_nan=True) + "\n"


# ---------------------------------------------------------------------------
# traces

def trace_text(cell_id: str, cfg: SimulationConfig, rep: ReplicateResult) -> str:
    names = list(rep.feature_names)
    lines = [json.dumps({"type": "header", "schema": SCHEMA_VERSION, "cell": cell_id,
                         "replicate": rep.replicate, "config": config_to_dict(cfg)}, sort_keys=True)]
    for pt in rep.traces:
        lines.append(json.dumps(pt.to_record(names), sort_keys=True))
    lines.append(json.dumps({"type": "end", "pool_size": rep.pool_size,
                             "n_data_after": len(rep.data_after)}, sort_keys=True))
    return "\n".join(lines) + "\n"


def models_text(rep: ReplicateResult) -> str:
    out = []
    for pt in rep.traces:
        out.append(f"# period {pt.period}\n{model_to_text(pt.model)}\n")
    return "".join(out)


def read_trace(path: str | Path) -> tuple[dict, SimulationConfig, ReplicateResult]:
    """Rebuild a ReplicateResult from a trace file.

    The initial data and evaluation sample are regenerated from the seeds in
    the header; collected rows come from the trace, so D^T is bit-identical.
    """
    path = Path(path)
    recs = [json.loads(line) for line in _read_text(path).splitlines() if line.strip()]
    if not recs or recs[0].get("type") != "header":
        raise CliError(f"{path}: not a trace file (missing header record)")
    head = recs[0]
    cfg = config_from_dict(head["config"])
    r = int(head["replicate"])
    traces = [PeriodTrace.from_record(x) for x in recs if x.get("type") == "period"]
    ends = [x for x in recs if x.get("type") == "end"]
    if not ends or len(traces) != cfg.T:
        raise CliError(f"{path}: truncated trace ({len(traces)} of {cfg.T} periods)")
    init, _ = initial_dataset(cfg, r)
    data = init
    final = init
    for pt in traces:
        if pt.period == cfg.T:
            final = data
        c = pt.collected
        if c.any():
            src = np.where(pt.guaranteed, "guaranteed", np.where(pt.explored, "explored", "approved"))[c]
            data = data.append(pt.features[c], pt.label[c], pt.ids[c], pt.period, tuple(src))
    names = tuple(cfg.spec.model_features)
    rep = ReplicateResult(r, names, traces, init, final, data, evaluation_sample(cfg, r),
                          int(ends[0]["pool_size"]), cfg.n_init)
    return head, cfg, rep


# ---------------------------------------------------------------------------
# metrics tables

def _cell_rows(cells: Sequence[Mapping], per_rep: Mapping[tuple[str, int], dict], baseline: str | None
               ) -> list[tuple]:
    """Long-format rows; gain/loss normalised by the seed-paired baseline cell."""
    by_key = {(c["dgp"], c["policy"], c["induction"]): c["cell"] for c in cells}
    rows = []
    for c in cells:
        base_id = by_key.get((c["dgp"], baseline, c["induction"])) if baseline else None
        for r in range(c["replicates"]):
            m = dict(per_rep[(c["cell"], r)])
            if base_id is not None:
                b = per_rep[(base_id, r)]
                m["gain"] = m["gain_raw"] / b["gain_raw"] if b["gain_raw"] else math.nan
                m["loss"] = m["loss_raw"] / b["loss_raw"] if b["loss_raw"] else math.nan
            for k in m:
                rows.append((c["cell"], c["dgp"], c["policy"], c["induction"], r, k, float(m[k])))
    return rows


def _write_tables(out: Path, cells: Sequence[Mapping], rows: Sequence[tuple]) -> list[Path]:
    written = []
    p = out / "metrics.csv"
    _write_text(p, _csv_text(("cell", "dgp", "policy", "induction", "replicate", "metric", "value"), rows))
    written.append(p)
    grouped: dict[str, list[dict]] = {}
    order: list[str] = []
    for cell, _, _, _, r, k, v in rows:
        if cell not in grouped:
            grouped[cell] = []
            order.append(cell)
        lst = grouped[cell]
        while len(lst) <= r:
            lst.append({})
        lst[r][k] = v
    summ = {cid: summarize(grouped[cid]) for cid in order}
    meta = {c["cell"]: c for c in cells}
    policies = list(dict.fromkeys(c["policy"] for c in cells))
    blocks = list(dict.fromkeys((c["dgp"], c["induction"]) for c in cells))
    metric_keys = list(METRIC_NAMES)
    for cid in order:
        for k in (grouped[cid][0] if grouped[cid] else {}):
            if k not in metric_keys:
                metric_keys.append(k)
    for fname, idx in (("table.csv", 0), ("table_std.csv", 1)):
        trows = []
        for dgp, ind in blocks:
            for k in metric_keys:
                row: list[Any] = [dgp, ind, k]
                for pol in policies:
                    cid = next((c["cell"] for c in cells
                                if c["dgp"] == dgp and c["induction"] == ind and c["policy"] == pol), None)
                    row.append(summ[cid][k][idx] if cid in summ and k in summ[cid] else "")
                trows.append(row)
        p = out / fname
        _write_text(p, _csv_text(["dgp", "induction", "metric", *policies], trows))
        written.append(p)
    report = {"cells": [{**{k: meta[cid][k] for k in ("cell", "dgp", "policy", "induction", "replicates")},
                         "metrics": {k: {"mean": v[0], "std": v[1]} for k, v in summ[cid].items()}}
                        for cid in order]}
    p = out / "report.json"
    _write_text(p, _json_text(report))
    written.append(p)
    return written


def _write_manifest(out: Path, meta: dict, files: Iterable[Path]) -> Path:
    entries = {str(f.relative_to(out)): _sha256(f) for f in sorted(set(files))}
    man = {**meta, "files": entries,
           "versions": {"censorsim": __version__, "numpy": np.__version__,
                        "scipy": __import__("scipy").__version__, "python": platform.python_version()}}
    p = out / "manifest.json"
    _write_text(p, _json_text(man))
    return p


# ---------------------------------------------------------------------------
# run

def _task(args):
    cell_id, cfg, r, out, calibration = args
    try:
        rep = run_replicate(cfg, r)
    except Exception as exc:
        raise CliError(f"cell {cell_id} replicate {r} (seed {cfg.seed}) failed: {exc}") from exc
    tpath = Path(out) / "traces" / cell_id / f"rep{r:03d}.ndjson.gz"
    mpath = Path(out) / "models" / cell_id / f"rep{r:03d}.txt"
    _write_text(tpath, trace_text(cell_id, cfg, rep))
    _write_text(mpath, models_text(rep))
    return cell_id, r, replicate_metrics(rep, None, calibration=calibration, agc_seed=cfg.seed), [tpath, mpath]


def run_matrix(matrix: ExperimentMatrix, out: str | Path, jobs: int = 1) -> Path:
    """Execute every cell x replicate, then write tables and the manifest."""
    out = Path(out)
    if out.exists() and any(out.iterdir()):
        if not matrix.overwrite:
            raise CliError(f"output directory {out} exists and overwrite = false")
        for sub in ("traces", "models"):
            shutil.rmtree(out / sub, ignore_errors=True)
    out.mkdir(parents=True, exist_ok=True)
    cells = [{"cell": c.cell_id, "dgp": c.dgp, "policy": c.policy, "induction": c.induction,
              "replicates": c.config.replicates} for c in matrix.cells]
    tasks = [(c.cell_id, c.config, r, str(out), matrix.calibration)
             for c in matrix.cells for r in range(c.config.replicates)]
    per_rep: dict[tuple[str, int], dict] = {}
    files: list[Path] = []
    if jobs > 1 and len(tasks) > 1:
        with ProcessPoolExecutor(max_workers=jobs) as ex:
            results = ex.map(_task, tasks)
            for cid, r, m, fs in results:
                per_rep[(cid, r)] = m
                files += fs
    else:
        for t in tasks:
            cid, r, m, fs = _task(t)
            per_rep[(cid, r)] = m
            files += fs
            log.info("done %s replicate %d", cid, r)
    if matrix.cells:
        files += _write_tables(out, cells, _cell_rows(cells, per_rep, matrix.baseline))
    cfg_bytes = Path(matrix.source).read_bytes() if matrix.source and Path(matrix.source).exists() else b""
    meta = {"name": matrix.name, "config_file": Path(matrix.source).name if matrix.source else "",
            "config_sha256": hashlib.sha256(cfg_bytes).hexdigest(),
            "config_resolved": matrix.raw, "seed": matrix.seed, "replicates": matrix.replicates,
            "baseline": matrix.baseline, "calibration": matrix.calibration, "cells": cells}
    _write_manifest(out, meta, files)
    return out


# ---------------------------------------------------------------------------
# metrics from traces

def _load_manifest(trace_dir: Path) -> dict:
    p = trace_dir / "manifest.json"
    if not p.exists():
        raise CliError(f"{trace_dir}: no manifest.json (not a run directory)")
    return json.loads(p.read_text())


def recompute_metrics(trace_dir: str | Path, out: str | Path | None = None) -> list[Path]:
    """Recompute every metric from persisted traces (bit-identical to the run)."""
    trace_dir = Path(trace_dir)
    man = _load_manifest(trace_dir)
    out = Path(out) if out else trace_dir
    per_rep = {}
    for c in man["cells"]:
        for r in range(c["replicates"]):
            path = trace_dir / "traces" / c["cell"] / f"rep{r:03d}.ndjson.gz"
            if not path.exists():
                raise CliError(f"missing trace {path}")
            _, cfg, rep = read_trace(path)
            per_rep[(c["cell"], r)] = replicate_metrics(rep, None, calibration=man["calibration"],
                                                        agc_seed=cfg.seed)
    if not man["cells"]:
        return []
    return _write_tables(out, man["cells"], _cell_rows(man["cells"], per_rep, man["baseline"]))


# ---------------------------------------------------------------------------
# figure data

def _find_cell(man: dict, dgp: str, policy: str) -> dict | None:
    hits = [c for c in man["cells"] if c["dgp"] == dgp and c["policy"] == policy]
    if not hits:
        return None
    for c in hits:
        if c["induction"] == "selection_bias":
            return c
    return hits[0]


def figure_rows(trace_dir: str | Path, figure_id: str) -> list[tuple]:
    if figure_id not in FIGURES:
        raise CliError(f"unknown figure id {figure_id!r}; catalog: " +
                       "; ".join(f"{k} ({v[1]})" for k, v in FIGURES.items()))
    trace_dir = Path(trace_dir)
    man = _load_manifest(trace_dir)
    required, _, cfg_name = FIGURES[figure_id]
    rows = []
    for dgp, policy in required:
        c = _find_cell(man, dgp, policy)
        if c is None:
            raise CliError(f"figure {figure_id} needs a run of dgp={dgp} policy={policy}; "
                           f"run the shipped config {cfg_name}")
        series: dict[tuple[str, int], list[float]] = {}
        for r in range(c["replicates"]):
            text = _read_text(trace_dir / "traces" / c["cell"] / f"rep{r:03d}.ndjson.gz")
            recs = [json.loads(x) for x in text.splitlines() if x.strip()]
            traces = [PeriodTrace.from_record(x) for x in recs if x.get("type") == "period"]
            fake = type("R", (), {"traces": traces})
            for metric, kw in (("approval_pct", {}), ("approval_pct_z1", {"z_value": 1}),
                               ("approval_pct_z1_y1", {"z_value": 1, "outcome_value": 1})):
                per, _ = approval_rates(fake, **kw)
                for pt, v in zip(traces, per):
                    series.setdefault((metric, pt.period), []).append(v)
            if figure_id == "infeasible_recourse":
                for pt in traces:
                    for name, w in zip(pt.model.feature_names, pt.model.coef):
                        series.setdefault((f"coef_{name}", pt.period), []).append(float(w))
                    series.setdefault(("intercept", pt.period), []).append(float(pt.model.intercept))
        for (metric, period), vals in sorted(series.items(), key=lambda kv: (kv[0][0], kv[0][1])):
            v = np.asarray(vals, dtype=float)
            ok = v[~np.isnan(v)]
            mean = float(ok.mean()) if ok.size else math.nan
            std = float(ok.std(ddof=1)) if ok.size > 1 else math.nan
            rows.append((figure_id, f"{dgp}/{policy}", dgp, policy, period, metric, mean, std,
                         float(ok.min()) if ok.size else math.nan, float(ok.max()) if ok.size else math.nan,
                         int(ok.size)))
    return rows


FIGURE_HEADER = ("figure", "series", "dgp", "policy", "period", "metric", "mean", "std", "min", "max", "n")


def emit_figure_data(trace_dir: str | Path, figure_id: str, out: str | Path | None = None) -> Path:
    rows = figure_rows(trace_dir, figure_id)
    out = Path(out) if out else Path(trace_dir) / f"figure_{figure_id}.csv"
    _write_text(out, _csv_text(FIGURE_HEADER, rows))
    return out


# ---------------------------------------------------------------------------
# entry point

def _parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="censorsim", description=__doc__.split("\n")[0])
    ap.add_argument("-v", "--verbose", action="store_true")
    sub = ap.add_subparsers(dest="verb", required=True)
    p = sub.add_parser("run", help="execute an experiment matrix")
    p.add_argument("config")
    p.add_argument("--seed", type=int, default=None, help="override the master seed")
    p.add_argument("--replicates", type=int, default=None, help="override the replicate count")
    p.add_argument("--jobs", type=int, default=1, help="worker processes")
    p.add_argument("--out", default=None, help=f"run directory (default ${ENV_OUT}/<name>)")
    p = sub.add_parser("metrics", help="recompute metric tables from traces")
    p.add_argument("trace_dir")
    p.add_argument("--out", default=None)
    p = sub.add_parser("figure", help="emit plot-ready per-period series")
    p.add_argument("trace_dir")
    p.add_argument("--id", required=True, dest="figure_id")
    p.add_argument("--out", default=None)
    p = sub.add_parser("validate", help="check a config and list every problem")
    p.add_argument("config")
    return ap


def main(argv: Sequence[str] | None = None) -> int:
    args = _parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(message)s")
    try:
        if args.verb == "validate":
            try:
                m = load_matrix(args.config)
            except ConfigError as exc:
                for prob in exc.problems:
                    print(f"error: {prob}", file=sys.stderr)
                return 2
            print(f"ok: {len(m.cells)} cells x {m.replicates} replicates")
            return 0
        if args.verb == "run":
            try:
                m = load_matrix(args.config, seed=args.seed, replicates=args.replicates)
            except ConfigError as exc:
                for prob in exc.problems:
                    print(f"error: {prob}", file=sys.stderr)
                return 2
            out = Path(args.out) if args.out else Path(os.environ.get(ENV_OUT, "runs")) / m.name
            if not m.cells:
                print("empty matrix: nothing to run")
                return 0
            run_matrix(m, out, jobs=max(1, args.jobs))
            print(out)
            return 0
        if args.verb == "metrics":
            for p in recompute_metrics(args.trace_dir, args.out):
                print(p)
            return 0
        if args.verb == "figure":
            print(emit_figure_data(args.trace_dir, args.figure_id, args.out))
            return 0
    except CliError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    return 1  # pragma: no cover


if __name__ == "__main__":  # pragma: no cover
    sys.exit(main())
