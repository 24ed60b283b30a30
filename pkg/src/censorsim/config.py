"""Run-config files: an INI-style experiment matrix.

A config holds one ``[experiment]`` section with the matrix axes, a
``[simulation]`` section with shared defaults, and optional named
sections::

    [experiment]
    name = demo
    include = base.cfg            ; read first, this file overrides it
    dgps = causal, gaming
    policies = censoring, rec
    inductions = selection_bias   ; names of [induction:*] sections, or "none"
    replicates = 10
    seed = 0
    baseline = censoring          ; policy used to normalise gain/loss
    calibration = true
    overwrite = true              ; false: refuse to write into an existing run dir

    [simulation]
    T = 12
    n_new = 100
    n_init = 2000
    rho = 0.5
    l2_lambda = 2.0
    alpha = 0.01
    eval_size = 10000
    action_step = 0.01

    [induction:selection_bias]
    kind = selection_bias

    [induction:opchange]
    kind = operational_change
    delta_b = -3.0

    [dgp:causal_infeasible]
    base = causal                 ; or: file = my_dgp.json (builtin-schema JSON)
    truncation.x1 = -2, 1

    [actions:causal_infeasible]
    x1 = both, -2, 1, 1.0         ; direction, lo, hi, cost weight
    x2 = immutable
"""
from __future__ import annotations

import configparser
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any

from .dgp import BUILTIN_DGPS, DagSpec, DGPError, builtin_dgp, load_dgp
from .engine import SimulationConfig
from .learner import TrainConfig
from .mechanisms import FlipTable, InductionSpec, INDUCTION_KINDS
from .policies import POLICY_KINDS, PolicySpec
from .recourse import ActionSet, FeatureAction, RecourseError, default_action_set

__all__ = ["Cell", "ExperimentMatrix", "ConfigError", "load_matrix", "validate_config", "SHIPPED_CONFIGS"]

SHIPPED_CONFIGS = Path(__file__).parent / "configs"


class ConfigError(ValueError):
    def __init__(self, problems):
        self.problems = list(problems) if isinstance(problems, (list, tuple)) else [str(problems)]
        super().__init__("; ".join(self.problems))


@dataclass
class Cell:
    cell_id: str
    dgp: str
    policy: str
    induction: str
    config: SimulationConfig


@dataclass
class ExperimentMatrix:
    name: str
    cells: list[Cell]
    replicates: int
    seed: int
    baseline: str | None = "censoring"
    calibration: bool = True
    overwrite: bool = True
    source: str = ""
    raw: dict = field(default_factory=dict)

    def cell(self, dgp: str, policy: str, induction: str | None = None) -> Cell | None:
        for c in self.cells:
            if c.dgp == dgp and c.policy == policy and (induction is None or c.induction == induction):
                return c
        return None


def _read(path: Path, parser: configparser.ConfigParser, seen: set) -> None:
    path = path.resolve()
    if path in seen:
        raise ConfigError(f"include cycle at {path}")
    seen.add(path)
    if not path.exists():
        raise ConfigError(f"config file not found: {path}")
    probe = configparser.ConfigParser(inline_comment_prefixes=(";", "#"))
    probe.optionxform = str
    probe.read(path)
    inc = probe.get("experiment", "include", fallback="").strip()
    for item in [s.strip() for s in inc.split(",") if s.strip()]:
        _read((path.parent / item), parser, seen)
    parser.read(path)


def _split(value: str) -> list[str]:
    return [s.strip() for s in value.replace("\n", ",").split(",") if s.strip()]


def _parse_induction(name: str, sec, problems: list[str]) -> InductionSpec | None:
    kind = sec.get("kind", "").strip()
    if kind not in INDUCTION_KINDS:
        problems.append(f"[induction:{name}] unknown kind {kind!r}; valid: {', '.join(INDUCTION_KINDS)}")
        return None
    params: dict[str, Any] = {}
    try:
        if kind == "operational_change":
            if "delta_b" in sec:
                params["delta_b"] = float(sec["delta_b"])
            if "rho" in sec:
                params["rho"] = float(sec["rho"])
        elif kind == "label_noise":
            params["table"] = FlipTable.parse(sec.get("table", ""), sec.get("cell_feature") or None)
        elif kind == "feature_shift":
            params["node"] = sec["node"]
            params["mean"] = float(sec["mean"])
            params["std"] = float(sec["std"])
            rz = sec.get("restrict_z", "").strip()
            params["restrict_z"] = None if rz in ("", "none") else int(rz)
    except (KeyError, ValueError) as exc:
        problems.append(f"[induction:{name}] bad parameter: {exc}")
        return None
    return InductionSpec(kind, params)


def _parse_dgp(name: str, sec, base_dir: Path, problems: list[str]) -> DagSpec | None:
    try:
        if "file" in sec:
            spec = load_dgp(base_dir / sec["file"], name)
        else:
            spec = builtin_dgp(sec.get("base", name))
            spec = DagSpec(name, spec.nodes, spec.outcome_node, spec.censor_node, spec.model_features,
                           spec.latent_nodes, spec.immutable_nodes)
        for key, value in sec.items():
            if key.startswith("truncation."):
                lo, hi = (float(v) for v in _split(value))
                spec = spec.with_truncation(key.split(".", 1)[1], lo, hi, name)
        return spec
    except (DGPError, ValueError, OSError) as exc:
        problems.append(f"[dgp:{name}] {exc}")
        return None


def _parse_actions(spec: DagSpec, sec, step: float, problems: list[str]) -> ActionSet | None:
    base = default_action_set(spec, step)
    feats = dict(base.features)
    for key, value in sec.items():
        if key not in spec.model_features:
            problems.append(f"[actions:{spec.name}] {key!r} is not a model feature")
            continue
        parts = _split(value)
        try:
            if parts[0] == "immutable":
                feats[key] = FeatureAction(actionable=False)
            else:
                lo = float(parts[1]) if len(parts) > 1 else spec.bounds(key)[0]
                hi = float(parts[2]) if len(parts) > 2 else spec.bounds(key)[1]
                cw = float(parts[3]) if len(parts) > 3 else 1.0
                feats[key] = FeatureAction(True, parts[0], lo, hi, cw)
        except (ValueError, IndexError, RecourseError) as exc:
            problems.append(f"[actions:{spec.name}] {key}: {exc}")
    aset = ActionSet(feats, step)
    try:
        aset.check_against(spec)
    except RecourseError as exc:
        problems.append(f"[actions:{spec.name}] {exc}")
        return None
    return aset


def load_matrix(path: str | Path, seed: int | None = None, replicates: int | None = None) -> ExperimentMatrix:
    """Parse and validate a run config; raises ConfigError listing every problem."""
    path = Path(path)
    parser = configparser.ConfigParser(inline_comment_prefixes=(";", "#"))
    parser.optionxform = str
    _read(path, parser, set())
    problems: list[str] = []
    if not parser.has_section("experiment"):
        raise ConfigError(f"{path}: missing [experiment] section")
    ex = parser["experiment"]
    sim = parser["simulation"] if parser.has_section("simulation") else {}

    def num(key, default, cast=float):
        try:
            return cast(sim.get(key, default)) if sim else cast(default)
        except ValueError:
            problems.append(f"[simulation] {key} is not a number")
            return cast(default)

    T = num("T", 12, int)
    n_new = num("n_new", 100, int)
    n_init = num("n_init", 2000, int)
    rho = num("rho", 0.5)
    lam = num("l2_lambda", 2.0)
    max_iter = num("max_iter", 500, int)
    tol = num("tol", 1e-8)
    alpha = num("alpha", 0.01)
    eval_size = num("eval_size", 10_000, int)
    step = num("action_step", 0.01)
    try:
        reps = int(ex.get("replicates", "10")) if replicates is None else int(replicates)
        master = int(ex.get("seed", "0")) if seed is None else int(seed)
    except ValueError:
        problems.append("[experiment] replicates/seed must be integers")
        reps, master = 1, 0
    if T < 2:
        problems.append("[simulation] T must be >= 2")
    if reps < 1:
        problems.append("[experiment] replicates must be >= 1")
    if not 0 <= alpha <= 1:
        problems.append("[simulation] alpha must lie in [0, 1]")
    if not 0 <= rho <= 1:
        problems.append("[simulation] rho must lie in [0, 1]")

    inductions: dict[str, tuple[InductionSpec, ...]] = {"none": ()}
    custom_dgps: dict[str, DagSpec] = {}
    for sname in parser.sections():
        head, _, tail = sname.partition(":")
        if head == "induction" and tail:
            ind = _parse_induction(tail, parser[sname], problems)
            if ind is not None:
                inductions[tail] = (ind,)
        elif head == "dgp" and tail:
            spec = _parse_dgp(tail, parser[sname], path.parent, problems)
            if spec is not None:
                custom_dgps[tail] = spec
    dgps = _split(ex.get("dgps", ""))
    policies = _split(ex.get("policies", ""))
    ind_names = _split(ex.get("inductions", "selection_bias")) or ["none"]
    if "selection_bias" in ind_names and "selection_bias" not in inductions:
        inductions["selection_bias"] = (InductionSpec("selection_bias"),)
    for pol in policies:
        if pol not in POLICY_KINDS:
            problems.append(f"[experiment] invalid policy {pol!r} (cell */{pol}); valid: {', '.join(POLICY_KINDS)}")
    for d in dgps:
        if d not in BUILTIN_DGPS and d not in custom_dgps:
            problems.append(f"[experiment] unknown DGP {d!r}; builtin: {', '.join(BUILTIN_DGPS)}")
    for i in ind_names:
        if i not in inductions:
            problems.append(f"[experiment] unknown induction {i!r}; declare [induction:{i}]")
    baseline = ex.get("baseline", "censoring").strip() or None
    if baseline in ("none",):
        baseline = None
    if baseline is not None and baseline not in POLICY_KINDS:
        problems.append(f"[experiment] baseline {baseline!r} is not a policy")
    truthy = ("1", "true", "yes", "on")
    calibration = ex.get("calibration", "true").strip().lower() in truthy
    overwrite = ex.get("overwrite", "true").strip().lower() in truthy
    if problems:
        raise ConfigError(problems)

    cells: list[Cell] = []
    ids: set[str] = set()
    for d in dgps:
        spec = custom_dgps.get(d) or builtin_dgp(d)
        sec = f"actions:{d}"
        aset = (_parse_actions(spec, parser[sec], step, problems) if parser.has_section(sec)
                else default_action_set(spec, step))
        for pol in policies:
            for ind in ind_names:
                cid = f"{d}__{pol}" + (f"__{ind}" if len(ind_names) > 1 else "")
                if cid in ids:
                    problems.append(f"duplicate cell {cid}")
                    continue
                ids.add(cid)
                try:
                    cfg = SimulationConfig(dgp=spec, induction=inductions[ind],
                                           policy=PolicySpec(pol, alpha), T=T, n_new=n_new, n_init=n_init,
                                           rho=rho, train=TrainConfig(lam, max_iter, tol), action_set=aset,
                                           replicates=reps, seed=master, eval_size=eval_size)
                except ValueError as exc:
                    problems.append(f"cell {cid}: {exc}")
                    continue
                cells.append(Cell(cid, d, pol, ind, cfg))
    if problems:
        raise ConfigError(problems)
    raw = {s: dict(parser[s]) for s in parser.sections()}
    return ExperimentMatrix(ex.get("name", path.stem), cells, reps, master, baseline, calibration,
                            overwrite, str(path), raw)


def validate_config(path: str | Path) -> list[str]:
    """All problems found in a config (empty list = valid)."""
    try:
        load_matrix(path)
    except ConfigError as exc:
        return exc.problems
    return []
