"""The multi-period fit -> predict -> collect loop.

Randomness is split into independent streams keyed by
``(master seed, replicate, period, purpose)``.  Arrivals, the initial
sample and the unbiased evaluation sample use purpose tags that no policy
touches, so every policy sees the same applicants for the same seed
(common random numbers).
"""
from __future__ import annotations

import hashlib
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field
from typing import Any, Mapping, Sequence

import numpy as np

from .dgp import (DagSpec, Population, builtin_dgp, dag_from_dict, dag_to_dict,
                  outcome_probability, resample_downstream_values, sample_values)
from .learner import (Dataset, LinearModel, TrainConfig, fit_logreg, model_from_text,
                      model_to_text, predict_proba_matrix)
from .mechanisms import (FlipTable, InductionSpec, apply_feature_shift, apply_label_noise,
                         apply_operational_change, induce_selection_bias)
from .policies import PolicySpec, route_denied, select_exploration
from .recourse import ActionSet, FeatureAction, GuaranteeLedger, default_action_set

__all__ = [
    "SimulationConfig",
    "PeriodTrace",
    "ReplicateResult",
    "RunResult",
    "stream",
    "initial_dataset",
    "evaluation_sample",
    "run_replicate",
    "run_experiment",
    "config_to_dict",
    "config_from_dict",
    "EVAL_ID_OFFSET",
]

STREAM_TAGS = {
    "init": 1, "init_noise": 2, "init_shift": 3, "eval": 4,
    "arrivals": 5, "explore": 6, "resample": 7,
}
EVAL_ID_OFFSET = 1_000_000_000


def stream(seed: int, replicate: int, period: int, purpose: str) -> np.random.Generator:
    """Independent generator for one (replicate, period, purpose) cell."""
    return np.random.default_rng(np.random.SeedSequence([int(seed), int(replicate), int(period),
                                                         STREAM_TAGS[purpose]]))


@dataclass(frozen=True)
class SimulationConfig:
    dgp: str | DagSpec = "causal"
    induction: tuple[InductionSpec, ...] = (InductionSpec("selection_bias"),)
    policy: PolicySpec = PolicySpec("censoring")
    T: int = 12
    n_new: int = 100
    n_init: int = 2000
    rho: float = 0.5
    train: TrainConfig = TrainConfig(l2_lambda=2.0)
    action_set: ActionSet | None = None
    replicates: int = 10
    seed: int = 0
    eval_size: int = 10_000

    def __post_init__(self):
        object.__setattr__(self, "induction", tuple(self.induction))
        if self.T < 2:
            raise ValueError("T must be >= 2")
        if self.n_new < 0 or self.n_init < 0:
            raise ValueError("sample sizes must be >= 0")
        if self.replicates < 1:
            raise ValueError("replicates must be >= 1")
        if not 0.0 <= self.rho <= 1.0:
            raise ValueError("rho must lie in [0, 1]")

    @property
    def spec(self) -> DagSpec:
        return self.dgp if isinstance(self.dgp, DagSpec) else builtin_dgp(self.dgp)

    @property
    def actions(self) -> ActionSet:
        spec = self.spec
        aset = self.action_set or default_action_set(spec)
        aset.check_against(spec)
        return aset


# ---------------------------------------------------------------------------
# traces

@dataclass
class PeriodTrace:
    """Everything observed in one period.

    Applicant columns are aligned; ``features`` follows the model feature
    order.  ``outcome`` is the hidden truth, kept only for diagnostics (the
    z=1, y=1 approval series) and never used for training unless collected.
    """

    period: int
    model: LinearModel
    n_new: int
    n_ret: int
    n_cum: int                  # |D^t| used to fit this period's model
    ids: np.ndarray
    returning: np.ndarray
    z: np.ndarray
    features: np.ndarray
    phat: np.ndarray
    model_approved: np.ndarray
    guaranteed: np.ndarray
    explored: np.ndarray
    label: np.ndarray           # +-1 for collected rows, 0 otherwise
    n_prior: np.ndarray         # earlier applications by this individual
    outcome: np.ndarray
    had_action: np.ndarray      # enacted an action issued last period
    # recourse routing of this period's denied applicants
    act_ids: np.ndarray = field(default_factory=lambda: np.zeros(0, np.int64))
    act_feasible: np.ndarray = field(default_factory=lambda: np.zeros(0, bool))
    act_deltas: np.ndarray = field(default_factory=lambda: np.zeros((0, 0)))
    act_cost: np.ndarray = field(default_factory=lambda: np.zeros(0))
    tp_before: np.ndarray = field(default_factory=lambda: np.zeros(0))
    tp_after: np.ndarray = field(default_factory=lambda: np.zeros(0))
    promises_issued: int = 0
    promises_discharged: int = 0
    promises_outstanding: int = 0

    @property
    def n_eval(self) -> int:
        return int(self.ids.size)

    @property
    def collected(self) -> np.ndarray:
        return self.model_approved | self.guaranteed | self.explored

    @property
    def n_collected(self) -> int:
        return int(self.collected.sum())

    def applicant_records(self, feature_names: Sequence[str] | None = None) -> list[dict]:
        names = feature_names or [f"f{j}" for j in range(self.features.shape[1])]
        if feature_names is None and getattr(self, "_feature_names", None):
            names = self._feature_names
        col = self.collected
        out = []
        for i in range(self.n_eval):
            rec = {"id": int(self.ids[i]), "z": int(self.z[i]), "collected": bool(col[i]),
                   "returning": bool(self.returning[i])}
            rec.update({k: float(self.features[i, j]) for j, k in enumerate(names)})
            out.append(rec)
        return out

    # serialisation -------------------------------------------------------
    def to_record(self, feature_names: Sequence[str]) -> dict:
        f = lambda a: [float(v) for v in a]  # noqa: E731
        i = lambda a: [int(v) for v in a]  # noqa: E731
        return {
            "type": "period", "period": self.period, "model": model_to_text(self.model),
            "n_new": self.n_new, "n_ret": self.n_ret, "n_eval": self.n_eval, "n_cum": self.n_cum,
            "n_collected": self.n_collected, "feature_names": list(feature_names),
            "ids": i(self.ids), "returning": i(self.returning), "z": i(self.z),
            "features": [f(row) for row in self.features], "phat": f(self.phat),
            "model_approved": i(self.model_approved), "guaranteed": i(self.guaranteed),
            "explored": i(self.explored), "label": i(self.label), "n_prior": i(self.n_prior),
            "outcome": i(self.outcome), "had_action": i(self.had_action),
            "act_ids": i(self.act_ids), "act_feasible": i(self.act_feasible),
            "act_deltas": [f(row) for row in self.act_deltas], "act_cost": f(self.act_cost),
            "tp_before": f(self.tp_before), "tp_after": f(self.tp_after),
            "promises": [self.promises_issued, self.promises_discharged, self.promises_outstanding],
        }

    @classmethod
    def from_record(cls, rec: Mapping[str, Any]) -> "PeriodTrace":
        d = len(rec["feature_names"])
        b = lambda k: np.asarray(rec[k], dtype=bool)  # noqa: E731
        fl = lambda k: np.asarray(rec[k], dtype=float)  # noqa: E731
        it = lambda k: np.asarray(rec[k], dtype=np.int64)  # noqa: E731
        pt = cls(
            period=rec["period"], model=model_from_text(rec["model"]), n_new=rec["n_new"],
            n_ret=rec["n_ret"], n_cum=rec["n_cum"], ids=it("ids"), returning=b("returning"),
            z=it("z"), features=np.asarray(rec["features"], dtype=float).reshape(-1, d),
            phat=fl("phat"), model_approved=b("model_approved"), guaranteed=b("guaranteed"),
            explored=b("explored"), label=it("label"), n_prior=it("n_prior"), outcome=it("outcome"),
            had_action=b("had_action"), act_ids=it("act_ids"), act_feasible=b("act_feasible"),
            act_deltas=np.asarray(rec["act_deltas"], dtype=float).reshape(-1, d),
            act_cost=fl("act_cost"), tp_before=fl("tp_before"), tp_after=fl("tp_after"),
            promises_issued=rec["promises"][0], promises_discharged=rec["promises"][1],
            promises_outstanding=rec["promises"][2],
        )
        pt._feature_names = list(rec["feature_names"])
        return pt


@dataclass
class ReplicateResult:
    replicate: int
    feature_names: tuple[str, ...]
    traces: list[PeriodTrace]
    initial: Dataset
    final_data: Dataset          # D^T, the data the period-T model was fit on
    data_after: Dataset          # D^{T+1}, after the last collection
    eval_sample: Population
    pool_size: int               # still never approved after period T
    n_init_sampled: int

    @property
    def final_model(self) -> LinearModel:
        return self.traces[-1].model


@dataclass
class RunResult:
    config: SimulationConfig
    replicates: list[ReplicateResult]


# ---------------------------------------------------------------------------
# building blocks

def _values_hash(values: Mapping[str, np.ndarray]) -> str:
    h = hashlib.sha256()
    for k in sorted(values):
        h.update(k.encode())
        h.update(np.ascontiguousarray(values[k], dtype=float).tobytes())
    return h.hexdigest()


def evaluation_sample(cfg: SimulationConfig, replicate: int) -> Population:
    """Fresh, fully labelled, never-trained-on sample for the true metrics."""
    spec = cfg.spec
    values = sample_values(spec, cfg.eval_size, stream(cfg.seed, replicate, 0, "eval"))
    tp = outcome_probability(spec, values)
    ids = np.arange(EVAL_ID_OFFSET, EVAL_ID_OFFSET + cfg.eval_size)
    return Population(spec.name, (cfg.seed, replicate), values, tp, ids, spec.outcome_node, spec.censor_node)


def initial_dataset(cfg: SimulationConfig, replicate: int) -> tuple[Dataset, dict[str, np.ndarray]]:
    """Pre-deployment labelled data after the configured induction.

    Returns the dataset and the raw node values of the sampled rows.
    """
    spec = cfg.spec
    values = sample_values(spec, cfg.n_init, stream(cfg.seed, replicate, 0, "init"))
    inductions = cfg.induction if cfg.policy.induces_censoring else ()
    for ind in inductions:
        if ind.kind == "feature_shift":
            p = ind.params
            values = apply_feature_shift(values, p["node"], float(p["mean"]), float(p["std"]),
                                         stream(cfg.seed, replicate, 0, "init_shift"),
                                         p.get("restrict_z"), spec.censor_node)
    feats = spec.model_features
    X = np.column_stack([values[k] for k in feats]) if feats else np.zeros((cfg.n_init, 0))
    labels = np.where(values[spec.outcome_node] == 1, 1, -1)
    ids = np.arange(cfg.n_init)
    data = Dataset(feats, X, labels, ids, np.zeros(cfg.n_init, np.int64), ("initial",) * cfg.n_init)
    z = values[spec.censor_node].astype(int)
    for ind in inductions:
        if ind.kind == "label_noise":
            table = ind.params["table"]
            if isinstance(table, str):
                table = FlipTable.parse(table, ind.params.get("cell_feature"))
            zmap = z[data.ids]
            data = apply_label_noise(data, table, stream(cfg.seed, replicate, 0, "init_noise"), zmap)
        elif ind.kind == "selection_bias":
            data = induce_selection_bias(data, z[data.ids])
    return data, values


def _first_model_changes(cfg: SimulationConfig, m: LinearModel) -> LinearModel:
    if not cfg.policy.induces_censoring:
        return m
    for ind in cfg.induction:
        if ind.kind == "operational_change":
            m = apply_operational_change(m, float(ind.params.get("delta_b", 0.0)), ind.params.get("rho"))
    return m


def _concat_values(a: Mapping[str, np.ndarray], b: Mapping[str, np.ndarray]) -> dict[str, np.ndarray]:
    return {k: np.concatenate([a[k], b[k]]) for k in a}


def _take(values: Mapping[str, np.ndarray], idx) -> dict[str, np.ndarray]:
    return {k: v[idx] for k, v in values.items()}


# ---------------------------------------------------------------------------
# the loop

def run_replicate(cfg: SimulationConfig, replicate: int) -> ReplicateResult:
    """Run T periods for one replicate; deterministic in (cfg, replicate)."""
    spec = cfg.spec
    aset = cfg.actions
    policy = cfg.policy
    feats = spec.model_features
    nodes = spec.node_names
    data, _ = initial_dataset(cfg, replicate)
    init = data
    ledger = GuaranteeLedger()

    empty = {k: np.zeros(0) for k in nodes}
    pool = empty
    pool_ids = np.zeros(0, np.int64)
    pool_prior = np.zeros(0, np.int64)
    pool_acted = np.zeros(0, bool)
    traces: list[PeriodTrace] = []
    final_data = data
    next_id = cfg.n_init

    for t in range(1, cfg.T + 1):
        try:
            m = fit_logreg(data, cfg.train, trained_at=t, threshold=cfg.rho)
        except Exception as exc:  # pragma: no cover - context for the caller
            raise RuntimeError(f"fit failed at period {t} (replicate {replicate}): {exc}") from exc
        if t == 1:
            m = _first_model_changes(cfg, m)
        if t == cfg.T:
            final_data = data

        new = sample_values(spec, cfg.n_new, stream(cfg.seed, replicate, t, "arrivals"))
        new_ids = np.arange(next_id, next_id + cfg.n_new)
        next_id += cfg.n_new
        vals = _concat_values(new, pool)
        ids = np.concatenate([new_ids, pool_ids])
        n_prior = np.concatenate([np.zeros(cfg.n_new, np.int64), pool_prior])
        had_action = np.concatenate([np.zeros(cfg.n_new, bool), pool_acted])
        returning = np.arange(ids.size) >= cfg.n_new
        X = np.column_stack([vals[k] for k in feats]) if ids.size else np.zeros((0, len(feats)))

        phat = predict_proba_matrix(m, X)
        approved = phat > m.threshold
        due = set(ledger.due(t))
        promised = np.array([int(i) in due for i in ids], dtype=bool)
        for i in ids[promised]:
            ledger.discharge(int(i), t)
        guaranteed = promised & ~approved
        denied = ~approved & ~guaranteed
        explored = np.zeros(ids.size, bool)
        if policy.exploration is not None and denied.any():
            picked = select_exploration(policy.exploration, ids[denied], phat[denied], policy.alpha,
                                        stream(cfg.seed, replicate, t, "explore"))
            explored = np.isin(ids, picked)
        collected = approved | guaranteed | explored
        outcome = vals[spec.outcome_node].astype(int)
        label = np.where(collected, np.where(outcome == 1, 1, -1), 0)

        n_cum = len(data)
        if collected.any():
            sources = np.where(guaranteed, "guaranteed", np.where(explored, "explored", "approved"))[collected]
            data = data.append(X[collected], label[collected], ids[collected], t, tuple(sources))

        # route the still-denied applicants into next period's pool
        still = np.flatnonzero(~collected)
        plan = route_denied(policy, X[still], m, aset, ledger, ids[still], t)
        nxt = _take(vals, still)
        tp_b = np.zeros(0)
        tp_a = np.zeros(0)
        act_ids = np.zeros(0, np.int64)
        act_deltas = np.zeros((0, len(feats)))
        act_cost = np.zeros(0)
        if policy.recourse and still.size:
            act_ids = ids[still]
            act, lo, hi, cost, _ = aset.arrays(feats)
            new_x = np.clip(X[still] + plan.steps * aset.step, lo, hi)
            new_x = np.where(plan.steps != 0, new_x, X[still])
            act_deltas = np.where(plan.feasible[:, None], new_x - X[still], 0.0)
            act_cost = np.where(plan.feasible, np.abs(act_deltas) @ cost, np.nan)
            tp_b = outcome_probability(spec, nxt)
            changed = {}
            for j, k in enumerate(feats):
                move = plan.feasible & (plan.steps[:, j] != 0)
                if move.any():
                    col = np.full(still.size, np.nan)
                    col[move] = new_x[move, j]
                    changed[k] = col
            if changed:
                nxt = resample_downstream_values(spec, nxt, changed, stream(cfg.seed, replicate, t, "resample"))
            tp_a = outcome_probability(spec, nxt)
        traces.append(PeriodTrace(
            period=t, model=m, n_new=cfg.n_new, n_ret=int(pool_ids.size), n_cum=n_cum, ids=ids,
            returning=returning, z=vals[spec.censor_node].astype(np.int64), features=X, phat=phat,
            model_approved=approved, guaranteed=guaranteed, explored=explored, label=label,
            n_prior=n_prior, outcome=outcome, had_action=had_action, act_ids=act_ids,
            act_feasible=plan.feasible if policy.recourse else np.zeros(0, bool),
            act_deltas=act_deltas, act_cost=act_cost, tp_before=tp_b, tp_after=tp_a,
            promises_issued=ledger.issued, promises_discharged=ledger.discharged,
            promises_outstanding=ledger.outstanding,
        ))
        pool = nxt
        pool_ids = ids[still]
        pool_prior = n_prior[still] + 1
        pool_acted = plan.feasible.copy() if policy.recourse else np.zeros(still.size, bool)

    for pt in traces:
        pt._feature_names = list(feats)
    return ReplicateResult(replicate, tuple(feats), traces, init, final_data, data,
                           evaluation_sample(cfg, replicate), int(pool_ids.size), cfg.n_init)


def _run_one(args):
    cfg, r = args
    try:
        return run_replicate(cfg, r)
    except Exception as exc:
        raise RuntimeError(f"replicate {r} (seed {cfg.seed}) failed: {exc}") from exc


def run_experiment(cfg: SimulationConfig, jobs: int = 1) -> RunResult:
    """All replicates of one configuration (optionally in worker processes)."""
    tasks = [(cfg, r) for r in range(cfg.replicates)]
    if jobs > 1 and len(tasks) > 1:
        with ProcessPoolExecutor(max_workers=jobs) as ex:
            reps = list(ex.map(_run_one, tasks))
    else:
        reps = [_run_one(a) for a in tasks]
    return RunResult(cfg, reps)


# ---------------------------------------------------------------------------
# config (de)serialisation

def _induction_to_dict(ind: InductionSpec) -> dict:
    params = dict(ind.params)
    if isinstance(params.get("table"), FlipTable):
        tb = params["table"]
        params["table"] = [[list(k), v] for k, v in tb.entries.items()]
        params["cell_feature"] = tb.cell_feature
    return {"kind": ind.kind, "params": params, "applies_to": ind.applies_to}


def _induction_from_dict(d: Mapping[str, Any]) -> InductionSpec:
    params = dict(d.get("params", {}))
    if isinstance(params.get("table"), list):
        entries = {tuple(k): float(v) for k, v in params["table"]}
        params["table"] = FlipTable(entries, params.pop("cell_feature", None))
    return InductionSpec(d["kind"], params, d.get("applies_to", ""))


def config_to_dict(cfg: SimulationConfig) -> dict:
    spec = cfg.spec
    aset = cfg.actions
    return {
        "dgp_name": spec.name,
        "dgp": dag_to_dict(spec),
        "induction": [_induction_to_dict(i) for i in cfg.induction],
        "policy": {"kind": cfg.policy.kind, "alpha": cfg.policy.alpha},
        "T": cfg.T, "n_new": cfg.n_new, "n_init": cfg.n_init, "rho": cfg.rho,
        "train": {"l2_lambda": cfg.train.l2_lambda, "max_iter": cfg.train.max_iter, "tol": cfg.train.tol},
        "action_set": {"step": aset.step, "features": {
            k: {"actionable": fa.actionable, "direction": fa.direction, "lo": fa.lo, "hi": fa.hi,
                "cost_weight": fa.cost_weight} for k, fa in aset.features.items()}},
        "replicates": cfg.replicates, "seed": cfg.seed, "eval_size": cfg.eval_size,
    }


def config_from_dict(d: Mapping[str, Any]) -> SimulationConfig:
    spec = dag_from_dict(d["dgp_name"], d["dgp"])
    a = d["action_set"]
    aset = ActionSet({k: FeatureAction(**v) for k, v in a["features"].items()}, a["step"])
    return SimulationConfig(
        dgp=spec, induction=tuple(_induction_from_dict(i) for i in d["induction"]),
        policy=PolicySpec(d["policy"]["kind"], d["policy"]["alpha"]), T=d["T"], n_new=d["n_new"],
        n_init=d["n_init"], rho=d["rho"], train=TrainConfig(**d["train"]), action_set=aset,
        replicates=d["replicates"], seed=d["seed"], eval_size=d["eval_size"],
    )
